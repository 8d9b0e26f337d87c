//! One-dimensional Gaussian mixtures fitted by EM with weight pruning.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Smallest standard deviation a mode may carry.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMode {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl GaussianMode {
    pub fn log_pdf(&self, x: f64) -> f64 {
        log_normal_pdf(x, self.mean, self.std)
    }
}

pub fn log_normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
}

/// Mixture with a mode budget `m_c`. Pruned modes stay in `modes` with
/// weight 0 and `active[k] == false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgmModel {
    pub modes: Vec<GaussianMode>,
    pub active: Vec<bool>,
    pub m_c: usize,
}

impl VgmModel {
    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.modes.len()).filter(|&k| self.active[k]).collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values.iter().map(|&x| self.log_density(x)).sum()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .modes
            .iter()
            .filter(|m| m.weight > 0.0)
            .map(|m| m.weight.ln() + m.log_pdf(x))
            .collect();
        log_sum_exp(&terms)
    }

    /// One draw from the mixture over active modes.
    pub fn sample(&self, rng: &mut seed::Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.active_indices()[0];
        for k in self.active_indices() {
            acc += self.modes[k].weight;
            chosen = k;
            if u < acc {
                break;
            }
        }
        let m = &self.modes[chosen];
        m.mean + m.std * standard_normal(rng)
    }
}

/// Box-Muller; kept local so mixture draws do not depend on a distribution
/// crate's sampling algorithm.
pub fn standard_normal(rng: &mut seed::Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VgmOptions {
    pub m_c: usize,
    pub max_iter: usize,
    /// Convergence threshold on the per-point mean log-likelihood.
    pub tol: f64,
}

impl Default for VgmOptions {
    fn default() -> Self {
        VgmOptions {
            m_c: 10,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

/// Result of an EM fit, with the per-iteration mean log-likelihood.
#[derive(Debug, Clone)]
pub struct VgmFit {
    pub model: VgmModel,
    pub log_likelihood: Vec<f64>,
}

pub fn fit_vgm(values: &[f64], m_c: usize, max_iter: usize, tol: f64, seed: u64) -> Result<VgmModel> {
    fit_vgm_traced(values, VgmOptions { m_c, max_iter, tol }, seed).map(|f| f.model)
}

/// k-means++ seeding followed by EM. Modes whose weight ends below
/// `1 / (10 m_c)` are deactivated and the remaining weights renormalized.
pub fn fit_vgm_traced(values: &[f64], opts: VgmOptions, seed: u64) -> Result<VgmFit> {
    if values.is_empty() {
        return Err(Error::Transform("cannot fit a mixture to an empty column".into()));
    }
    if opts.m_c == 0 {
        return Err(Error::Transform("mode budget m_c must be at least 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Transform("non-finite value in continuous column".into()));
    }
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() == 1 {
        let model = VgmModel {
            modes: vec![GaussianMode {
                weight: 1.0,
                mean: distinct[0],
                std: STD_FLOOR,
            }],
            active: vec![true],
            m_c: opts.m_c,
        };
        let ll = model.log_likelihood(values) / values.len() as f64;
        return Ok(VgmFit {
            model,
            log_likelihood: vec![ll],
        });
    }

    let k = opts.m_c.min(distinct.len());
    let mut rng = seed::rng(seed);
    let mut modes = kmeans_pp_init(values, k, &mut rng);
    let n = values.len();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut lp = vec![0.0; k];

    for _ in 0..opts.max_iter.max(1) {
        // E-step
        let mut ll = 0.0;
        for (i, &x) in values.iter().enumerate() {
            for (j, m) in modes.iter().enumerate() {
                lp[j] = if m.weight > 0.0 {
                    m.weight.ln() + m.log_pdf(x)
                } else {
                    f64::NEG_INFINITY
                };
            }
            let norm = log_sum_exp(&lp);
            ll += norm;
            for j in 0..k {
                resp[i * k + j] = (lp[j] - norm).exp();
            }
        }
        let mean_ll = ll / n as f64;
        let converged = trace.last().is_some_and(|&prev: &f64| (mean_ll - prev).abs() < opts.tol);
        trace.push(mean_ll);
        if converged {
            break;
        }
        // M-step; the std floor is a box constraint, so clamping keeps EM monotone.
        for (j, m) in modes.iter_mut().enumerate() {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            m.weight = nk / n as f64;
            if nk <= 1e-12 {
                m.weight = 0.0;
                continue;
            }
            let mean = (0..n).map(|i| resp[i * k + j] * values[i]).sum::<f64>() / nk;
            let var = (0..n).map(|i| resp[i * k + j] * (values[i] - mean).powi(2)).sum::<f64>() / nk;
            m.mean = mean;
            m.std = var.sqrt().max(STD_FLOOR);
        }
    }

    let threshold = 1.0 / (10.0 * opts.m_c as f64);
    let mut active: Vec<bool> = modes.iter().map(|m| m.weight >= threshold).collect();
    if !active.iter().any(|&a| a) {
        let best = (0..k).max_by(|&a, &b| modes[a].weight.total_cmp(&modes[b].weight)).unwrap();
        active[best] = true;
    }
    let total: f64 = modes.iter().zip(&active).filter(|(_, &a)| a).map(|(m, _)| m.weight).sum();
    for (m, &a) in modes.iter_mut().zip(&active) {
        m.weight = if a { m.weight / total } else { 0.0 };
    }
    // Order modes by mean so the encoded layout is stable and readable.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| modes[a].mean.total_cmp(&modes[b].mean));
    let model = VgmModel {
        modes: order.iter().map(|&i| modes[i]).collect(),
        active: order.iter().map(|&i| active[i]).collect(),
        m_c: opts.m_c,
    };
    Ok(VgmFit {
        model,
        log_likelihood: trace,
    })
}

fn kmeans_pp_init(values: &[f64], k: usize, rng: &mut seed::Rng) -> Vec<GaussianMode> {
    let n = values.len();
    let mut centers = vec![values[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = values.iter().map(|&x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            values[rng.random_range(0..n)]
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            values[pick]
        };
        centers.push(next);
        for (d, &x) in d2.iter_mut().zip(values) {
            *d = d.min((x - next).powi(2));
        }
    }

    let mut sums = vec![(0usize, 0.0f64, 0.0f64); k];
    for &x in values {
        let j = (0..k)
            .min_by(|&a, &b| (x - centers[a]).abs().total_cmp(&(x - centers[b]).abs()))
            .unwrap();
        sums[j].0 += 1;
        sums[j].1 += x;
        sums[j].2 += x * x;
    }
    let global_std = {
        let mean = values.iter().sum::<f64>() / n as f64;
        (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    sums.iter()
        .zip(&centers)
        .map(|(&(count, s, s2), &c)| {
            if count == 0 {
                GaussianMode {
                    weight: 1.0 / n as f64,
                    mean: c,
                    std: global_std.max(STD_FLOOR),
                }
            } else {
                let mean = s / count as f64;
                let var = (s2 / count as f64 - mean * mean).max(0.0);
                GaussianMode {
                    weight: count as f64 / n as f64,
                    mean,
                    std: var.sqrt().max(STD_FLOOR),
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clusters(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { 0.0 } else { 10.0 };
                c + 0.1 * standard_normal(&mut rng)
            })
            .collect()
    }

    #[test]
    fn recovers_two_separated_modes() {
        let v = two_clusters(4000, 1);
        let fit = fit_vgm_traced(&v, VgmOptions { m_c: 2, max_iter: 200, tol: 1e-9 }, 3).unwrap();
        let means: Vec<f64> = fit.model.modes.iter().map(|m| m.mean).collect();
        assert!((means[0] - 0.0).abs() < 0.1, "{means:?}");
        assert!((means[1] - 10.0).abs() < 0.1, "{means:?}");
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn constant_column_degenerates_to_one_mode() {
        let m = fit_vgm(&[3.5; 50], 10, 100, 1e-6, 0).unwrap();
        assert_eq!(m.active_count(), 1);
        assert_eq!(m.modes[0].mean, 3.5);
        assert_eq!(m.modes[0].std, STD_FLOOR);
    }

    #[test]
    fn mode_budget_and_weights() {
        let mut rng = seed::rng(9);
        let v: Vec<f64> = (0..2000).map(|_| standard_normal(&mut rng) * 3.0 + rng.random::<f64>() * 5.0).collect();
        let m = fit_vgm(&v, 10, 200, 1e-6, 4).unwrap();
        assert!(m.modes.len() <= 10);
        assert!(m.active_count() >= 1);
        let w: f64 = m.modes.iter().zip(&m.active).filter(|(_, &a)| a).map(|(m, _)| m.weight).sum();
        assert!((w - 1.0).abs() < 1e-9);
        for (md, &a) in m.modes.iter().zip(&m.active) {
            assert!(md.std > 0.0);
            if !a {
                assert_eq!(md.weight, 0.0);
            }
        }
    }

    #[test]
    fn fit_is_deterministic_and_rejects_empty() {
        let v = two_clusters(500, 2);
        assert_eq!(fit_vgm(&v, 5, 100, 1e-6, 8).unwrap(), fit_vgm(&v, 5, 100, 1e-6, 8).unwrap());
        assert!(fit_vgm(&[], 5, 100, 1e-6, 8).is_err());
        assert!(fit_vgm(&[1.0, f64::NAN], 5, 100, 1e-6, 8).is_err());
    }
}
