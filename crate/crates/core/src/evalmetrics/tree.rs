//! CART classification tree with Gini impurity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 20,
            min_samples_split: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Most frequent class, ties to the lowest index.
fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

impl DecisionTree {
    /// `x` is row-major, `y` holds class indices below `n_classes`.
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &TreeConfig) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Eval("tree needs equally many non-empty rows and labels".into()));
        }
        if y.iter().any(|&c| c >= n_classes) {
            return Err(Error::Eval("label outside the class range".into()));
        }
        let mut tree = DecisionTree { nodes: Vec::new() };
        let idx: Vec<usize> = (0..x.len()).collect();
        tree.grow(x, y, n_classes, cfg, idx, 0);
        Ok(tree)
    }

    fn grow(&mut self, x: &[Vec<f64>], y: &[usize], k: usize, cfg: &TreeConfig, idx: Vec<usize>, depth: usize) -> usize {
        let mut counts = vec![0; k];
        for &i in &idx {
            counts[y[i]] += 1;
        }
        let here = self.nodes.len();
        self.nodes.push(Node::Leaf(majority(&counts)));
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= cfg.max_depth || idx.len() < cfg.min_samples_split.max(2) {
            return here;
        }
        let Some((feature, threshold)) = best_split(x, y, k, &idx, &counts) else {
            return here;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x[i][feature] <= threshold);
        let left = self.grow(x, y, k, cfg, l, depth + 1);
        let right = self.grow(x, y, k, cfg, r, depth + 1);
        self.nodes[here] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        here
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let mut n = 0;
        loop {
            match self.nodes[n] {
                Node::Leaf(c) => return c,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => n = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, n: usize) -> usize {
            match t.nodes[n] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }
}

/// Lowest weighted child Gini over all features and midpoints between
/// consecutive distinct values; the first minimum wins.
fn best_split(x: &[Vec<f64>], y: &[usize], k: usize, idx: &[usize], total: &[usize]) -> Option<(usize, f64)> {
    let n = idx.len();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.to_vec();
    for f in 0..x[idx[0]].len() {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let mut left = vec![0; k];
        for p in 0..n - 1 {
            left[y[order[p]]] += 1;
            let (v, next) = (x[order[p]][f], x[order[p + 1]][f]);
            if v == next {
                continue;
            }
            let nl = p + 1;
            let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let score = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
            if best.is_none_or(|(s, _, _)| score < s) {
                best = Some((score, f, 0.5 * (v + next)));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_a_threshold() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 12)).collect();
        let t = DecisionTree::fit(&x, &y, 2, &TreeConfig::default()).unwrap();
        assert_eq!(t.depth(), 1);
        for (r, l) in x.iter().zip(&y) {
            assert_eq!(t.predict(r), *l);
        }
        assert_eq!(t.predict(&[11.6]), 1);
        assert_eq!(t.predict(&[11.5]), 0);
    }

    #[test]
    fn learns_xor_with_depth_two() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let y = vec![0, 1, 1, 0];
        let t = DecisionTree::fit(&x, &y, 2, &TreeConfig::default()).unwrap();
        for (r, l) in x.iter().zip(&y) {
            assert_eq!(t.predict(r), *l);
        }
    }

    #[test]
    fn depth_zero_is_a_majority_vote() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let t = DecisionTree::fit(&x, &[1, 1, 0, 1, 0], 2, &TreeConfig { max_depth: 0, ..TreeConfig::default() }).unwrap();
        assert_eq!(t.depth(), 0);
        assert!(x.iter().all(|r| t.predict(r) == 1));
    }

    #[test]
    fn depth_cap_is_respected() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let t = DecisionTree::fit(&x, &y, 2, &TreeConfig { max_depth: 3, ..TreeConfig::default() }).unwrap();
        assert!(t.depth() <= 3);
    }

    #[test]
    fn gini_split_matches_hand_computation() {
        // Labels 0,0,1,1 at 1,2,3,4 split cleanly between 2 and 3.
        let x = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let y = vec![0, 0, 1, 1];
        let idx = vec![0, 1, 2, 3];
        assert_eq!(best_split(&x, &y, 2, &idx, &[2, 2]), Some((0, 2.5)));
        assert!((gini(&[2, 2], 4) - 0.5).abs() < 1e-15);
    }
}
