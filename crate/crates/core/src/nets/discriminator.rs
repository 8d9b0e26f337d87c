use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv, Linear, Mode};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{HasParams, Param, ParamAlloc, Tape, Var};

/// Namespaces 16.. belong to critics, one per network.
pub const DISCRIMINATOR_NAMESPACE_BASE: u16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub filters: [usize; 3],
    pub kernel: usize,
    pub leaky_slope: f64,
    /// Hidden width of the two-layer critic head.
    pub head_hidden: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Number of critics; their scores are averaged.
    pub count: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            filters: [64, 64, 128],
            kernel: 3,
            leaky_slope: 0.2,
            head_hidden: 64,
            bn_momentum: 0.22,
            bn_eps: 1e-2,
            count: 1,
        }
    }
}

/// Three convolutions over the concatenated (row, cond) sequence, batch norm
/// and ReLU after the last, and a two-layer critic head. The hidden layer
/// lets the score depend on interactions between distant positions, which a
/// linear head over local conv features cannot express.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub row_width: usize,
    pub cond_width: usize,
    pub convs: Vec<Conv>,
    pub norm: BatchNorm,
    pub hidden: Linear,
    pub head: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, row_width: usize, cond_width: usize, index: u16, seed: u64) -> Result<Self> {
        if config.kernel.is_multiple_of(2) || config.filters.contains(&0) || config.head_hidden == 0 {
            return Err(Error::Nets("discriminator needs an odd kernel, non-zero filters and a non-zero head".into()));
        }
        let mut rng = seed::rng(seed);
        let mut alloc = ParamAlloc::new(DISCRIMINATOR_NAMESPACE_BASE + index);
        let [f1, f2, f3] = config.filters;
        let convs = vec![
            Conv::new(&mut alloc, "conv1", 1, f1, config.kernel, &mut rng),
            Conv::new(&mut alloc, "conv2", f1, f2, config.kernel, &mut rng),
            Conv::new(&mut alloc, "conv3", f2, f3, config.kernel, &mut rng),
        ];
        let len = row_width + cond_width;
        Ok(Discriminator {
            config,
            row_width,
            cond_width,
            convs,
            norm: BatchNorm::new(&mut alloc, "bn", f3, config.bn_momentum, config.bn_eps),
            hidden: Linear::new(&mut alloc, "hidden", f3 * len, config.head_hidden, &mut rng),
            head: Linear::new(&mut alloc, "head", config.head_hidden, 1, &mut rng),
        })
    }

    /// Critic scores [B] for rows [B, W] and cond [B, k].
    pub fn forward(&mut self, tape: &mut Tape, row: Var, cond: Var, mode: Mode) -> Result<Var> {
        let (rs, cs) = (tape.shape(row).to_vec(), tape.shape(cond).to_vec());
        if rs.len() != 2 || cs.len() != 2 || rs[1] != self.row_width || cs[1] != self.cond_width || rs[0] != cs[0] {
            return Err(Error::Shape {
                op: "discriminator input",
                lhs: rs,
                rhs: cs,
            });
        }
        let batch = rs[0];
        let len = self.row_width + self.cond_width;
        let x = tape.concat(&[row, cond], 1)?;
        let x = tape.reshape(x, &[batch, 1, len])?;
        let slope = self.config.leaky_slope;
        let h = self.convs[0].forward(tape, x)?;
        let h = tape.leaky_relu(h, slope);
        let h = self.convs[1].forward(tape, h)?;
        let h = tape.leaky_relu(h, slope);
        let h = self.convs[2].forward(tape, h)?;
        let h = self.norm.forward(tape, h, mode)?;
        let h = tape.relu(h);
        let flat = tape.reshape(h, &[batch, self.config.filters[2] * len])?;
        let h = self.hidden.forward(tape, flat)?;
        let h = tape.leaky_relu(h, slope);
        let s = self.head.forward(tape, h)?;
        tape.reshape(s, &[batch])
    }
}

impl HasParams for Discriminator {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.convs.iter().flat_map(Conv::params).collect();
        p.extend(self.norm.params());
        p.extend(self.hidden.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.convs.iter_mut().flat_map(Conv::params_mut).collect();
        p.extend(self.norm.params_mut());
        p.extend(self.hidden.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

/// One or more critics whose scores are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critics {
    pub nets: Vec<Discriminator>,
}

impl Critics {
    pub fn new(config: DiscriminatorConfig, row_width: usize, cond_width: usize, seed: u64) -> Result<Self> {
        if config.count == 0 {
            return Err(Error::Nets("at least one discriminator is required".into()));
        }
        let nets = (0..config.count)
            .map(|i| {
                Discriminator::new(
                    config,
                    row_width,
                    cond_width,
                    i as u16,
                    seed::derive_indexed(seed, "discriminator", i as u64),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Critics { nets })
    }

    pub fn namespaces(&self) -> Vec<u16> {
        (0..self.nets.len() as u16).map(|i| DISCRIMINATOR_NAMESPACE_BASE + i).collect()
    }

    /// Mean critic score per row.
    pub fn forward(&mut self, tape: &mut Tape, row: Var, cond: Var, mode: Mode) -> Result<Var> {
        let mut total: Option<Var> = None;
        for d in &mut self.nets {
            let s = d.forward(tape, row, cond, mode)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        let total = total.expect("at least one critic");
        Ok(tape.scale(total, 1.0 / self.nets.len() as f64))
    }
}

impl HasParams for Critics {
    fn params(&self) -> Vec<&Param> {
        self.nets.iter().flat_map(|d| d.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.nets.iter_mut().flat_map(|d| d.params_mut()).collect()
    }
}
