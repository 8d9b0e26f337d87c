use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seed;
use crate::tensor::{Param, ParamAlloc, Tape, Tensor, Var};

/// Whether batch norm uses batch statistics (and updates its running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut seed::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Fully connected layer; x: [N, in] → [N, out].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(alloc: &mut ParamAlloc, name: &str, input: usize, output: usize, rng: &mut seed::Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            w: alloc.param(format!("{name}.w"), uniform(&[input, output], bound, rng)),
            b: alloc.param(format!("{name}.b"), uniform(&[output], bound, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let y = tape.matmul(x, w)?;
        tape.add_axis(y, b, 1)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Same-padded 1-D convolution; x: [B, in, L] → [B, out, L].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub w: Param,
    pub b: Param,
}

impl Conv {
    pub fn new(alloc: &mut ParamAlloc, name: &str, input: usize, output: usize, kernel: usize, rng: &mut seed::Rng) -> Self {
        let bound = 1.0 / ((input * kernel).max(1) as f64).sqrt();
        Conv {
            w: alloc.param(format!("{name}.w"), uniform(&[output, input, kernel], bound, rng)),
            b: alloc.param(format!("{name}.b"), uniform(&[output], bound, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.conv1d(x, w, Some(b))
    }

    /// The weight viewed as a [out, in·kernel] matrix.
    pub fn weight_matrix_shape(&self) -> (usize, usize) {
        let s = self.w.value.shape();
        (s[0], s[1] * s[2])
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(alloc: &mut ParamAlloc, name: &str, channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            gamma: alloc.param(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0)),
            beta: alloc.param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    /// In training mode the running statistics move toward the batch ones:
    /// running = (1 − momentum)·running + momentum·batch.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, g, b, self.eps, None)?;
                let stats = stats.expect("training mode yields batch statistics");
                let m = self.momentum;
                for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * s;
                }
                for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * s;
                }
                Ok(y)
            }
            Mode::Eval => Ok(tape
                .batch_norm(x, g, b, self.eps, Some((&self.running_mean, &self.running_var)))?
                .0),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_statistics_follow_the_momentum_rule() {
        let mut alloc = ParamAlloc::new(0);
        let mut bn = BatchNorm::new(&mut alloc, "bn", 1, 0.22, 1e-2);
        let batches = [vec![1.0, 3.0], vec![2.0, 6.0]];
        for b in &batches {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![2, 1], b.clone()).unwrap());
            bn.forward(&mut tape, x, Mode::Train).unwrap();
        }
        // Batch means 2 and 4, biased variances 1 and 4.
        let mean = 0.78 * (0.78 * 0.0 + 0.22 * 2.0) + 0.22 * 4.0;
        let var = 0.78 * (0.78 * 1.0 + 0.22 * 1.0) + 0.22 * 4.0;
        assert!((bn.running_mean[0] - mean).abs() < 1e-15);
        assert!((bn.running_var[0] - var).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_leaves_running_statistics_alone() {
        let mut alloc = ParamAlloc::new(0);
        let mut bn = BatchNorm::new(&mut alloc, "bn", 2, 0.22, 1e-2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[3, 2, 4], 2.0));
        bn.forward(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(bn.running_mean, vec![0.0, 0.0]);
        assert_eq!(bn.running_var, vec![1.0, 1.0]);
    }
}
