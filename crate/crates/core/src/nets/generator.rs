use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv, Linear, Mode};
use super::{bins_tensor, bin_count, BlockKind, GeneratorConfig};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{HasParams, Noise, Param, ParamAlloc, Tape, Tensor, Var};
use crate::transform::{Layout, Segment, SegmentKind};

pub const GENERATOR_NAMESPACE: u16 = 1;

/// Seven convolutions and three batch norms with two ×2 upsamples and one
/// ×0.5 downsample. A Gumbel-softmax branch over the sixth convolution is
/// concatenated with the seventh; the doubled length is then projected back
/// and merged with a shortcut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub convs: Vec<Conv>,
    pub norms: Vec<BatchNorm>,
    pub length_map: Linear,
    pub merge: Conv,
    pub shortcut: Option<Conv>,
    pub filters: usize,
    pub len: usize,
    pub tau: f64,
}

/// Intermediate values of one residual block pass.
#[derive(Debug, Clone, Copy)]
pub struct BlockParts {
    /// Seventh convolution concatenated with the Gumbel branch: [B, 2F, 2L].
    pub cat: Var,
    /// Gumbel branch alone: [B, F, 2L].
    pub gumbel: Var,
    pub out: Var,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(alloc: &mut ParamAlloc, name: &str, input: usize, cfg: &GeneratorConfig, len: usize, rng: &mut seed::Rng) -> Self {
        let f = cfg.filters;
        let k = cfg.kernel;
        let convs = (0..7)
            .map(|i| Conv::new(alloc, &format!("{name}.conv{}", i + 1), if i == 0 { input } else { f }, f, k, rng))
            .collect();
        let norms = (0..3)
            .map(|i| BatchNorm::new(alloc, &format!("{name}.bn{}", i + 1), f, cfg.bn_momentum, cfg.bn_eps))
            .collect();
        ResidualBlock {
            convs,
            norms,
            length_map: Linear::new(alloc, &format!("{name}.length_map"), 2 * len, len, rng),
            merge: Conv::new(alloc, &format!("{name}.merge"), 2 * f, f, 1, rng),
            shortcut: (input != f).then(|| Conv::new(alloc, &format!("{name}.shortcut"), input, f, 1, rng)),
            filters: f,
            len,
            tau: cfg.gumbel_tau,
        }
    }

    pub fn forward_parts(&mut self, tape: &mut Tape, x: Var, noise: &mut Noise, mode: Mode) -> Result<BlockParts> {
        let c = &self.convs;
        let h = c[0].forward(tape, x)?;
        let h = self.norms[0].forward(tape, h, mode)?;
        let h = tape.relu(h);
        let h = tape.upsample(h)?;
        let h = c[1].forward(tape, h)?;
        let h = tape.relu(h);
        let h = c[2].forward(tape, h)?;
        let h = self.norms[1].forward(tape, h, mode)?;
        let h = tape.relu(h);
        let h = tape.upsample(h)?;
        let h = c[3].forward(tape, h)?;
        let h = tape.relu(h);
        let h = c[4].forward(tape, h)?;
        let h = tape.relu(h);
        let h = tape.downsample(h)?;
        let logits = c[5].forward(tape, h)?;
        // Hidden-layer Gumbel noise is a training-time perturbation only.
        let gumbel = match mode {
            Mode::Train => tape.gumbel_softmax(logits, self.tau, noise)?,
            Mode::Eval => tape.gumbel_softmax(logits, self.tau, &mut Noise::Off)?,
        };
        let h = self.norms[2].forward(tape, logits, mode)?;
        let h = tape.relu(h);
        let h = c[6].forward(tape, h)?;
        let cat = tape.concat(&[h, gumbel], 1)?;

        let batch = tape.shape(x)[0];
        let (f, len) = (self.filters, self.len);
        let flat = tape.reshape(cat, &[batch * 2 * f, 2 * len])?;
        let mapped = self.length_map.forward(tape, flat)?;
        let mapped = tape.reshape(mapped, &[batch, 2 * f, len])?;
        let merged = self.merge.forward(tape, mapped)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, x)?,
            None => x,
        };
        let out = tape.add(merged, skip)?;
        Ok(BlockParts { cat, gumbel, out })
    }

    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.convs.iter().flat_map(Conv::params).collect();
        p.extend(self.norms.iter().flat_map(BatchNorm::params));
        p.extend(self.length_map.params());
        p.extend(self.merge.params());
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.convs.iter_mut().flat_map(Conv::params_mut).collect();
        p.extend(self.norms.iter_mut().flat_map(BatchNorm::params_mut));
        p.extend(self.length_map.params_mut());
        p.extend(self.merge.params_mut());
        if let Some(s) = &mut self.shortcut {
            p.extend(s.params_mut());
        }
        p
    }
}

/// Plain conv + batch norm + ReLU, the ablation counterpart of a residual block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Block {
    Residual(ResidualBlock),
    Convolutional(ConvBlock),
}

impl Block {
    fn new(alloc: &mut ParamAlloc, name: &str, input: usize, cfg: &GeneratorConfig, len: usize, rng: &mut seed::Rng) -> Self {
        match cfg.block_kind {
            BlockKind::Residual => Block::Residual(ResidualBlock::new(alloc, name, input, cfg, len, rng)),
            BlockKind::Convolutional => Block::Convolutional(ConvBlock {
                conv: Conv::new(alloc, &format!("{name}.conv"), input, cfg.filters, cfg.kernel, rng),
                norm: BatchNorm::new(alloc, &format!("{name}.bn"), cfg.filters, cfg.bn_momentum, cfg.bn_eps),
            }),
        }
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, noise: &mut Noise, mode: Mode) -> Result<Var> {
        match self {
            Block::Residual(b) => Ok(b.forward_parts(tape, x, noise, mode)?.out),
            Block::Convolutional(b) => {
                let h = b.conv.forward(tape, x)?;
                let h = b.norm.forward(tape, h, mode)?;
                Ok(tape.relu(h))
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Block::Residual(b) => b.params(),
            Block::Convolutional(b) => b.conv.params().into_iter().chain(b.norm.params()).collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Block::Residual(b) => b.params_mut(),
            Block::Convolutional(b) => b.conv.params_mut().into_iter().chain(b.norm.params_mut()).collect(),
        }
    }
}

/// Self-attention over sequence positions with a residual connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonLocal {
    pub theta: Conv,
    pub phi: Conv,
    pub g: Conv,
    pub out: Conv,
}

impl NonLocal {
    fn new(alloc: &mut ParamAlloc, channels: usize, rng: &mut seed::Rng) -> Self {
        let inner = (channels / 2).max(1);
        NonLocal {
            theta: Conv::new(alloc, "nonlocal.theta", channels, inner, 1, rng),
            phi: Conv::new(alloc, "nonlocal.phi", channels, inner, 1, rng),
            g: Conv::new(alloc, "nonlocal.g", channels, inner, 1, rng),
            out: Conv::new(alloc, "nonlocal.out", inner, channels, 1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let theta = self.theta.forward(tape, x)?;
        let phi = self.phi.forward(tape, x)?;
        let g = self.g.forward(tape, x)?;
        let theta_t = tape.transpose_last2(theta)?;
        let scores = tape.bmm(theta_t, phi)?;
        let attn = tape.softmax(scores)?;
        let attn_t = tape.transpose_last2(attn)?;
        let mixed = tape.bmm(g, attn_t)?;
        let y = self.out.forward(tape, mixed)?;
        tape.add(y, x)
    }

    fn params(&self) -> Vec<&Param> {
        [&self.theta, &self.phi, &self.g, &self.out].into_iter().flat_map(Conv::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        [&mut self.theta, &mut self.phi, &mut self.g, &mut self.out]
            .into_iter()
            .flat_map(Conv::params_mut)
            .collect()
    }
}

/// Output of one generator pass.
#[derive(Debug, Clone, Copy)]
pub struct GenOutput {
    pub mu: Var,
    pub sigma: Var,
    /// μ̄ + σ̄⊙ε before the per-segment activations.
    pub raw: Var,
    /// Activated row: Gumbel softmax on one-hot segments, tanh on scalars.
    pub row: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub segments: Vec<Segment>,
    pub out_width: usize,
    pub cond_width: usize,
    pub lin_hidden: Linear,
    pub lin_out: Linear,
    pub res1: Block,
    /// Absent when the middle block is ablated.
    pub res2: Option<Block>,
    pub res3: Block,
    pub nonlocal: NonLocal,
    pub mu_head: Linear,
    pub sigma_head: Linear,
}

impl Generator {
    pub fn new(config: GeneratorConfig, layout: &Layout, cond_width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if layout.width == 0 {
            return Err(Error::Nets("encoded row width is zero".into()));
        }
        let mut rng = seed::rng(seed);
        let mut alloc = ParamAlloc::new(GENERATOR_NAMESPACE);
        let len = layout.width;
        let half = config.channels / 2;
        let f = config.filters;
        let lin_hidden = Linear::new(&mut alloc, "linear.hidden", config.bin_len + cond_width, config.hidden, &mut rng);
        let lin_out = Linear::new(&mut alloc, "linear.out", config.hidden, len, &mut rng);
        let res1 = Block::new(&mut alloc, "res1", half, &config, len, &mut rng);
        let res2 = (!config.ablate_middle_residual).then(|| Block::new(&mut alloc, "res2", f + half, &config, len, &mut rng));
        let res3 = Block::new(&mut alloc, "res3", 2 * f, &config, len, &mut rng);
        let nonlocal = NonLocal::new(&mut alloc, f, &mut rng);
        let mu_head = Linear::new(&mut alloc, "head.mu", f * len, len, &mut rng);
        let mut sigma_head = Linear::new(&mut alloc, "head.sigma", f * len, len, &mut rng);
        let bias = config.sigma_init.exp_m1().ln();
        sigma_head.b.value.data_mut().fill(bias);
        Ok(Generator {
            config,
            segments: layout.segments.clone(),
            out_width: len,
            cond_width,
            lin_hidden,
            lin_out,
            res1,
            res2,
            res3,
            nonlocal,
            mu_head,
            sigma_head,
        })
    }

    /// The shared projection of the linear block: [B, ϖ, L] channels, where
    /// channel j is fed by bin j mod (bin count).
    pub fn linear_block(&self, tape: &mut Tape, z: &Tensor, cond: &Tensor) -> Result<Var> {
        let batch = z.shape()[0];
        let nb = bin_count(self.config.d_z, self.config.bin_len);
        let bins = tape.constant(bins_tensor(z, cond, self.config.bin_len)?);
        let h = self.lin_hidden.forward(tape, bins)?;
        let h = tape.relu(h);
        let h = self.lin_out.forward(tape, h)?;
        let per_bin = tape.reshape(h, &[batch, nb, self.out_width])?;
        if self.config.channels == nb {
            return Ok(per_bin);
        }
        let slots: Vec<Var> = (0..nb)
            .map(|j| tape.slice(per_bin, 1, j, 1))
            .collect::<Result<_>>()?;
        let channels: Vec<Var> = (0..self.config.channels).map(|j| slots[j % nb]).collect();
        tape.concat(&channels, 1)
    }

    /// μ̄ and σ̄ for a batch: z [B, d_z], cond [B, cond_width].
    pub fn gaussian_params(&mut self, tape: &mut Tape, z: &Tensor, cond: &Tensor, noise: &mut Noise, mode: Mode) -> Result<(Var, Var)> {
        self.check_inputs(z, cond)?;
        let batch = z.shape()[0];
        let half = self.config.channels / 2;
        let lin = self.linear_block(tape, z, cond)?;
        let to_res = tape.slice(lin, 1, 0, half)?;
        let skip_lr = if self.config.skip_lr {
            tape.slice(lin, 1, half, half)?
        } else {
            tape.constant(Tensor::zeros(&[batch, half, self.out_width]))
        };
        let r1 = self.res1.forward(tape, to_res, noise, mode)?;
        let r2 = match &mut self.res2 {
            Some(block) => {
                let x = tape.concat(&[r1, skip_lr], 1)?;
                block.forward(tape, x, noise, mode)?
            }
            None => r1,
        };
        let skip_rr = if self.config.skip_rr {
            r1
        } else {
            tape.constant(Tensor::zeros(&[batch, self.config.filters, self.out_width]))
        };
        let x3 = tape.concat(&[r2, skip_rr], 1)?;
        let r3 = self.res3.forward(tape, x3, noise, mode)?;
        let h = self.nonlocal.forward(tape, r3)?;
        let flat = tape.reshape(h, &[batch, self.config.filters * self.out_width])?;
        let mu = self.mu_head.forward(tape, flat)?;
        let s = self.sigma_head.forward(tape, flat)?;
        let sigma = tape.softplus(s);
        Ok((mu, sigma))
    }

    /// Gumbel softmax over each one-hot segment, tanh over each scalar.
    pub fn activate(&self, tape: &mut Tape, raw: Var, noise: &mut Noise) -> Result<Var> {
        let parts: Vec<Var> = self
            .segments
            .iter()
            .map(|s| {
                let x = tape.slice(raw, 1, s.offset, s.width)?;
                match s.kind {
                    SegmentKind::Scalar => Ok(tape.tanh(x)),
                    SegmentKind::ModeOneHot | SegmentKind::CategoryOneHot => {
                        tape.gumbel_softmax(x, self.config.gumbel_tau, noise)
                    }
                }
            })
            .collect::<Result<_>>()?;
        tape.concat(&parts, 1)
    }

    pub fn forward(&mut self, tape: &mut Tape, z: &Tensor, cond: &Tensor, noise: &mut Noise, mode: Mode) -> Result<GenOutput> {
        let (mu, sigma) = self.gaussian_params(tape, z, cond, noise, mode)?;
        let raw = tape.gaussian_sample(mu, sigma, noise)?;
        let row = self.activate(tape, raw, noise)?;
        Ok(GenOutput { mu, sigma, raw, row })
    }

    fn check_inputs(&self, z: &Tensor, cond: &Tensor) -> Result<()> {
        let ok = z.shape().len() == 2
            && z.shape()[1] == self.config.d_z
            && cond.shape().len() == 2
            && cond.shape()[0] == z.shape()[0]
            && cond.shape()[1] == self.cond_width;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "generator input",
                lhs: z.shape().to_vec(),
                rhs: cond.shape().to_vec(),
            })
        }
    }

    /// Every weight matrix (biases and norm parameters excluded).
    pub fn weight_params_mut(&mut self) -> Vec<&mut Param> {
        self.params_mut().into_iter().filter(|p| p.name.ends_with(".w")).collect()
    }

    pub fn weight_params(&self) -> Vec<&Param> {
        self.params().into_iter().filter(|p| p.name.ends_with(".w")).collect()
    }
}

impl HasParams for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.lin_hidden.params();
        p.extend(self.lin_out.params());
        p.extend(self.res1.params());
        if let Some(b) = &self.res2 {
            p.extend(b.params());
        }
        p.extend(self.res3.params());
        p.extend(self.nonlocal.params());
        p.extend(self.mu_head.params());
        p.extend(self.sigma_head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.lin_hidden.params_mut();
        p.extend(self.lin_out.params_mut());
        p.extend(self.res1.params_mut());
        if let Some(b) = &mut self.res2 {
            p.extend(b.params_mut());
        }
        p.extend(self.res3.params_mut());
        p.extend(self.nonlocal.params_mut());
        p.extend(self.mu_head.params_mut());
        p.extend(self.sigma_head.params_mut());
        p
    }
}
