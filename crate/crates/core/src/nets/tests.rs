use super::*;
use crate::seed;
use crate::tensor::gradcheck::{check_model, GradCheckOptions};
use crate::tensor::{HasParams, Noise, Param, Tape, Tensor};
use crate::transform::{Layout, Segment, SegmentKind};

/// Width 7: a 2-mode continuous column then a 3-way category.
fn small_layout() -> Layout {
    Layout {
        columns: vec![],
        segments: vec![
            Segment { offset: 0, width: 2, kind: SegmentKind::ModeOneHot },
            Segment { offset: 2, width: 1, kind: SegmentKind::Scalar },
            Segment { offset: 3, width: 3, kind: SegmentKind::CategoryOneHot },
            Segment { offset: 6, width: 1, kind: SegmentKind::Scalar },
        ],
        width: 7,
    }
}

fn tiny_config() -> GeneratorConfig {
    GeneratorConfig { d_z: 6, bin_len: 4, channels: 4, hidden: 5, filters: 4, ..GeneratorConfig::default() }
}

fn noise_batch(rows: usize, cols: usize, s: u64) -> Tensor {
    let mut rng = seed::rng(s);
    let d = (0..rows * cols).map(|_| crate::transform::vgm::standard_normal(&mut rng)).collect();
    Tensor::new(vec![rows, cols], d).unwrap()
}

fn cond_batch(rows: usize, cols: usize, s: u64) -> Tensor {
    let d = crate::cond::sample_cantor(rows * cols, 32, s).unwrap();
    Tensor::new(vec![rows, cols], d).unwrap()
}

#[test]
fn split_concat_examples() {
    let bins = split_concat(&[1.0; 8], &[0.1, 0.2, 0.3], 4).unwrap();
    assert_eq!(bins.len(), 2);
    assert!(bins.iter().all(|b| b.len() == 7));
    let bins = split_concat(&[1.0, 2.0, 3.0, 4.0, 5.0], &[], 4).unwrap();
    assert_eq!(bins[1], vec![5.0, 0.0, 0.0, 0.0]);
    assert_eq!(bins[0].len(), 4);
    assert!(split_concat(&[], &[1.0], 4).is_err());
}

#[test]
fn config_validation() {
    assert!(GeneratorConfig { channels: 7, ..GeneratorConfig::default() }.validate().is_err());
    assert!(GeneratorConfig { d_z: 0, ..GeneratorConfig::default() }.validate().is_err());
    assert!(GeneratorConfig::default().validate().is_ok());
}

#[test]
fn linear_block_channels_and_shared_bias_pattern() {
    let cfg = GeneratorConfig { channels: 8, ..GeneratorConfig::default() };
    let g = Generator::new(cfg, &small_layout(), 3, 1).unwrap();
    let mut tape = Tape::new();
    let z = Tensor::zeros(&[2, cfg.d_z]);
    let c = Tensor::zeros(&[2, 3]);
    let lin = g.linear_block(&mut tape, &z, &c).unwrap();
    assert_eq!(tape.shape(lin), &[2, 8, 7]);
    let v = tape.value(lin).data();
    let first = &v[..7];
    for ch in v.chunks(7) {
        assert_eq!(ch, first);
    }
}

#[test]
fn shared_projection_size_is_independent_of_channel_count() {
    let count = |channels| {
        let g = Generator::new(GeneratorConfig { channels, ..GeneratorConfig::default() }, &small_layout(), 3, 1).unwrap();
        g.lin_hidden.params().iter().chain(g.lin_out.params().iter()).map(|p| p.value.len()).sum::<usize>()
    };
    assert_eq!(count(4), count(8));
}

fn tiny_block() -> ResidualBlock {
    let g = Generator::new(tiny_config(), &small_layout(), 0, 2).unwrap();
    match g.res3 {
        Block::Residual(b) => b,
        Block::Convolutional(_) => unreachable!(),
    }
}

#[test]
fn residual_block_shapes_and_gumbel_simplex() {
    let mut block = tiny_block();
    let mut tape = Tape::new();
    let x = tape.constant(noise_batch(3, 8 * 7, 3).reshaped(vec![3, 8, 7]).unwrap());
    let parts = block.forward_parts(&mut tape, x, &mut Noise::seeded(1), Mode::Train).unwrap();
    assert_eq!(tape.shape(parts.out), &[3, 4, 7]);
    assert_eq!(tape.shape(parts.cat), &[3, 8, 14]);
    for row in tape.value(parts.gumbel).data().chunks(14) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_weight_block_emits_bias_and_uniform_gumbel() {
    let mut block = tiny_block();
    for c in &mut block.convs {
        c.w.value.data_mut().fill(0.0);
    }
    let b7 = block.convs[6].b.value.data().to_vec();
    let mut tape = Tape::new();
    let x = tape.constant(noise_batch(2, 8 * 7, 4).reshaped(vec![2, 8, 7]).unwrap());
    let parts = block.forward_parts(&mut tape, x, &mut Noise::Off, Mode::Train).unwrap();
    let cat = tape.value(parts.cat).data();
    for b in 0..2 {
        for ch in 0..8 {
            for l in 0..14 {
                let v = cat[(b * 8 + ch) * 14 + l];
                let want = if ch < 4 { b7[ch] } else { 1.0 / 14.0 };
                assert!((v - want).abs() < 1e-12, "{b} {ch} {l}: {v} vs {want}");
            }
        }
    }
}

#[test]
fn generator_output_ranges() {
    let mut g = Generator::new(GeneratorConfig::default(), &small_layout(), 3, 5).unwrap();
    let mut tape = Tape::new();
    let z = noise_batch(16, 32, 6);
    let c = cond_batch(16, 3, 7);
    let out = g.forward(&mut tape, &z, &c, &mut Noise::seeded(8), Mode::Train).unwrap();
    assert!(tape.value(out.sigma).data().iter().all(|s| *s > 0.0));
    assert_eq!(tape.shape(out.row), &[16, 7]);
    for row in tape.value(out.row).data().chunks(7) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        assert!((row[3] + row[4] + row[5] - 1.0).abs() < 1e-12);
        assert!(row[2].abs() < 1.0 && row[6].abs() < 1.0);
    }
}

#[test]
fn generator_is_deterministic_given_seeds() {
    let run = || {
        let mut g = Generator::new(GeneratorConfig::default(), &small_layout(), 3, 5).unwrap();
        let mut tape = Tape::new();
        let out = g
            .forward(&mut tape, &noise_batch(4, 32, 1), &cond_batch(4, 3, 2), &mut Noise::seeded(3), Mode::Train)
            .unwrap();
        tape.value(out.row).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_spread_sampling_is_deterministic() {
    let mut g = Generator::new(GeneratorConfig::default(), &small_layout(), 3, 5).unwrap();
    let z = noise_batch(4, 32, 1);
    let c = cond_batch(4, 3, 2);
    let row = |g: &mut Generator, seed| {
        let mut tape = Tape::new();
        let mut noise = Noise::seeded(seed);
        let (mu, sigma) = g.gaussian_params(&mut tape, &z, &c, &mut noise, Mode::Eval).unwrap();
        let zero = tape.scale(sigma, 0.0);
        let raw = tape.gaussian_sample(mu, zero, &mut noise).unwrap();
        let out = g.activate(&mut tape, raw, &mut Noise::Off).unwrap();
        tape.value(out).clone()
    };
    let a = row(&mut g, 10);
    let b = row(&mut g, 11);
    assert_eq!(a, b);
}

#[test]
fn skip_ablation_keeps_width() {
    let z = noise_batch(4, 32, 1);
    let c = cond_batch(4, 3, 2);
    let row = |cfg: GeneratorConfig| {
        let mut g = Generator::new(cfg, &small_layout(), 3, 5).unwrap();
        let mut tape = Tape::new();
        let out = g.forward(&mut tape, &z, &c, &mut Noise::Off, Mode::Train).unwrap();
        tape.value(out.row).clone()
    };
    let full = row(GeneratorConfig::default());
    let no_skips = row(GeneratorConfig { skip_lr: false, skip_rr: false, ..GeneratorConfig::default() });
    let ablated = row(GeneratorConfig { ablate_middle_residual: true, ..GeneratorConfig::default() });
    let conv = row(GeneratorConfig { block_kind: BlockKind::Convolutional, ..GeneratorConfig::default() });
    for other in [&no_skips, &ablated, &conv] {
        assert_eq!(other.shape(), full.shape());
    }
    assert_ne!(full, no_skips);
}

fn tiny_critic_config(count: usize) -> DiscriminatorConfig {
    DiscriminatorConfig { filters: [4, 4, 6], count, ..DiscriminatorConfig::default() }
}

#[test]
fn critic_scores_are_finite_and_order_sensitive() {
    let mut d = Critics::new(DiscriminatorConfig::default(), 7, 3, 9).unwrap();
    let rows = noise_batch(4, 7, 10);
    let cond = cond_batch(4, 3, 11);
    let score = |d: &mut Critics, rows: &Tensor| {
        let mut tape = Tape::new();
        let r = tape.constant(rows.clone());
        let c = tape.constant(cond.clone());
        let s = d.forward(&mut tape, r, c, Mode::Eval).unwrap();
        tape.value(s).data().to_vec()
    };
    let base = score(&mut d, &rows);
    assert_eq!(base.len(), 4);
    assert!(base.iter().all(|s| s.is_finite()));
    let mut shuffled = rows.clone();
    for r in shuffled.data_mut().chunks_mut(7) {
        r.reverse();
    }
    assert_ne!(base, score(&mut d, &shuffled));
}

#[test]
fn multiple_critics_average() {
    let mut d = Critics::new(tiny_critic_config(3), 7, 3, 9).unwrap();
    let rows = noise_batch(4, 7, 10);
    let cond = cond_batch(4, 3, 11);
    let mut tape = Tape::new();
    let r = tape.constant(rows);
    let c = tape.constant(cond);
    let mean = d.forward(&mut tape, r, c, Mode::Eval).unwrap();
    let mean = tape.value(mean).data().to_vec();
    let mut each = vec![0.0; 4];
    for net in &mut d.nets {
        let s = net.forward(&mut tape, r, c, Mode::Eval).unwrap();
        for (e, v) in each.iter_mut().zip(tape.value(s).data()) {
            *e += v / 3.0;
        }
    }
    for (a, b) in mean.iter().zip(&each) {
        assert!((a - b).abs() < 1e-12);
    }
}

struct Pair {
    g: Generator,
    d: Critics,
}

impl HasParams for Pair {
    fn params(&self) -> Vec<&Param> {
        self.g.params().into_iter().chain(self.d.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.g.params_mut().into_iter().chain(self.d.params_mut()).collect()
    }
}

#[test]
fn composed_gradients_match_finite_differences() {
    let mut pair = Pair {
        g: Generator::new(tiny_config(), &small_layout(), 3, 12).unwrap(),
        d: Critics::new(tiny_critic_config(1), 7, 3, 13).unwrap(),
    };
    let z = noise_batch(4, 6, 14);
    let c = cond_batch(4, 3, 15);
    let opts = GradCheckOptions { max_coords_per_param: Some(3), ..GradCheckOptions::default() };
    let report = check_model(&mut pair, opts, |p, tape| {
        let out = p.g.forward(tape, &z, &c, &mut Noise::seeded(16), Mode::Train)?;
        let cv = tape.constant(c.clone());
        let s = p.d.forward(tape, out.row, cv, Mode::Train)?;
        tape.mean(s)
    })
    .unwrap();
    assert!(report.checked > 100, "{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
