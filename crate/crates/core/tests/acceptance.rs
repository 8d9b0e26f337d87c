//! Acceptance suite. Each test prints one PASS/FAIL line to stdout (written
//! directly so it shows up even under output capture) and then asserts.
//! Tests hold a shared lock so the timed ones never compete for the CPU.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng as _;
use tabsynth::cond::{mgf_cantor, sample_cantor, CondSampler};
use tabsynth::evalmetrics::{dcr, ims, marginal_distance, ml_efficacy_classify, nndr, EfficacyConfig, MarginalKind, NndrDirection};
use tabsynth::monitor::{detect_onset, onset_report, stability_metric, svd_spectrum, MonitorConfig, AGGREGATE};
use tabsynth::nets::{Critics, DiscriminatorConfig, Generator, GeneratorConfig, Mode};
use tabsynth::schema::{ColumnKind, ColumnSchema, Field, Table};
use tabsynth::seed;
use tabsynth::tensor::gradcheck::{check_inputs, check_model, GradCheckOptions, GradCheckReport};
use tabsynth::tensor::{HasParams, Noise, Param, Tape, Tensor, Var};
use tabsynth::train::{apply_regularizer, compute_vartheta, gershgorin_interval, median, sample, LayerState, TrainConfig, TrainReport, Trainer};
use tabsynth::transform::nvmm::{reparameterize_nvmm, satisfies_separation, DEFAULT_MAX_RETRIES};
use tabsynth::transform::vgm::{fit_vgm, fit_vgm_traced, standard_normal, VgmOptions};
use tabsynth::transform::{TableEncoder, TransformConfig};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{verdict} criterion {id}: {detail}").unwrap();
    out.flush().unwrap();
}

fn normals(n: usize, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s);
    (0..n).map(|_| standard_normal(&mut rng)).collect()
}

#[test]
fn criterion_01_mixture_em() {
    let _g = serial();
    let mut rng = seed::rng(101);
    let values: Vec<f64> = (0..10_000)
        .map(|i| if i % 2 == 0 { 0.0 } else { 10.0 } + 0.1 * standard_normal(&mut rng))
        .collect();
    let start = Instant::now();
    let fit = fit_vgm_traced(&values, VgmOptions { m_c: 2, max_iter: 200, tol: 1e-9 }, 7).unwrap();
    let elapsed = start.elapsed();
    let mut means: Vec<f64> = fit.model.active_indices().iter().map(|&k| fit.model.modes[k].mean).collect();
    means.sort_by(f64::total_cmp);
    let means_ok = means.len() == 2 && (means[0] - 0.0).abs() < 0.1 && (means[1] - 10.0).abs() < 0.1;
    let monotone = fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    let fast = elapsed < Duration::from_secs(5);
    let ok = means_ok && monotone && fast;
    report(
        1,
        ok,
        &format!(
            "means {means:?}, {} EM iterations, log-likelihood monotone: {monotone}, {:.3}s",
            fit.log_likelihood.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_02_separation_constraint() {
    let _g = serial();
    let eps = 0.005;
    let mut violations = 0;
    let mut checked = 0;
    for s in 0..100u64 {
        // Three modes whose spread changes with the seed.
        let mut rng = seed::rng(seed::derive_indexed(202, "data", s));
        let centres = [-3.0, 0.5 * s as f64 / 10.0, 4.0 + (s % 7) as f64];
        let values: Vec<f64> = (0..600)
            .map(|i| centres[i % 3] + 0.4 * standard_normal(&mut rng))
            .collect();
        let vgm = fit_vgm(&values, 10, 100, 1e-6, s).unwrap();
        let p = reparameterize_nvmm(&vgm, eps, s, DEFAULT_MAX_RETRIES).unwrap();
        for k in vgm.active_indices() {
            checked += 1;
            if (p.alpha + p.beta * p.omega[k] - vgm.modes[k].mean).abs() < eps {
                violations += 1;
            }
        }
        if !satisfies_separation(p.alpha, p.beta, &p.omega, &vgm, eps) {
            violations += 1;
        }
    }
    let ok = violations == 0;
    report(2, ok, &format!("100 fits, {checked} active modes checked, {violations} violations"));
    assert!(ok);
}

#[test]
fn criterion_03_round_trip() {
    let _g = serial();
    let mut rng = seed::rng(303);
    let schema = vec![
        ColumnSchema::continuous("a"),
        ColumnSchema::continuous("b"),
        ColumnSchema::categorical("c", ["p", "q", "r", "s"]),
        ColumnSchema {
            kind: ColumnKind::Binary,
            ..ColumnSchema::categorical("d", ["no", "yes"])
        },
    ];
    let train: Vec<Vec<Field>> = (0..2000)
        .map(|i| {
            vec![
                Field::Real(if i % 3 == 0 { -5.0 } else { 20.0 } + 2.0 * standard_normal(&mut rng)),
                Field::Real(100.0 * rng.random::<f64>()),
                Field::Category(rng.random_range(0..4)),
                Field::Category(rng.random_range(0..2)),
            ]
        })
        .collect();
    let train = Table::new(schema.clone(), train).unwrap();
    let enc = TableEncoder::fit(&train, &TransformConfig::default(), 9).unwrap();
    let range = |j: usize| {
        let v = train.real_values(j);
        (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    let (ra, rb) = (range(0), range(1));
    let fresh: Vec<Vec<Field>> = (0..1000)
        .map(|_| {
            vec![
                Field::Real(rng.random_range(ra.0..=ra.1)),
                Field::Real(rng.random_range(rb.0..=rb.1)),
                Field::Category(rng.random_range(0..4)),
                Field::Category(rng.random_range(0..2)),
            ]
        })
        .collect();
    let fresh = Table::new(schema, fresh).unwrap();
    let back = enc.decode_table(&enc.encode_table(&fresh).unwrap()).unwrap();
    let mut worst = 0.0f64;
    let mut cat_mismatch = 0;
    for (a, b) in fresh.rows().iter().zip(back.rows()) {
        for (x, y) in a.iter().zip(b) {
            match (x, y) {
                (Field::Real(x), Field::Real(y)) => worst = worst.max((x - y).abs()),
                _ => cat_mismatch += usize::from(x != y),
            }
        }
    }
    let ok = worst < 1e-6 && cat_mismatch == 0;
    report(3, ok, &format!("1000 rows, max continuous error {worst:e}, categorical mismatches {cat_mismatch}"));
    assert!(ok);
}

#[test]
fn criterion_04_cantor_sampler() {
    let _g = serial();
    let n = 1_000_000;
    let xs = sample_cantor(n, 32, 404).unwrap();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let gap = xs.iter().filter(|&&x| x > 0.34 && x < 0.66).count();
    let mgf = xs.iter().map(|x| x.exp()).sum::<f64>() / n as f64;
    let oracle = mgf_cantor(1.0, 32).unwrap();
    let rel = (mgf - oracle).abs() / oracle;
    let ok = (mean - 0.5).abs() <= 0.01 && (var - 0.125).abs() <= 0.005 && gap == 0 && rel < 0.005;
    report(
        4,
        ok,
        &format!("mean {mean:.5}, variance {var:.5}, {gap} in gap, MGF(1) {mgf:.6} vs {oracle:.6} (rel {rel:.2e})"),
    );
    assert!(ok);
}

fn rand_tensor(shape: &[usize], s: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normals(n, s)).unwrap()
}

fn probe(tape: &mut Tape, y: Var, s: u64) -> tabsynth::Result<Var> {
    let w = tape.constant(rand_tensor(tape.shape(y), s));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
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
fn criterion_05_gradient_check() {
    let _g = serial();
    type Case = (&'static str, Vec<Tensor>, Box<dyn FnMut(&mut Tape, &[Var]) -> tabsynth::Result<Var>>);
    let away_from_kink = Tensor::vector(vec![-1.3, -0.4, 0.35, 0.9, 2.1, -2.5]);
    let bn_stats = (vec![0.1, -0.2, 0.3], vec![1.5, 0.5, 2.0]);
    let cases: Vec<Case> = vec![
        ("matmul", vec![rand_tensor(&[3, 4], 1), rand_tensor(&[4, 2], 2)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 3)
        })),
        ("bmm", vec![rand_tensor(&[2, 3, 4], 4), rand_tensor(&[2, 4, 5], 5)], Box::new(|t, v| {
            let y = t.bmm(v[0], v[1])?;
            probe(t, y, 6)
        })),
        ("transpose", vec![rand_tensor(&[2, 3, 4], 7)], Box::new(|t, v| {
            let y = t.transpose_last2(v[0])?;
            probe(t, y, 8)
        })),
        ("add/sub/mul", vec![rand_tensor(&[3, 4], 9), rand_tensor(&[3, 4], 10)], Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[1])?;
            let s = t.sub(m, v[0])?;
            probe(t, s, 11)
        })),
        ("axis broadcast", vec![rand_tensor(&[2, 3, 4], 12), rand_tensor(&[3], 13)], Box::new(|t, v| {
            let b = t.add_axis(v[0], v[1], 1)?;
            let c = t.mul_axis(b, v[1], 1)?;
            probe(t, c, 14)
        })),
        ("scale/add_scalar", vec![rand_tensor(&[5], 15)], Box::new(|t, v| {
            let a = t.scale(v[0], 0.7);
            let b = t.add_scalar(a, 1.5);
            let c = t.mul(b, b)?;
            probe(t, c, 16)
        })),
        ("sum/mean", vec![rand_tensor(&[4, 3], 17)], Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            let m = t.mean(sq)?;
            let s = t.sum(v[0]);
            t.add(m, s)
        })),
        ("concat/slice/reshape", vec![rand_tensor(&[2, 3, 4], 18), rand_tensor(&[2, 2, 4], 19)], Box::new(|t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let s = t.slice(c, 1, 1, 3)?;
            let r = t.reshape(s, &[6, 4])?;
            probe(t, r, 20)
        })),
        ("relu", vec![away_from_kink.clone()], Box::new(|t, v| {
            let y = t.relu(v[0]);
            probe(t, y, 21)
        })),
        ("leaky_relu", vec![away_from_kink.clone()], Box::new(|t, v| {
            let y = t.leaky_relu(v[0], 0.2);
            probe(t, y, 22)
        })),
        ("tanh", vec![rand_tensor(&[6], 23)], Box::new(|t, v| {
            let y = t.tanh(v[0]);
            probe(t, y, 24)
        })),
        ("softplus", vec![rand_tensor(&[6], 25)], Box::new(|t, v| {
            let y = t.softplus(v[0]);
            probe(t, y, 26)
        })),
        ("softmax", vec![rand_tensor(&[3, 5], 27)], Box::new(|t, v| {
            let y = t.softmax(v[0])?;
            probe(t, y, 28)
        })),
        ("conv1d", vec![rand_tensor(&[2, 3, 6], 29), rand_tensor(&[4, 3, 3], 30), rand_tensor(&[4], 31)], Box::new(|t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]))?;
            probe(t, y, 32)
        })),
        ("upsample/downsample", vec![rand_tensor(&[2, 3, 6], 33)], Box::new(|t, v| {
            let u = t.upsample(v[0])?;
            let p = probe(t, u, 34)?;
            let d = t.downsample(v[0])?;
            let q = probe(t, d, 35)?;
            t.add(p, q)
        })),
        ("batch_norm train", vec![rand_tensor(&[4, 3, 5], 36), rand_tensor(&[3], 37), rand_tensor(&[3], 38)], Box::new(|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-2, None)?;
            probe(t, y, 39)
        })),
        ("batch_norm eval", vec![rand_tensor(&[4, 3], 40), rand_tensor(&[3], 41), rand_tensor(&[3], 42)], Box::new(move |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-2, Some((&bn_stats.0, &bn_stats.1)))?;
            probe(t, y, 43)
        })),
        ("gumbel_softmax", vec![rand_tensor(&[3, 4], 44)], Box::new(|t, v| {
            let y = t.gumbel_softmax(v[0], 0.5, &mut Noise::seeded(45))?;
            probe(t, y, 46)
        })),
        ("gaussian_sample", vec![rand_tensor(&[3], 47), Tensor::vector(vec![0.5, 1.2, 0.1])], Box::new(|t, v| {
            let y = t.gaussian_sample(v[0], v[1], &mut Noise::seeded(48))?;
            probe(t, y, 49)
        })),
    ];
    let opts = GradCheckOptions::default();
    let mut worst: (f64, &str) = (0.0, "");
    let mut failed = Vec::new();
    for (name, inputs, f) in cases {
        let r: GradCheckReport = check_inputs(inputs, opts, f).unwrap();
        if r.checked == 0 || r.max_rel_error >= 1e-4 {
            failed.push(name);
        }
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, name);
        }
    }

    // Composed generator and critic on an encoded width of 12.
    let table = smoke_table(60, 505);
    let enc = TableEncoder::fit(&table, &TransformConfig { m_c: 2, ..TransformConfig::default() }, 1).unwrap();
    assert!(enc.width() <= 12, "instance width {}", enc.width());
    let k = CondSampler::for_schema(table.schema(), 32, 0).unwrap().width();
    let gcfg = GeneratorConfig { d_z: 6, bin_len: 4, channels: 4, hidden: 5, filters: 4, ..GeneratorConfig::default() };
    let dcfg = DiscriminatorConfig { filters: [4, 4, 6], ..DiscriminatorConfig::default() };
    let mut pair = Pair {
        g: Generator::new(gcfg, &enc.layout, k, 12).unwrap(),
        d: Critics::new(dcfg, enc.width(), k, 13).unwrap(),
    };
    let z = rand_tensor(&[4, 6], 14);
    let c = Tensor::new(vec![4, k], sample_cantor(4 * k, 32, 15).unwrap()).unwrap();
    let composed = check_model(&mut pair, GradCheckOptions { max_coords_per_param: Some(6), ..opts }, |p, tape| {
        let out = p.g.forward(tape, &z, &c, &mut Noise::seeded(16), Mode::Train)?;
        let cv = tape.constant(c.clone());
        let s = p.d.forward(tape, out.row, cv, Mode::Train)?;
        tape.mean(s)
    })
    .unwrap();
    let composed_ok = composed.checked > 0 && composed.max_rel_error < 1e-4;
    let ok = failed.is_empty() && composed_ok;
    report(
        5,
        ok,
        &format!(
            "primitives worst {:.2e} ({}), failures {failed:?}; width-{} generator+critic {:.2e} over {} coordinates",
            worst.0,
            worst.1,
            enc.width(),
            composed.max_rel_error,
            composed.checked
        ),
    );
    assert!(ok);
}

/// Two Gaussian clusters in (x, y), a binary label tied to the cluster and a
/// three-way column whose frequencies depend on the cluster.
fn smoke_table(n: usize, s: u64) -> Table {
    let mut rng = seed::rng(s);
    let schema = vec![
        ColumnSchema::continuous("x"),
        ColumnSchema::continuous("y"),
        ColumnSchema {
            kind: ColumnKind::Binary,
            ..ColumnSchema::categorical("label", ["0", "1"])
        },
        ColumnSchema::categorical("kind", ["a", "b", "c"]),
    ];
    let rows = (0..n)
        .map(|_| {
            let c = usize::from(rng.random::<f64>() < 0.5);
            let m = 4.0 * c as f64;
            let u: f64 = rng.random();
            let kind = match c {
                0 if u < 0.6 => 0,
                0 if u < 0.9 => 1,
                0 => 2,
                _ if u < 0.2 => 0,
                _ if u < 0.5 => 1,
                _ => 2,
            };
            vec![
                Field::Real(m + standard_normal(&mut rng)),
                Field::Real(m + standard_normal(&mut rng)),
                Field::Category(c),
                Field::Category(kind),
            ]
        })
        .collect();
    Table::new(schema, rows).unwrap()
}

fn toy_trainer(table: &Table, cfg: TrainConfig) -> (Trainer, TableEncoder) {
    let enc = TableEncoder::fit(table, &TransformConfig::default(), seed::derive(cfg.seed, "transform")).unwrap();
    let rows = enc.encode_table(table).unwrap().rows;
    let k = CondSampler::for_schema(table.schema(), cfg.cond_depth, 0).unwrap().width();
    let g = Generator::new(GeneratorConfig::default(), &enc.layout, k, seed::derive(cfg.seed, "generator")).unwrap();
    let d = Critics::new(DiscriminatorConfig::default(), enc.width(), k, seed::derive(cfg.seed, "critics")).unwrap();
    let t = Trainer::new(&rows, &enc.layout.columns, table.schema(), g, d, cfg).unwrap();
    (t, enc)
}

#[test]
fn criterion_06_regularizer_interval() {
    let _g = serial();
    let table = smoke_table(400, 606);
    let cfg = TrainConfig {
        iterations: 200,
        batch_size: 32,
        check_interval: true,
        seed: 6,
        ..TrainConfig::default()
    };
    let (mut t, _) = toy_trainer(&table, cfg);
    t.run().unwrap();
    let layers = t.generator.weight_params().len();
    let r = t.report();
    let mut outside = 0;
    let mut theta_bad = 0;
    for p in &r.projections {
        let o = p.outcome;
        let tol = 1e-9 * o.hi.abs().max(1.0);
        if o.trace_after < o.lo - tol || o.trace_after > o.hi + tol {
            outside += 1;
        }
        if o.vartheta.abs() > 1.0 + median(&p.lambda).unwrap() + 1e-12 {
            theta_bad += 1;
        }
    }
    // Re-check every layer against its live interval after the last step.
    for p in t.generator.weight_params() {
        let (rows, cols) = p.value.as_matrix().unwrap();
        let iv = gershgorin_interval(rows, cols, p.value.data()).unwrap();
        if compute_vartheta(&iv.lambda).unwrap().abs() > 1.0 + median(&iv.lambda).unwrap() + 1e-12 {
            theta_bad += 1;
        }
    }
    // Idempotence: project a pushed-out copy of each layer, then project the
    // result again against the same reference state.
    let mut idem_fail = 0;
    let states = t.regularizer_state().clone();
    for p in t.generator.weight_params() {
        let (rows, cols) = p.value.as_matrix().unwrap();
        for push in [1.0, 3.0, 0.05] {
            let mut once: Vec<f64> = p.value.data().iter().map(|v| v * push).collect();
            let mut st: LayerState = states[&p.name].clone();
            apply_regularizer(rows, cols, &mut once, &mut st).unwrap();
            let mut twice = once.clone();
            let mut st: LayerState = states[&p.name].clone();
            apply_regularizer(rows, cols, &mut twice, &mut st).unwrap();
            if twice != once {
                idem_fail += 1;
            }
        }
    }
    let expected = 200 * layers;
    let ok = r.projections.len() == expected && outside == 0 && theta_bad == 0 && idem_fail == 0;
    report(
        6,
        ok,
        &format!(
            "{} layer checks over 200 iterations ({layers} layers), {outside} outside interval, {theta_bad} vartheta violations, {idem_fail} non-idempotent",
            r.projections.len()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_stability_metric() {
    let _g = serial();
    let rho = stability_metric(&[1.0; 20], 0.1, 0.0).unwrap();
    let hand_ok = (rho - 2.5).abs() <= 1e-12;

    let mut worst = 0.0f64;
    for s in 0..20u64 {
        let (r, c) = (6, 4);
        let m = DMatrix::from_row_slice(r, c, &normals(r * c, 700 + s));
        let q1 = DMatrix::from_row_slice(r, r, &normals(r * r, 800 + s)).qr().q();
        let q2 = DMatrix::from_row_slice(c, c, &normals(c * c, 900 + s)).qr().q();
        let rotated = &q1 * &m * q2.transpose();
        let row_major = |a: &DMatrix<f64>| -> Vec<f64> { (0..r).flat_map(|i| (0..c).map(move |j| a[(i, j)])).collect() };
        let a = stability_metric(&svd_spectrum(r, c, &row_major(&m)).unwrap(), 0.1, 0.0).unwrap();
        let b = stability_metric(&svd_spectrum(r, c, &row_major(&rotated)).unwrap(), 0.1, 0.0).unwrap();
        worst = worst.max((a - b).abs());
    }
    let invariant_ok = worst <= 1e-9;

    let mut spiked = vec![1.0; 120];
    spiked[77] = 10.0;
    let flagged = detect_onset(&spiked, 10, 3.0).unwrap();
    let silent = detect_onset(&[1.0; 120], 10, 3.0).unwrap();
    let onset_ok = flagged == Some(77) && silent.is_none();
    let ok = hand_ok && invariant_ok && onset_ok;
    report(
        7,
        ok,
        &format!("hand case {rho}, conjugation drift {worst:.2e}, spike flagged at {flagged:?}, constant series {silent:?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_08_reliability_metrics() {
    let _g = serial();
    let table = smoke_table(200, 808);
    let other = smoke_table(200, 809);
    let ims_self = ims(&table, &table).unwrap();
    let ims_disjoint = ims(&table, &other).unwrap();

    let pts = |n: usize, s: u64| -> Vec<Vec<f64>> { normals(n * 3, s).chunks(3).map(<[f64]>::to_vec).collect() };
    let mut nndr_range = (f64::INFINITY, f64::NEG_INFINITY);
    for s in 0..1000u64 {
        let real = pts(3, 2 * s + 10_000);
        let synth = pts(2, 2 * s + 10_001);
        for dir in [NndrDirection::SynthToReal, NndrDirection::RealToSynth] {
            let v = nndr(&real, &synth, dir).unwrap();
            nndr_range = (nndr_range.0.min(v), nndr_range.1.max(v));
        }
    }
    let real = pts(50, 1);
    let nndr_dup = nndr(&real, &real, NndrDirection::SynthToReal).unwrap();
    let copy = dcr(&real, &real).unwrap();
    let mut dcr_range = (f64::INFINITY, f64::NEG_INFINITY);
    for s in 0..200u64 {
        let d = dcr(&pts(20, 3 * s + 20_000), &pts(10, 3 * s + 20_001)).unwrap();
        dcr_range = (dcr_range.0.min(d.score), dcr_range.1.max(d.score));
    }
    let ok = ims_self == 1.0
        && ims_disjoint == 0.0
        && nndr_range.0 >= 0.0
        && nndr_range.1 <= 1.0
        && nndr_dup == 0.0
        && copy.degenerate
        && dcr_range.0 >= 0.0
        && dcr_range.1 <= 1.0;
    report(
        8,
        ok,
        &format!(
            "IMS(T,T) {ims_self}, IMS disjoint {ims_disjoint}, NNDR range [{:.3}, {:.3}], NNDR duplicate {nndr_dup}, DCR range [{:.3}, {:.3}], copy flagged {}",
            nndr_range.0, nndr_range.1, dcr_range.0, dcr_range.1, copy.degenerate
        ),
    );
    assert!(ok);
}

struct SmokeRun {
    real: Table,
    synth: Table,
    report: TrainReport,
    elapsed: Duration,
}

/// Desk configuration for the smoke runs. The critic needs a Lipschitz
/// constraint to stay bounded over 2,000 iterations, so the gradient
/// penalty is switched on here; the library default leaves it off.
fn smoke_config(regularizer: bool) -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        batch_size: 64,
        regularizer_enabled: regularizer,
        gradient_penalty: Some(10.0),
        seed: 909,
        ..TrainConfig::default()
    }
}

fn smoke_run(regularizer: bool) -> SmokeRun {
    let real = smoke_table(2000, 9);
    let start = Instant::now();
    let cfg = smoke_config(regularizer);
    let (mut t, enc) = toy_trainer(&real, cfg);
    t.run().unwrap();
    let elapsed = start.elapsed();
    let (mut g, _, report) = t.finish();
    let synth = sample(&mut g, &enc, real.n_rows(), cfg.cond_depth, seed::derive(cfg.seed, "sample")).unwrap();
    SmokeRun { real, synth, report, elapsed }
}

fn regularized_run() -> &'static SmokeRun {
    static RUN: OnceLock<SmokeRun> = OnceLock::new();
    RUN.get_or_init(|| smoke_run(true))
}

#[test]
fn criterion_09_end_to_end_smoke() {
    let _g = serial();
    let run = regularized_run();
    let marginals = marginal_distance(&run.real, &run.synth).unwrap();
    let mut detail = Vec::new();
    let mut marginals_ok = true;
    for m in &marginals {
        let limit = match m.kind {
            MarginalKind::KolmogorovSmirnov => 0.25,
            MarginalKind::TotalVariation => 0.15,
        };
        marginals_ok &= m.value < limit;
        detail.push(format!("{} {:.3}", m.column, m.value));
    }
    let eff = ml_efficacy_classify(&run.real, &run.synth, "label", &EfficacyConfig { seed: 9, ..EfficacyConfig::default() }).unwrap();
    let gap = (eff.synth.test.mean - eff.real.test.mean).abs();
    let within_budget = run.elapsed < Duration::from_secs(15 * 60);
    let ok = marginals_ok && gap <= 0.15 && within_budget;
    report(
        9,
        ok,
        &format!(
            "marginals [{}], tree F1 synth {:.3} vs real {:.3} (gap {gap:.3}), training {:.0}s",
            detail.join(", "),
            eff.synth.test.mean,
            eff.real.test.mean,
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

fn aggregate_onset(report: &TrainReport, cfg: &MonitorConfig) -> Option<usize> {
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for row in &report.monitor {
        series.entry(row.layer.clone()).or_default().push((row.iteration, row.rho));
    }
    let onsets = onset_report(&series, cfg.window, cfg.spike_factor).unwrap();
    onsets.into_iter().find(|(name, _)| name == AGGREGATE).and_then(|(_, o)| o)
}

#[test]
fn criterion_10_stability_comparison() {
    let _g = serial();
    let cfg = smoke_config(true).monitor;
    let on = aggregate_onset(&regularized_run().report, &cfg);
    let off_run = smoke_run(false);
    let off = aggregate_onset(&off_run.report, &cfg);
    let ok = match (on, off) {
        (None, None) => true,
        (None, Some(_)) => true,
        (Some(_), None) => false,
        (Some(a), Some(b)) => a >= b,
    };
    let show = |o: Option<usize>| o.map_or("stable".to_string(), |i| format!("onset at {i}"));
    report(10, ok, &format!("regularized {}, unregularized {}", show(on), show(off)));
    assert!(ok);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tabsynth")).args(args).output().unwrap()
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap());
    }
    out
}

#[test]
fn criterion_11_reproducible_cli() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    smoke_table(200, 1111).write_csv(Path::new(&p("real.csv"))).unwrap();
    let mut failures = Vec::new();
    let mut check = |what: &str, out: std::process::Output| {
        if !out.status.success() {
            failures.push(format!("{what}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    };

    let fit = ["fit", "--input", &p("real.csv"), "--iterations", "20", "--batch-size", "16", "--seed", "5", "--monitor-every", "2"];
    check("fit", cli(&[&fit[..], &["--out", &p("model_a")]].concat()));
    // Rerun from the persisted config alone.
    let cfg_path = format!("{}/config.json", p("model_a"));
    check("fit rerun", cli(&["fit", "--input", &p("real.csv"), "--config", &cfg_path, "--out", &p("model_b")]));

    let sample_a = ["sample", "--model", &p("model_a"), "--n", "300", "--seed", "3", "--out", &p("synth_a.csv")];
    let sample_b = ["sample", "--model", &p("model_b"), "--n", "300", "--seed", "3", "--out", &p("synth_b.csv")];
    check("sample", cli(&sample_a));
    check("sample rerun", cli(&sample_b));

    let eval = |synth: &str, out: &str, cfg: Option<&str>| {
        let mut args = vec![
            "evaluate".to_string(),
            "--real".into(),
            p("real.csv"),
            "--synth".into(),
            p(synth),
            "--target".into(),
            "label".into(),
            "--out".into(),
            p(out),
        ];
        match cfg {
            Some(c) => args.extend(["--config".to_string(), c.to_string()]),
            None => args.extend(["--repeats", "3", "--seed", "4"].map(String::from)),
        }
        Command::new(env!("CARGO_BIN_EXE_tabsynth")).args(&args).output().unwrap()
    };
    check("evaluate", eval("synth_a.csv", "eval_a", None));
    let eval_cfg = format!("{}/config.json", p("eval_a"));
    check("evaluate rerun", eval("synth_b.csv", "eval_b", Some(&eval_cfg)));

    let monitor = |out: &str| cli(&["monitor-report", "--series", &format!("{}/monitor.csv", p(out)), "--window", "4"]);
    let (ma, mb) = (monitor("model_a"), monitor("model_b"));
    let monitor_same = ma.stdout == mb.stdout;
    check("monitor-report", ma);
    check("monitor-report rerun", mb);

    let mut differing = Vec::new();
    if failures.is_empty() {
        let pairs = [("model_a", "model_b"), ("eval_a", "eval_b")];
        for (a, b) in pairs {
            let (da, db) = (dir_bytes(&tmp.path().join(a)), dir_bytes(&tmp.path().join(b)));
            if da.keys().ne(db.keys()) {
                differing.push(format!("{a} vs {b}: file sets"));
            }
            for (k, v) in &da {
                if db.get(k) != Some(v) {
                    differing.push(format!("{a}/{k}"));
                }
            }
        }
        if std::fs::read(p("synth_a.csv")).unwrap() != std::fs::read(p("synth_b.csv")).unwrap() {
            differing.push("synth csv".into());
        }
        if !monitor_same {
            differing.push("monitor-report output".into());
        }
    }
    let ok = failures.is_empty() && differing.is_empty();
    report(11, ok, &format!("command failures {failures:?}, differing artifacts {differing:?}"));
    assert!(ok);
}
