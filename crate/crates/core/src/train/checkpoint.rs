use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cond::CondSampler;
use crate::error::{Error, Result};
use crate::nets::{Critics, Generator, Mode};
use crate::schema::Table;
use crate::seed;
use crate::tensor::{Noise, Tape, Tensor};
use crate::transform::vgm::standard_normal;
use crate::transform::TableEncoder;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const SAMPLE_BATCH: usize = 256;

/// Everything needed to sample without the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub encoder: TableEncoder,
    pub generator: Generator,
    pub critics: Critics,
    pub cond_depth: u32,
    pub iterations: usize,
}

impl Checkpoint {
    pub fn new(encoder: TableEncoder, generator: Generator, critics: Critics, cond_depth: u32, iterations: usize) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            encoder,
            generator,
            critics,
            cond_depth,
            iterations,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&s).map_err(|e| Error::Config(format!("corrupt checkpoint {}: {e}", path.display())))?;
        match v.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(n) if n == CHECKPOINT_FORMAT_VERSION as u64 => {}
            Some(n) => {
                return Err(Error::Config(format!(
                    "checkpoint format version {n} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Config(format!("corrupt checkpoint {}: no format version", path.display()))),
        }
        let ck: Checkpoint =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("corrupt checkpoint {}: {e}", path.display())))?;
        if ck.generator.out_width != ck.encoder.width() {
            return Err(Error::Config("checkpoint generator and encoder widths disagree".into()));
        }
        Ok(ck)
    }

    pub fn sample(&mut self, n: usize, seed: u64) -> Result<Table> {
        sample(&mut self.generator, &self.encoder, n, self.cond_depth, seed)
    }
}

/// Draws `n` rows in evaluation mode and decodes them. A fresh conditional
/// vector is drawn for every row.
pub fn sample(generator: &mut Generator, encoder: &TableEncoder, n: usize, cond_depth: u32, seed: u64) -> Result<Table> {
    let mut cond = CondSampler::for_schema(&encoder.schema, cond_depth, seed::derive(seed, "sample-cond"))?;
    if cond.width() != generator.cond_width {
        return Err(Error::Nets("conditional width does not match the generator".into()));
    }
    let mut z_rng = seed::rng(seed::derive(seed, "sample-z"));
    let mut noise = Noise::seeded(seed::derive(seed, "sample-noise"));
    let (d_z, k, w) = (generator.config.d_z, cond.width(), generator.out_width);
    let mut rows = Vec::with_capacity(n);
    let mut done = 0;
    while done < n {
        let b = SAMPLE_BATCH.min(n - done);
        let z: Vec<f64> = (0..b * d_z).map(|_| standard_normal(&mut z_rng)).collect();
        let mut c = vec![0.0; b * k];
        for r in c.chunks_mut(k.max(1)) {
            cond.fill(r);
        }
        let mut tape = Tape::new();
        let out = generator.forward(
            &mut tape,
            &Tensor::new(vec![b, d_z], z)?,
            &Tensor::new(vec![b, k], c)?,
            &mut noise,
            Mode::Eval,
        )?;
        let v = tape.value(out.row);
        if !v.is_finite() {
            return Err(Error::Nets("generator produced non-finite values".into()));
        }
        rows.extend(v.data().chunks(w).map(<[f64]>::to_vec));
        done += b;
    }
    encoder.decode_rows(&rows)
}
