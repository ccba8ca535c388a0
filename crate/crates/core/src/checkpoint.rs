//! `HATC` checkpoints: config digest and text, epoch, focal accumulator and
//! the named parameter table (main network and suppression network).

use std::path::Path;

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::config::{text_digest, RunConfig};
use crate::error::{HatError, Result};
use crate::losses::GradientRatioAccumulator;
use crate::model::HatModel;
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"HATC";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub digest: String,
    pub epoch: u32,
    pub accumulator: GradientRatioAccumulator,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, epoch: u32, accumulator: &GradientRatioAccumulator, params: &ParamStore<f32>) -> Self {
        Checkpoint {
            config: config.clone(),
            digest: config.digest(),
            epoch,
            accumulator: accumulator.clone(),
            params: params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.string(&self.config.digest());
        w.string(&self.config.canonical_text());
        w.u32(self.epoch);
        w.u32(self.accumulator.classes() as u32);
        for &v in self.accumulator.g_pos.iter().chain(&self.accumulator.g_neg) {
            w.f64(v);
        }
        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.string(&p.name);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            w.f32s(p.value.data());
        }
        w.into_inner()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| HatError::io(path, e))
    }

    /// Reads a checkpoint. When `expected` is given and differs from the stored
    /// digest, the load fails unless `force` is set.
    pub fn load(path: &Path, expected: Option<&str>, force: bool) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = ByteReader::new(path, &data);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let digest = r.string("config digest")?;
        let text = r.string("config text")?;
        if text_digest(&text) != digest {
            return Err(r.error(format!(
                "stored digest {digest} does not match its own config text ({})",
                text_digest(&text)
            )));
        }
        let (config, _) = RunConfig::build(RunConfig::default(), Some((&text, "<checkpoint config>")), &[], &[])?;
        if let Some(exp) = expected {
            if exp != digest && !force {
                return Err(HatError::DigestMismatch {
                    expected: exp.to_string(),
                    found: digest,
                });
            }
        }
        let epoch = r.u32("epoch")?;
        let classes = r.u32("accumulator size")? as usize;
        let mut acc = GradientRatioAccumulator::new(classes);
        for j in 0..classes {
            acc.g_pos[j] = r.f64("accumulator")?;
        }
        for j in 0..classes {
            acc.g_neg[j] = r.f64("accumulator")?;
        }
        let count = r.u32("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape.iter().product();
            let values = r.f32s(n, &name)?;
            params.add(name, Tensor::new(shape, values)?)?;
        }
        r.finish()?;
        Ok(Checkpoint {
            config,
            digest,
            epoch,
            accumulator: acc,
            params,
        })
    }

    /// Rebuilds the model from the stored config and loads the parameters by name.
    pub fn restore(&self) -> Result<(HatModel, ParamStore<f32>)> {
        let (model, mut store) = HatModel::build::<f32>(&self.config)?;
        if store.len() != self.params.len() {
            return Err(HatError::Config(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                self.params.len(),
                store.len()
            )));
        }
        store.load_from(&self.params)?;
        Ok((model, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = RunConfig::toy();
        let (_, store) = HatModel::build::<f32>(&cfg).unwrap();
        let acc = GradientRatioAccumulator {
            g_pos: (0..8).map(|j| j as f64 * 0.1).collect(),
            g_neg: (0..8).map(|j| 1.0 + j as f64).collect(),
        };
        Checkpoint::new(&cfg, 7, &acc, &store)
    }

    #[test]
    fn save_load_save_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.hatc");
        let b = dir.path().join("b.hatc");
        let ck = sample();
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a, Some(&ck.digest), false).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(back.accumulator, ck.accumulator);
        assert_eq!(back.config, ck.config);
        back.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let (_, store) = back.restore().unwrap();
        assert!(store.iter().any(|(_, p)| p.name.starts_with("osn.")));
    }

    #[test]
    fn digest_mismatch_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hatc");
        let ck = sample();
        ck.save(&path).unwrap();
        let mut other = RunConfig::toy();
        other.history.enabled = false;
        assert!(matches!(
            Checkpoint::load(&path, Some(&other.digest()), false),
            Err(HatError::DigestMismatch { .. })
        ));
        assert!(Checkpoint::load(&path, Some(&other.digest()), true).is_ok());
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.hatc");
        let bytes = sample().to_bytes();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path, None, false), Err(HatError::Format { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Checkpoint::load(&path, None, false), Err(HatError::Format { offset: 4, .. })));
    }
}
