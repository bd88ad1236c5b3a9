//! Self-describing checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"JPVAECKP" | version u32 | header_len u64 | header (JSON)
//! blob_count u32 | blobs...
//! blob: name_len u32 | name (UTF-8) | rows u64 | cols u64 | rows*cols f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covparam::{CrossCovKind, CrossCovParam};
use crate::error::{Error, Result};
use crate::imputation::LatentStats;
use crate::model::{Architecture, JpvaeModel, TrainConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"JPVAECKP";
pub const FORMAT_VERSION: u32 = 1;

const STATS_MEAN: &str = "latent_stats.mean";
const STATS_COV: &str = "latent_stats.cov";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Architecture,
    pub config: TrainConfig,
    pub variant: CrossCovKind,
    pub alpha: Option<f64>,
    pub sign_params: BTreeMap<String, f64>,
    pub epoch: usize,
    pub dataset_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &JpvaeModel, config: &TrainConfig, epoch: usize, dataset_hash: Option<String>) -> Self {
        let meta = CheckpointMeta {
            arch: model.arch.clone(),
            config: config.clone(),
            variant: model.variant(),
            alpha: model.cross_cov.alpha(),
            sign_params: model
                .cross_cov
                .sign_params()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            epoch,
            dataset_hash,
        };
        let blobs = model
            .store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect();
        Checkpoint { meta, blobs }
    }

    pub fn blob(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn put(&mut self, name: &str, t: Tensor) {
        match self.blobs.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.blobs.push((name.to_string(), t)),
        }
    }

    pub fn set_latent_stats(&mut self, stats: &LatentStats) {
        self.put(STATS_MEAN, Tensor::row(&stats.mean));
        self.put(STATS_COV, stats.cov.clone());
    }

    pub fn latent_stats(&self) -> Result<Option<LatentStats>> {
        match (self.blob(STATS_MEAN), self.blob(STATS_COV)) {
            (Some(m), Some(c)) => {
                let n = self.meta.arch.latent;
                Ok(Some(LatentStats::new(n, n, m.data().to_vec(), c.clone())?))
            }
            (None, None) => Ok(None),
            _ => Err(Error::Checkpoint("latent statistics are only partly present".into())),
        }
    }

    /// Rebuilds the model. Every parameter must be present with its exact shape.
    pub fn model(&self) -> Result<JpvaeModel> {
        let n = self.meta.arch.latent;
        let s = self.meta.sign_params.values().next().copied().unwrap_or(self.meta.config.sign_param);
        let alpha = self.meta.alpha.unwrap_or(self.meta.config.alpha);
        let cc = CrossCovParam::new(self.meta.variant, n, alpha, s)?;
        let expected: BTreeMap<String, f64> = cc.sign_params().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        if expected != self.meta.sign_params {
            return Err(Error::Checkpoint(format!(
                "sign parameters {:?} do not fit variant {}",
                self.meta.sign_params,
                self.meta.variant.label()
            )));
        }
        let mut model = JpvaeModel::new(self.meta.arch.clone(), &cc, &mut ChaCha8Rng::seed_from_u64(0))?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = self
                .blob(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            model
                .store
                .set(id, t.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        if let Some((extra, _)) = self
            .blobs
            .iter()
            .find(|(n, _)| n != STATS_MEAN && n != STATS_COV && model.store.id_of(n).is_none())
        {
            return Err(Error::Checkpoint(format!("unexpected blob {extra}")));
        }
        if !model.store.all_finite() {
            return Err(Error::Checkpoint("checkpoint holds non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, t) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::parse(0, "wrong magic: not a checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = r.u64()? as usize;
        let header_at = r.at as u64;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::parse(header_at, format!("bad header: {e}")))?;
        let count = r.u32()?;
        let mut blobs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_at = r.at as u64;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::parse(name_at, "blob name is not UTF-8"))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let raw = r.take(rows.checked_mul(cols).and_then(|k| k.checked_mul(8)).ok_or_else(|| {
                Error::parse(r.at as u64, "blob size overflows")
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blobs.push((name, Tensor::new(rows, cols, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::parse(r.at as u64, "trailing bytes after the last blob"));
        }
        Ok(Checkpoint { meta, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::parse(self.bytes.len() as u64, format!("truncated: {n} more bytes expected at {}", self.at))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: CrossCovKind) -> (JpvaeModel, TrainConfig) {
        let cfg = TrainConfig {
            variant: kind,
            alpha: 0.8,
            ..TrainConfig::default()
        };
        let arch = Architecture {
            view_widths: [4, 3],
            hidden: vec![5],
            latent: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = JpvaeModel::new(arch, &cfg.initial_cross_cov(2).unwrap(), &mut rng).unwrap();
        for (_, id) in m.cross_cov.slots() {
            let id = *id;
            let t = m.store.get(id).map(|_| 0.123456789);
            m.store.set(id, t).unwrap();
        }
        (m, cfg)
    }

    #[test]
    fn roundtrip_is_bit_exact_for_every_variant() {
        for kind in [CrossCovKind::Zero, CrossCovKind::BoundedSvd, CrossCovKind::ScaledOrthogonal] {
            let (m, cfg) = small(kind);
            let mut ck = Checkpoint::from_model(&m, &cfg, 4, Some("abc".into()));
            let stats = LatentStats::new(2, 2, vec![0.1, -0.2, 1e-300, 3.0], Tensor::eye(4).scale(1.0 / 3.0)).unwrap();
            ck.set_latent_stats(&stats);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            let rebuilt = back.model().unwrap();
            for ((_, a, x), (_, b, y)) in rebuilt.store.iter().zip(m.store.iter()) {
                assert_eq!(a, b);
                let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
            assert_eq!(back.latent_stats().unwrap().unwrap(), stats);
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let (m, cfg) = small(CrossCovKind::Zero);
        let mut bytes = Checkpoint::from_model(&m, &cfg, 1, None).to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn truncation_and_bad_magic() {
        let (m, cfg) = small(CrossCovKind::BoundedSvd);
        let bytes = Checkpoint::from_model(&m, &cfg, 1, None).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("wrong magic"));
    }

    #[test]
    fn missing_parameter_is_a_checkpoint_error() {
        let (m, cfg) = small(CrossCovKind::ScaledOrthogonal);
        let mut ck = Checkpoint::from_model(&m, &cfg, 1, None);
        ck.blobs.retain(|(n, _)| n != "cross_cov.basis.skew");
        assert!(matches!(ck.model(), Err(Error::Checkpoint(_))));
    }
}
