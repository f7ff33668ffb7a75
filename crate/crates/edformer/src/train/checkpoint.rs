//! Versioned binary checkpoints: magic `EDF1`, format version, model config,
//! standardization stats, step count, and all parameter tensors
//! (little-endian, length-prefixed names, f64 payload).

use std::path::Path;

use crate::data::DataStats;
use crate::error::{Error, Result};
use crate::model::{EdFormer, EmbeddingMode, ModelConfig};

pub const MAGIC: &[u8; 4] = b"EDF1";
pub const VERSION: u32 = 1;

/// Everything needed to restore a trained model and keep forecasting in the
/// units it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stats: Option<DataStats>,
    pub variate_names: Vec<String>,
    pub steps: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &EdFormer,
        stats: Option<&DataStats>,
        variate_names: &[String],
        steps: u64,
    ) -> Self {
        let params = model
            .param_names()
            .iter()
            .zip(model.param_tensors())
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        Checkpoint {
            config: model.config().clone(),
            stats: stats.cloned(),
            variate_names: variate_names.to_vec(),
            steps,
            params,
        }
    }

    pub fn into_model(self) -> Result<(EdFormer, Option<DataStats>, Vec<String>, u64)> {
        let model = EdFormer::from_parts(self.config, self.params)?;
        Ok((model, self.stats, self.variate_names, self.steps))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let c = &self.config;
        for v in [
            c.lookback,
            c.horizon,
            c.variates,
            c.model_width,
            c.heads,
            c.layers,
            c.ffn_width,
            c.decomposition_kernel,
            c.embedding_depth,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout.to_le_bytes());
        out.push(u8::from(c.use_decomposition));
        out.push(match c.embedding_mode {
            EmbeddingMode::Variate => 0,
            EmbeddingMode::Temporal => 1,
        });
        out.push(u8::from(c.time_flip));
        out.push(u8::from(c.embed_trend));
        out.extend_from_slice(&c.seed.to_le_bytes());

        match &self.stats {
            None => out.push(0),
            Some(stats) => {
                out.push(1);
                out.extend_from_slice(&(stats.means.len() as u64).to_le_bytes());
                for (m, s) in stats.means.iter().zip(&stats.stds) {
                    out.extend_from_slice(&m.to_le_bytes());
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.variate_names.len() as u64).to_le_bytes());
        for name in &self.variate_names {
            write_str(&mut out, name);
        }
        out.extend_from_slice(&self.steps.to_le_bytes());

        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, shape, data) in &self.params {
            write_str(&mut out, name);
            out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }

        let lookback = r.u64()? as usize;
        let horizon = r.u64()? as usize;
        let variates = r.u64()? as usize;
        let model_width = r.u64()? as usize;
        let heads = r.u64()? as usize;
        let layers = r.u64()? as usize;
        let ffn_width = r.u64()? as usize;
        let decomposition_kernel = r.u64()? as usize;
        let embedding_depth = r.u64()? as usize;
        let dropout = r.f64()?;
        let use_decomposition = r.u8()? != 0;
        let embedding_mode = match r.u8()? {
            0 => EmbeddingMode::Variate,
            1 => EmbeddingMode::Temporal,
            other => {
                return Err(Error::Config(format!(
                    "checkpoint has unknown embedding mode tag {other}"
                )))
            }
        };
        let time_flip = r.u8()? != 0;
        let embed_trend = r.u8()? != 0;
        let seed = r.u64()?;

        let config = ModelConfig {
            lookback,
            horizon,
            variates,
            model_width,
            heads,
            layers,
            ffn_width,
            decomposition_kernel,
            dropout,
            use_decomposition,
            embedding_mode,
            time_flip,
            embed_trend,
            embedding_depth,
            seed,
        };

        let stats = match r.u8()? {
            0 => None,
            _ => {
                let n = r.u64()? as usize;
                let mut means = Vec::with_capacity(n);
                let mut stds = Vec::with_capacity(n);
                for _ in 0..n {
                    means.push(r.f64()?);
                    stds.push(r.f64()?);
                }
                Some(DataStats { means, stds })
            }
        };
        let name_count = r.u64()? as usize;
        let mut variate_names = Vec::with_capacity(name_count);
        for _ in 0..name_count {
            variate_names.push(r.string()?);
        }
        let steps = r.u64()?;

        let param_count = r.u64()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            let name = r.string()?;
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            params.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        Ok(Checkpoint {
            config,
            stats,
            variate_names,
            steps,
            params,
        })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedCheckpoint);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Config("checkpoint contains a non-UTF8 name".into()))
    }
}
