//! Binary checkpoint format.
//!
//! ```text
//! "CRRN"            magic
//! u32               format version (1)
//! u32 + bytes       UTF-8 JSON metadata (configs, epoch, lr, RNG state)
//! repeated to EOF:
//!   u32 + bytes     tensor name
//!   u32             rank
//!   u64 × rank      extents
//!   f64 × len       values
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CrrnParams, ModelConfig, ResidualStats};
use crate::tensor::{RunningStats, Tensor};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"CRRN";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal; the word position is a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn parse(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }

    /// # Panics
    /// If the state did not come from [`capture`](Self::capture) or a
    /// validated checkpoint.
    pub fn restore(&self) -> ChaCha8Rng {
        self.parse().expect("validated RNG state")
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    lr: f64,
    best_val_pa: Option<f64>,
    rng: RngState,
    /// Per branch; all depths of a branch are updated together.
    running_stats_populated: Vec<bool>,
}

/// Full training state: parameters, running statistics, optimizer and RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub params: CrrnParams,
    pub epoch: usize,
    pub lr: f64,
    pub best_val_pa: Option<f64>,
    pub rng: RngState,
}

fn stats_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}res.bn1.running_mean"),
        format!("{prefix}res.bn1.running_var"),
        format!("{prefix}res.bn2.running_mean"),
        format!("{prefix}res.bn2.running_var"),
    ]
}

fn branch_prefix(config: &ModelConfig, i: usize) -> String {
    if config.per_direction_params {
        format!("{}.", crate::graph::Direction::ALL[i].short_name())
    } else {
        String::new()
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = &self.params.config;
        let meta = Metadata {
            model: config.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            lr: self.lr,
            best_val_pa: self.best_val_pa,
            rng: self.rng.clone(),
            running_stats_populated: self
                .params
                .stats
                .iter()
                .map(|depths| depths.iter().all(|s| s.bn1.is_populated() && s.bn2.is_populated()))
                .collect(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in self.params.named_tensors() {
            write_tensor(&mut out, &name, t);
        }
        for (i, depths) in self.params.stats.iter().enumerate() {
            let names = stats_names(&branch_prefix(config, i));
            let parts: [fn(&ResidualStats) -> &[f64]; 4] =
                [|s| s.bn1.mean(), |s| s.bn1.var(), |s| s.bn2.mean(), |s| s.bn2.var()];
            for (name, part) in names.iter().zip(parts) {
                let width = part(&depths[0]).len();
                let data = depths.iter().flat_map(|s| part(s).to_vec()).collect();
                let t = Tensor::new(&[depths.len(), width], data).expect("rectangular statistics");
                write_tensor(&mut out, name, &t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
        meta.rng.parse()?;
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        while !r.done() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("tensor {name}: bad rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: bad extents {shape:?}")))?;
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }

        let mut params = CrrnParams::zeros(&meta.model)?;
        let mut lookup = |name: &str| -> Result<Tensor> {
            let i = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            Ok(tensors.swap_remove(i).1)
        };
        for (name, slot) in params.named_tensors_mut() {
            let t = lookup(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if meta.running_stats_populated.len() != params.stats.len() {
            return Err(Error::Checkpoint(
                "running statistics flags do not match the branch count".into(),
            ));
        }
        let depth = meta.model.sweep_depth();
        let mid = meta.model.residual_mid_channels;
        for i in 0..params.stats.len() {
            let [m1, v1, m2, v2] = stats_names(&branch_prefix(&meta.model, i)).map(|n| lookup(&n));
            let (m1, v1, m2, v2) = (m1?, v1?, m2?, v2?);
            if [&m1, &v1].iter().any(|t| t.shape() != [depth, mid])
                || [&m2, &v2].iter().any(|t| t.shape() != [depth, 1])
            {
                return Err(Error::Checkpoint("running statistics have the wrong shape".into()));
            }
            let populated = meta.running_stats_populated[i];
            for (d, stats) in params.stats[i].iter_mut().enumerate() {
                let row = |t: &Tensor, w: usize| t.data()[d * w..(d + 1) * w].to_vec();
                stats.bn1 = RunningStats::from_parts(row(&m1, mid), row(&v1, mid), populated)?;
                stats.bn2 = RunningStats::from_parts(row(&m2, 1), row(&v2, 1), populated)?;
            }
        }
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            train: meta.train,
            params,
            epoch: meta.epoch,
            lr: meta.lr,
            best_val_pa: meta.best_val_pa,
            rng: meta.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Connectivity;
    use crate::tensor::BatchStats;
    use crate::train::init_params;

    fn sample_checkpoint(per_direction: bool) -> Checkpoint {
        let model = ModelConfig {
            image_height: 6,
            image_width: 6,
            channels: 3,
            grid_rows: 2,
            grid_cols: 3,
            hidden_dim: 9,
            residual_mid_channels: 2,
            kernel_size: 3,
            num_classes: 4,
            connectivity: Connectivity::Four,
            per_direction_params: per_direction,
            fuse_post_residual: false,
        };
        let mut params = init_params(&model, 7).unwrap();
        for (d, stats) in params.stats[0].iter_mut().enumerate() {
            stats.bn1.update(&BatchStats {
                mean: vec![0.25 * d as f64, -1.0 / 3.0],
                var: vec![1.5, 0.1 + d as f64],
                count: 3,
            });
            stats.bn2.update(&BatchStats {
                mean: vec![0.1],
                var: vec![2.0 / (d + 1) as f64],
                count: 3,
            });
        }
        let rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(11);
        Checkpoint {
            train: TrainConfig {
                learning_rate: 0.1 * 0.95 * 0.95,
                grad_clip_norm: Some(5.0),
                ..TrainConfig::default()
            },
            params,
            epoch: 3,
            lr: 1.0 / 3.0,
            best_val_pa: Some(0.7),
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for per_dir in [false, true] {
            let ckpt = sample_checkpoint(per_dir);
            let bytes = ckpt.to_bytes();
            assert_eq!(&bytes[..4], b"CRRN");
            assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::RngExt;
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(3);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        let a: [u64; 4] = std::array::from_fn(|_| rng.random());
        let b: [u64; 4] = std::array::from_fn(|_| resumed.random());
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample_checkpoint(false).to_bytes();
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        assert!(Checkpoint::from_bytes(&wrong_version).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
