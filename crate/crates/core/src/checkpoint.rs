//! Checkpoint container: `DIMC` magic, `u32` version, `u64` metadata length, JSON
//! metadata, then every tensor as little-endian `f32` in the order the metadata lists.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::motion::Standardizer;
use crate::params::{Adam, ParamStore};

pub const MAGIC: &[u8; 4] = b"DIMC";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 as decimal text
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Format("corrupt rng state".into());
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
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub gesture_channels: usize,
    /// BVH text whose hierarchy and first frame seed generated motion.
    pub skeleton: Option<String>,
    pub stats: Standardizer,
    /// Per-dimension statistics of the audio features the model was trained on.
    pub feature_stats: Standardizer,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: Config,
    gesture_channels: usize,
    skeleton: Option<String>,
    stats: Standardizer,
    feature_stats: Standardizer,
    step: u64,
    rng: RngState,
    adam: AdamMeta,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    fn groups(&self) -> [&ParamStore<f32>; 3] {
        [&self.params, &self.adam.m, &self.adam.v]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, store) in GROUPS.iter().zip(self.groups()) {
            for (name, a) in store.iter() {
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name: name.clone(),
                    rows: a.nrows(),
                    cols: a.ncols(),
                });
                for v in a.iter() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let meta = Meta {
            config: self.config.clone(),
            gesture_channels: self.gesture_channels,
            skeleton: self.skeleton.clone(),
            stats: self.stats.clone(),
            feature_stats: self.feature_stats.clone(),
            step: self.step,
            rng: self.rng.clone(),
            adam: AdamMeta {
                lr: self.adam.lr,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                step: self.adam.step,
            },
            tensors,
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint metadata".into()))?;
        let meta: Meta = serde_json::from_slice(&bytes[16..meta_end])?;
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        let mut pos = meta_end;
        for t in &meta.tensors {
            let g = GROUPS
                .iter()
                .position(|g| *g == t.group)
                .ok_or_else(|| Error::Format(format!("unknown tensor group `{}`", t.group)))?;
            let n = t.rows * t.cols;
            let end = pos + 4 * n;
            if end > bytes.len() {
                return Err(Error::Format(format!("truncated tensor `{}`", t.name)));
            }
            let vals = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            stores[g].insert(t.name.clone(), Array2::from_shape_vec((t.rows, t.cols), vals).expect("tensor shape"));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - pos)));
        }
        let [params, m, v] = stores;
        Ok(Checkpoint {
            config: meta.config,
            gesture_channels: meta.gesture_channels,
            skeleton: meta.skeleton,
            stats: meta.stats,
            feature_stats: meta.feature_stats,
            step: meta.step,
            rng: meta.rng,
            params,
            adam: Adam {
                lr: meta.adam.lr,
                beta1: meta.adam.beta1,
                beta2: meta.adam.beta2,
                eps: meta.adam.eps,
                step: meta.adam.step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}
