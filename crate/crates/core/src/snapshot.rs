//! Binary run snapshot: enough state to resume training or re-evaluate.
//!
//! Layout, all little-endian: magic `LW2G`, `u32` version, `u32` d_model,
//! `u32` n_blocks, then a length-prefixed JSON blob with the encoder and
//! train configs, then the sections below in order. Float arrays are `f32`
//! with a `u32` element count in front.
//!
//! 1. backbone weights, head (`n_classes`, w, b)
//! 2. prompt sets (prompts dims + data, key, optional frozen tokens)
//! 3. registry (per set: task list)
//! 4. feature spaces: old (per set), pre (per task), keys (per set)
//! 5. per-task class lists
//! 6. retrieval and oracle accuracy matrices (NaN marks an empty entry)
//! 7. RNG seed, stream and word position
//!
//! Bases are re-orthonormalized on load, so an `f64` learner survives the
//! `f32` round trip up to rounding.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::model::{Encoder, EncoderConfig, PromptSet};
use crate::pool::{PromptPool, Registry};
use crate::subspace::{Basis, LayerSpaces};
use crate::trainer::{Learner, SubspaceMemory, TrainConfig};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"LW2G";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Configs {
    encoder: EncoderConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredBasis {
    pub label: String,
    pub dim: usize,
    pub rank: usize,
    /// Column-major, `rank` columns of length `dim`.
    pub columns: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredSet {
    pub prompts_dim: (usize, usize, usize),
    pub prompts: Vec<f32>,
    pub key: Vec<f32>,
    pub frozen: Option<((usize, usize, usize), Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub backbone: Vec<f32>,
    pub head_classes: usize,
    pub head_w: Vec<f32>,
    pub head_b: Vec<f32>,
    pub sets: Vec<StoredSet>,
    pub registry: Vec<Vec<u32>>,
    pub old_spaces: BTreeMap<usize, Vec<StoredBasis>>,
    pub pre_spaces: BTreeMap<u32, Vec<StoredBasis>>,
    pub key_spaces: BTreeMap<usize, StoredBasis>,
    pub task_classes: Vec<Vec<usize>>,
    pub retrieval: AccuracyMatrix,
    pub oracle: AccuracyMatrix,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

fn f32s<'a, T: Scalar>(it: impl IntoIterator<Item = &'a T>) -> Vec<f32> {
    it.into_iter().map(|x| x.as_f64() as f32).collect()
}

fn store_basis<T: Scalar>(b: &Basis<T>) -> StoredBasis {
    StoredBasis {
        label: b.label().to_owned(),
        dim: b.dim(),
        rank: b.rank(),
        columns: f32s(b.columns().t().iter()),
    }
}

fn load_basis<T: Scalar>(s: &StoredBasis) -> Result<Basis<T>> {
    let cols = Array2::from_shape_vec(
        (s.rank, s.dim),
        s.columns.iter().map(|&x| T::lit(x as f64)).collect(),
    )
    .map_err(|e| Error::Snapshot(e.to_string()))?;
    let b = Basis::orthonormalized(cols.t(), s.label.clone());
    if b.rank() != s.rank {
        return Err(Error::Snapshot(format!(
            "basis '{}' lost rank on load: {} → {}",
            s.label,
            s.rank,
            b.rank()
        )));
    }
    Ok(b)
}

fn from_f32<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x as f64)).collect()
}

fn arr3<T: Scalar>(dim: (usize, usize, usize), v: &[f32]) -> Result<Array3<T>> {
    Array3::from_shape_vec(dim, from_f32(v)).map_err(|e| Error::Snapshot(e.to_string()))
}

impl Snapshot {
    pub fn capture<T: Scalar>(
        learner: &Learner<T>,
        retrieval: &AccuracyMatrix,
        oracle: &AccuracyMatrix,
    ) -> Self {
        let rng = learner.rng();
        let head = &learner.encoder.head;
        Self {
            encoder: learner.encoder.config().clone(),
            train: learner.cfg.clone(),
            backbone: f32s(learner.encoder.backbone.weights().iter()),
            head_classes: head.n_classes(),
            head_w: f32s(head.w.iter()),
            head_b: f32s(head.b.iter()),
            sets: learner
                .pool
                .sets()
                .iter()
                .map(|s| StoredSet {
                    prompts_dim: s.prompts.dim(),
                    prompts: f32s(s.prompts.iter()),
                    key: f32s(s.key.iter()),
                    frozen: s.frozen_extra.as_ref().map(|f| (f.dim(), f32s(f.iter()))),
                })
                .collect(),
            registry: learner
                .pool
                .registry()
                .assignments()
                .into_values()
                .collect(),
            old_spaces: learner
                .memory
                .old_spaces
                .iter()
                .map(|(&k, v)| (k, v.layers.iter().map(store_basis).collect()))
                .collect(),
            pre_spaces: learner
                .memory
                .pre_spaces
                .iter()
                .map(|(&k, v)| (k, v.layers.iter().map(store_basis).collect()))
                .collect(),
            key_spaces: learner
                .memory
                .key_spaces
                .iter()
                .map(|(&k, b)| (k, store_basis(b)))
                .collect(),
            task_classes: learner.task_classes().to_vec(),
            retrieval: retrieval.clone(),
            oracle: oracle.clone(),
            rng_seed: rng.get_seed(),
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
        }
    }

    /// Rebuilds the learner and both accuracy matrices.
    pub fn restore<T: Scalar>(&self) -> Result<(Learner<T>, AccuracyMatrix, AccuracyMatrix)> {
        let mut encoder = Encoder::<T>::new(&self.encoder)?;
        encoder
            .backbone
            .load_weights(&from_f32::<T>(&self.backbone))?;
        let d = self.encoder.d_model;
        encoder.head.w = Array2::from_shape_vec((self.head_classes, d), from_f32(&self.head_w))
            .map_err(|e| Error::Snapshot(e.to_string()))?;
        encoder.head.b = Array1::from_vec(from_f32(&self.head_b));
        if encoder.head.b.len() != self.head_classes {
            return Err(Error::Snapshot("head bias length".into()));
        }
        let sets = self
            .sets
            .iter()
            .enumerate()
            .map(|(id, s)| {
                Ok(PromptSet {
                    id,
                    prompts: arr3(s.prompts_dim, &s.prompts)?,
                    key: Array1::from_vec(from_f32(&s.key)),
                    frozen_extra: s
                        .frozen
                        .as_ref()
                        .map(|(dim, v)| arr3(*dim, v))
                        .transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut registry = Registry::new();
        let mut order: Vec<(u32, usize)> = self
            .registry
            .iter()
            .enumerate()
            .flat_map(|(set, ts)| ts.iter().map(move |&t| (t, set)))
            .collect();
        order.sort_unstable();
        for (t, set) in order {
            if set == registry.len() {
                registry.grow(t)?;
            } else {
                registry.assign(set, t)?;
            }
        }
        if registry.assignments().into_values().collect::<Vec<_>>() != self.registry {
            return Err(Error::Snapshot("registry is not in creation order".into()));
        }
        let pool = PromptPool::from_parts(sets, registry)?;
        let spaces = |v: &Vec<StoredBasis>| -> Result<LayerSpaces<T>> {
            Ok(LayerSpaces::new(
                v.iter().map(load_basis).collect::<Result<_>>()?,
            ))
        };
        let memory = SubspaceMemory {
            old_spaces: self
                .old_spaces
                .iter()
                .map(|(&k, v)| Ok((k, spaces(v)?)))
                .collect::<Result<_>>()?,
            pre_spaces: self
                .pre_spaces
                .iter()
                .map(|(&k, v)| Ok((k, spaces(v)?)))
                .collect::<Result<_>>()?,
            key_spaces: self
                .key_spaces
                .iter()
                .map(|(&k, b)| Ok((k, load_basis(b)?)))
                .collect::<Result<_>>()?,
        };
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        let learner = Learner::from_parts(
            self.train.clone(),
            encoder,
            pool,
            memory,
            self.task_classes.clone(),
            rng,
        )?;
        Ok((learner, self.retrieval.clone(), self.oracle.clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.encoder.d_model as u32);
        w.u32(self.encoder.n_blocks as u32);
        let cfg = serde_json::to_vec(&Configs {
            encoder: self.encoder.clone(),
            train: self.train.clone(),
        })
        .expect("configs serialize");
        w.blob(&cfg);

        w.f32s(&self.backbone);
        w.u32(self.head_classes as u32);
        w.f32s(&self.head_w);
        w.f32s(&self.head_b);

        w.u32(self.sets.len() as u32);
        for s in &self.sets {
            w.dim3(s.prompts_dim);
            w.f32s(&s.prompts);
            w.f32s(&s.key);
            match &s.frozen {
                None => w.u32(0),
                Some((dim, v)) => {
                    w.u32(1);
                    w.dim3(*dim);
                    w.f32s(v);
                }
            }
        }

        w.u32(self.registry.len() as u32);
        for ts in &self.registry {
            w.u32(ts.len() as u32);
            ts.iter().for_each(|&t| w.u32(t));
        }

        w.u32(self.old_spaces.len() as u32);
        for (&k, v) in &self.old_spaces {
            w.u32(k as u32);
            w.layers(v);
        }
        w.u32(self.pre_spaces.len() as u32);
        for (&k, v) in &self.pre_spaces {
            w.u32(k);
            w.layers(v);
        }
        w.u32(self.key_spaces.len() as u32);
        for (&k, b) in &self.key_spaces {
            w.u32(k as u32);
            w.basis(b);
        }

        w.u32(self.task_classes.len() as u32);
        for cs in &self.task_classes {
            w.u32(cs.len() as u32);
            cs.iter().for_each(|&c| w.u32(c as u32));
        }

        w.matrix(&self.retrieval);
        w.matrix(&self.oracle);

        w.bytes(&self.rng_seed);
        w.u64(self.rng_stream);
        w.bytes(&self.rng_word_pos.to_le_bytes());
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let d_model = r.usize()?;
        let n_blocks = r.usize()?;
        let cfg: Configs = serde_json::from_slice(r.blob()?)?;
        if cfg.encoder.d_model != d_model || cfg.encoder.n_blocks != n_blocks {
            return Err(Error::Snapshot(
                "header disagrees with encoder config".into(),
            ));
        }

        let backbone = r.f32s()?;
        let head_classes = r.usize()?;
        let head_w = r.f32s()?;
        let head_b = r.f32s()?;

        let n_sets = r.usize()?;
        let mut sets = Vec::with_capacity(n_sets.min(1 << 16));
        for _ in 0..n_sets {
            let prompts_dim = r.dim3()?;
            let prompts = r.f32s()?;
            let key = r.f32s()?;
            let frozen = match r.u32()? {
                0 => None,
                1 => {
                    let dim = r.dim3()?;
                    Some((dim, r.f32s()?))
                }
                x => return Err(Error::Snapshot(format!("bad frozen flag {x}"))),
            };
            sets.push(StoredSet {
                prompts_dim,
                prompts,
                key,
                frozen,
            });
        }

        let n = r.usize()?;
        let registry = (0..n)
            .map(|_| {
                let k = r.usize()?;
                (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let mut old_spaces = BTreeMap::new();
        for _ in 0..r.usize()? {
            let k = r.usize()?;
            old_spaces.insert(k, r.layers()?);
        }
        let mut pre_spaces = BTreeMap::new();
        for _ in 0..r.usize()? {
            let k = r.u32()?;
            pre_spaces.insert(k, r.layers()?);
        }
        let mut key_spaces = BTreeMap::new();
        for _ in 0..r.usize()? {
            let k = r.usize()?;
            key_spaces.insert(k, r.basis()?);
        }

        let n = r.usize()?;
        let task_classes = (0..n)
            .map(|_| {
                let k = r.usize()?;
                (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let retrieval = r.matrix()?;
        let oracle = r.matrix()?;

        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Snapshot(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            encoder: cfg.encoder,
            train: cfg.train,
            backbone,
            head_classes,
            head_w,
            head_b,
            sets,
            registry,
            old_spaces,
            pre_spaces,
            key_spaces,
            task_classes,
            retrieval,
            oracle,
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u32(&mut self, x: u32) {
        self.bytes(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }
    fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u32(v.len() as u32);
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }
    fn dim3(&mut self, (a, b, c): (usize, usize, usize)) {
        self.u32(a as u32);
        self.u32(b as u32);
        self.u32(c as u32);
    }
    fn basis(&mut self, b: &StoredBasis) {
        self.blob(b.label.as_bytes());
        self.u32(b.dim as u32);
        self.u32(b.rank as u32);
        self.f32s(&b.columns);
    }
    fn layers(&mut self, v: &[StoredBasis]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|b| self.basis(b));
    }
    fn matrix(&mut self, m: &AccuracyMatrix) {
        let n = m.n_tasks();
        self.u32(n as u32);
        for i in 0..n {
            for t in 0..n {
                self.bytes(&m.get(i, t).unwrap_or(f64::NAN).to_le_bytes());
                let (h, tot) = m.retrieval(i, t);
                self.u64(h);
                self.u64(tot);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Snapshot(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.usize()?;
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Snapshot("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn dim3(&mut self) -> Result<(usize, usize, usize)> {
        Ok((self.usize()?, self.usize()?, self.usize()?))
    }
    fn basis(&mut self) -> Result<StoredBasis> {
        let label =
            String::from_utf8(self.blob()?.to_vec()).map_err(|e| Error::Snapshot(e.to_string()))?;
        let dim = self.usize()?;
        let rank = self.usize()?;
        let columns = self.f32s()?;
        if columns.len() != dim * rank {
            return Err(Error::Snapshot(format!(
                "basis '{label}' has {} values for {dim}×{rank}",
                columns.len()
            )));
        }
        Ok(StoredBasis {
            label,
            dim,
            rank,
            columns,
        })
    }
    fn layers(&mut self) -> Result<Vec<StoredBasis>> {
        let n = self.usize()?;
        (0..n).map(|_| self.basis()).collect()
    }
    fn matrix(&mut self) -> Result<AccuracyMatrix> {
        let n = self.usize()?;
        let mut m = AccuracyMatrix::new(n);
        for i in 0..n {
            for t in 0..n {
                let a = self.f64()?;
                let (h, tot) = (self.u64()?, self.u64()?);
                if !a.is_nan() {
                    m.set(i, t, a)?;
                }
                if tot > 0 {
                    m.record_retrieval(i, t, h, tot)?;
                }
            }
        }
        Ok(m)
    }
}
