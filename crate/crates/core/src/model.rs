//! A miniature frozen transformer encoder with per-block prompt tokens.
//!
//! Each raw feature vector is cut into `n_patches` equal slices, linearly
//! embedded, and preceded by a class token. Prompted blocks see
//! `[cls, patches, prompts]`; the prompt outputs are discarded and the next
//! prompted block receives fresh prompt tokens. Blocks are pre-norm:
//!
//! ```text
//! x1 = x  + MHA(LN(x))
//! x2 = x1 + W2 tanh(W1 LN(x1) + b1) + b2
//! ```
//!
//! Logits come from a unified linear head over `LN(cls)` of the last block.
//! Backbone weights are never updated; gradients flow only to the active
//! prompt tokens, the prompt key, and the head rows of the current task.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Raw feature dimension of one sample.
    pub input_dim: usize,
    /// Number of patch tokens the raw vector is cut into.
    pub n_patches: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    /// Prompt tokens per prompted block.
    pub prompt_len: usize,
    pub prompted_blocks: Vec<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            n_patches: 4,
            d_model: 32,
            n_blocks: 2,
            n_heads: 4,
            mlp_hidden: 64,
            prompt_len: 4,
            prompted_blocks: vec![0, 1],
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_patches == 0 || !self.input_dim.is_multiple_of(self.n_patches) {
            return bad(format!(
                "input_dim {} must split evenly into {} patches",
                self.input_dim, self.n_patches
            ));
        }
        if self.prompt_len == 0 || self.mlp_hidden == 0 || self.n_blocks == 0 {
            return bad("prompt_len, mlp_hidden and n_blocks must be positive".into());
        }
        if self.prompted_blocks.is_empty() {
            return bad("at least one prompted block is required".into());
        }
        if self.prompted_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return bad("prompted_blocks must be strictly increasing".into());
        }
        if self.prompted_blocks.iter().any(|&b| b >= self.n_blocks) {
            return bad(format!(
                "prompted_blocks must lie in [0, {})",
                self.n_blocks
            ));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.input_dim / self.n_patches
    }

    /// Tokens per sample excluding prompts.
    pub fn base_tokens(&self) -> usize {
        1 + self.n_patches
    }

    pub fn n_prompted(&self) -> usize {
        self.prompted_blocks.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn gradient_layout(&self) -> GradientLayout {
        GradientLayout {
            n_layers: self.n_prompted(),
            prompt_len: self.prompt_len,
            dim: self.d_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Frozen encoder weights. Randomly initialized once per run from the
/// config seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone<T> {
    cfg: EncoderConfig,
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    pub pos: Array2<T>,
    pub cls: Array1<T>,
    pub blocks: Vec<BlockWeights<T>>,
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn(shape, |_| T::lit(dist.sample(rng)))
}

impl<T: Scalar> FrozenBackbone<T> {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let h = cfg.mlp_hidden;
        let pd = cfg.patch_dim();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_w = gaussian(&mut rng, (pd, d), inv(pd));
        let patch_b = Array1::zeros(d);
        let pos = gaussian(&mut rng, (cfg.n_patches, d), 0.02);
        let cls = gaussian::<T>(&mut rng, (1, d), 0.02).row(0).to_owned();
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights {
                wq: gaussian(&mut rng, (d, d), inv(d)),
                wk: gaussian(&mut rng, (d, d), inv(d)),
                wv: gaussian(&mut rng, (d, d), inv(d)),
                wo: gaussian(&mut rng, (d, d), inv(d)),
                w1: gaussian(&mut rng, (d, h), inv(d)),
                b1: Array1::zeros(h),
                w2: gaussian(&mut rng, (h, d), inv(h)),
                b2: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            pos,
            cls,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Every weight in declaration order, flattened row-major.
    pub fn weights(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend(self.patch_w.iter());
        out.extend(self.patch_b.iter());
        out.extend(self.pos.iter());
        out.extend(self.cls.iter());
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1] {
                out.extend(m.iter());
            }
            out.extend(b.b1.iter());
            out.extend(b.w2.iter());
            out.extend(b.b2.iter());
        }
        out
    }

    /// Inverse of [`Self::weights`].
    pub fn load_weights(&mut self, flat: &[T]) -> Result<()> {
        let want = self.weights().len();
        if flat.len() != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                found: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut T>| {
            for x in dst {
                *x = it.next().expect("length checked");
            }
        };
        fill(&mut self.patch_w.iter_mut());
        fill(&mut self.patch_b.iter_mut());
        fill(&mut self.pos.iter_mut());
        fill(&mut self.cls.iter_mut());
        for b in &mut self.blocks {
            fill(&mut b.wq.iter_mut());
            fill(&mut b.wk.iter_mut());
            fill(&mut b.wv.iter_mut());
            fill(&mut b.wo.iter_mut());
            fill(&mut b.w1.iter_mut());
            fill(&mut b.b1.iter_mut());
            fill(&mut b.w2.iter_mut());
            fill(&mut b.b2.iter_mut());
        }
        Ok(())
    }

    /// SHA-256 over the little-endian weight bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in self.weights() {
            h.update(w.le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Unified classifier head over every class seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            w: Array2::zeros((0, dim)),
            b: Array1::zeros(0),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.w.nrows()
    }

    /// Appends rows until the head covers `n_classes` outputs.
    pub fn grow_to(&mut self, n_classes: usize, rng: &mut impl Rng) {
        let d = self.w.ncols();
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        while self.w.nrows() < n_classes {
            let row = Array1::from_shape_fn(d, |_| T::lit(dist.sample(rng)));
            self.w.push_row(row.view()).expect("row width");
            self.b = ndarray::concatenate![Axis(0), self.b, Array1::zeros(1)];
        }
    }
}

/// Which head outputs are live; masked classes get `−∞` logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadMask {
    allowed: Vec<bool>,
}

impl HeadMask {
    pub fn only(n_classes: usize, classes: impl IntoIterator<Item = usize>) -> Self {
        let mut allowed = vec![false; n_classes];
        for c in classes {
            if c < n_classes {
                allowed[c] = true;
            }
        }
        Self { allowed }
    }

    pub fn all(n_classes: usize) -> Self {
        Self {
            allowed: vec![true; n_classes],
        }
    }

    pub fn allows(&self, class: usize) -> bool {
        self.allowed.get(class).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }
}

/// Learnable prompt tokens for every prompted block plus a retrieval key.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet<T> {
    pub id: usize,
    /// `[n_prompted, prompt_len, d]`.
    pub prompts: Array3<T>,
    pub key: Array1<T>,
    /// Frozen tokens borrowed from other sets, appended after `prompts` on
    /// every forward pass. Never updated.
    pub frozen_extra: Option<Array3<T>>,
}

impl<T: Scalar> PromptSet<T> {
    /// Uniform(−1, 1) prompts and key.
    pub fn random(id: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let u = Uniform::new(-1.0, 1.0).expect("valid range");
        let prompts =
            Array3::from_shape_fn((cfg.n_prompted(), cfg.prompt_len, cfg.d_model), |_| {
                T::lit(u.sample(rng))
            });
        let key = Array1::from_shape_fn(cfg.d_model, |_| T::lit(u.sample(rng)));
        Self {
            id,
            prompts,
            key,
            frozen_extra: None,
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts.len_of(Axis(1))
    }

    /// Prompt tokens seen by the encoder: active tokens then frozen ones.
    pub fn composed(&self) -> Array3<T> {
        match &self.frozen_extra {
            Some(extra) => ndarray::concatenate![Axis(1), self.prompts, *extra],
            None => self.prompts.clone(),
        }
    }
}

/// Offsets of the flattened `(prompts, key)` gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientLayout {
    pub n_layers: usize,
    pub prompt_len: usize,
    pub dim: usize,
}

impl GradientLayout {
    pub fn block_len(&self) -> usize {
        self.prompt_len * self.dim
    }

    pub fn prompt_offset(&self, layer: usize) -> usize {
        layer * self.block_len()
    }

    pub fn key_offset(&self) -> usize {
        self.n_layers * self.block_len()
    }

    pub fn len(&self) -> usize {
        self.key_offset() + self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `∂L/∂p` for every prompted block followed by `∂L/∂k`, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T> {
    pub flat: Array1<T>,
    pub layout: GradientLayout,
}

impl<T: Scalar> GradientVector<T> {
    pub fn zeros(layout: GradientLayout) -> Self {
        Self {
            flat: Array1::zeros(layout.len()),
            layout,
        }
    }

    pub fn from_flat(flat: Array1<T>, layout: GradientLayout) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                found: flat.len(),
            });
        }
        Ok(Self { flat, layout })
    }

    /// `[prompt_len, d]` view of one block.
    pub fn prompt_rows(&self, layer: usize) -> ArrayView2<'_, T> {
        let o = self.layout.prompt_offset(layer);
        self.flat
            .slice(s![o..o + self.layout.block_len()])
            .into_shape_with_order((self.layout.prompt_len, self.layout.dim))
            .expect("contiguous block")
    }

    pub fn prompt_rows_mut(&mut self, layer: usize) -> ArrayViewMut2<'_, T> {
        let o = self.layout.prompt_offset(layer);
        let (pl, d) = (self.layout.prompt_len, self.layout.dim);
        self.flat
            .slice_mut(s![o..o + pl * d])
            .into_shape_with_order((pl, d))
            .expect("contiguous block")
    }

    pub fn key(&self) -> ArrayView1<'_, T> {
        self.flat.slice(s![self.layout.key_offset()..])
    }

    pub fn key_mut(&mut self) -> ndarray::ArrayViewMut1<'_, T> {
        let o = self.layout.key_offset();
        self.flat.slice_mut(s![o..])
    }

    pub fn norm(&self) -> T {
        norm(self.flat.view())
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|x| x.is_finite())
    }
}

/// Gradient of the head rows, same shape as the head.
#[derive(Debug, Clone)]
pub struct HeadGradient<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct PromptGradient<T> {
    pub ce_loss: T,
    pub key_loss: T,
    pub grad: GradientVector<T>,
    pub head: HeadGradient<T>,
}

// ---------------------------------------------------------------------------
// primitive ops

fn layer_norm<T: Scalar>(x: ArrayView2<T>) -> (Array2<T>, Array1<T>) {
    let (rows, d) = x.dim();
    let dn = T::lit(d as f64);
    let mut y = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mu = row.sum() / dn;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
        let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            y[[r, c]] = (row[c] - mu) * is;
        }
    }
    (y, inv_std)
}

fn layer_norm_back<T: Scalar>(
    y: ArrayView2<T>,
    inv_std: ArrayView1<T>,
    dy: ArrayView2<T>,
) -> Array2<T> {
    let (rows, d) = y.dim();
    let dn = T::lit(d as f64);
    let mut dx = Array2::zeros((rows, d));
    for r in 0..rows {
        let yr = y.row(r);
        let gr = dy.row(r);
        let mean_g = gr.sum() / dn;
        let mean_gy = dot(gr, yr) / dn;
        for c in 0..d {
            dx[[r, c]] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
        }
    }
    dx
}

fn softmax_rows<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

struct BlockCache<T> {
    y: Array2<T>,
    inv_std: Array1<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Vec<Array2<T>>,
    z: Array2<T>,
    z_inv_std: Array1<T>,
    h: Array2<T>,
}

fn block_forward<T: Scalar>(
    w: &BlockWeights<T>,
    x: ArrayView2<T>,
    n_heads: usize,
) -> (Array2<T>, BlockCache<T>) {
    let (t, d) = x.dim();
    let dh = d / n_heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (y, inv_std) = layer_norm(x);
    let q = y.dot(&w.wq);
    let k = y.dot(&w.wk);
    let v = y.dot(&w.wv);
    let mut o = Array2::zeros((t, d));
    let mut attn = Vec::with_capacity(n_heads);
    for hd in 0..n_heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc.mapv_inplace(|v| v * scale);
        softmax_rows(&mut sc);
        o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        attn.push(sc);
    }
    let x1 = &x + &o.dot(&w.wo);
    let (z, z_inv_std) = layer_norm(x1.view());
    let mut h = z.dot(&w.w1) + &w.b1;
    h.mapv_inplace(|v| v.tanh());
    let x2 = &x1 + &h.dot(&w.w2) + &w.b2;
    (
        x2,
        BlockCache {
            y,
            inv_std,
            q,
            k,
            v,
            attn,
            z,
            z_inv_std,
            h,
        },
    )
}

/// Gradient with respect to the block input given the output gradient.
fn block_backward<T: Scalar>(
    w: &BlockWeights<T>,
    c: &BlockCache<T>,
    dx2: ArrayView2<T>,
    n_heads: usize,
) -> Array2<T> {
    let (t, d) = dx2.dim();
    let dh = d / n_heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    // MLP branch
    let dh_act = dx2.dot(&w.w2.t());
    let dpre = &dh_act * &c.h.mapv(|v| T::one() - v * v);
    let dz = dpre.dot(&w.w1.t());
    let dx1 = &dx2 + &layer_norm_back(c.z.view(), c.z_inv_std.view(), dz.view());
    // attention branch
    let d_o = dx1.dot(&w.wo.t());
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for hd in 0..n_heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let a = &c.attn[hd];
        let doh = d_o.slice(cols);
        let da = doh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&doh));
        let mut ds = Array2::zeros((t, t));
        for i in 0..t {
            let row_dot = dot(a.row(i), da.row(i));
            for j in 0..t {
                ds[[i, j]] = a[[i, j]] * (da[[i, j]] - row_dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let dy = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    &dx1 + &layer_norm_back(c.y.view(), c.inv_std.view(), dy.view())
}

// ---------------------------------------------------------------------------
// encoder

struct SampleTrace<T> {
    inputs_len: Vec<usize>,
    caches: Vec<BlockCache<T>>,
    feat: Array1<T>,
    feat_inv_std: T,
}

/// Backbone plus head: everything needed to run prompted and promptless
/// passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub backbone: FrozenBackbone<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        let backbone = FrozenBackbone::new(cfg)?;
        Ok(Self {
            head: ClassifierHead::new(cfg.d_model),
            backbone,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.backbone.config()
    }

    fn check_batch(&self, batch: ArrayView2<T>) -> Result<()> {
        if batch.ncols() != self.config().input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config().input_dim,
                found: batch.ncols(),
            });
        }
        Ok(())
    }

    fn check_prompts(&self, prompts: ArrayView3<T>) -> Result<()> {
        let cfg = self.config();
        let (l, _, d) = prompts.dim();
        if l != cfg.n_prompted() || d != cfg.d_model {
            return Err(Error::Shape(format!(
                "prompt tensor {:?} does not fit {} prompted blocks of width {}",
                prompts.dim(),
                cfg.n_prompted(),
                cfg.d_model
            )));
        }
        Ok(())
    }

    fn embed(&self, x: ArrayView1<T>) -> Array2<T> {
        let cfg = self.config();
        let bb = &self.backbone;
        let pd = cfg.patch_dim();
        let mut tokens = Array2::zeros((cfg.base_tokens(), cfg.d_model));
        tokens.row_mut(0).assign(&bb.cls);
        for p in 0..cfg.n_patches {
            let patch = x.slice(s![p * pd..(p + 1) * pd]);
            let e = patch.dot(&bb.patch_w) + &bb.patch_b + bb.pos.row(p);
            tokens.row_mut(p + 1).assign(&e);
        }
        tokens
    }

    /// Runs one sample; `taps` receives the LN-normalized non-prompt tokens
    /// entering each prompted block.
    fn run(
        &self,
        x: ArrayView1<T>,
        prompts: Option<ArrayView3<T>>,
        keep_cache: bool,
        mut taps: Option<&mut Vec<Array2<T>>>,
    ) -> SampleTrace<T> {
        let cfg = self.config();
        let base = cfg.base_tokens();
        let mut tokens = self.embed(x);
        let mut caches = Vec::new();
        let mut inputs_len = Vec::new();
        let mut slot = 0;
        for (b, w) in self.backbone.blocks.iter().enumerate() {
            let prompted = cfg.prompted_blocks.get(slot) == Some(&b);
            if prompted {
                if let Some(t) = taps.as_deref_mut() {
                    t.push(layer_norm(tokens.view()).0);
                }
            }
            let input = match (prompted, prompts) {
                (true, Some(p)) => {
                    ndarray::concatenate![Axis(0), tokens, p.index_axis(Axis(0), slot)]
                }
                _ => tokens.clone(),
            };
            if prompted {
                slot += 1;
            }
            let (out, cache) = block_forward(w, input.view(), cfg.n_heads);
            inputs_len.push(input.nrows());
            if keep_cache {
                caches.push(cache);
            }
            tokens = out.slice(s![..base, ..]).to_owned();
        }
        let (feat, inv) = layer_norm(tokens.slice(s![..1, ..]));
        SampleTrace {
            inputs_len,
            caches,
            feat: feat.row(0).to_owned(),
            feat_inv_std: inv[0],
        }
    }

    fn logits_of(&self, feat: ArrayView1<T>, mask: &HeadMask) -> Array1<T> {
        let mut z = self.head.w.dot(&feat) + &self.head.b;
        for (c, v) in z.iter_mut().enumerate() {
            if !mask.allows(c) {
                *v = T::neg_infinity();
            }
        }
        z
    }

    /// Logits of every sample under `set` (with its frozen attachment).
    pub fn forward_prompted(
        &self,
        set: &PromptSet<T>,
        batch: ArrayView2<T>,
        mask: &HeadMask,
    ) -> Result<Array2<T>> {
        self.check_batch(batch)?;
        let composed = set.composed();
        self.check_prompts(composed.view())?;
        self.logits_with(Some(composed.view()), batch, mask)
    }

    /// Logits with an explicit prompt tensor (or none).
    pub fn logits_with(
        &self,
        prompts: Option<ArrayView3<T>>,
        batch: ArrayView2<T>,
        mask: &HeadMask,
    ) -> Result<Array2<T>> {
        self.check_batch(batch)?;
        if let Some(p) = prompts {
            self.check_prompts(p)?;
        }
        if mask.len() != self.head.n_classes() {
            return Err(Error::Shape(format!(
                "mask over {} classes, head has {}",
                mask.len(),
                self.head.n_classes()
            )));
        }
        let mut out = Array2::zeros((batch.nrows(), self.head.n_classes()));
        for (i, x) in batch.rows().into_iter().enumerate() {
            let tr = self.run(x, prompts, false, None);
            out.row_mut(i).assign(&self.logits_of(tr.feat.view(), mask));
        }
        Ok(out)
    }

    /// Promptless features: the normalized final class token of each sample.
    pub fn forward_query(&self, batch: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_batch(batch)?;
        let mut out = Array2::zeros((batch.nrows(), self.config().d_model));
        for (i, x) in batch.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.run(x, None, false, None).feat);
        }
        Ok(out)
    }

    /// Normalized non-prompt tokens entering each prompted block, stacked
    /// over samples: one `[n · base_tokens, d]` matrix per prompted block.
    pub fn block_representations(
        &self,
        prompts: Option<ArrayView3<T>>,
        batch: ArrayView2<T>,
    ) -> Result<Vec<Array2<T>>> {
        self.check_batch(batch)?;
        if let Some(p) = prompts {
            self.check_prompts(p)?;
        }
        let cfg = self.config();
        let per = cfg.base_tokens();
        let mut layers: Vec<Array2<T>> = (0..cfg.n_prompted())
            .map(|_| Array2::zeros((batch.nrows() * per, cfg.d_model)))
            .collect();
        let mut taps = Vec::with_capacity(cfg.n_prompted());
        for (i, x) in batch.rows().into_iter().enumerate() {
            taps.clear();
            self.run(x, prompts, false, Some(&mut taps));
            for (l, t) in taps.iter().enumerate() {
                layers[l]
                    .slice_mut(s![i * per..(i + 1) * per, ..])
                    .assign(t);
            }
        }
        Ok(layers)
    }

    /// Reverse-mode gradient of the mean masked cross-entropy with respect
    /// to `set.prompts`, plus `key_weight · (1 − cos(k, q̄))` with respect to
    /// `set.key`. `frozen_extra` joins the forward pass but receives no
    /// gradient. Head gradients are returned for the caller to apply.
    pub fn grad_prompts(
        &self,
        set: &PromptSet<T>,
        frozen_extra: Option<ArrayView3<T>>,
        batch: ArrayView2<T>,
        labels: &[usize],
        mask: &HeadMask,
        key_weight: T,
    ) -> Result<PromptGradient<T>> {
        self.check_batch(batch)?;
        if batch.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != batch.nrows() {
            return Err(Error::DimensionMismatch {
                expected: batch.nrows(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| !mask.allows(l)) {
            return Err(Error::LabelMasked { label: bad });
        }
        let cfg = self.config();
        let active_len = set.prompt_len();
        let composed = match frozen_extra {
            Some(extra) => ndarray::concatenate![Axis(1), set.prompts, extra],
            None => set.prompts.clone(),
        };
        self.check_prompts(composed.view())?;
        let layout = GradientLayout {
            n_layers: cfg.n_prompted(),
            prompt_len: active_len,
            dim: cfg.d_model,
        };
        let mut grad = GradientVector::zeros(layout);
        let mut head = HeadGradient {
            w: Array2::zeros(self.head.w.dim()),
            b: Array1::zeros(self.head.b.len()),
        };
        let n = T::lit(batch.nrows() as f64);
        let base = cfg.base_tokens();
        let mut ce_loss = T::zero();

        for (x, &label) in batch.rows().into_iter().zip(labels) {
            let tr = self.run(x, Some(composed.view()), true, None);
            let mut p = self.logits_of(tr.feat.view(), mask);
            let m = p.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut zsum = T::zero();
            for v in p.iter_mut() {
                *v = if v.is_finite() {
                    (*v - m).exp()
                } else {
                    T::zero()
                };
                zsum += *v;
            }
            p.mapv_inplace(|v| v / zsum);
            ce_loss += -(p[label].max(T::min_positive_value())).ln();
            let mut dlogit = p;
            dlogit[label] -= T::one();
            dlogit.mapv_inplace(|v| v / n);

            for c in 0..dlogit.len() {
                let g = dlogit[c];
                if g != T::zero() {
                    head.w.row_mut(c).scaled_add(g, &tr.feat);
                    head.b[c] += g;
                }
            }
            let dfeat = self.head.w.t().dot(&dlogit);
            let dcls = layer_norm_back(
                tr.feat.view().insert_axis(Axis(0)),
                ndarray::arr1(&[tr.feat_inv_std]).view(),
                dfeat.view().insert_axis(Axis(0)),
            );
            let mut dtokens = Array2::zeros((base, cfg.d_model));
            dtokens.row_mut(0).assign(&dcls.row(0));

            let mut slot = cfg.n_prompted();
            for b in (0..cfg.n_blocks).rev() {
                let mut dout = Array2::zeros((tr.inputs_len[b], cfg.d_model));
                dout.slice_mut(s![..base, ..]).assign(&dtokens);
                let din = block_backward(
                    &self.backbone.blocks[b],
                    &tr.caches[b],
                    dout.view(),
                    cfg.n_heads,
                );
                if slot > 0 && cfg.prompted_blocks[slot - 1] == b {
                    slot -= 1;
                    let mut rows = grad.prompt_rows_mut(slot);
                    rows += &din.slice(s![base..base + active_len, ..]);
                }
                dtokens = din.slice(s![..base, ..]).to_owned();
            }
        }

        let mut key_loss = T::zero();
        if key_weight != T::zero() {
            let q = self.forward_query(batch)?;
            let qbar = q.mean_axis(Axis(0)).expect("non-empty batch");
            let (loss, dk) = key_pull(set.key.view(), qbar.view());
            key_loss = key_weight * loss;
            grad.key_mut().assign(&dk.mapv(|v| v * key_weight));
        }

        Ok(PromptGradient {
            ce_loss: ce_loss / n,
            key_loss,
            grad,
            head,
        })
    }
}

/// `1 − cos(k, q)` and its gradient with respect to `k`.
pub fn key_pull<T: Scalar>(k: ArrayView1<T>, q: ArrayView1<T>) -> (T, Array1<T>) {
    let kn = norm(k).max(T::min_positive_value());
    let qn = norm(q).max(T::min_positive_value());
    let kq = dot(k, q);
    let cos = kq / (kn * qn);
    let dk = Array1::from_shape_fn(k.len(), |i| {
        -(q[i] / (kn * qn) - kq * k[i] / (kn * kn * kn * qn))
    });
    (T::one() - cos, dk)
}

/// Mean masked cross-entropy, used by tests and diagnostics.
pub fn cross_entropy<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> T {
    let mut total = T::zero();
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row
            .iter()
            .filter(|v| v.is_finite())
            .map(|&v| (v - m).exp())
            .sum::<T>()
            .ln()
            + m;
        total += lse - row[y];
    }
    total / T::lit(labels.len() as f64)
}
