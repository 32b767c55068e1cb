//! Grow-or-reuse decision, soft pre-trained constraint, and frozen-prompt
//! selection.
//!
//! Feature spaces live per prompted block. A flat prompt gradient is
//! projected block by block: every prompt-token row of block `l` is
//! projected with that block's basis. The key segment never lies in any
//! feature space, so it passes through complements untouched and vanishes
//! under projections.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoder, GradientLayout, GradientVector, HeadMask, PromptSet};
use crate::subspace::{hfc, Basis, Hfc, LayerSpaces};
use crate::Scalar;

fn check_layers<T: Scalar>(g: &GradientVector<T>, spaces: &LayerSpaces<T>) -> Result<()> {
    if spaces.len() != g.layout.n_layers {
        return Err(Error::Shape(format!(
            "{} feature spaces for {} prompted blocks",
            spaces.len(),
            g.layout.n_layers
        )));
    }
    if let Some(b) = spaces.layers.iter().find(|b| b.dim() != g.layout.dim) {
        return Err(Error::DimensionMismatch {
            expected: g.layout.dim,
            found: b.dim(),
        });
    }
    Ok(())
}

fn project_rows<T: Scalar>(rows: ArrayView2<T>, basis: &Basis<T>) -> Array2<T> {
    let b = basis.columns();
    rows.dot(&b).dot(&b.t())
}

/// Block-wise `Proj_S(g)`; the key segment maps to zero.
pub fn project_gradient<T: Scalar>(
    g: &GradientVector<T>,
    spaces: &LayerSpaces<T>,
) -> Result<GradientVector<T>> {
    check_layers(g, spaces)?;
    let mut out = GradientVector::zeros(g.layout);
    for (l, basis) in spaces.layers.iter().enumerate() {
        if basis.is_empty() {
            continue;
        }
        out.prompt_rows_mut(l)
            .assign(&project_rows(g.prompt_rows(l), basis));
    }
    Ok(out)
}

/// Block-wise `g − Proj_S(g)`; the key segment is kept.
pub fn complement_gradient<T: Scalar>(
    g: &GradientVector<T>,
    spaces: &LayerSpaces<T>,
) -> Result<GradientVector<T>> {
    let p = project_gradient(g, spaces)?;
    Ok(GradientVector {
        flat: &g.flat - &p.flat,
        layout: g.layout,
    })
}

/// `HFC(g, Proj_{S⊥}(g))`.
pub fn hindrance<T: Scalar>(g: &GradientVector<T>, spaces: &LayerSpaces<T>) -> Result<Hfc<T>> {
    if !(g.norm() > T::zero()) {
        return Err(Error::DegenerateSubset);
    }
    let c = complement_gradient(g, spaces)?;
    hfc(g.flat.view(), c.flat.view())
}

/// A labelled probing subset of the incoming task.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a, T> {
    pub x: ArrayView2<'a, T>,
    pub labels: &'a [usize],
    pub mask: &'a HeadMask,
    pub batch_size: usize,
}

/// Cross-entropy gradient of `set` over the whole probe, accumulated batch by
/// batch without touching any parameter. The set's own frozen attachment
/// joins the forward pass.
pub fn probe_gradient<T: Scalar>(
    encoder: &Encoder<T>,
    set: &PromptSet<T>,
    probe: &Probe<'_, T>,
) -> Result<GradientVector<T>> {
    let n = probe.x.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let bs = probe.batch_size.max(1);
    let mut acc = GradientVector::zeros(GradientLayout {
        n_layers: set.prompts.len_of(Axis(0)),
        prompt_len: set.prompt_len(),
        dim: set.key.len(),
    });
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let g = encoder.grad_prompts(
            set,
            set.frozen_extra.as_ref().map(|f| f.view()),
            probe.x.slice(ndarray::s![start..end, ..]),
            &probe.labels[start..end],
            probe.mask,
            T::zero(),
        )?;
        let w = T::lit((end - start) as f64 / n as f64);
        acc.flat.scaled_add(w, &g.grad.flat);
        start = end;
    }
    Ok(acc)
}

/// Hindrance an old set would suffer on the new task under the orthogonal
/// condition of its stored spaces.
pub fn hindrance_for_old_set<T: Scalar>(
    encoder: &Encoder<T>,
    set: &PromptSet<T>,
    spaces: &LayerSpaces<T>,
    probe: &Probe<'_, T>,
) -> Result<Hfc<T>> {
    let g = probe_gradient(encoder, set, probe)?;
    hindrance(&g, spaces)
}

/// Hindrance a copy of `set` would suffer if it were only held orthogonal
/// to the pre-trained space of the new task.
pub fn dynamic_threshold<T: Scalar>(
    encoder: &Encoder<T>,
    set: &PromptSet<T>,
    pre_spaces: &LayerSpaces<T>,
    probe: &Probe<'_, T>,
) -> Result<Hfc<T>> {
    let clone = set.clone();
    let g = probe_gradient(encoder, &clone, probe)?;
    hindrance(&g, pre_spaces)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HindranceRecord<T> {
    pub set_id: usize,
    pub hfc_old: Hfc<T>,
    pub hfc_pre: Hfc<T>,
    pub z: T,
}

impl<T: Scalar> HindranceRecord<T> {
    pub fn new(set_id: usize, hfc_old: Hfc<T>, hfc_pre: Hfc<T>) -> Self {
        Self {
            set_id,
            hfc_old,
            hfc_pre,
            z: hfc_old.angle - hfc_pre.angle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "set")]
pub enum DecisionKind {
    Grow,
    Reuse(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowDecision<T> {
    pub kind: DecisionKind,
    pub records: Vec<HindranceRecord<T>>,
}

/// Grow when every old set is more hindered than the threshold; otherwise
/// reuse the least hindered one.
pub fn decide<T: Scalar>(records: Vec<HindranceRecord<T>>) -> GrowDecision<T> {
    let target = records
        .iter()
        .fold(None::<&HindranceRecord<T>>, |best, r| match best {
            Some(b) if b.z < r.z || (b.z == r.z && b.set_id < r.set_id) => Some(b),
            _ => Some(r),
        });
    let kind = match target {
        Some(r) if !(r.z > T::zero()) => DecisionKind::Reuse(r.set_id),
        _ => DecisionKind::Grow,
    };
    GrowDecision { kind, records }
}

/// `g − (1 − φ) Proj_{S^pre}(g)`.
pub fn apply_cpk<T: Scalar>(
    g: &GradientVector<T>,
    phi: T,
    pre_spaces: &LayerSpaces<T>,
) -> Result<GradientVector<T>> {
    if !(phi >= T::zero() && phi <= T::one()) {
        return Err(Error::InvalidFraction(phi.as_f64()));
    }
    if phi == T::one() {
        return Ok(g.clone());
    }
    let p = project_gradient(g, pre_spaces)?;
    let mut out = g.clone();
    out.flat.scaled_add(-(T::one() - phi), &p.flat);
    Ok(out)
}

/// How candidate sets are ranked for frozen reuse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FftRule {
    /// `‖Proj_S g‖ / ‖g‖`, descending.
    #[default]
    ProjectionFraction,
    /// Angle between `g` and `Proj_S g`, descending.
    Angle,
}

pub fn fft_score<T: Scalar>(
    g: &GradientVector<T>,
    spaces: &LayerSpaces<T>,
    rule: FftRule,
) -> Result<T> {
    let gn = g.norm();
    if !(gn > T::zero()) {
        return Ok(T::zero());
    }
    let p = project_gradient(g, spaces)?;
    match rule {
        FftRule::ProjectionFraction => Ok(p.norm() / gn),
        FftRule::Angle => Ok(hfc(g.flat.view(), p.flat.view())?.angle),
    }
}

/// One candidate: a set id, the new task's gradient through that set, and
/// the set's stored spaces.
pub struct FftCandidate<'a, T> {
    pub set_id: usize,
    pub grad: &'a GradientVector<T>,
    pub spaces: &'a LayerSpaces<T>,
}

/// Top-`n` set ids by score, ties to the lowest id.
pub fn select_fft_sets<T: Scalar>(
    candidates: &[FftCandidate<'_, T>],
    n: usize,
    rule: FftRule,
) -> Result<Vec<usize>> {
    if n > candidates.len() {
        return Err(Error::Config(format!(
            "cannot pick {n} frozen sets from {} candidates",
            candidates.len()
        )));
    }
    let mut scored = candidates
        .iter()
        .map(|c| Ok((c.set_id, fft_score(c.grad, c.spaces, rule)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(scored.into_iter().take(n).map(|(id, _)| id).collect())
}

/// Active prompts followed, per prompted block, by the reused sets' prompt
/// tokens. Only the active part is ever trained.
pub fn compose_prompts<T: Scalar>(
    active: &PromptSet<T>,
    reused: &[&PromptSet<T>],
) -> Result<Array3<T>> {
    frozen_attachment(reused, active.prompts.len_of(Axis(0)), active.key.len()).map(|f| match f {
        Some(f) => ndarray::concatenate![Axis(1), active.prompts, f],
        None => active.prompts.clone(),
    })
}

/// Concatenated prompt tokens of `reused`, or `None` when empty.
pub fn frozen_attachment<T: Scalar>(
    reused: &[&PromptSet<T>],
    n_layers: usize,
    dim: usize,
) -> Result<Option<Array3<T>>> {
    if reused.is_empty() {
        return Ok(None);
    }
    for s in reused {
        let (l, _, d) = s.prompts.dim();
        if l != n_layers || d != dim {
            return Err(Error::Shape(format!(
                "set {} prompts {:?} do not match {n_layers} blocks of width {dim}",
                s.id,
                s.prompts.dim()
            )));
        }
    }
    let views: Vec<_> = reused.iter().map(|s| s.prompts.view()).collect();
    Ok(Some(
        ndarray::concatenate(Axis(1), &views).expect("shapes checked"),
    ))
}
