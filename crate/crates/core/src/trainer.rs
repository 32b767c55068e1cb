//! Task-by-task learner: decide grow or reuse, train the active prompt set
//! under the soft pre-trained constraint (and the orthogonal condition when
//! reusing), then build or extend the set's feature spaces.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lw2g::{
    apply_cpk, complement_gradient, decide, frozen_attachment, hindrance, probe_gradient,
    project_gradient, select_fft_sets, DecisionKind, FftCandidate, FftRule, HindranceRecord, Probe,
};
use crate::metrics::AccuracyMatrix;
use crate::model::{Encoder, GradientVector, HeadMask, PromptSet};
use crate::pool::PromptPool;
use crate::subspace::{
    extend_basis, k_rank_basis, project_complement, Basis, EncoderMode, LayerSpaces, Provenance,
    RepresentationMatrix,
};
use crate::taskstream::TaskData;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Lw2g,
    /// Baseline: one fresh set per task, no constraint or projection.
    GrowAlways,
    /// Every task after the first reuses set 0.
    SingleSet,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lw2g" => Ok(Mode::Lw2g),
            "grow_always" => Ok(Mode::GrowAlways),
            "single_set" => Ok(Mode::SingleSet),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected lw2g, grow_always or single_set"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Lw2g => "lw2g",
            Mode::GrowAlways => "grow_always",
            Mode::SingleSet => "single_set",
        })
    }
}

/// Which forward pass feeds the representation matrix of a finished task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepSource {
    #[default]
    Prompted,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eps_task: f64,
    pub eps_pre: f64,
    pub phi: f64,
    pub n_fft: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for prompts and keys.
    pub lr: f64,
    /// Step size for the current task's head rows.
    pub head_lr: f64,
    /// Weight of the key–query cosine pull.
    pub key_weight: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Probe subset size for the grow/reuse decision.
    pub d_sub: usize,
    /// Samples feeding each task's representation matrix.
    pub rep_samples: usize,
    pub fft_rule: FftRule,
    pub rep_source: RepSource,
    /// On reuse, keep key updates orthogonal to the query features of the
    /// set's earlier tasks.
    pub project_keys: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eps_task: 0.99,
            eps_pre: 0.99,
            phi: 0.5,
            n_fft: 1,
            epochs: 10,
            batch_size: 16,
            lr: 0.1,
            head_lr: 0.5,
            key_weight: 1.0,
            seed: 0,
            mode: Mode::Lw2g,
            d_sub: 256,
            rep_samples: 512,
            fft_rule: FftRule::ProjectionFraction,
            rep_source: RepSource::Prompted,
            project_keys: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("eps_task", self.eps_task), ("eps_pre", self.eps_pre)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return bad(format!("phi must lie in [0, 1], got {}", self.phi));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.d_sub == 0 || self.rep_samples == 0 {
            return bad("epochs, batch_size, d_sub and rep_samples must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("head_lr", self.head_lr),
            ("key_weight", self.key_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Stored feature spaces: per pool set, and the pre-trained space of each
/// task.
#[derive(Clone, PartialEq)]
pub struct SubspaceMemory<T> {
    pub old_spaces: BTreeMap<usize, LayerSpaces<T>>,
    pub pre_spaces: BTreeMap<u32, LayerSpaces<T>>,
    /// Per pool set, span of the query features its tasks were trained on.
    pub key_spaces: BTreeMap<usize, Basis<T>>,
}

impl<T> Default for SubspaceMemory<T> {
    fn default() -> Self {
        Self {
            old_spaces: BTreeMap::new(),
            pre_spaces: BTreeMap::new(),
            key_spaces: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for SubspaceMemory<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubspaceMemory")
            .field("old_spaces", &self.old_spaces)
            .field("pre_spaces", &self.pre_spaces)
            .field(
                "key_ranks",
                &self
                    .key_spaces
                    .values()
                    .map(|b| b.rank())
                    .collect::<Vec<_>>(),
            )
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport<T> {
    pub task: u32,
    pub decision: DecisionKind,
    pub records: Vec<HindranceRecord<T>>,
    /// Sets whose prompts were attached frozen to a newly grown set.
    pub fft_sets: Vec<usize>,
    /// Per prompted block, `‖Proj_{S_old} Δp‖ / ‖Δp‖` on reuse.
    pub drift: Option<Vec<f64>>,
    pub ranks_after: Vec<usize>,
    pub pre_ranks: Vec<usize>,
    pub final_loss: f64,
    pub pool_after: BTreeMap<usize, Vec<u32>>,
}

/// Accuracy and retrieval results for one task's test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskEval {
    pub accuracy: f64,
    pub oracle_accuracy: f64,
    pub hits: u64,
    pub total: u64,
}

#[derive(Clone)]
pub struct Learner<T> {
    pub cfg: TrainConfig,
    pub encoder: Encoder<T>,
    pub pool: PromptPool<T>,
    pub memory: SubspaceMemory<T>,
    task_classes: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> std::fmt::Debug for Learner<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Learner")
            .field("cfg", &self.cfg)
            .field("pool", &self.pool.registry())
            .field("memory", &self.memory)
            .finish_non_exhaustive()
    }
}

fn reps_to_matrices<T: Scalar>(
    layers: Vec<Array2<T>>,
    task: u32,
    mode: EncoderMode,
) -> Result<Vec<RepresentationMatrix<T>>> {
    layers
        .into_iter()
        .map(|r| RepresentationMatrix::new(r, Provenance { task, mode }))
        .collect()
}

fn argmax<T: Scalar>(row: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Learner<T> {
    pub fn new(cfg: TrainConfig, encoder: Encoder<T>) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            encoder,
            pool: PromptPool::new(),
            memory: SubspaceMemory::default(),
            task_classes: Vec::new(),
            rng,
        })
    }

    /// Reassembles a learner from stored state; used when loading snapshots.
    pub fn from_parts(
        cfg: TrainConfig,
        encoder: Encoder<T>,
        pool: PromptPool<T>,
        memory: SubspaceMemory<T>,
        task_classes: Vec<Vec<usize>>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if pool
            .registry()
            .assignments()
            .values()
            .map(Vec::len)
            .sum::<usize>()
            != task_classes.len()
        {
            return Err(Error::Snapshot(format!(
                "{} task class lists for a pool holding {} task(s)",
                task_classes.len(),
                pool.registry()
                    .assignments()
                    .values()
                    .map(Vec::len)
                    .sum::<usize>()
            )));
        }
        Ok(Self {
            cfg,
            encoder,
            pool,
            memory,
            task_classes,
            rng,
        })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn tasks_seen(&self) -> usize {
        self.task_classes.len()
    }

    pub fn task_classes(&self) -> &[Vec<usize>] {
        &self.task_classes
    }

    fn seen_mask(&self) -> HeadMask {
        HeadMask::only(
            self.encoder.head.n_classes(),
            self.task_classes.iter().flatten().copied(),
        )
    }

    /// Rows of `x` at a seeded random subset of at most `n` indices.
    fn subset(&mut self, x: ArrayView2<T>, y: &[usize], n: usize) -> (Array2<T>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..x.nrows()).collect();
        idx.shuffle(&mut self.rng);
        idx.truncate(n.min(x.nrows()));
        idx.sort_unstable();
        (x.select(Axis(0), &idx), idx.iter().map(|&i| y[i]).collect())
    }

    fn check_task(&self, data: &TaskData<T>) -> Result<()> {
        let expected = self.task_classes.len() as u32 + 1;
        if data.task != expected {
            return Err(Error::OutOfOrder {
                expected,
                got: data.task,
            });
        }
        for &c in &data.classes {
            if self.task_classes.iter().flatten().any(|&o| o == c) {
                return Err(Error::ClassOverlap(c));
            }
        }
        if data.train_x.nrows() == 0 || data.train_x.nrows() != data.train_y.len() {
            return Err(Error::EmptyBatch);
        }
        if let Some(&bad) = data.train_y.iter().find(|l| !data.classes.contains(l)) {
            return Err(Error::LabelMasked { label: bad });
        }
        Ok(())
    }

    fn pre_spaces(&self, x: ArrayView2<T>, task: u32) -> Result<LayerSpaces<T>> {
        let reps = self.encoder.block_representations(None, x)?;
        let reps = reps_to_matrices(reps, task, EncoderMode::Query)?;
        LayerSpaces::build(
            &reps,
            T::lit(self.cfg.eps_pre),
            &format!("pre / task {task}"),
        )
    }

    /// Grow-or-reuse records for every pool set.
    fn hindrance_records(
        &self,
        probe: &Probe<'_, T>,
        pre: &LayerSpaces<T>,
    ) -> Result<Vec<HindranceRecord<T>>> {
        let mut out = Vec::with_capacity(self.pool.len());
        for set in self.pool.sets() {
            let spaces = self
                .memory
                .old_spaces
                .get(&set.id)
                .ok_or(Error::UnknownSet(set.id))?;
            // the threshold probes a clone of the same set: one gradient serves both
            let g = probe_gradient(&self.encoder, set, probe)?;
            out.push(HindranceRecord::new(
                set.id,
                hindrance(&g, spaces)?,
                hindrance(&g, pre)?,
            ));
        }
        Ok(out)
    }

    fn choose_fft(&self, probe: &Probe<'_, T>) -> Result<Vec<usize>> {
        let n = self.cfg.n_fft.min(self.pool.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let grads = self
            .pool
            .sets()
            .iter()
            .map(|s| probe_gradient(&self.encoder, s, probe))
            .collect::<Result<Vec<_>>>()?;
        let cands: Vec<_> = self
            .pool
            .sets()
            .iter()
            .zip(&grads)
            .map(|(s, g)| FftCandidate {
                set_id: s.id,
                grad: g,
                spaces: &self.memory.old_spaces[&s.id],
            })
            .collect();
        select_fft_sets(&cands, n, self.cfg.fft_rule)
    }

    /// Runs the full per-task procedure and commits the result to the pool
    /// and memory.
    pub fn train_task(&mut self, data: &TaskData<T>) -> Result<TaskReport<T>> {
        self.check_task(data)?;
        let task = data.task;
        let n_classes = data.classes.iter().max().map_or(0, |m| m + 1);
        self.encoder.head.grow_to(n_classes, &mut self.rng);
        let mask = HeadMask::only(self.encoder.head.n_classes(), data.classes.iter().copied());
        let baseline = self.cfg.mode == Mode::GrowAlways;

        let (sub_x, sub_y) = self.subset(data.train_x.view(), &data.train_y, self.cfg.d_sub);
        let pre = self.pre_spaces(sub_x.view(), task)?;
        let probe = Probe {
            x: sub_x.view(),
            labels: &sub_y,
            mask: &mask,
            batch_size: self.cfg.batch_size,
        };

        let (decision, records) = if self.pool.is_empty() {
            (DecisionKind::Grow, Vec::new())
        } else {
            match self.cfg.mode {
                Mode::GrowAlways => (DecisionKind::Grow, Vec::new()),
                Mode::SingleSet => (DecisionKind::Reuse(0), Vec::new()),
                Mode::Lw2g => {
                    let d = decide(self.hindrance_records(&probe, &pre)?);
                    (d.kind, d.records)
                }
            }
        };

        let mut fft_sets = Vec::new();
        let (mut set, old, old_keys) = match decision {
            DecisionKind::Grow => {
                let mut set =
                    PromptSet::random(self.pool.len(), self.encoder.config(), &mut self.rng);
                if !baseline {
                    fft_sets = self.choose_fft(&probe)?;
                    let reused: Vec<&PromptSet<T>> = fft_sets
                        .iter()
                        .map(|&i| self.pool.get(i))
                        .collect::<Result<_>>()?;
                    set.frozen_extra =
                        frozen_attachment(&reused, set.prompts.len_of(Axis(0)), set.key.len())?;
                }
                (set, None, None)
            }
            DecisionKind::Reuse(j) => {
                let spaces = self
                    .memory
                    .old_spaces
                    .get(&j)
                    .ok_or(Error::UnknownSet(j))?
                    .clone();
                let keys = self
                    .memory
                    .key_spaces
                    .get(&j)
                    .ok_or(Error::UnknownSet(j))?
                    .clone();
                (self.pool.get(j)?.clone(), Some(spaces), Some(keys))
            }
        };

        let start = set.prompts.clone();
        let final_loss = self.fit(
            &mut set,
            data,
            &mask,
            &pre,
            old.as_ref(),
            old_keys.as_ref(),
            baseline,
        )?;

        let drift = match &old {
            Some(spaces) => Some(drift_ratios(&start, &set.prompts, spaces)?),
            None => None,
        };

        // feature space of the trained configuration
        let (rep_x, _) = self.subset(data.train_x.view(), &data.train_y, self.cfg.rep_samples);
        let (reps, mode) = match self.cfg.rep_source {
            RepSource::Prompted => (
                self.encoder
                    .block_representations(Some(set.composed().view()), rep_x.view())?,
                EncoderMode::Prompted,
            ),
            RepSource::Query => (
                self.encoder.block_representations(None, rep_x.view())?,
                EncoderMode::Query,
            ),
        };
        let reps = reps_to_matrices(reps, task, mode)?;
        let eps = T::lit(self.cfg.eps_task);
        let queries = RepresentationMatrix::new(
            self.encoder.forward_query(rep_x.view())?,
            Provenance {
                task,
                mode: EncoderMode::Query,
            },
        )?;
        let set_id = match decision {
            DecisionKind::Grow => {
                let id = self.pool.add_set(set, task)?;
                let spaces = LayerSpaces::build(&reps, eps, &format!("set {id}"))?;
                self.memory.old_spaces.insert(id, spaces);
                let keys = k_rank_basis(&queries, eps, format!("keys / set {id}"))?;
                self.memory.key_spaces.insert(id, keys);
                id
            }
            DecisionKind::Reuse(j) => {
                let extended = old
                    .as_ref()
                    .expect("reuse keeps its spaces")
                    .extend(&reps, eps)?;
                self.memory.old_spaces.insert(j, extended);
                let keys = extend_basis(
                    old_keys.as_ref().expect("reuse keeps its key space"),
                    &queries,
                    eps,
                )?;
                self.memory.key_spaces.insert(j, keys);
                *self.pool.get_mut(j)? = set;
                self.pool.assign_task(j, task)?;
                j
            }
        };
        let pre_ranks = pre.ranks();
        self.memory.pre_spaces.insert(task, pre);
        self.task_classes.push(data.classes.clone());

        Ok(TaskReport {
            task,
            decision,
            records,
            fft_sets,
            drift,
            ranks_after: self.memory.old_spaces[&set_id].ranks(),
            pre_ranks,
            final_loss,
            pool_after: self.pool.registry().assignments(),
        })
    }

    /// SGD over the task; returns the mean cross-entropy of the last epoch.
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        set: &mut PromptSet<T>,
        data: &TaskData<T>,
        mask: &HeadMask,
        pre: &LayerSpaces<T>,
        old: Option<&LayerSpaces<T>>,
        old_keys: Option<&Basis<T>>,
        baseline: bool,
    ) -> Result<f64> {
        let n = data.train_x.nrows();
        let bs = self.cfg.batch_size;
        let lr = T::lit(self.cfg.lr);
        let head_lr = T::lit(self.cfg.head_lr);
        let phi = T::lit(self.cfg.phi);
        let kw = T::lit(self.cfg.key_weight);
        let mut order: Vec<usize> = (0..n).collect();
        let mut last = 0.0;
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(bs) {
                let xb = data.train_x.select(Axis(0), chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| data.train_y[i]).collect();
                let frozen = set.frozen_extra.clone();
                let pg = self.encoder.grad_prompts(
                    set,
                    frozen.as_ref().map(|f| f.view()),
                    xb.view(),
                    &yb,
                    mask,
                    kw,
                )?;
                loss_sum += pg.ce_loss.as_f64() * chunk.len() as f64;
                let g = if baseline {
                    pg.grad
                } else {
                    let g = apply_cpk(&pg.grad, phi, pre)?;
                    match old {
                        Some(spaces) => complement_gradient(&g, spaces)?,
                        None => g,
                    }
                };
                let mut g = g;
                if let (Some(b), true) = (old_keys, self.cfg.project_keys && !baseline) {
                    let k = project_complement(g.key(), b)?;
                    g.key_mut().assign(&k);
                }
                sgd_step(set, &g, lr);
                for &c in &data.classes {
                    let gw = pg.head.w.row(c).to_owned();
                    self.encoder.head.w.row_mut(c).scaled_add(-head_lr, &gw);
                    let gb = pg.head.b[c];
                    self.encoder.head.b[c] -= head_lr * gb;
                }
            }
            last = loss_sum / n as f64;
        }
        Ok(last)
    }

    /// Logits of `x` under pool set `set_id` with `mask`.
    pub fn logits(&self, set_id: usize, x: ArrayView2<T>, mask: &HeadMask) -> Result<Array2<T>> {
        let set = self.pool.get(set_id)?;
        self.encoder.forward_prompted(set, x, mask)
    }

    /// Accuracy of `x` under a fixed set and mask.
    pub fn accuracy_with(
        &self,
        set_id: usize,
        x: ArrayView2<T>,
        y: &[usize],
        mask: &HeadMask,
    ) -> Result<f64> {
        let logits = self.logits(set_id, x, mask)?;
        let correct = logits
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(r, &label)| argmax(r.view()) == label)
            .count();
        Ok(correct as f64 / y.len().max(1) as f64)
    }

    /// Class-incremental evaluation of one seen task: retrieval picks the
    /// set, the mask spans every seen class. Also reports the accuracy when
    /// the set that trained the task is used directly.
    pub fn evaluate_task(&self, data: &TaskData<T>) -> Result<TaskEval> {
        let truth =
            self.pool.registry().set_of(data.task).ok_or_else(|| {
                Error::IncompleteMatrix(format!("task {} not trained", data.task))
            })?;
        let mask = self.seen_mask();
        let q = self.encoder.forward_query(data.test_x.view())?;
        let picks = q
            .rows()
            .into_iter()
            .map(|r| self.pool.retrieve(r))
            .collect::<Result<Vec<_>>>()?;
        let mut correct = 0usize;
        for set_id in 0..self.pool.len() {
            let idx: Vec<usize> = (0..picks.len()).filter(|&i| picks[i] == set_id).collect();
            if idx.is_empty() {
                continue;
            }
            let xs = data.test_x.select(Axis(0), &idx);
            let logits = self.logits(set_id, xs.view(), &mask)?;
            correct += idx
                .iter()
                .zip(logits.rows())
                .filter(|(&i, r)| argmax(r.view()) == data.test_y[i])
                .count();
        }
        let hits = picks.iter().filter(|&&p| p == truth).count() as u64;
        let n = data.test_y.len();
        Ok(TaskEval {
            accuracy: correct as f64 / n as f64,
            oracle_accuracy: self.accuracy_with(truth, data.test_x.view(), &data.test_y, &mask)?,
            hits,
            total: n as u64,
        })
    }

    /// Fills column `t` (0-based) of both matrices for every task up to `t`.
    pub fn evaluate_into(
        &self,
        tasks: &[TaskData<T>],
        t: usize,
        retrieval: &mut AccuracyMatrix,
        oracle: &mut AccuracyMatrix,
    ) -> Result<()> {
        for (i, data) in tasks.iter().enumerate().take(t + 1) {
            let e = self.evaluate_task(data)?;
            retrieval.set(i, t, e.accuracy)?;
            retrieval.record_retrieval(i, t, e.hits, e.total)?;
            oracle.set(i, t, e.oracle_accuracy)?;
            oracle.record_retrieval(i, t, e.total, e.total)?;
        }
        Ok(())
    }
}

/// `p ← p − lr · g` for the active prompts and key.
pub fn sgd_step<T: Scalar>(set: &mut PromptSet<T>, g: &GradientVector<T>, lr: T) {
    for l in 0..g.layout.n_layers {
        let rows = g.prompt_rows(l);
        set.prompts
            .index_axis_mut(Axis(0), l)
            .scaled_add(-lr, &rows);
    }
    set.key.scaled_add(-lr, &g.key());
}

/// Orthogonal-condition step: the update is restricted to the complement of
/// `old` block by block.
pub fn orthogonal_step<T: Scalar>(
    set: &mut PromptSet<T>,
    g: &GradientVector<T>,
    old: &LayerSpaces<T>,
    lr: T,
) -> Result<()> {
    let c = complement_gradient(g, old)?;
    sgd_step(set, &c, lr);
    Ok(())
}

/// Per block, the fraction of the prompt change lying inside `spaces`.
/// Zero change counts as zero drift.
pub fn drift_ratios<T: Scalar>(
    before: &Array3<T>,
    after: &Array3<T>,
    spaces: &LayerSpaces<T>,
) -> Result<Vec<f64>> {
    let delta = after - before;
    let (l, pl, d) = delta.dim();
    let layout = crate::model::GradientLayout {
        n_layers: l,
        prompt_len: pl,
        dim: d,
    };
    let mut flat = Array1::zeros(layout.len());
    flat.slice_mut(s![..layout.key_offset()])
        .assign(&Array1::from_iter(delta.iter().copied()));
    let g = GradientVector::from_flat(flat, layout)?;
    let p = project_gradient(&g, spaces)?;
    Ok((0..l)
        .map(|i| {
            let total = crate::linalg::frobenius_sq(g.prompt_rows(i)).sqrt();
            let inside = crate::linalg::frobenius_sq(p.prompt_rows(i)).sqrt();
            if total == T::zero() {
                0.0
            } else {
                (inside / total).as_f64()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, GradientLayout};
    use crate::subspace::Basis;
    use crate::taskstream::{generate, StreamSpec};
    use ndarray::arr1;

    fn tiny_stream(schedule: Vec<f64>) -> Vec<TaskData<f64>> {
        generate(&StreamSpec {
            n_tasks: schedule.len(),
            similarity_schedule: schedule,
            samples_per_class: 20,
            classes_per_task: 3,
            seed: 7,
            ..StreamSpec::default()
        })
        .unwrap()
    }

    fn learner(mode: Mode) -> Learner<f64> {
        let enc = Encoder::new(&EncoderConfig::default()).unwrap();
        Learner::new(
            TrainConfig {
                mode,
                epochs: 1,
                d_sub: 32,
                rep_samples: 32,
                ..TrainConfig::default()
            },
            enc,
        )
        .unwrap()
    }

    fn one_row_set(v: [f64; 2]) -> (PromptSet<f64>, GradientVector<f64>) {
        let set = PromptSet {
            id: 0,
            prompts: Array3::zeros((1, 1, 2)),
            key: Array1::zeros(2),
            frozen_extra: None,
        };
        let mut g = GradientVector::zeros(GradientLayout {
            n_layers: 1,
            prompt_len: 1,
            dim: 2,
        });
        g.prompt_rows_mut(0).row_mut(0).assign(&arr1(&v));
        (set, g)
    }

    #[test]
    fn orthogonal_step_examples() {
        let e1 = LayerSpaces::new(vec![Basis::from_columns(
            ndarray::array![[1.0], [0.0]],
            "o",
        )
        .unwrap()]);
        let (mut set, g) = one_row_set([2.0, 0.0]);
        orthogonal_step(&mut set, &g, &e1, 0.5).unwrap();
        assert_eq!(set.prompts, Array3::<f64>::zeros((1, 1, 2)));
        let (mut set, g) = one_row_set([2.0, 4.0]);
        let empty = LayerSpaces::empty(1, 2, "e");
        orthogonal_step(&mut set, &g, &empty, 0.5).unwrap();
        assert_eq!(
            set.prompts.iter().copied().collect::<Vec<_>>(),
            vec![-1.0, -2.0]
        );
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("single_set".parse::<Mode>().unwrap(), Mode::SingleSet);
        assert!("sometimes".parse::<Mode>().is_err());
        assert_eq!(Mode::GrowAlways.to_string(), "grow_always");
    }

    #[test]
    fn grow_always_opens_one_set_per_task() {
        let tasks = tiny_stream(vec![0.0, 1.0, 0.0]);
        let mut l = learner(Mode::GrowAlways);
        for t in &tasks {
            let r = l.train_task(t).unwrap();
            assert_eq!(r.decision, DecisionKind::Grow);
        }
        assert_eq!(l.pool.len(), 3);
    }

    #[test]
    fn single_set_keeps_one_set_and_projects() {
        let tasks = tiny_stream(vec![0.0, 1.0, 0.0]);
        let mut l = learner(Mode::SingleSet);
        let mut ranks = Vec::new();
        for t in &tasks {
            let r = l.train_task(t).unwrap();
            if let Some(d) = &r.drift {
                assert!(d.iter().all(|&x| x < 1e-5), "drift {d:?}");
            }
            ranks.push(r.ranks_after.clone());
        }
        assert_eq!(l.pool.len(), 1);
        assert_eq!(l.pool.registry().tasks(0).unwrap(), &[1, 2, 3]);
        for w in ranks.windows(2) {
            assert!(w[0].iter().zip(&w[1]).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn lw2g_records_every_set_and_evaluates() {
        let tasks = tiny_stream(vec![0.0, 0.0, 1.0]);
        let mut l = learner(Mode::Lw2g);
        let mut ret = AccuracyMatrix::new(3);
        let mut ora = AccuracyMatrix::new(3);
        for (t, data) in tasks.iter().enumerate() {
            let pool_before = l.pool.len();
            let r = l.train_task(data).unwrap();
            assert_eq!(r.records.len(), pool_before);
            for rec in &r.records {
                assert_eq!(rec.z, rec.hfc_old.angle - rec.hfc_pre.angle);
            }
            l.evaluate_into(&tasks, t, &mut ret, &mut ora).unwrap();
        }
        assert!(crate::metrics::faa(&ret).is_ok());
        assert!(crate::metrics::pra(&ret).is_ok());
    }

    #[test]
    fn rejects_out_of_order_and_overlap() {
        let tasks = tiny_stream(vec![0.0, 0.0]);
        let mut l = learner(Mode::Lw2g);
        assert!(matches!(
            l.train_task(&tasks[1]),
            Err(Error::OutOfOrder {
                expected: 1,
                got: 2
            })
        ));
        l.train_task(&tasks[0]).unwrap();
        let mut clash = tasks[1].clone();
        clash.classes[0] = 0;
        assert!(matches!(l.train_task(&clash), Err(Error::ClassOverlap(0))));
    }

    #[test]
    fn backbone_is_untouched_by_training() {
        let tasks = tiny_stream(vec![0.0, 1.0]);
        let mut l = learner(Mode::Lw2g);
        let before = l.encoder.backbone.fingerprint();
        for t in &tasks {
            l.train_task(t).unwrap();
        }
        assert_eq!(before, l.encoder.backbone.fingerprint());
    }
}
