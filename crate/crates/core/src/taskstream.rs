//! Seeded synthetic class-incremental task streams.
//!
//! A task draws its classes from a *family*: an orthonormal frame `F`
//! (`dim × rank`) and a center `c`. Class means are `c + F z` with Gaussian
//! `z`, samples are the class mean plus isotropic noise. A similarity of 1
//! reuses a uniformly chosen earlier task's family after a small rotation of
//! the frame and a small shift of the center; 0 draws a fresh family; values
//! in between blend the two.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::orthonormalize_against;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    /// One entry per task in `[0, 1]`; the first entry is ignored.
    pub similarity_schedule: Vec<f64>,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Columns of each family frame.
    pub frame_rank: usize,
    /// Norm of a family center.
    pub center_scale: f64,
    /// Standard deviation of class coordinates inside the frame.
    pub class_spread: f64,
    /// Per-coordinate standard deviation of sample noise.
    pub noise: f64,
    /// Largest frame rotation for a fully similar task, in degrees.
    pub jitter_deg: f64,
    /// Center shift of a fully similar task, relative to the center norm.
    pub mean_shift: f64,
    /// Fraction of each class used for training.
    pub train_fraction: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            n_tasks: 6,
            classes_per_task: 4,
            dim: 64,
            similarity_schedule: vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
            samples_per_class: 50,
            seed: 0,
            frame_rank: 4,
            center_scale: 6.0,
            class_spread: 5.0,
            noise: 0.2,
            jitter_deg: 10.0,
            mean_shift: 0.05,
            train_fraction: 0.8,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_tasks == 0 || self.classes_per_task == 0 || self.dim == 0 {
            return bad("n_tasks, classes_per_task and dim must be positive".into());
        }
        if self.similarity_schedule.len() != self.n_tasks {
            return bad(format!(
                "similarity_schedule has {} entries for {} tasks",
                self.similarity_schedule.len(),
                self.n_tasks
            ));
        }
        if self
            .similarity_schedule
            .iter()
            .any(|s| !(0.0..=1.0).contains(s))
        {
            return bad("similarity_schedule entries must lie in [0, 1]".into());
        }
        if self.frame_rank == 0 || self.frame_rank * 2 > self.dim {
            return bad(format!(
                "frame_rank must lie in [1, dim/2], got {}",
                self.frame_rank
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        let n_train = (self.samples_per_class as f64 * self.train_fraction).round() as usize;
        if n_train == 0 || n_train >= self.samples_per_class {
            return bad("samples_per_class too small for a train/test split".into());
        }
        for (name, v) in [
            ("center_scale", self.center_scale),
            ("class_spread", self.class_spread),
            ("noise", self.noise),
            ("jitter_deg", self.jitter_deg),
            ("mean_shift", self.mean_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Generator of a group of related tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Family {
    pub frame: Array2<f64>,
    pub center: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData<T> {
    /// 1-based.
    pub task: u32,
    /// Global labels of this task's classes.
    pub classes: Vec<usize>,
    pub train_x: Array2<T>,
    pub train_y: Vec<usize>,
    pub test_x: Array2<T>,
    pub test_y: Vec<usize>,
    pub family: Family,
    /// Task whose family was borrowed, if any.
    pub parent: Option<u32>,
}

impl<T: Scalar> TaskData<T> {
    /// Writes `label,f0,...` rows for the train and test split.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.train_x.ncols()).map(|i| format!("f{i}")).collect();
        writeln!(out, "label,{}", header.join(","))?;
        for (x, y) in [(&self.train_x, &self.train_y), (&self.test_x, &self.test_y)] {
            for (row, label) in x.rows().into_iter().zip(y.iter()) {
                write!(out, "{label}")?;
                for v in row {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn random_frame(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> Array2<f64> {
    loop {
        let m = gaussian_matrix(rng, dim, rank);
        let f = orthonormalize_against(Array2::zeros((dim, 0)).view(), m.view(), 1e-6);
        if f.ncols() == rank {
            return f;
        }
    }
}

fn fresh_family(rng: &mut ChaCha8Rng, spec: &StreamSpec) -> Family {
    let frame = random_frame(rng, spec.dim, spec.frame_rank);
    let dir: Array1<f64> = Array1::from_shape_fn(spec.dim, |_| StandardNormal.sample(rng));
    let n = dir.dot(&dir).sqrt();
    Family {
        frame,
        center: dir * (spec.center_scale / n),
    }
}

/// `F cos θ + G sin θ` with `G` orthonormal and orthogonal to `F`, and the
/// center moved by `shift · ‖c‖` in a random direction.
fn jitter(rng: &mut ChaCha8Rng, fam: &Family, max_deg: f64, shift: f64) -> Family {
    let (dim, rank) = fam.frame.dim();
    let theta = rng.random_range(0.0..=max_deg).to_radians();
    let g = loop {
        let m = gaussian_matrix(rng, dim, rank);
        let g = orthonormalize_against(fam.frame.view(), m.view(), 1e-6);
        if g.ncols() == rank {
            break g;
        }
    };
    let frame = &fam.frame * theta.cos() + &g * theta.sin();
    let dir: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
    let cn = fam.center.dot(&fam.center).sqrt();
    let center = &fam.center + &(dir.clone() * (shift * cn / dir.dot(&dir).sqrt()));
    Family { frame, center }
}

fn blend(a: &Family, b: &Family, s: f64) -> Family {
    let m = &a.frame * s + &b.frame * (1.0 - s);
    let rank = m.ncols();
    let mut frame = orthonormalize_against(Array2::zeros((m.nrows(), 0)).view(), m.view(), 1e-9);
    if frame.ncols() < rank {
        frame = a.frame.clone();
    }
    Family {
        frame,
        center: &a.center * s + &b.center * (1.0 - s),
    }
}

/// Generates every task of the stream. Identical specs give bit-identical
/// data.
pub fn generate<T: Scalar>(spec: &StreamSpec) -> Result<Vec<TaskData<T>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut families: Vec<Family> = Vec::with_capacity(spec.n_tasks);
    let mut out = Vec::with_capacity(spec.n_tasks);
    let n_train = (spec.samples_per_class as f64 * spec.train_fraction).round() as usize;

    for t in 0..spec.n_tasks {
        let s = if t == 0 {
            0.0
        } else {
            spec.similarity_schedule[t]
        };
        let fresh = fresh_family(&mut rng, spec);
        let (family, parent) = if s > 0.0 {
            let p = rng.random_range(0..t);
            let near = jitter(&mut rng, &families[p], spec.jitter_deg, spec.mean_shift);
            (blend(&near, &fresh, s), Some(p as u32 + 1))
        } else {
            (fresh, None)
        };

        let first = t * spec.classes_per_task;
        let classes: Vec<usize> = (first..first + spec.classes_per_task).collect();
        let mut train: Vec<(Array1<f64>, usize)> = Vec::new();
        let mut test: Vec<(Array1<f64>, usize)> = Vec::new();
        for &c in &classes {
            let z = Array1::from_shape_fn(spec.frame_rank, |_| {
                spec.class_spread * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            });
            let mean: Array1<f64> = &family.center + &family.frame.dot(&z);
            for i in 0..spec.samples_per_class {
                let noise = Array1::from_shape_fn(spec.dim, |_| {
                    spec.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                });
                let x = &mean + &noise;
                if i < n_train {
                    train.push((x, c));
                } else {
                    test.push((x, c));
                }
            }
        }
        train.shuffle(&mut rng);

        let stack = |rows: &[(Array1<f64>, usize)]| -> (Array2<T>, Vec<usize>) {
            let mut x = Array2::zeros((rows.len(), spec.dim));
            for (i, (r, _)) in rows.iter().enumerate() {
                x.row_mut(i).assign(&r.mapv(T::lit));
            }
            (x, rows.iter().map(|r| r.1).collect())
        };
        let (train_x, train_y) = stack(&train);
        let (test_x, test_y) = stack(&test);
        families.push(family.clone());
        out.push(TaskData {
            task: t as u32 + 1,
            classes,
            train_x,
            train_y,
            test_x,
            test_y,
            family,
            parent,
        });
    }
    Ok(out)
}

/// Per-class means of the training split, one row per class in `classes`
/// order.
pub fn class_means<T: Scalar>(task: &TaskData<T>) -> Array2<T> {
    let mut m = Array2::zeros((task.classes.len(), task.train_x.ncols()));
    for (k, &c) in task.classes.iter().enumerate() {
        let idx: Vec<usize> = (0..task.train_y.len())
            .filter(|&i| task.train_y[i] == c)
            .collect();
        let sel = task.train_x.select(Axis(0), &idx);
        m.row_mut(k)
            .assign(&sel.mean_axis(Axis(0)).expect("non-empty class"));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::right_svd;
    use std::collections::HashSet;

    fn small(schedule: Vec<f64>, seed: u64) -> StreamSpec {
        StreamSpec {
            n_tasks: schedule.len(),
            similarity_schedule: schedule,
            seed,
            samples_per_class: 20,
            ..StreamSpec::default()
        }
    }

    #[test]
    fn same_spec_same_bits() {
        let spec = small(vec![0.0, 1.0, 0.5], 3);
        let a = generate::<f64>(&spec).unwrap();
        let b = generate::<f64>(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classes_are_disjoint_and_split_is_clean() {
        let tasks = generate::<f64>(&small(vec![0.0, 1.0, 0.0, 1.0], 1)).unwrap();
        let mut seen = HashSet::new();
        for t in &tasks {
            for &c in &t.classes {
                assert!(seen.insert(c));
            }
            assert_eq!(t.train_x.nrows(), 4 * 16);
            assert_eq!(t.test_x.nrows(), 4 * 4);
            let train: HashSet<Vec<u64>> = t
                .train_x
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            for r in t.test_x.rows() {
                let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
                assert!(!train.contains(&key));
            }
        }
    }

    #[test]
    fn independent_tasks_have_uncorrelated_means() {
        let mut cosines = Vec::new();
        for seed in 0..20 {
            let tasks = generate::<f64>(&small(vec![0.0, 0.0], seed)).unwrap();
            let a = class_means(&tasks[0]);
            let b = class_means(&tasks[1]);
            for ra in a.rows() {
                for rb in b.rows() {
                    cosines.push(ra.dot(&rb) / (ra.dot(&ra).sqrt() * rb.dot(&rb).sqrt()));
                }
            }
        }
        let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
        assert!(mean.abs() < 0.2, "mean cosine {mean}");
    }

    #[test]
    fn similar_task_frame_stays_within_jitter() {
        for seed in 0..10 {
            let tasks = generate::<f64>(&small(vec![0.0, 1.0], seed)).unwrap();
            let f1 = &tasks[0].family.frame;
            let f2 = &tasks[1].family.frame;
            assert_eq!(tasks[1].parent, Some(1));
            // principal angles: singular values of F1ᵀF2 are their cosines
            let svd = right_svd(f1.t().dot(f2).view());
            let smallest = svd
                .singular_values
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let angle = smallest.min(1.0).acos().to_degrees();
            assert!(angle <= 10.0 + 1e-9, "seed {seed}: {angle}°");
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let tasks = generate::<f32>(&small(vec![0.0], 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        tasks[0].write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("label,f0,f1"));
        assert!(header.ends_with("f63"));
        assert_eq!(lines.count(), 80);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut s = StreamSpec::default();
        s.similarity_schedule.pop();
        assert!(generate::<f64>(&s).is_err());
        let mut s = StreamSpec::default();
        s.similarity_schedule[2] = 1.5;
        assert!(s.validate().is_err());
    }
}
