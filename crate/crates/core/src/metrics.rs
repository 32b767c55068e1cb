//! Accuracy matrix and the FAA / FFM / PRA / SSP summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a[i][t]`: accuracy on task `i` after training task `t` (0-based, `i ≤ t`).
/// Retrieval counters share the same indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n: usize,
    acc: Vec<Vec<Option<f64>>>,
    hits: Vec<Vec<u64>>,
    totals: Vec<Vec<u64>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n: n_tasks,
            acc: vec![vec![None; n_tasks]; n_tasks],
            hits: vec![vec![0; n_tasks]; n_tasks],
            totals: vec![vec![0; n_tasks]; n_tasks],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n
    }

    fn check(&self, i: usize, t: usize) -> Result<()> {
        if t >= self.n || i > t {
            return Err(Error::Shape(format!(
                "entry ({i}, {t}) outside the lower triangle of a {n}×{n} matrix",
                n = self.n
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, i: usize, t: usize, accuracy: f64) -> Result<()> {
        self.check(i, t)?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::InvalidFraction(accuracy));
        }
        self.acc[i][t] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.acc.get(i).and_then(|r| r.get(t)).copied().flatten()
    }

    pub fn record_retrieval(&mut self, i: usize, t: usize, hits: u64, total: u64) -> Result<()> {
        self.check(i, t)?;
        if hits > total {
            return Err(Error::Shape(format!("{hits} hits out of {total}")));
        }
        self.hits[i][t] = hits;
        self.totals[i][t] = total;
        Ok(())
    }

    pub fn retrieval(&self, i: usize, t: usize) -> (u64, u64) {
        (self.hits[i][t], self.totals[i][t])
    }

    /// Entries of the final column, in task order.
    pub fn final_column(&self) -> Result<Vec<f64>> {
        if self.n == 0 {
            return Err(Error::IncompleteMatrix("no tasks".into()));
        }
        let t = self.n - 1;
        (0..self.n)
            .map(|i| {
                self.acc[i][t].ok_or_else(|| {
                    Error::IncompleteMatrix(format!(
                        "task {} not evaluated after the last task",
                        i + 1
                    ))
                })
            })
            .collect()
    }

    /// Comma-separated matrix, one row per evaluated task, blanks above the
    /// diagonal.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task");
        for t in 0..self.n {
            s.push_str(&format!(",after_{}", t + 1));
        }
        s.push('\n');
        for i in 0..self.n {
            s.push_str(&(i + 1).to_string());
            for t in 0..self.n {
                s.push(',');
                if let Some(a) = self.acc[i][t] {
                    s.push_str(&format!("{a:.6}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean of the final column.
pub fn faa(m: &AccuracyMatrix) -> Result<f64> {
    let col = m.final_column()?;
    Ok(col.iter().sum::<f64>() / col.len() as f64)
}

/// Mean over earlier tasks of the largest drop from any intermediate
/// accuracy to the final one.
pub fn ffm(m: &AccuracyMatrix) -> Result<f64> {
    let n = m.n_tasks();
    if n < 2 {
        return Err(Error::TooFewTasks);
    }
    let last = m.final_column()?;
    let mut total = 0.0;
    for (i, &a_final) in last.iter().enumerate().take(n - 1) {
        let mut worst = f64::NEG_INFINITY;
        for t in i..n - 1 {
            let a = m.get(i, t).ok_or_else(|| {
                Error::IncompleteMatrix(format!(
                    "task {} not evaluated after task {}",
                    i + 1,
                    t + 1
                ))
            })?;
            worst = worst.max(a - a_final);
        }
        total += worst;
    }
    Ok(total / (n - 1) as f64)
}

/// Mean over tasks of the per-task retrieval hit rate after the last task.
pub fn pra(m: &AccuracyMatrix) -> Result<f64> {
    let n = m.n_tasks();
    if n == 0 {
        return Err(Error::IncompleteMatrix("no tasks".into()));
    }
    let t = n - 1;
    let mut total = 0.0;
    for i in 0..n {
        let (h, tot) = m.retrieval(i, t);
        if tot == 0 {
            return Err(Error::ZeroRetrievals(i + 1));
        }
        total += h as f64 / tot as f64;
    }
    Ok(total / n as f64)
}

/// Number of selectable prompt sets.
pub fn ssp<T: crate::Scalar>(pool: &crate::pool::PromptPool<T>) -> usize {
    pool.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub faa: f64,
    pub ffm: Option<f64>,
    pub pra: f64,
    pub ssp: usize,
    pub per_task: Vec<f64>,
}

pub fn summarize(m: &AccuracyMatrix, ssp: usize) -> Result<Summary> {
    Ok(Summary {
        faa: faa(m)?,
        ffm: if m.n_tasks() >= 2 {
            Some(ffm(m)?)
        } else {
            None
        },
        pra: pra(m)?,
        ssp,
        per_task: m.final_column()?,
    })
}
