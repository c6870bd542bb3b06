//! Greedy decoding and fine/coarse scoring.
//!
//! Fine score of one instance is the fraction of the `|target| + 1` positions
//! (the last one being end-of-output) where the decoder's argmax matches;
//! missing positions count as wrong. Coarse score is 1 exactly when fine is 1.
//! Report scores average the per-instance values.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::models::{decode_cap, Decode, Model};
use crate::scalar::Scalar;
use crate::tasks::{Task, TaskInstance};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Content tokens, end-of-output excluded.
    pub tokens: Vec<usize>,
    /// Every argmax, including the end-of-output symbol when emitted.
    pub raw: Vec<usize>,
    pub ended: bool,
    pub truncated: bool,
}

/// Argmax decoding until end-of-output or `max_steps`.
pub fn greedy_decode<S: Scalar>(model: &Model<S>, input: &[usize], max_steps: usize) -> Result<Decoded> {
    let mut g = Graph::<S>::new();
    g.set_recording(false);
    let bound = model.params().bind(&mut g);
    let fwd = model.encode_decode(&mut g, &bound, input, Decode::Greedy { max_steps }, false)?;
    let end = model.vocab().end();
    let tokens = fwd.predictions.iter().copied().filter(|&t| t != end).collect();
    Ok(Decoded { tokens, raw: fwd.predictions, ended: fwd.ended, truncated: fwd.truncated })
}

/// `(fine, coarse)` for one raw decoder output against its target.
pub fn score(prediction: &[usize], target: &[usize], end: usize) -> (f64, f64) {
    let expected = target.iter().copied().chain(std::iter::once(end));
    let len = target.len() + 1;
    let hits = expected.zip(prediction).filter(|(a, b)| a == *b).count();
    let fine = hits as f64 / len as f64;
    (fine, if hits == len { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Scores {
    pub fine: f64,
    pub coarse: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ScoreReport {
    pub fine: f64,
    pub coarse: f64,
    pub count: usize,
    /// Instances whose decoding hit the step cap.
    pub truncated: usize,
    /// Scores per task name.
    pub tasks: BTreeMap<String, Scores>,
    /// Scores per instance size (`k` or `N`).
    pub sizes: BTreeMap<usize, Scores>,
}

impl ScoreReport {
    /// Aggregates `(fine, coarse, truncated, size)` per instance.
    pub fn from_instances(task: Option<Task>, rows: &[(f64, f64, bool, usize)]) -> Self {
        let mut report = ScoreReport { count: rows.len(), ..Default::default() };
        if rows.is_empty() {
            return report;
        }
        let n = rows.len() as f64;
        report.fine = rows.iter().map(|r| r.0).sum::<f64>() / n;
        report.coarse = rows.iter().map(|r| r.1).sum::<f64>() / n;
        report.truncated = rows.iter().filter(|r| r.2).count();
        let mut by_size: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for r in rows {
            by_size.entry(r.3).or_default().push((r.0, r.1));
        }
        report.sizes = by_size
            .into_iter()
            .map(|(k, v)| {
                let m = v.len() as f64;
                (k, Scores { fine: v.iter().map(|x| x.0).sum::<f64>() / m, coarse: v.iter().map(|x| x.1).sum::<f64>() / m, count: v.len() })
            })
            .collect();
        if let Some(t) = task {
            report.tasks.insert(t.name().to_string(), Scores { fine: report.fine, coarse: report.coarse, count: report.count });
        }
        report
    }
}

/// Greedy-decodes every instance (capped at `2 |target| + 10`) and scores it.
pub fn evaluate<S: Scalar>(model: &Model<S>, task: Option<Task>, instances: &[TaskInstance]) -> Result<ScoreReport> {
    let end = model.vocab().end();
    let rows: Vec<(f64, f64, bool, usize)> = instances
        .par_iter()
        .map(|inst| {
            let d = greedy_decode(model, &inst.input, decode_cap(inst.target.len()))?;
            let (fine, coarse) = score(&d.raw, &inst.target, end);
            Ok((fine, coarse, d.truncated, inst.size))
        })
        .collect::<Result<_>>()?;
    Ok(ScoreReport::from_instances(task, &rows))
}
