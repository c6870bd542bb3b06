//! Memory-access trace events, one JSON object per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Read weights kept per event.
pub const TOP_WEIGHTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Encode,
    Decode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Read,
    Write,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub phase: Phase,
    pub step: usize,
    pub head: HeadKind,
    pub key: Vec<f64>,
    /// Write strength; absent on reads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    /// `(memory index, weight)` pairs, largest first; absent on writes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<(usize, f64)>>,
    /// Token consumed (encode) or emitted (decode).
    pub token: usize,
}

impl TraceEvent {
    /// Largest [`TOP_WEIGHTS`] entries with their indices; ties keep index order.
    pub fn top_weights(w: &[f64]) -> Vec<(usize, f64)> {
        let mut idx: Vec<(usize, f64)> = w.iter().copied().enumerate().collect();
        idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        idx.truncate(TOP_WEIGHTS);
        idx
    }
}

pub fn write_jsonl<W: Write>(mut out: W, events: &[TraceEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            events.push(serde_json::from_str(&line)?);
        }
    }
    Ok(events)
}

/// Write-key coordinates of the encoder, in step order.
pub fn write_keys(events: &[TraceEvent]) -> Vec<Vec<f64>> {
    events
        .iter()
        .filter(|e| e.head == HeadKind::Write && e.phase == Phase::Encode)
        .map(|e| e.key.clone())
        .collect()
}

/// Fraction of steps whose write displacement has a positive dot product
/// with the previous step's displacement.
pub fn straight_line_fraction(keys: &[Vec<f64>]) -> f64 {
    let disp: Vec<Vec<f64>> = keys.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect();
    if disp.len() < 2 {
        return 1.0;
    }
    let positive = disp
        .windows(2)
        .filter(|p| p[0].iter().zip(&p[1]).map(|(a, b)| a * b).sum::<f64>() > 0.0)
        .count();
    positive as f64 / (disp.len() - 1) as f64
}
