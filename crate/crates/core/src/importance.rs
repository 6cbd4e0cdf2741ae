//! Per-channel importance from batch-norm scale/shift parameters and their
//! gradients, averaged over a window of training steps, plus descending
//! per-layer rankings with prefix sums.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::LayerId;

/// Scale/shift parameters and gradients of one layer at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSnapshot {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

impl LayerSnapshot {
    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.grad_gamma.len() != n || self.grad_beta.len() != n {
            return Err(Error::validation(
                "snapshot arrays must all have the layer width",
            ));
        }
        Ok(())
    }
}

/// One training step's snapshot across all layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnSnapshot {
    pub step: u64,
    pub layers: BTreeMap<LayerId, LayerSnapshot>,
}

/// First-order importance of one channel: |g_gamma * gamma + g_beta * beta|.
pub fn neuron_importance(gamma: f64, beta: f64, grad_gamma: f64, grad_beta: f64) -> Result<f64> {
    if ![gamma, beta, grad_gamma, grad_beta].iter().all(|v| v.is_finite()) {
        return Err(Error::validation("importance inputs must be finite"));
    }
    Ok((grad_gamma * gamma + grad_beta * beta).abs())
}

/// Mean per-step importance over a window of snapshots (mean of per-step
/// absolute values, so scores stay non-negative). All snapshots must cover
/// the same layers at the same widths.
pub fn accumulate(window: &[BnSnapshot]) -> Result<BTreeMap<LayerId, Vec<f64>>> {
    let first = window
        .first()
        .ok_or_else(|| Error::validation("importance window is empty"))?;
    let mut sums: BTreeMap<LayerId, Vec<f64>> = BTreeMap::new();
    for (&layer, snap) in &first.layers {
        snap.check_shape()?;
        sums.insert(layer, vec![0.0; snap.width()]);
    }
    for snapshot in window {
        if snapshot.layers.len() != first.layers.len() {
            return Err(Error::validation("snapshots cover different layer sets"));
        }
        for (&layer, snap) in &snapshot.layers {
            snap.check_shape()?;
            let sum = sums
                .get_mut(&layer)
                .ok_or_else(|| Error::validation("snapshots cover different layer sets"))?;
            if snap.width() != sum.len() {
                return Err(Error::validation(format!(
                    "layer {layer}: width changed within the window"
                )));
            }
            for (c, acc) in sum.iter_mut().enumerate() {
                *acc += neuron_importance(
                    snap.gamma[c],
                    snap.beta[c],
                    snap.grad_gamma[c],
                    snap.grad_beta[c],
                )?;
            }
        }
    }
    let count = window.len() as f64;
    for scores in sums.values_mut() {
        for s in scores.iter_mut() {
            *s /= count;
        }
    }
    Ok(sums)
}

/// Channels of one layer sorted by descending importance, with prefix sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    /// Channel indices, most important first; ties go to the lower index.
    pub order: Vec<u32>,
    /// Importance per position of `order` (non-increasing).
    pub sorted_scores: Vec<f64>,
    /// Running importance totals: entry p is the best achievable total
    /// when keeping p+1 channels.
    pub prefix_importance: Vec<f64>,
}

impl LayerRanking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn score_of(&self, channel: u32) -> Option<f64> {
        self.order
            .iter()
            .position(|&c| c == channel)
            .map(|i| self.sorted_scores[i])
    }
}

/// Rank explicit (channel, score) pairs by descending score; ties break to
/// the lower channel index.
pub fn rank_channels(channels: &[(u32, f64)]) -> Result<LayerRanking> {
    if channels.is_empty() {
        return Err(Error::validation("cannot rank an empty layer"));
    }
    for &(c, s) in channels {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::validation(format!(
                "channel {c}: scores must be finite and non-negative"
            )));
        }
    }
    let mut sorted: Vec<(u32, f64)> = channels.to_vec();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let order: Vec<u32> = sorted.iter().map(|&(c, _)| c).collect();
    let sorted_scores: Vec<f64> = sorted.iter().map(|&(_, s)| s).collect();
    let mut prefix_importance = Vec::with_capacity(sorted_scores.len());
    let mut running = 0.0;
    for &s in &sorted_scores {
        running += s;
        prefix_importance.push(running);
    }
    Ok(LayerRanking {
        order,
        sorted_scores,
        prefix_importance,
    })
}

/// Rank a dense score array; channel indices are array positions.
pub fn rank_layer(scores: &[f64]) -> Result<LayerRanking> {
    let pairs: Vec<(u32, f64)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as u32, s))
        .collect();
    rank_channels(&pairs)
}

/// Read a JSON-lines trace: one [`BnSnapshot`] per line.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<BnSnapshot>> {
    let mut snapshots = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let snapshot: BnSnapshot = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("trace line {}: {e}", lineno + 1)))?;
        snapshots.push(snapshot);
    }
    Ok(snapshots)
}

pub fn read_trace_path(path: &Path) -> Result<Vec<BnSnapshot>> {
    let file = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(file))
}

pub fn write_trace<W: Write>(mut writer: W, snapshots: &[BnSnapshot]) -> Result<()> {
    for snapshot in snapshots {
        serde_json::to_writer(&mut writer, snapshot)?;
        writeln!(writer)?;
    }
    Ok(())
}

pub fn write_trace_path(path: &Path, snapshots: &[BnSnapshot]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trace(std::io::BufWriter::new(file), snapshots)
}
