//! Per-layer latency lookup tables.
//!
//! A table maps (in-channels, out-channels) grid points to measured or
//! synthesized layer latency. Queries between grid points return the value
//! at the smallest grid point dominating the query on both axes, so coarse
//! tables never under-report latency. The module also derives per-neuron
//! latency contributions (first differences along the out-channel axis),
//! detects the staircase step size of a layer, and synthesizes staircase
//! tables for testing and simulation.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knapsack::to_int_cost;
use crate::netmodel::{resolved_in_count, ChannelAssignment, LayerId, NetworkSpec};

/// Latency grid of one layer. `values` is row-major over
/// (`in_points` x `out_points`); both axes are strictly increasing.
#[derive(Debug, Clone)]
pub struct LayerGrid {
    in_points: Vec<u32>,
    out_points: Vec<u32>,
    values: Vec<f64>,
    in_step: u32,
    out_step: u32,
}

impl LayerGrid {
    fn new(in_points: Vec<u32>, out_points: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if in_points.is_empty() || out_points.is_empty() {
            return Err(Error::validation("latency grid has an empty axis"));
        }
        if in_points.windows(2).any(|w| w[0] >= w[1])
            || out_points.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::validation(
                "latency grid sample points must be strictly increasing",
            ));
        }
        if values.len() != in_points.len() * out_points.len() {
            return Err(Error::validation("latency grid is incomplete"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("latencies must be finite and non-negative"));
        }
        let axis_step = |points: &[u32]| {
            points
                .windows(2)
                .map(|w| w[1] - w[0])
                .min()
                .unwrap_or(1)
                .max(1)
        };
        let in_step = axis_step(&in_points);
        let out_step = axis_step(&out_points);
        Ok(LayerGrid {
            in_points,
            out_points,
            values,
            in_step,
            out_step,
        })
    }

    /// Grid granularity (smallest axis gap): (in, out).
    pub fn granularity(&self) -> (u32, u32) {
        (self.in_step, self.out_step)
    }

    pub fn max_in(&self) -> u32 {
        *self.in_points.last().unwrap()
    }

    pub fn max_out(&self) -> u32 {
        *self.out_points.last().unwrap()
    }

    fn value_at(&self, in_idx: usize, out_idx: usize) -> f64 {
        self.values[in_idx * self.out_points.len() + out_idx]
    }

    fn ceil_index(points: &[u32], q: u32) -> Option<usize> {
        let idx = points.partition_point(|&p| p < q);
        (idx < points.len()).then_some(idx)
    }

    fn query(&self, p_in: u32, p_out: u32) -> Result<f64> {
        // An empty layer costs nothing regardless of grid coverage.
        if p_out == 0 {
            return Ok(0.0);
        }
        let in_idx = Self::ceil_index(&self.in_points, p_in).ok_or_else(|| {
            Error::validation(format!(
                "in-count {p_in} above grid maximum {}",
                self.max_in()
            ))
        })?;
        let out_idx = Self::ceil_index(&self.out_points, p_out).ok_or_else(|| {
            Error::validation(format!(
                "out-count {p_out} above grid maximum {}",
                self.max_out()
            ))
        })?;
        Ok(self.value_at(in_idx, out_idx))
    }
}

/// Latency lookup table for a whole network, keyed by layer id.
#[derive(Debug, Clone, Default)]
pub struct LatencyTable {
    layers: BTreeMap<LayerId, LayerGrid>,
}

impl LatencyTable {
    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.layers.keys().copied()
    }

    pub fn grid(&self, layer: LayerId) -> Result<&LayerGrid> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::validation(format!("no latency table for layer {layer}")))
    }

    /// Layer latency at the given kept counts. Exact at grid points,
    /// otherwise the value at the smallest dominating grid point.
    pub fn query(&self, layer: LayerId, p_in: u32, p_out: u32) -> Result<f64> {
        self.grid(layer)?.query(p_in, p_out)
    }

    /// Latency delta of keeping the `rank`-th output channel (1-based) at
    /// the given in-count. Negative values are possible on noisy tables
    /// and are reported as-is.
    pub fn contribution(&self, layer: LayerId, p_in: u32, rank: u32) -> Result<f64> {
        let grid = self.grid(layer)?;
        if rank == 0 || rank > grid.max_out() {
            return Err(Error::validation(format!(
                "rank {rank} out of range 1..={}",
                grid.max_out()
            )));
        }
        Ok(grid.query(p_in, rank)? - grid.query(p_in, rank - 1)?)
    }

    /// Integer-scaled contribution: the difference of the two scaled
    /// lookups, so prefix sums telescope exactly in integer arithmetic.
    pub fn scaled_contribution(&self, layer: LayerId, p_in: u32, rank: u32) -> Result<i64> {
        let grid = self.grid(layer)?;
        if rank == 0 || rank > grid.max_out() {
            return Err(Error::validation(format!(
                "rank {rank} out of range 1..={}",
                grid.max_out()
            )));
        }
        Ok(to_int_cost(grid.query(p_in, rank)?)? - to_int_cost(grid.query(p_in, rank - 1)?)?)
    }

    /// Detected latency step size along the out-channel axis at a fixed
    /// in-count: the modal gap between consecutive latency jumps. Returns
    /// 1 when latency moves at every grid point and `fallback` when it
    /// never jumps past the first point.
    pub fn step_size(&self, layer: LayerId, p_in: u32, fallback: u32) -> Result<u32> {
        const JUMP_EPS: f64 = 1e-9;
        let grid = self.grid(layer)?;
        let in_idx = LayerGrid::ceil_index(&grid.in_points, p_in).ok_or_else(|| {
            Error::validation(format!(
                "in-count {p_in} above grid maximum {}",
                grid.max_in()
            ))
        })?;
        let mut jumps = Vec::new();
        let mut prev = 0.0f64; // latency at out = 0
        for (out_idx, &out) in grid.out_points.iter().enumerate() {
            if out == 0 {
                continue;
            }
            let v = grid.value_at(in_idx, out_idx);
            if (v - prev).abs() > JUMP_EPS {
                jumps.push(out);
            }
            prev = v;
        }
        if jumps.len() < 2 {
            return Ok(fallback);
        }
        let mut gap_counts: BTreeMap<u32, usize> = BTreeMap::new();
        for w in jumps.windows(2) {
            *gap_counts.entry(w[1] - w[0]).or_insert(0) += 1;
        }
        // Modal gap; ties resolve to the smaller gap.
        let (&gap, _) = gap_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .unwrap();
        Ok(gap)
    }

    /// Read a table from CSV with header
    /// `layer_id,in_channels,out_channels,latency_ms`. Rows may come in any
    /// order; duplicate keys are rejected; each layer must form a complete
    /// grid over its distinct in/out sample points.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        {
            let headers = csv_reader
                .headers()
                .map_err(|e| Error::parse(e.to_string()))?;
            let expected = ["layer_id", "in_channels", "out_channels", "latency_ms"];
            if headers.iter().collect::<Vec<_>>() != expected {
                return Err(Error::parse(format!(
                    "expected CSV header {expected:?}, got {:?}",
                    headers.iter().collect::<Vec<_>>()
                )));
            }
        }
        let mut entries: BTreeMap<LayerId, BTreeMap<(u32, u32), f64>> = BTreeMap::new();
        for record in csv_reader.deserialize::<(LayerId, u32, u32, f64)>() {
            let (layer, c_in, c_out, latency) = record?;
            if !latency.is_finite() || latency < 0.0 {
                return Err(Error::validation(format!(
                    "layer {layer} ({c_in},{c_out}): latency must be finite and non-negative"
                )));
            }
            if c_out == 0 && latency != 0.0 {
                return Err(Error::validation(format!(
                    "layer {layer}: latency at zero out-channels must be 0"
                )));
            }
            if entries
                .entry(layer)
                .or_default()
                .insert((c_in, c_out), latency)
                .is_some()
            {
                return Err(Error::validation(format!(
                    "duplicate entry for layer {layer} at ({c_in},{c_out})"
                )));
            }
        }
        let mut layers = BTreeMap::new();
        for (layer, grid_entries) in entries {
            let mut ins: Vec<u32> = grid_entries.keys().map(|k| k.0).collect();
            ins.dedup();
            let mut outs: Vec<u32> = grid_entries.keys().map(|k| k.1).collect();
            outs.sort_unstable();
            outs.dedup();
            let mut values = Vec::with_capacity(ins.len() * outs.len());
            for &c_in in &ins {
                for &c_out in &outs {
                    match grid_entries.get(&(c_in, c_out)) {
                        Some(&v) => values.push(v),
                        None => {
                            return Err(Error::validation(format!(
                                "layer {layer}: missing grid entry ({c_in},{c_out})"
                            )))
                        }
                    }
                }
            }
            layers.insert(layer, LayerGrid::new(ins, outs, values)?);
        }
        Ok(LatencyTable { layers })
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "layer_id,in_channels,out_channels,latency_ms")?;
        for (layer, grid) in &self.layers {
            for (i, &c_in) in grid.in_points.iter().enumerate() {
                for (j, &c_out) in grid.out_points.iter().enumerate() {
                    writeln!(writer, "{layer},{c_in},{c_out},{}", grid.value_at(i, j))?;
                }
            }
        }
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Parameters of a synthetic staircase latency surface:
/// `base + slope * ceil(c_in/step_in) * ceil(c_out/step_out)` for
/// `c_out > 0`, with optional bounded uniform noise (clamped at zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaircaseParams {
    pub base_ms: f64,
    pub slope_ms: f64,
    pub step_in: u32,
    pub step_out: u32,
    pub noise_amplitude_ms: f64,
    pub noise_seed: u64,
}

impl Default for StaircaseParams {
    fn default() -> Self {
        StaircaseParams {
            base_ms: 0.1,
            slope_ms: 0.05,
            step_in: 32,
            step_out: 32,
            noise_amplitude_ms: 0.0,
            noise_seed: 0,
        }
    }
}

impl StaircaseParams {
    fn validate(&self) -> Result<()> {
        if self.step_in == 0 || self.step_out == 0 {
            return Err(Error::validation("staircase step sizes must be >= 1"));
        }
        if !(self.base_ms.is_finite() && self.base_ms >= 0.0) {
            return Err(Error::validation("base_ms must be finite and >= 0"));
        }
        if !(self.slope_ms.is_finite() && self.slope_ms > 0.0) {
            return Err(Error::validation("slope_ms must be finite and > 0"));
        }
        if !(self.noise_amplitude_ms.is_finite() && self.noise_amplitude_ms >= 0.0) {
            return Err(Error::validation("noise_amplitude_ms must be finite and >= 0"));
        }
        Ok(())
    }

    /// Noise-free staircase value.
    pub fn value(&self, c_in: u32, c_out: u32) -> f64 {
        if c_out == 0 {
            return 0.0;
        }
        let steps_in = c_in.div_ceil(self.step_in) as f64;
        let steps_out = c_out.div_ceil(self.step_out) as f64;
        self.base_ms + self.slope_ms * steps_in * steps_out
    }
}

/// Staircase generator settings: one default parameter set plus per-layer
/// overrides, keyed by layer id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaircaseConfig {
    pub default: StaircaseParams,
    pub per_layer: BTreeMap<LayerId, StaircaseParams>,
}

impl StaircaseConfig {
    pub fn params_for(&self, layer: LayerId) -> &StaircaseParams {
        self.per_layer.get(&layer).unwrap_or(&self.default)
    }
}

/// Synthesize a granularity-1 staircase table covering
/// `[0..=in_channels] x [0..=out_channels]` for every layer of `spec`.
/// Deterministic for a given noise seed.
pub fn staircase_table(spec: &NetworkSpec, config: &StaircaseConfig) -> Result<LatencyTable> {
    config.default.validate()?;
    for params in config.per_layer.values() {
        params.validate()?;
    }
    let mut layers = BTreeMap::new();
    for layer in &spec.layers {
        let params = config.params_for(layer.layer_id);
        let n_in = layer.in_channels as usize + 1;
        let n_out = layer.out_channels as usize + 1;
        let mut values = vec![0.0f64; n_in * n_out];
        let mut rng = (params.noise_amplitude_ms > 0.0).then(|| {
            ChaCha8Rng::seed_from_u64(
                params
                    .noise_seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(u64::from(layer.layer_id)),
            )
        });
        for c_in in 0..n_in {
            for c_out in 1..n_out {
                let mut v = params.value(c_in as u32, c_out as u32);
                if let Some(rng) = rng.as_mut() {
                    let amp = params.noise_amplitude_ms;
                    v = (v + rng.gen_range(-amp..=amp)).max(0.0);
                }
                values[c_in * n_out + c_out] = v;
            }
        }
        layers.insert(
            layer.layer_id,
            LayerGrid::new(
                (0..=layer.in_channels).collect(),
                (0..=layer.out_channels).collect(),
                values,
            )?,
        );
    }
    Ok(LatencyTable { layers })
}

/// Total network latency under `assign`: the sum of per-layer lookups with
/// input counts resolved through the predecessor graph.
pub fn network_latency(
    spec: &NetworkSpec,
    assign: &ChannelAssignment,
    table: &LatencyTable,
) -> Result<f64> {
    let mut total = 0.0;
    for layer in &spec.layers {
        let p_out = assign.count(layer.layer_id)?;
        let p_in = resolved_in_count(spec, assign, layer)?;
        total += table.query(layer.layer_id, p_in, p_out)?;
    }
    Ok(total)
}

/// Integer-scaled total latency (sum of per-layer scaled lookups). This is
/// the quantity the solver budget bounds exactly.
pub fn network_latency_scaled(
    spec: &NetworkSpec,
    assign: &ChannelAssignment,
    table: &LatencyTable,
) -> Result<i64> {
    let mut total = 0i64;
    for layer in &spec.layers {
        let p_out = assign.count(layer.layer_id)?;
        let p_in = resolved_in_count(spec, assign, layer)?;
        total += to_int_cost(table.query(layer.layer_id, p_in, p_out)?)?;
    }
    Ok(total)
}
