//! The iterative pruning engine.
//!
//! A run computes the dense constraint value, schedules geometrically
//! decreasing budget milestones toward the target fraction, and walks
//! them: average importance over a window of trace snapshots, regroup the
//! surviving channels against the current table, pre-commit mandatory
//! groups, solve the grouped knapsack at the milestone budget, and drop
//! everything the solver left out. Channels never come back.
//!
//! All budget arithmetic happens on integer-scaled costs (milli-units for
//! latency, MACs for FLOPs); floats only appear at the report boundary.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{build_groups, GroupedInstance, GroupingOptions};
use crate::importance::{accumulate, rank_channels, BnSnapshot, LayerRanking};
use crate::knapsack::{solve_exact, solve_itemwise, Solution};
use crate::latency::{network_latency_scaled, LatencyTable};
use crate::netmodel::{
    self, layer_macs, network_flops, resolved_in_count, ChannelAssignment, JoinRule, LayerId,
    LayerKind, NetworkSpec,
};
use crate::trace_gen::{gen_trace, TraceGenOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    #[default]
    Latency,
    Flops,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Exact chain-prefix dynamic program.
    #[default]
    Exact,
    /// Per-item dynamic program with predecessor gating; not optimal.
    Itemwise,
}

fn default_steps() -> u32 {
    30
}

fn default_window() -> u32 {
    320
}

/// Flat run configuration; also the JSON config-file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default)]
    pub constraint_kind: ConstraintKind,
    /// Fraction of the dense constraint to remain after pruning, in (0, 1].
    pub target_fraction: f64,
    /// Number of pruning steps (milestones).
    #[serde(default = "default_steps")]
    pub steps: u32,
    /// Snapshots consumed per step.
    #[serde(default = "default_window")]
    pub window: u32,
    #[serde(default)]
    pub group_size_override: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverKind,
    pub spec_path: PathBuf,
    #[serde(default)]
    pub lut_path: Option<PathBuf>,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
}

impl PruneConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: PruneConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(Error::validation("target_fraction must be in (0, 1]"));
        }
        if self.steps == 0 {
            return Err(Error::validation("steps must be >= 1"));
        }
        if self.window == 0 {
            return Err(Error::validation("window must be >= 1"));
        }
        Ok(())
    }
}

/// Surviving channel indices per layer across milestones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneState {
    pub survivors: BTreeMap<LayerId, Vec<u32>>,
    pub step_index: u32,
}

impl PruneState {
    pub fn dense(spec: &NetworkSpec) -> Self {
        PruneState {
            survivors: spec
                .layers
                .iter()
                .map(|l| (l.layer_id, (0..l.out_channels).collect()))
                .collect(),
            step_index: 0,
        }
    }

    pub fn assignment(&self) -> ChannelAssignment {
        ChannelAssignment {
            kept: self
                .survivors
                .iter()
                .map(|(&id, set)| (id, set.len() as u32))
                .collect(),
            kept_channels: Some(self.survivors.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilestoneRecord {
    /// Budget in constraint units (ms for latency runs, MACs for FLOPs
    /// runs).
    pub budget_ms: f64,
    /// Measured table latency after the step; absent in FLOPs runs without
    /// a table.
    pub achieved_ms: Option<f64>,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub latency_ms: Option<f64>,
    pub macs: u64,
    /// Dense-over-pruned ratio: table latency when a table is present, MACs
    /// otherwise.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub kept_counts: BTreeMap<LayerId, u32>,
    pub kept_channels: BTreeMap<LayerId, Vec<u32>>,
    pub milestones: Vec<MilestoneRecord>,
    #[serde(rename = "final")]
    pub final_: FinalRecord,
}

impl PruneReport {
    pub fn to_json_pretty(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

/// Geometric milestone schedule from `c0` down to `c`:
/// `c0 * (c/c0)^(j/k)` for step j of k, with the last entry pinned to `c`
/// exactly.
pub fn schedule_milestones(c0: f64, c: f64, k: u32) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::validation("milestone count must be >= 1"));
    }
    if !(c0.is_finite() && c.is_finite()) || c <= 0.0 || c > c0 {
        return Err(Error::validation(format!(
            "target {c} must satisfy 0 < target <= dense ({c0})"
        )));
    }
    let ratio = c / c0;
    let mut milestones = Vec::with_capacity(k as usize);
    for j in 1..k {
        milestones.push(c0 * ratio.powf(f64::from(j) / f64::from(k)));
    }
    milestones.push(c);
    Ok(milestones)
}

/// What a step prunes against: a latency table or linear MAC costs.
#[derive(Debug, Clone, Copy)]
pub enum CostModel<'a> {
    Latency(&'a LatencyTable),
    Flops,
}

impl CostModel<'_> {
    /// Integer units per constraint unit (ms -> milli-units; MACs are
    /// already integral).
    fn scale(&self) -> f64 {
        match self {
            CostModel::Latency(_) => 1000.0,
            CostModel::Flops => 1.0,
        }
    }
}

/// Scale a float budget to solver integer units, conservatively (never
/// above the true scaled budget; the epsilon only absorbs float noise from
/// re-scaling integer-derived budgets).
fn scale_budget(value: f64, scale: f64) -> Result<i64> {
    if !value.is_finite() {
        return Err(Error::validation("budget must be finite"));
    }
    let scaled = (value * scale + 1e-6).floor();
    if scaled.abs() >= 9.0e18 {
        return Err(Error::validation("budget overflows the integer range"));
    }
    Ok(scaled as i64)
}

#[derive(Debug, Clone, Default)]
pub struct StepOptions {
    pub solver: SolverKind,
    pub grouping: GroupingOptions,
}

/// Per-channel FLOPs cost for every layer: the layer's own MACs per output
/// channel plus, per successor edge, the successor's MACs per input
/// channel. Uniform within a layer. Depthwise successors contribute
/// nothing here; their savings ride with their own coupled output channel.
pub fn flops_costs(
    spec: &NetworkSpec,
    assign: &ChannelAssignment,
) -> Result<BTreeMap<LayerId, u64>> {
    let mut costs = BTreeMap::new();
    for layer in &spec.layers {
        let p_in = resolved_in_count(spec, assign, layer)?;
        let mut cost = layer_macs(layer, p_in, 1);
        for succ in &spec.layers {
            if succ.predecessor_ids.contains(&layer.layer_id) {
                cost += per_in_macs(succ, assign)?;
            }
        }
        costs.insert(layer.layer_id, cost);
    }
    Ok(costs)
}

fn per_in_macs(layer: &crate::netmodel::LayerSpec, assign: &ChannelAssignment) -> Result<u64> {
    if layer.kind == LayerKind::GroupConv {
        return Ok(0);
    }
    let p_out = assign.count(layer.layer_id)?;
    Ok(layer_macs(layer, 1, p_out))
}

/// Per-index FLOPs cost of a chain, counting each downstream consumer
/// once (add-joined consumers see one fewer input channel no matter how
/// many chain members feed them; concatenating consumers lose one channel
/// per feeding member).
fn chain_flops_cost_per_index(
    spec: &NetworkSpec,
    members: &[LayerId],
    assign: &ChannelAssignment,
) -> Result<u64> {
    let member_set: std::collections::BTreeSet<LayerId> = members.iter().copied().collect();
    let mut total = 0u64;
    for &id in members {
        let layer = spec.layer(id)?;
        let p_in = resolved_in_count(spec, assign, layer)?;
        total += layer_macs(layer, p_in, 1);
    }
    for layer in &spec.layers {
        if member_set.contains(&layer.layer_id) {
            continue;
        }
        let feeding = layer
            .predecessor_ids
            .iter()
            .filter(|p| member_set.contains(p))
            .count() as u64;
        if feeding == 0 {
            continue;
        }
        let mult = match layer.join {
            JoinRule::Add => 1,
            JoinRule::Concat => feeding,
        };
        total += per_in_macs(layer, assign)? * mult;
    }
    Ok(total)
}

/// Group surviving channels for a FLOPs-constrained solve. Costs are
/// linear in the group size, so any group size works; 1 is the default.
pub fn build_flops_groups(
    spec: &NetworkSpec,
    rankings: &BTreeMap<LayerId, LayerRanking>,
    assign: &ChannelAssignment,
    group_size: u32,
) -> Result<GroupedInstance> {
    let plans = crate::grouping::plan_chains(spec, rankings, assign, |_, _| Ok(group_size))?;
    crate::grouping::assemble_groups(plans, |plan, boundaries| {
        let per_index = chain_flops_cost_per_index(spec, &plan.layers, assign)?;
        let per_index = i64::try_from(per_index)
            .map_err(|_| Error::validation("FLOPs cost overflows the solver range"))?;
        let cum_scaled: Vec<i64> = boundaries
            .iter()
            .map(|&b| per_index * i64::from(b))
            .collect();
        let cum_float: Vec<f64> = cum_scaled.iter().map(|&c| c as f64).collect();
        Ok((cum_float, cum_scaled))
    })
}

/// Outcome of one milestone step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: PruneState,
    pub groups: GroupedInstance,
    pub solution: Solution,
}

/// One milestone: average the window's importance, regroup survivors at
/// current counts, pre-commit mandatory groups, solve at the milestone
/// budget and shrink the surviving sets to the kept groups.
pub fn prune_step(
    spec: &NetworkSpec,
    state: &PruneState,
    window: &[BnSnapshot],
    model: &CostModel,
    milestone: f64,
    opts: &StepOptions,
) -> Result<StepOutcome> {
    let scores = accumulate(window)?;
    let rankings = survivor_rankings(spec, state, &scores)?;
    let assign = state.assignment();
    let budget = scale_budget(milestone, model.scale())?;
    solve_pruning(spec, state, &rankings, &assign, model, budget, opts)
}

fn solve_pruning(
    spec: &NetworkSpec,
    state: &PruneState,
    rankings: &BTreeMap<LayerId, LayerRanking>,
    assign: &ChannelAssignment,
    model: &CostModel,
    budget: i64,
    opts: &StepOptions,
) -> Result<StepOutcome> {
    let groups = match model {
        CostModel::Latency(table) => build_groups(spec, rankings, table, assign, &opts.grouping)?,
        CostModel::Flops => build_flops_groups(
            spec,
            rankings,
            assign,
            opts.grouping.step_override.unwrap_or(1),
        )?,
    };
    let mandatory_cost = groups.mandatory_cost_scaled();
    let solver_budget = budget - mandatory_cost;
    if solver_budget < 0 {
        return Err(Error::infeasible(format!(
            "mandatory groups cost {mandatory_cost} scaled units, above the \
             milestone budget {budget}"
        )));
    }
    let items = groups.solver_items();
    let solution = match opts.solver {
        SolverKind::Exact => solve_exact(&items, solver_budget)?,
        SolverKind::Itemwise => solve_itemwise(&items, solver_budget)?,
    };

    let kept_ids: std::collections::BTreeSet<u64> =
        solution.kept_item_ids.iter().copied().collect();
    let mut survivors: BTreeMap<LayerId, Vec<u32>> = state
        .survivors
        .keys()
        .map(|&id| (id, Vec::new()))
        .collect();
    for group in &groups.groups {
        if group.mandatory || kept_ids.contains(&group.group_id) {
            for &(layer, channel) in &group.members {
                survivors.get_mut(&layer).unwrap().push(channel);
            }
        }
    }
    for set in survivors.values_mut() {
        set.sort_unstable();
    }
    Ok(StepOutcome {
        state: PruneState {
            survivors,
            step_index: state.step_index + 1,
        },
        groups,
        solution,
    })
}

/// Rankings over the surviving channels of each layer, from full-width
/// score arrays. Fully-pruned layers are skipped.
fn survivor_rankings(
    spec: &NetworkSpec,
    state: &PruneState,
    scores: &BTreeMap<LayerId, Vec<f64>>,
) -> Result<BTreeMap<LayerId, LayerRanking>> {
    let mut rankings = BTreeMap::new();
    for layer in &spec.layers {
        let survivors = state
            .survivors
            .get(&layer.layer_id)
            .ok_or_else(|| Error::validation(format!("state missing layer {}", layer.layer_id)))?;
        if survivors.is_empty() {
            continue;
        }
        let layer_scores = scores.get(&layer.layer_id).ok_or_else(|| {
            Error::validation(format!("window has no scores for layer {}", layer.layer_id))
        })?;
        if layer_scores.len() != layer.out_channels as usize {
            return Err(Error::validation(format!(
                "layer {}: window provides {} scores for width {}",
                layer.layer_id,
                layer_scores.len(),
                layer.out_channels
            )));
        }
        let pairs: Vec<(u32, f64)> = survivors
            .iter()
            .map(|&c| (c, layer_scores[c as usize]))
            .collect();
        rankings.insert(layer.layer_id, rank_channels(&pairs)?);
    }
    Ok(rankings)
}

/// A full run against in-memory inputs. `table` is required for latency
/// runs and optional (reporting only) for FLOPs runs.
pub fn run_with_inputs(
    config: &PruneConfig,
    spec: &NetworkSpec,
    table: Option<&LatencyTable>,
    trace: &[BnSnapshot],
) -> Result<PruneReport> {
    config.validate()?;
    netmodel::validate(spec)?;
    let model = match (config.constraint_kind, table) {
        (ConstraintKind::Latency, Some(table)) => CostModel::Latency(table),
        (ConstraintKind::Latency, None) => {
            return Err(Error::validation("latency runs need a latency table"))
        }
        (ConstraintKind::Flops, _) => CostModel::Flops,
    };
    let needed = config.steps as usize * config.window as usize;
    if trace.len() < needed {
        return Err(Error::validation(format!(
            "trace has {} snapshots, run needs {needed}",
            trace.len()
        )));
    }

    let opts = StepOptions {
        solver: config.solver,
        grouping: GroupingOptions {
            step_override: config.group_size_override,
            ..GroupingOptions::default()
        },
    };
    let mut state = PruneState::dense(spec);
    let dense_assign = state.assignment();
    let scale = model.scale();
    let dense_scaled: i64 = match model {
        CostModel::Latency(table) => network_latency_scaled(spec, &dense_assign, table)?,
        CostModel::Flops => i64::try_from(network_flops(spec, &dense_assign)?)
            .map_err(|_| Error::validation("dense MACs overflow the solver range"))?,
    };
    let dense_latency_scaled = match table {
        Some(table) => Some(network_latency_scaled(spec, &dense_assign, table)?),
        None => None,
    };
    let c0 = dense_scaled as f64 / scale;
    let target = config.target_fraction * c0;
    let milestones = schedule_milestones(c0, target, config.steps)?;

    let mut records = Vec::with_capacity(milestones.len());
    for (j, &milestone) in milestones.iter().enumerate() {
        let window = &trace[j * config.window as usize..(j + 1) * config.window as usize];
        let outcome = prune_step(spec, &state, window, &model, milestone, &opts)?;
        state = outcome.state;
        let assign = state.assignment();
        let macs = network_flops(spec, &assign)?;
        let achieved_ms = match table {
            Some(table) => Some(network_latency_scaled(spec, &assign, table)? as f64 / 1000.0),
            None => None,
        };
        records.push(MilestoneRecord {
            budget_ms: milestone,
            achieved_ms,
            macs,
        });
    }

    let final_assign = state.assignment();
    let final_macs = network_flops(spec, &final_assign)?;
    let (latency_ms, speedup) = match (table, dense_latency_scaled) {
        (Some(table), Some(dense)) => {
            let achieved = network_latency_scaled(spec, &final_assign, table)?;
            let speedup = if achieved > 0 {
                dense as f64 / achieved as f64
            } else {
                f64::INFINITY
            };
            (Some(achieved as f64 / 1000.0), speedup)
        }
        _ => {
            let dense_macs = network_flops(spec, &dense_assign)? as f64;
            let speedup = if final_macs > 0 {
                dense_macs / final_macs as f64
            } else {
                f64::INFINITY
            };
            (None, speedup)
        }
    };
    Ok(PruneReport {
        kept_counts: final_assign.kept.clone(),
        kept_channels: state.survivors.clone(),
        milestones: records,
        final_: FinalRecord {
            latency_ms,
            macs: final_macs,
            speedup,
        },
    })
}

/// A full run from config-file paths. With no trace path, a synthetic
/// seeded trace of exactly `steps * window` snapshots is generated.
pub fn run(config: &PruneConfig) -> Result<PruneReport> {
    config.validate()?;
    let spec = NetworkSpec::from_json_path(&config.spec_path)?;
    let table = match &config.lut_path {
        Some(path) => Some(LatencyTable::from_csv_path(path)?),
        None => None,
    };
    let trace = match &config.trace_path {
        Some(path) => crate::importance::read_trace_path(path)?,
        None => gen_trace(
            &spec,
            &TraceGenOptions {
                seed: config.seed,
                steps: config
                    .steps
                    .checked_mul(config.window)
                    .ok_or_else(|| Error::validation("steps * window overflows"))?,
                ..TraceGenOptions::default()
            },
        )?,
    };
    run_with_inputs(config, &spec, table.as_ref(), &trace)
}

/// A single grouped solve at one budget, from explicit full-width scores:
/// the `plan` subcommand. Returns the report and the groups it solved
/// over.
pub fn plan_once(
    spec: &NetworkSpec,
    table: &LatencyTable,
    scores: &BTreeMap<LayerId, Vec<f64>>,
    budget_ms: f64,
    opts: &StepOptions,
) -> Result<(PruneReport, GroupedInstance)> {
    netmodel::validate(spec)?;
    let state = PruneState::dense(spec);
    let rankings = survivor_rankings(spec, &state, scores)?;
    let assign = state.assignment();
    let model = CostModel::Latency(table);
    let budget = scale_budget(budget_ms, model.scale())?;
    let outcome = solve_pruning(spec, &state, &rankings, &assign, &model, budget, opts)?;

    let final_assign = outcome.state.assignment();
    let macs = network_flops(spec, &final_assign)?;
    let dense_scaled = network_latency_scaled(spec, &assign, table)?;
    let achieved_scaled = network_latency_scaled(spec, &final_assign, table)?;
    let speedup = if achieved_scaled > 0 {
        dense_scaled as f64 / achieved_scaled as f64
    } else {
        f64::INFINITY
    };
    let report = PruneReport {
        kept_counts: final_assign.kept.clone(),
        kept_channels: outcome.state.survivors.clone(),
        milestones: vec![MilestoneRecord {
            budget_ms,
            achieved_ms: Some(achieved_scaled as f64 / 1000.0),
            macs,
        }],
        final_: FinalRecord {
            latency_ms: Some(achieved_scaled as f64 / 1000.0),
            macs,
            speedup,
        },
    };
    Ok((report, outcome.groups))
}
