//! Latency-aware grouping of ranked channels into prune units.
//!
//! Channels are grouped in consecutive runs of the layer's latency step
//! size, so removing a group moves the layer across a full latency cliff.
//! Coupled layers (shared channel indices) form a single chain whose step
//! is the largest member step and whose per-index importance is summed
//! across members. Groups covering a layer's min-keep floor are flagged
//! mandatory: the engine pre-commits them and keeps them out of the
//! solver.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::LayerRanking;
use crate::knapsack::{to_int_cost, Item};
use crate::latency::LatencyTable;
use crate::netmodel::{
    resolved_in_count, ChannelAssignment, LayerId, NetworkSpec,
};

#[derive(Debug, Clone)]
pub struct GroupingOptions {
    /// Fixed group size for every chain, overriding step detection.
    pub step_override: Option<u32>,
    /// Per-layer step sizes that win over both the global override and
    /// detection (a layer as wide as its own step shows a single latency
    /// jump, which detection cannot size).
    pub step_overrides: BTreeMap<LayerId, u32>,
    /// Step size assumed for layers whose latency never jumps.
    pub step_fallback: u32,
}

impl Default for GroupingOptions {
    fn default() -> Self {
        GroupingOptions {
            step_override: None,
            step_overrides: BTreeMap::new(),
            step_fallback: 32,
        }
    }
}

/// An atomic prune unit: a run of consecutively-ranked channels, possibly
/// spanning coupled layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronGroup {
    pub group_id: u64,
    pub chain_id: u64,
    /// 1-based position within the chain.
    pub rank_position: u32,
    /// (layer, channel) pairs covered by this group.
    pub members: Vec<(LayerId, u32)>,
    /// Sum of member channel importances.
    pub importance: f64,
    /// Cost in constraint units: milliseconds for latency plans, MACs for
    /// FLOPs plans. May be negative on noisy tables.
    pub cost_ms: f64,
    /// Integer-scaled cost used by the solver; differences of scaled
    /// lookups, so chain prefixes telescope exactly.
    pub cost_scaled: i64,
    pub preceding_group_id: Option<u64>,
    /// Pre-committed groups that cover min-keep channels.
    pub mandatory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedInstance {
    pub groups: Vec<NeuronGroup>,
    /// Ordered group ids per chain.
    pub chains: BTreeMap<u64, Vec<u64>>,
}

impl GroupedInstance {
    pub fn total_group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, id: u64) -> &NeuronGroup {
        &self.groups[id as usize]
    }

    pub fn mandatory_cost_scaled(&self) -> i64 {
        self.groups
            .iter()
            .filter(|g| g.mandatory)
            .map(|g| g.cost_scaled)
            .sum()
    }

    /// Solver items for all non-mandatory groups, ranks re-based per chain.
    pub fn solver_items(&self) -> Vec<Item> {
        let mut items = Vec::new();
        for group_ids in self.chains.values() {
            let mut rank = 0u32;
            let mut prev: Option<u64> = None;
            for &gid in group_ids {
                let group = self.group(gid);
                if group.mandatory {
                    continue;
                }
                rank += 1;
                items.push(Item {
                    item_id: group.group_id,
                    importance: group.importance,
                    cost: group.cost_scaled,
                    chain_id: group.chain_id,
                    rank_position: rank,
                    preceding_item_id: prev,
                });
                prev = Some(group.group_id);
            }
        }
        items
    }

    /// Distinct member layers of a chain, ascending.
    pub fn chain_layers(&self, chain_id: u64) -> Vec<LayerId> {
        let mut layers = BTreeSet::new();
        if let Some(group_ids) = self.chains.get(&chain_id) {
            for &gid in group_ids {
                for &(layer, _) in &self.group(gid).members {
                    layers.insert(layer);
                }
            }
        }
        layers.into_iter().collect()
    }

    /// Cumulative chain cost per kept-prefix length, recomputed with direct
    /// table lookups (entry 0 = 0). Matches the running sum of group costs
    /// by the telescoping identity.
    pub fn cumulative_cost_ms(
        &self,
        chain_id: u64,
        spec: &NetworkSpec,
        assign: &ChannelAssignment,
        table: &LatencyTable,
    ) -> Result<Vec<f64>> {
        let group_ids = self
            .chains
            .get(&chain_id)
            .ok_or_else(|| Error::validation(format!("unknown chain {chain_id}")))?;
        let layers = self.chain_layers(chain_id);
        let mut in_counts = Vec::with_capacity(layers.len());
        for &layer in &layers {
            in_counts.push(resolved_in_count(spec, assign, spec.layer(layer)?)?);
        }
        let mut result = vec![0.0];
        let mut kept = 0u32;
        for &gid in group_ids {
            kept += (self.group(gid).members.len() / layers.len()) as u32;
            let mut total = 0.0;
            for (&layer, &p_in) in layers.iter().zip(&in_counts) {
                total += table.query(layer, p_in, kept)?;
            }
            result.push(total);
        }
        Ok(result)
    }
}

/// A chain before costing: its member layers, resolved input counts, the
/// aggregated ranked channel sequence and the chosen step size.
pub(crate) struct ChainPlan {
    pub layers: Vec<LayerId>,
    pub in_counts: Vec<u32>,
    /// (channel, aggregated importance), descending.
    pub ranked: Vec<(u32, f64)>,
    pub step: u32,
    pub min_keep: u32,
}

/// Discover chains in spec order and rank their channels. `step_of` picks
/// the group size given the member layers and their input counts.
pub(crate) fn plan_chains(
    spec: &NetworkSpec,
    rankings: &BTreeMap<LayerId, LayerRanking>,
    assign: &ChannelAssignment,
    mut step_of: impl FnMut(&[LayerId], &[u32]) -> Result<u32>,
) -> Result<Vec<ChainPlan>> {
    crate::netmodel::validate_assignment(spec, assign)?;
    let mut plans = Vec::new();
    let mut seen: BTreeSet<LayerId> = BTreeSet::new();
    for layer in &spec.layers {
        if seen.contains(&layer.layer_id) {
            continue;
        }
        let members: Vec<LayerId> = match spec.coupling_of(layer.layer_id) {
            Some(coupling) => {
                let mut ids = coupling.coupled_layer_ids.clone();
                ids.sort_unstable();
                ids
            }
            None => vec![layer.layer_id],
        };
        seen.extend(members.iter().copied());

        let counts: Vec<u32> = members
            .iter()
            .map(|&id| assign.count(id))
            .collect::<Result<_>>()?;
        if counts.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::validation(format!(
                "coupled layers {members:?} have unequal kept counts {counts:?}"
            )));
        }
        let count = counts[0];
        if count == 0 {
            continue; // fully pruned chain contributes no groups
        }

        let member_rankings: Vec<&LayerRanking> = members
            .iter()
            .map(|&id| {
                rankings
                    .get(&id)
                    .ok_or_else(|| Error::validation(format!("no ranking for layer {id}")))
            })
            .collect::<Result<_>>()?;
        for (&id, ranking) in members.iter().zip(&member_rankings) {
            if ranking.len() != count as usize {
                return Err(Error::validation(format!(
                    "layer {id}: ranking covers {} channels, assignment keeps {count}",
                    ranking.len()
                )));
            }
        }

        let ranked: Vec<(u32, f64)> = if members.len() == 1 {
            let r = member_rankings[0];
            r.order
                .iter()
                .copied()
                .zip(r.sorted_scores.iter().copied())
                .collect()
        } else {
            // Shared indices: all member rankings must cover the same set.
            let base: BTreeSet<u32> = member_rankings[0].order.iter().copied().collect();
            let mut aggregated: BTreeMap<u32, f64> =
                base.iter().map(|&c| (c, 0.0)).collect();
            for (&id, ranking) in members.iter().zip(&member_rankings) {
                let set: BTreeSet<u32> = ranking.order.iter().copied().collect();
                if set != base {
                    return Err(Error::validation(format!(
                        "layer {id}: coupled layers rank different channel sets"
                    )));
                }
                for (&c, &s) in ranking.order.iter().zip(&ranking.sorted_scores) {
                    *aggregated.get_mut(&c).unwrap() += s;
                }
            }
            let mut ranked: Vec<(u32, f64)> = aggregated.into_iter().collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            ranked
        };

        let in_counts: Vec<u32> = members
            .iter()
            .map(|&id| resolved_in_count(spec, assign, spec.layer(id)?))
            .collect::<Result<_>>()?;
        let step = step_of(&members, &in_counts)?.max(1);
        let min_keep = members
            .iter()
            .map(|&id| spec.layer(id).map(|l| l.effective_min_keep()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        plans.push(ChainPlan {
            layers: members,
            in_counts,
            ranked,
            step,
            min_keep,
        });
    }
    Ok(plans)
}

/// Assemble groups from chain plans given per-prefix cumulative costs.
/// `costs_of(plan)` returns (float, scaled) cumulative costs with one entry
/// per group boundary, starting at the empty prefix.
pub(crate) fn assemble_groups(
    plans: Vec<ChainPlan>,
    mut costs_of: impl FnMut(&ChainPlan, &[u32]) -> Result<(Vec<f64>, Vec<i64>)>,
) -> Result<GroupedInstance> {
    let mut groups = Vec::new();
    let mut chains = BTreeMap::new();
    for (chain_idx, plan) in plans.into_iter().enumerate() {
        let chain_id = chain_idx as u64;
        let count = plan.ranked.len() as u32;
        let step = plan.step;
        let n_groups = count.div_ceil(step);
        let boundaries: Vec<u32> = (0..=n_groups).map(|k| (k * step).min(count)).collect();
        let (cum_ms, cum_scaled) = costs_of(&plan, &boundaries)?;
        if cum_ms.len() != boundaries.len() || cum_scaled.len() != boundaries.len() {
            return Err(Error::validation("cost function returned wrong arity"));
        }
        let mandatory_groups = if plan.min_keep == 0 {
            0
        } else {
            plan.min_keep.div_ceil(step).min(n_groups)
        };
        let mut ids = Vec::with_capacity(n_groups as usize);
        let mut prev: Option<u64> = None;
        for k in 0..n_groups as usize {
            let group_id = groups.len() as u64;
            let chunk = &plan.ranked[boundaries[k] as usize..boundaries[k + 1] as usize];
            let mut members = Vec::with_capacity(chunk.len() * plan.layers.len());
            for &layer in &plan.layers {
                members.extend(chunk.iter().map(|&(c, _)| (layer, c)));
            }
            groups.push(NeuronGroup {
                group_id,
                chain_id,
                rank_position: k as u32 + 1,
                members,
                importance: chunk.iter().map(|&(_, s)| s).sum(),
                cost_ms: cum_ms[k + 1] - cum_ms[k],
                cost_scaled: cum_scaled[k + 1] - cum_scaled[k],
                preceding_group_id: prev,
                mandatory: (k as u32) < mandatory_groups,
            });
            ids.push(group_id);
            prev = Some(group_id);
        }
        chains.insert(chain_id, ids);
    }
    Ok(GroupedInstance { groups, chains })
}

/// Group ranked channels by latency step size, costing each group as the
/// table delta it removes at the current input counts.
pub fn build_groups(
    spec: &NetworkSpec,
    rankings: &BTreeMap<LayerId, LayerRanking>,
    table: &LatencyTable,
    assign: &ChannelAssignment,
    opts: &GroupingOptions,
) -> Result<GroupedInstance> {
    let plans = plan_chains(spec, rankings, assign, |members, in_counts| {
        // Cross-layer chains use the largest member step size.
        let mut best = 1;
        for (&layer, &p_in) in members.iter().zip(in_counts) {
            let step = if let Some(&s) = opts.step_overrides.get(&layer) {
                s
            } else if let Some(s) = opts.step_override {
                s
            } else {
                table.step_size(layer, p_in, opts.step_fallback)?
            };
            best = best.max(step);
        }
        Ok(best)
    })?;
    assemble_groups(plans, |plan, boundaries| {
        let mut cum_ms = Vec::with_capacity(boundaries.len());
        let mut cum_scaled = Vec::with_capacity(boundaries.len());
        for &kept in boundaries {
            let mut total_ms = 0.0;
            let mut total_scaled = 0i64;
            for (&layer, &p_in) in plan.layers.iter().zip(&plan.in_counts) {
                let v = table.query(layer, p_in, kept)?;
                total_ms += v;
                total_scaled += to_int_cost(v)?;
            }
            cum_ms.push(total_ms);
            cum_scaled.push(total_scaled);
        }
        Ok((cum_ms, cum_scaled))
    })
}
