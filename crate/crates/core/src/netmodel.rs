//! Channel-level network descriptions: layers, predecessor graph, coupling
//! sets, kept-channel assignments, neuron totals and MAC counting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LayerId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    /// Depthwise-style convolution: one input channel per output channel.
    GroupConv,
    Linear,
}

/// How a layer with several predecessors combines their channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinRule {
    /// Elementwise sum: all predecessors must carry the same channel count.
    #[default]
    Add,
    /// Channel concatenation: input count is the sum of predecessor counts.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub layer_id: LayerId,
    #[serde(default)]
    pub name: String,
    pub kind: LayerKind,
    pub kernel_size: u32,
    pub in_channels: u32,
    pub out_channels: u32,
    /// Output feature-map size (height, width); (1, 1) for linear layers.
    pub out_spatial: (u32, u32),
    #[serde(default)]
    pub predecessor_ids: Vec<LayerId>,
    #[serde(default = "default_true")]
    pub prunable: bool,
    /// Channels that must survive pruning. Defaults to 0 for prunable
    /// layers and to the full width for unprunable ones.
    #[serde(default)]
    pub min_keep: Option<u32>,
    #[serde(default)]
    pub join: JoinRule,
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn effective_min_keep(&self) -> u32 {
        match self.min_keep {
            Some(m) => m,
            None if self.prunable => 0,
            None => self.out_channels,
        }
    }
}

/// Layers whose output channels share indices and are pruned identically
/// (residual branches feeding one sum, depthwise pairs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CouplingSpec {
    pub coupled_layer_ids: Vec<LayerId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_channels: u32,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub couplings: Vec<CouplingSpec>,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(text)?;
        Ok(spec)
    }

    pub fn from_json_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn layer(&self, id: LayerId) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.layer_id == id)
            .ok_or_else(|| Error::validation(format!("unknown layer id {id}")))
    }

    /// Coupling set containing `id`, if any.
    pub fn coupling_of(&self, id: LayerId) -> Option<&CouplingSpec> {
        self.couplings
            .iter()
            .find(|c| c.coupled_layer_ids.contains(&id))
    }
}

/// Kept-channel counts per layer, optionally with explicit index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelAssignment {
    pub kept: BTreeMap<LayerId, u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_channels: Option<BTreeMap<LayerId, Vec<u32>>>,
}

impl ChannelAssignment {
    pub fn dense(spec: &NetworkSpec) -> Self {
        ChannelAssignment {
            kept: spec
                .layers
                .iter()
                .map(|l| (l.layer_id, l.out_channels))
                .collect(),
            kept_channels: None,
        }
    }

    pub fn from_counts(kept: BTreeMap<LayerId, u32>) -> Self {
        ChannelAssignment {
            kept,
            kept_channels: None,
        }
    }

    pub fn count(&self, id: LayerId) -> Result<u32> {
        self.kept
            .get(&id)
            .copied()
            .ok_or_else(|| Error::validation(format!("assignment missing layer {id}")))
    }
}

/// Total neuron (output channel) count of the network.
pub fn total_neurons(spec: &NetworkSpec) -> u64 {
    spec.layers.iter().map(|l| u64::from(l.out_channels)).sum()
}

/// Kept input-channel count of `layer` under `assign`, resolved through
/// the predecessor graph. Entry layers read the fixed network input width.
pub fn resolved_in_count(
    spec: &NetworkSpec,
    assign: &ChannelAssignment,
    layer: &LayerSpec,
) -> Result<u32> {
    if layer.predecessor_ids.is_empty() {
        return Ok(spec.input_channels);
    }
    let counts: Vec<u32> = layer
        .predecessor_ids
        .iter()
        .map(|&p| assign.count(p))
        .collect::<Result<_>>()?;
    match layer.join {
        JoinRule::Add => {
            let first = counts[0];
            if counts.iter().any(|&c| c != first) {
                return Err(Error::validation(format!(
                    "layer {} ({}) add-joins predecessors with unequal kept counts {:?}",
                    layer.layer_id, layer.name, counts
                )));
            }
            Ok(first)
        }
        JoinRule::Concat => Ok(counts.iter().sum()),
    }
}

/// MACs of one layer at the given kept input/output counts.
pub fn layer_macs(layer: &LayerSpec, p_in: u32, p_out: u32) -> u64 {
    let (h, w) = layer.out_spatial;
    let spatial = u64::from(h) * u64::from(w);
    let k2 = u64::from(layer.kernel_size) * u64::from(layer.kernel_size);
    match layer.kind {
        // Depthwise: each output channel convolves exactly one input channel.
        LayerKind::GroupConv => u64::from(p_out) * k2 * spatial,
        LayerKind::Conv | LayerKind::Linear => {
            u64::from(p_in) * u64::from(p_out) * k2 * spatial
        }
    }
}

/// Total multiply-accumulate count of the network under `assign`.
pub fn network_flops(spec: &NetworkSpec, assign: &ChannelAssignment) -> Result<u64> {
    let known: BTreeSet<LayerId> = spec.layers.iter().map(|l| l.layer_id).collect();
    if let Some(id) = assign.kept.keys().find(|id| !known.contains(id)) {
        return Err(Error::validation(format!(
            "assignment references unknown layer {id}"
        )));
    }
    let mut total = 0u64;
    for layer in &spec.layers {
        let p_out = assign.count(layer.layer_id)?;
        let p_in = resolved_in_count(spec, assign, layer)?;
        total += layer_macs(layer, p_in, p_out);
    }
    Ok(total)
}

/// All invariant violations of a network description; empty means valid.
pub fn validate_spec(spec: &NetworkSpec) -> Vec<String> {
    let mut violations = Vec::new();
    if spec.input_channels == 0 {
        violations.push("input_channels must be positive".to_string());
    }
    let mut ids = BTreeSet::new();
    for layer in &spec.layers {
        if !ids.insert(layer.layer_id) {
            violations.push(format!("duplicate layer id {}", layer.layer_id));
        }
    }
    for (pos, layer) in spec.layers.iter().enumerate() {
        let tag = format!("layer {} ({})", layer.layer_id, layer.name);
        if layer.kernel_size == 0 {
            violations.push(format!("{tag}: kernel_size must be positive"));
        }
        if layer.in_channels == 0 || layer.out_channels == 0 {
            violations.push(format!("{tag}: channel counts must be positive"));
        }
        if layer.out_spatial.0 == 0 || layer.out_spatial.1 == 0 {
            violations.push(format!("{tag}: out_spatial must be positive"));
        }
        if layer.effective_min_keep() > layer.out_channels {
            violations.push(format!("{tag}: min_keep exceeds out_channels"));
        }
        if layer.kind == LayerKind::GroupConv && layer.in_channels != layer.out_channels {
            violations.push(format!("{tag}: group_conv requires in_channels == out_channels"));
        }
        if pos > 0 && layer.predecessor_ids.is_empty() {
            violations.push(format!("{tag}: non-first layer needs a predecessor"));
        }
        for &p in &layer.predecessor_ids {
            if !ids.contains(&p) {
                violations.push(format!("{tag}: unknown predecessor {p}"));
            } else if p == layer.layer_id {
                violations.push(format!("{tag}: layer cannot precede itself"));
            }
        }
        if !layer.predecessor_ids.is_empty() {
            let expected: Option<u32> = match layer.join {
                JoinRule::Add => layer
                    .predecessor_ids
                    .iter()
                    .filter_map(|p| spec.layers.iter().find(|l| l.layer_id == *p))
                    .map(|l| l.out_channels)
                    .fold(None, |acc, c| match acc {
                        None => Some(c),
                        Some(a) if a == c => Some(a),
                        Some(_) => Some(u32::MAX),
                    }),
                JoinRule::Concat => Some(
                    layer
                        .predecessor_ids
                        .iter()
                        .filter_map(|p| spec.layers.iter().find(|l| l.layer_id == *p))
                        .map(|l| l.out_channels)
                        .sum(),
                ),
            };
            match expected {
                Some(u32::MAX) => violations.push(format!(
                    "{tag}: add-joined predecessors have unequal widths"
                )),
                Some(e) if e != layer.in_channels => violations.push(format!(
                    "{tag}: in_channels {} does not match joined predecessor width {e}",
                    layer.in_channels
                )),
                _ => {}
            }
        } else if layer.predecessor_ids.is_empty() && layer.in_channels != spec.input_channels {
            violations.push(format!(
                "{tag}: entry layer in_channels {} != network input_channels {}",
                layer.in_channels, spec.input_channels
            ));
        }
    }
    if has_cycle(spec) {
        violations.push("predecessor graph is cyclic".to_string());
    }
    let mut seen_in_coupling: BTreeSet<LayerId> = BTreeSet::new();
    for (i, coupling) in spec.couplings.iter().enumerate() {
        let mut width = None;
        for &id in &coupling.coupled_layer_ids {
            if !ids.contains(&id) {
                violations.push(format!("coupling {i}: unknown layer {id}"));
                continue;
            }
            if !seen_in_coupling.insert(id) {
                violations.push(format!("coupling {i}: layer {id} appears in two couplings"));
            }
            let w = spec
                .layers
                .iter()
                .find(|l| l.layer_id == id)
                .map(|l| l.out_channels);
            match (width, w) {
                (None, w) => width = w,
                (Some(a), Some(b)) if a != b => violations.push(format!(
                    "coupling {i}: mismatched out_channels ({a} vs {b})"
                )),
                _ => {}
            }
        }
    }
    violations
}

/// `validate_spec` that fails with a combined error message.
pub fn validate(spec: &NetworkSpec) -> Result<()> {
    let violations = validate_spec(spec);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::validation(violations.join("; ")))
    }
}

fn has_cycle(spec: &NetworkSpec) -> bool {
    // Kahn's algorithm over the predecessor graph.
    let ids: BTreeSet<LayerId> = spec.layers.iter().map(|l| l.layer_id).collect();
    let mut indegree: BTreeMap<LayerId, usize> = BTreeMap::new();
    let mut successors: BTreeMap<LayerId, Vec<LayerId>> = BTreeMap::new();
    for layer in &spec.layers {
        let preds: Vec<LayerId> = layer
            .predecessor_ids
            .iter()
            .copied()
            .filter(|p| ids.contains(p))
            .collect();
        indegree.insert(layer.layer_id, preds.len());
        for p in preds {
            successors.entry(p).or_default().push(layer.layer_id);
        }
    }
    let mut ready: Vec<LayerId> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| id)
        .collect();
    let mut removed = 0usize;
    while let Some(id) = ready.pop() {
        removed += 1;
        for &s in successors.get(&id).map(|v| v.as_slice()).unwrap_or(&[]) {
            let d = indegree.get_mut(&s).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(s);
            }
        }
    }
    removed != spec.layers.len()
}

/// Validate an assignment against a spec: bounds, min_keep floors, coupling
/// equality and (when present) explicit channel sets.
pub fn validate_assignment(spec: &NetworkSpec, assign: &ChannelAssignment) -> Result<()> {
    let known: BTreeSet<LayerId> = spec.layers.iter().map(|l| l.layer_id).collect();
    if let Some(id) = assign.kept.keys().find(|id| !known.contains(id)) {
        return Err(Error::validation(format!(
            "assignment references unknown layer {id}"
        )));
    }
    for layer in &spec.layers {
        let p = assign.count(layer.layer_id)?;
        if p > layer.out_channels {
            return Err(Error::validation(format!(
                "layer {}: kept {} exceeds width {}",
                layer.layer_id, p, layer.out_channels
            )));
        }
        if p < layer.effective_min_keep() {
            return Err(Error::validation(format!(
                "layer {}: kept {} below min_keep {}",
                layer.layer_id,
                p,
                layer.effective_min_keep()
            )));
        }
    }
    for coupling in &spec.couplings {
        let counts: Vec<u32> = coupling
            .coupled_layer_ids
            .iter()
            .map(|&id| assign.count(id))
            .collect::<Result<_>>()?;
        if counts.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::validation(format!(
                "coupled layers {:?} have unequal kept counts {:?}",
                coupling.coupled_layer_ids, counts
            )));
        }
    }
    if let Some(sets) = &assign.kept_channels {
        for (id, channels) in sets {
            let layer = spec.layer(*id)?;
            let count = assign.count(*id)?;
            if channels.len() != count as usize {
                return Err(Error::validation(format!(
                    "layer {id}: channel set size {} != kept count {count}",
                    channels.len()
                )));
            }
            if channels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::validation(format!(
                    "layer {id}: channel set not strictly increasing"
                )));
            }
            if channels.last().is_some_and(|&c| c >= layer.out_channels) {
                return Err(Error::validation(format!(
                    "layer {id}: channel index out of range"
                )));
            }
        }
        for coupling in &spec.couplings {
            let mut iter = coupling.coupled_layer_ids.iter().filter_map(|id| sets.get(id));
            if let Some(first) = iter.next() {
                if iter.any(|s| s != first) {
                    return Err(Error::validation(format!(
                        "coupled layers {:?} have different kept channel sets",
                        coupling.coupled_layer_ids
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Reference ResNet50-style spec: the 7x7 stem plus four stages of
/// bottleneck blocks (3/4/6/3), each stage with a projection shortcut.
/// Stage outputs (block expansions plus the shortcut) are coupled. The
/// stem stays unprunable. Spatial sizes follow a 224x224 input with the
/// stride-2 placed on each transition block's 3x3.
pub fn builtin_resnet50() -> NetworkSpec {
    let mut layers = Vec::new();
    let mut couplings = Vec::new();
    let mut next_id: LayerId = 0;
    let mut push = |layers: &mut Vec<LayerSpec>,
                    name: String,
                    kernel: u32,
                    c_in: u32,
                    c_out: u32,
                    spatial: u32,
                    preds: Vec<LayerId>,
                    prunable: bool|
     -> LayerId {
        let id = next_id;
        next_id += 1;
        layers.push(LayerSpec {
            layer_id: id,
            name,
            kind: LayerKind::Conv,
            kernel_size: kernel,
            in_channels: c_in,
            out_channels: c_out,
            out_spatial: (spatial, spatial),
            predecessor_ids: preds,
            prunable,
            min_keep: None,
            join: JoinRule::Add,
        });
        id
    };

    let stem = push(&mut layers, "conv1".into(), 7, 3, 64, 112, vec![], false);

    // (blocks, bottleneck width, expanded width, output spatial)
    let stages: [(u32, u32, u32, u32); 4] = [
        (3, 64, 256, 56),
        (4, 128, 512, 28),
        (6, 256, 1024, 14),
        (3, 512, 2048, 7),
    ];
    let mut stage_inputs = vec![stem];
    let mut in_width = 64u32;
    let mut in_spatial = 56u32; // after the stem's max-pool
    for (si, &(blocks, width, expanded, spatial)) in stages.iter().enumerate() {
        let stage = si + 1;
        let mut coupling = Vec::new();
        let mut block_inputs = stage_inputs.clone();
        let mut block_in_width = in_width;
        let mut down = None;
        for b in 0..blocks {
            let c1_spatial = if b == 0 { in_spatial } else { spatial };
            let c1 = push(
                &mut layers,
                format!("layer{stage}.{b}.conv1"),
                1,
                block_in_width,
                width,
                c1_spatial,
                block_inputs.clone(),
                true,
            );
            let c2 = push(
                &mut layers,
                format!("layer{stage}.{b}.conv2"),
                3,
                width,
                width,
                spatial,
                vec![c1],
                true,
            );
            let c3 = push(
                &mut layers,
                format!("layer{stage}.{b}.conv3"),
                1,
                width,
                expanded,
                spatial,
                vec![c2],
                true,
            );
            coupling.push(c3);
            if b == 0 {
                let d = push(
                    &mut layers,
                    format!("layer{stage}.0.downsample"),
                    1,
                    block_in_width,
                    expanded,
                    spatial,
                    block_inputs.clone(),
                    true,
                );
                coupling.push(d);
                down = Some(d);
            }
            block_inputs = vec![c3, down.expect("downsample exists after block 0")];
            block_in_width = expanded;
        }
        coupling.sort_unstable();
        couplings.push(CouplingSpec {
            coupled_layer_ids: coupling,
        });
        stage_inputs = block_inputs;
        in_width = expanded;
        in_spatial = spatial;
    }

    NetworkSpec {
        input_channels: 3,
        layers,
        couplings,
    }
}

/// Per-layer latency step sizes observed for the reference ResNet50 on a
/// large-batch GPU table: 23 layers step at 32 channels, 20 at 64 and 10
/// at 128. Used to synthesize staircase tables that reproduce the
/// reference grouping of the builtin spec.
pub fn builtin_resnet50_step_sizes() -> BTreeMap<LayerId, u32> {
    let spec = builtin_resnet50();
    // (uncoupled bottleneck convs, coupled stage outputs) per stage.
    let stage_steps: [(u32, u32); 4] = [(32, 128), (32, 32), (64, 64), (128, 32)];
    let mut map = BTreeMap::new();
    for layer in &spec.layers {
        let step = if layer.layer_id == 0 {
            64
        } else {
            let stage: usize = layer.name["layer".len()..]
                .split('.')
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .expect("stage index in builtin layer name");
            let (uncoupled, coupled) = stage_steps[stage - 1];
            if spec.coupling_of(layer.layer_id).is_some() {
                coupled
            } else {
                uncoupled
            }
        };
        map.insert(layer.layer_id, step);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_layer(id: LayerId, c_in: u32, c_out: u32, preds: Vec<LayerId>) -> LayerSpec {
        LayerSpec {
            layer_id: id,
            name: format!("l{id}"),
            kind: LayerKind::Conv,
            kernel_size: 3,
            in_channels: c_in,
            out_channels: c_out,
            out_spatial: (8, 8),
            predecessor_ids: preds,
            prunable: true,
            min_keep: None,
            join: JoinRule::Add,
        }
    }

    fn toy_spec() -> NetworkSpec {
        NetworkSpec {
            input_channels: 3,
            layers: vec![
                toy_layer(0, 3, 16, vec![]),
                toy_layer(1, 16, 24, vec![0]),
                toy_layer(2, 24, 8, vec![1]),
            ],
            couplings: vec![],
        }
    }

    #[test]
    fn total_neurons_sums_out_channels() {
        assert_eq!(total_neurons(&toy_spec()), 48);
        let single = NetworkSpec {
            input_channels: 3,
            layers: vec![toy_layer(0, 3, 64, vec![])],
            couplings: vec![],
        };
        assert_eq!(total_neurons(&single), 64);
        let empty = NetworkSpec {
            input_channels: 3,
            layers: vec![],
            couplings: vec![],
        };
        assert_eq!(total_neurons(&empty), 0);
    }

    #[test]
    fn resnet50_has_reference_structure() {
        let spec = builtin_resnet50();
        assert_eq!(spec.layers.len(), 53);
        assert_eq!(total_neurons(&spec), 26_560);
        assert!(!spec.layers[0].prunable);
        assert_eq!(spec.layers[0].effective_min_keep(), 64);
        assert!(validate_spec(&spec).is_empty());
        // 4 stage couplings of sizes 4/5/7/4.
        let sizes: Vec<usize> = spec
            .couplings
            .iter()
            .map(|c| c.coupled_layer_ids.len())
            .collect();
        assert_eq!(sizes, vec![4, 5, 7, 4]);
    }

    #[test]
    fn resnet50_step_size_counts() {
        let map = builtin_resnet50_step_sizes();
        let count = |s: u32| map.values().filter(|&&v| v == s).count();
        assert_eq!(count(32), 23);
        assert_eq!(count(64), 20);
        assert_eq!(count(128), 10);
    }

    #[test]
    fn flops_direct_formula() {
        // One 3x3 conv, 3 in, 16 out, 8x8 output.
        let spec = NetworkSpec {
            input_channels: 3,
            layers: vec![toy_layer(0, 3, 16, vec![])],
            couplings: vec![],
        };
        let dense = ChannelAssignment::dense(&spec);
        assert_eq!(network_flops(&spec, &dense).unwrap(), 3 * 16 * 9 * 64);
    }

    #[test]
    fn flops_zero_out_channels_contribute_nothing() {
        let spec = toy_spec();
        let mut assign = ChannelAssignment::dense(&spec);
        assign.kept.insert(2, 0);
        let expected = 3 * 16 * 9 * 64 + 16 * 24 * 9 * 64;
        assert_eq!(network_flops(&spec, &assign).unwrap(), expected as u64);
    }

    #[test]
    fn flops_rejects_unknown_layer() {
        let spec = toy_spec();
        let mut assign = ChannelAssignment::dense(&spec);
        assign.kept.insert(99, 4);
        assert!(network_flops(&spec, &assign).is_err());
    }

    #[test]
    fn resnet50_dense_macs_near_4_1g() {
        let spec = builtin_resnet50();
        let dense = ChannelAssignment::dense(&spec);
        let macs = network_flops(&spec, &dense).unwrap() as f64;
        assert!((macs - 4.1e9).abs() <= 0.02 * 4.1e9, "macs = {macs}");
    }

    #[test]
    fn validate_catches_cycles_and_coupling_mismatch() {
        let mut spec = toy_spec();
        spec.layers[0].predecessor_ids = vec![2];
        let violations = validate_spec(&spec);
        assert!(violations.iter().any(|v| v.contains("cyclic")), "{violations:?}");

        let mut spec = toy_spec();
        spec.couplings = vec![CouplingSpec {
            coupled_layer_ids: vec![0, 1],
        }];
        let violations = validate_spec(&spec);
        assert!(
            violations.iter().any(|v| v.contains("mismatched out_channels")),
            "{violations:?}"
        );
    }

    #[test]
    fn assignment_validation_enforces_coupling_and_bounds() {
        let mut spec = toy_spec();
        spec.layers[1].out_channels = 16;
        spec.layers[1].in_channels = 16;
        spec.layers[1].predecessor_ids = vec![0];
        spec.layers[2].in_channels = 16;
        spec.couplings = vec![CouplingSpec {
            coupled_layer_ids: vec![0, 1],
        }];
        assert!(validate_spec(&spec).is_empty());
        let mut assign = ChannelAssignment::dense(&spec);
        assert!(validate_assignment(&spec, &assign).is_ok());
        assign.kept.insert(0, 8);
        assert!(validate_assignment(&spec, &assign).is_err());
        assign.kept.insert(1, 8);
        assert!(validate_assignment(&spec, &assign).is_ok());
        assign.kept.insert(2, 9);
        assert!(validate_assignment(&spec, &assign).is_err());
    }

    #[test]
    fn spec_json_rejects_unknown_fields() {
        let text = r#"{
            "input_channels": 3,
            "layers": [{
                "layer_id": 0, "kind": "conv", "kernel_size": 3,
                "in_channels": 3, "out_channels": 4, "out_spatial": [2, 2],
                "bogus": 1
            }]
        }"#;
        assert!(NetworkSpec::from_json(text).is_err());
    }

    #[test]
    fn concat_join_sums_predecessors() {
        let mut spec = NetworkSpec {
            input_channels: 3,
            layers: vec![
                toy_layer(0, 3, 8, vec![]),
                toy_layer(1, 3, 8, vec![0]),
                toy_layer(2, 16, 4, vec![0, 1]),
            ],
            couplings: vec![],
        };
        spec.layers[1].in_channels = 8;
        spec.layers[2].join = JoinRule::Concat;
        assert!(validate_spec(&spec).is_empty());
        let mut assign = ChannelAssignment::dense(&spec);
        assign.kept.insert(0, 5);
        assign.kept.insert(1, 2);
        let layer2 = spec.layer(2).unwrap();
        assert_eq!(resolved_in_count(&spec, &assign, layer2).unwrap(), 7);
    }
}
