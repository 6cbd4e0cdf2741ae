//! Deterministic synthetic importance traces.
//!
//! A tiny differentiable scale/shift network stands in for the real model:
//! each layer mixes its input through a dense matrix, applies per-channel
//! scale/shift, and rectifies. Exact analytic gradients of a squared-error
//! loss feed the importance pipeline, and exact loss deltas from zeroing a
//! channel provide the ground truth the first-order scores are checked
//! against. Traces are random walks in parameter space: shape-correct,
//! seed-deterministic snapshots, no actual training.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{BnSnapshot, LayerSnapshot};
use crate::netmodel::{LayerId, NetworkSpec};

/// Pre-activations this close to zero are rejected while sampling the
/// dataset so rectifier kinks stay away from finite-difference probes.
const KINK_MARGIN: f64 = 1e-2;
const SAMPLE_RETRIES: usize = 2000;

/// Dense scale/shift toy network over a spec's layer widths (layers taken
/// in listed order). Holds its own fixed regression dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNet {
    pub layer_ids: Vec<LayerId>,
    pub widths: Vec<u32>,
    pub input_width: u32,
    /// Row-major mixing matrices, `widths[l] x prev_width`.
    pub weights: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl ToyNet {
    /// Build a seeded net plus dataset for `spec`. Channel magnitudes are
    /// spread over orders of magnitude so rankings have real signal.
    pub fn from_spec(spec: &NetworkSpec, seed: u64, samples: usize) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::validation("toy net needs at least one layer"));
        }
        if samples == 0 {
            return Err(Error::validation("toy net needs at least one sample"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer_ids: Vec<LayerId> = spec.layers.iter().map(|l| l.layer_id).collect();
        let widths: Vec<u32> = spec.layers.iter().map(|l| l.out_channels).collect();
        let input_width = spec.input_channels;

        let mut weights = Vec::with_capacity(widths.len());
        let mut gamma = Vec::with_capacity(widths.len());
        let mut beta = Vec::with_capacity(widths.len());
        let mut prev = input_width as usize;
        // The first layer spreads channel scales over a decade so rankings
        // carry signal. Deeper layers center their scale so the combined
        // attenuation over the whole net stays near one decade, keeping
        // activations clear of the rectifier kink at any depth.
        let deep_layers = widths.len().saturating_sub(1).max(1) as f64;
        let deep_center = -0.5 / deep_layers;
        for (depth, &w) in widths.iter().enumerate() {
            let w = w as usize;
            let bound = (3.0 / prev as f64).sqrt();
            weights.push(
                (0..w * prev)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect(),
            );
            let (lo, hi) = if depth == 0 {
                (-1.1, -0.1)
            } else {
                (deep_center - 0.35, (deep_center + 0.35).min(0.15))
            };
            gamma.push(
                (0..w)
                    .map(|_| {
                        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        let magnitude = 10f64.powf(rng.gen_range(lo..=hi));
                        sign * magnitude
                    })
                    .collect(),
            );
            beta.push((0..w).map(|_| rng.gen_range(-0.15..=0.15)).collect());
            prev = w;
        }

        let mut net = ToyNet {
            layer_ids,
            widths,
            input_width,
            weights,
            gamma,
            beta,
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        let out_width = *net.widths.last().unwrap() as usize;
        // Full kink clearance is only attainable (and only needed, for
        // finite-difference probes) on small nets; wide nets take the best
        // of a few draws.
        let total_units: u32 = net.widths.iter().sum();
        let retries = if total_units <= 512 { SAMPLE_RETRIES } else { 8 };
        for _ in 0..samples {
            // Rejection-sample inputs away from rectifier kinks; if depth
            // makes that unattainable, take the best-clearance draw seen.
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..retries {
                let x: Vec<f64> = (0..input_width as usize)
                    .map(|_| rng.gen_range(-1.0..=1.0))
                    .collect();
                let clearance = net
                    .forward(&x)
                    .iter()
                    .flat_map(|layer| layer.z.iter())
                    .fold(f64::INFINITY, |acc, &z| acc.min(z.abs()));
                if clearance > KINK_MARGIN {
                    best = Some((clearance, x));
                    break;
                }
                if best.as_ref().is_none_or(|(c, _)| clearance > *c) {
                    best = Some((clearance, x));
                }
            }
            net.inputs.push(best.expect("at least one draw").1);
            net.targets
                .push((0..out_width).map(|_| rng.gen_range(-1.0..=1.0)).collect());
        }
        Ok(net)
    }

    pub fn layer_index(&self, layer: LayerId) -> Result<usize> {
        self.layer_ids
            .iter()
            .position(|&id| id == layer)
            .ok_or_else(|| Error::validation(format!("toy net has no layer {layer}")))
    }

    fn forward(&self, x: &[f64]) -> Vec<LayerActivation> {
        let mut activations = Vec::with_capacity(self.widths.len());
        let mut h: Vec<f64> = x.to_vec();
        for l in 0..self.widths.len() {
            let w = self.widths[l] as usize;
            let prev = h.len();
            let mut pre = vec![0.0; w];
            for (row, p) in pre.iter_mut().enumerate() {
                let weights = &self.weights[l][row * prev..(row + 1) * prev];
                *p = weights.iter().zip(&h).map(|(a, b)| a * b).sum();
            }
            let z: Vec<f64> = pre
                .iter()
                .enumerate()
                .map(|(c, &p)| self.gamma[l][c] * p + self.beta[l][c])
                .collect();
            let out: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            h = out.clone();
            activations.push(LayerActivation { pre, z, out });
        }
        activations
    }

    /// Mean squared error over the dataset (averaged over samples and
    /// output channels).
    pub fn loss(&self) -> f64 {
        let out_width = *self.widths.last().unwrap() as f64;
        let m = self.inputs.len() as f64;
        let mut total = 0.0;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let activations = self.forward(x);
            let out = &activations.last().unwrap().out;
            total += out
                .iter()
                .zip(y)
                .map(|(o, t)| (o - t) * (o - t))
                .sum::<f64>();
        }
        total / (m * out_width)
    }

    pub fn with_gamma_shifted(&self, layer: LayerId, channel: u32, delta: f64) -> Result<Self> {
        let l = self.layer_index(layer)?;
        let mut net = self.clone();
        net.gamma[l][channel as usize] += delta;
        Ok(net)
    }

    pub fn with_beta_shifted(&self, layer: LayerId, channel: u32, delta: f64) -> Result<Self> {
        let l = self.layer_index(layer)?;
        let mut net = self.clone();
        net.beta[l][channel as usize] += delta;
        Ok(net)
    }
}

struct LayerActivation {
    pre: Vec<f64>,
    z: Vec<f64>,
    out: Vec<f64>,
}

/// Exact reverse-mode gradients of the loss with respect to every scale
/// and shift parameter, packaged as one importance snapshot.
pub fn toy_grads(net: &ToyNet) -> BnSnapshot {
    toy_grads_at_step(net, 0)
}

pub fn toy_grads_at_step(net: &ToyNet, step: u64) -> BnSnapshot {
    let n_layers = net.widths.len();
    let out_width = *net.widths.last().unwrap() as f64;
    let m = net.inputs.len() as f64;
    let mut grad_gamma: Vec<Vec<f64>> = net
        .widths
        .iter()
        .map(|&w| vec![0.0; w as usize])
        .collect();
    let mut grad_beta = grad_gamma.clone();

    for (x, y) in net.inputs.iter().zip(&net.targets) {
        let activations = net.forward(x);
        let out = &activations.last().unwrap().out;
        // d loss / d out for this sample.
        let mut d_out: Vec<f64> = out
            .iter()
            .zip(y)
            .map(|(o, t)| 2.0 * (o - t) / (m * out_width))
            .collect();
        for l in (0..n_layers).rev() {
            let act = &activations[l];
            let d_z: Vec<f64> = d_out
                .iter()
                .zip(&act.z)
                .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
                .collect();
            for c in 0..net.widths[l] as usize {
                grad_gamma[l][c] += d_z[c] * act.pre[c];
                grad_beta[l][c] += d_z[c];
            }
            if l > 0 {
                let prev = net.widths[l - 1] as usize;
                let mut d_prev = vec![0.0; prev];
                for (row, &dz) in d_z.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    let scaled = dz * net.gamma[l][row];
                    let weights = &net.weights[l][row * prev..(row + 1) * prev];
                    for (col, &w) in weights.iter().enumerate() {
                        d_prev[col] += scaled * w;
                    }
                }
                d_out = d_prev;
            }
        }
    }

    let mut layers = BTreeMap::new();
    for (l, &id) in net.layer_ids.iter().enumerate() {
        layers.insert(
            id,
            LayerSnapshot {
                gamma: net.gamma[l].clone(),
                beta: net.beta[l].clone(),
                grad_gamma: grad_gamma[l].clone(),
                grad_beta: grad_beta[l].clone(),
            },
        );
    }
    BnSnapshot { step, layers }
}

/// Exact loss change from zeroing one channel's scale and shift.
pub fn toy_loss_delta(net: &ToyNet, layer: LayerId, channel: u32) -> Result<f64> {
    let l = net.layer_index(layer)?;
    let c = channel as usize;
    if c >= net.widths[l] as usize {
        return Err(Error::validation(format!(
            "channel {channel} out of range for layer {layer}"
        )));
    }
    let base = net.loss();
    let mut zeroed = net.clone();
    zeroed.gamma[l][c] = 0.0;
    zeroed.beta[l][c] = 0.0;
    Ok(zeroed.loss() - base)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceGenOptions {
    pub seed: u64,
    pub steps: u32,
    /// Uniform parameter-walk amplitude between snapshots; 0 freezes the
    /// net so every snapshot is identical.
    pub perturb_amplitude: f64,
    pub samples: usize,
}

impl Default for TraceGenOptions {
    fn default() -> Self {
        TraceGenOptions {
            seed: 0,
            steps: 1,
            perturb_amplitude: 0.02,
            samples: 32,
        }
    }
}

/// Generate a trace of `steps` snapshots from a seeded toy net, applying a
/// small random walk to the parameters between snapshots.
pub fn gen_trace(spec: &NetworkSpec, opts: &TraceGenOptions) -> Result<Vec<BnSnapshot>> {
    if opts.steps == 0 {
        return Err(Error::validation("trace needs at least one step"));
    }
    if !(opts.perturb_amplitude.is_finite() && opts.perturb_amplitude >= 0.0) {
        return Err(Error::validation("perturb_amplitude must be finite and >= 0"));
    }
    let mut net = ToyNet::from_spec(spec, opts.seed, opts.samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xA5A5_5A5A_DEAD_BEEF);
    let mut snapshots = Vec::with_capacity(opts.steps as usize);
    for step in 0..opts.steps {
        snapshots.push(toy_grads_at_step(&net, u64::from(step)));
        if opts.perturb_amplitude > 0.0 {
            let amp = opts.perturb_amplitude;
            for l in 0..net.widths.len() {
                for g in net.gamma[l].iter_mut() {
                    *g += rng.gen_range(-amp..=amp);
                }
                for b in net.beta[l].iter_mut() {
                    *b += rng.gen_range(-amp..=amp);
                }
                for w in net.weights[l].iter_mut() {
                    *w += rng.gen_range(-amp..=amp);
                }
            }
        }
    }
    Ok(snapshots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{self, neuron_importance};
    use crate::netmodel::{JoinRule, LayerKind, LayerSpec};

    fn chain_spec(widths: &[u32]) -> NetworkSpec {
        let mut layers = Vec::new();
        let mut c_in = 4;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec {
                layer_id: i as LayerId,
                name: format!("l{i}"),
                kind: LayerKind::Conv,
                kernel_size: 1,
                in_channels: c_in,
                out_channels: w,
                out_spatial: (1, 1),
                predecessor_ids: if i == 0 { vec![] } else { vec![i as LayerId - 1] },
                prunable: true,
                min_keep: None,
                join: JoinRule::Add,
            });
            c_in = w;
        }
        NetworkSpec {
            input_channels: 4,
            layers,
            couplings: vec![],
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = chain_spec(&[10, 6]);
        let net = ToyNet::from_spec(&spec, 5, 24).unwrap();
        let snapshot = toy_grads(&net);
        let h = 1e-4;
        for (&layer, snap) in &snapshot.layers {
            for c in 0..snap.gamma.len() as u32 {
                let plus = net.with_gamma_shifted(layer, c, h).unwrap().loss();
                let minus = net.with_gamma_shifted(layer, c, -h).unwrap().loss();
                let fd = (plus - minus) / (2.0 * h);
                let g = snap.grad_gamma[c as usize];
                let tol = 1e-5 * g.abs().max(1e-6);
                assert!((g - fd).abs() <= tol, "gamma l{layer} c{c}: {g} vs {fd}");

                let plus = net.with_beta_shifted(layer, c, h).unwrap().loss();
                let minus = net.with_beta_shifted(layer, c, -h).unwrap().loss();
                let fd = (plus - minus) / (2.0 * h);
                let g = snap.grad_beta[c as usize];
                let tol = 1e-5 * g.abs().max(1e-6);
                assert!((g - fd).abs() <= tol, "beta l{layer} c{c}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn grads_are_deterministic() {
        let spec = chain_spec(&[8, 5]);
        let a = toy_grads(&ToyNet::from_spec(&spec, 9, 16).unwrap());
        let b = toy_grads(&ToyNet::from_spec(&spec, 9, 16).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_fanout_channel_has_zero_gradient_and_delta() {
        let spec = chain_spec(&[6, 4]);
        let mut net = ToyNet::from_spec(&spec, 3, 16).unwrap();
        // Cut channel 2 of layer 0 out of every downstream mix.
        let prev = 6;
        for row in 0..4 {
            net.weights[1][row * prev + 2] = 0.0;
        }
        let snapshot = toy_grads(&net);
        let snap = &snapshot.layers[&0];
        assert_eq!(snap.grad_gamma[2], 0.0);
        assert_eq!(snap.grad_beta[2], 0.0);
        let delta = toy_loss_delta(&net, 0, 2).unwrap();
        assert_eq!(delta, 0.0);
    }

    #[test]
    fn zeroing_an_already_zero_channel_changes_nothing() {
        let spec = chain_spec(&[5, 3]);
        let mut net = ToyNet::from_spec(&spec, 7, 12).unwrap();
        net.gamma[0][1] = 0.0;
        net.beta[0][1] = 0.0;
        assert_eq!(toy_loss_delta(&net, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn duplicate_channels_have_equal_loss_deltas() {
        let spec = chain_spec(&[6, 4]);
        let mut net = ToyNet::from_spec(&spec, 19, 16).unwrap();
        // Make channel 3 of layer 0 an exact copy of channel 1: same
        // incoming mix, same scale/shift, same fan-out columns.
        let in_width = 4;
        for col in 0..in_width {
            net.weights[0][3 * in_width + col] = net.weights[0][in_width + col];
        }
        net.gamma[0][3] = net.gamma[0][1];
        net.beta[0][3] = net.beta[0][1];
        let prev = 6;
        for row in 0..4 {
            net.weights[1][row * prev + 3] = net.weights[1][row * prev + 1];
        }
        let a = toy_loss_delta(&net, 0, 1).unwrap();
        let b = toy_loss_delta(&net, 0, 3).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn influential_channel_outranks_dead_channel() {
        let spec = chain_spec(&[6, 4]);
        let mut net = ToyNet::from_spec(&spec, 11, 16).unwrap();
        let prev = 6;
        for row in 0..4 {
            net.weights[1][row * prev] = 0.0; // dead fan-out of channel 0
        }
        let dead = toy_loss_delta(&net, 0, 0).unwrap().abs();
        let live: f64 = (1..6)
            .map(|c| toy_loss_delta(&net, 0, c).unwrap().abs())
            .fold(0.0, f64::max);
        assert_eq!(dead, 0.0);
        assert!(live > 0.0);
    }

    #[test]
    fn trace_is_deterministic_and_shape_correct() {
        let spec = chain_spec(&[7, 5]);
        let opts = TraceGenOptions {
            seed: 21,
            steps: 4,
            ..TraceGenOptions::default()
        };
        let a = gen_trace(&spec, &opts).unwrap();
        let b = gen_trace(&spec, &opts).unwrap();
        assert_eq!(a, b);
        for snapshot in &a {
            assert_eq!(snapshot.layers.len(), 2);
            assert_eq!(snapshot.layers[&0].gamma.len(), 7);
            assert_eq!(snapshot.layers[&1].gamma.len(), 5);
        }
        // Perturbations actually move the scores across steps.
        let s0 = neuron_importance(
            a[0].layers[&0].gamma[0],
            a[0].layers[&0].beta[0],
            a[0].layers[&0].grad_gamma[0],
            a[0].layers[&0].grad_beta[0],
        )
        .unwrap();
        let s3 = neuron_importance(
            a[3].layers[&0].gamma[0],
            a[3].layers[&0].beta[0],
            a[3].layers[&0].grad_gamma[0],
            a[3].layers[&0].grad_beta[0],
        )
        .unwrap();
        assert_ne!(s0, s3);
    }

    #[test]
    fn zero_amplitude_freezes_snapshots() {
        let spec = chain_spec(&[6]);
        let opts = TraceGenOptions {
            seed: 2,
            steps: 3,
            perturb_amplitude: 0.0,
            samples: 8,
        };
        let trace = gen_trace(&spec, &opts).unwrap();
        assert_eq!(trace[0].layers, trace[1].layers);
        assert_eq!(trace[1].layers, trace[2].layers);
    }

    #[test]
    fn trace_round_trips_through_importance_parser() {
        let spec = chain_spec(&[5, 4]);
        let opts = TraceGenOptions {
            seed: 13,
            steps: 3,
            ..TraceGenOptions::default()
        };
        let trace = gen_trace(&spec, &opts).unwrap();
        let mut buf = Vec::new();
        importance::write_trace(&mut buf, &trace).unwrap();
        let parsed = importance::read_trace(buf.as_slice()).unwrap();
        assert_eq!(parsed, trace);
    }
}
