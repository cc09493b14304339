//! The policy network: a tanh MLP with a categorical action head and a value
//! head sharing one output layer (width `action_count + 1`).
//!
//! Parameters live in one flat f64 vector, laid out layer by layer as
//! `W1, b1, W2, b2, ..., Wout, bout` with each `W` stored row-major
//! `[in][out]`. That flat vector is the exchange format between trainers,
//! the parameter service, and policy workers; `layout_digest` fingerprints
//! the dimension list so blobs cannot be loaded into the wrong shape.

use crate::model::types::{ActionId, ObservationVector, ParameterBlob};
use crate::model::validate::ModelSpec;
use crate::util::digest::fnv1a;
use crate::util::rng::CounterRng;

use super::tape::{NodeId, Tape, Tensor};

/// Output of one rollout row: the full action distribution plus the sampled
/// (or greedy) action and its annotations.
#[derive(Debug, Clone)]
pub struct RolloutOutput {
    pub logits: Vec<f64>,
    pub action: ActionId,
    pub log_prob: f64,
    pub value_pred: f64,
    pub policy_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpPolicy {
    pub obs_dim: usize,
    pub action_count: usize,
    /// Layer widths inclusive: `[obs_dim, hidden..., action_count + 1]`.
    dims: Vec<usize>,
    params: Vec<f64>,
    pub version: u64,
}

impl MlpPolicy {
    /// Deterministically initialized network for a model spec. Hidden layers
    /// use Xavier-uniform; the output layer is scaled down so the initial
    /// policy is near-uniform.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut dims = vec![spec.obs_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.action_count + 1);

        let mut params = Vec::with_capacity(Self::param_count_of(&dims));
        let layers = dims.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut rng = CounterRng::from_key(&[seed, 0x6d6c_70, l as u64]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let out_scale = if l + 1 == layers { 0.01 } else { 1.0 };
            for _ in 0..fan_in * fan_out {
                params.push(rng.uniform(-bound, bound) * out_scale);
            }
            for _ in 0..fan_out {
                params.push(0.0);
            }
        }
        Self {
            obs_dim: spec.obs_dim,
            action_count: spec.action_count,
            dims,
            params,
            version: 0,
        }
    }

    fn param_count_of(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn flat_params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len(), "parameter length mismatch");
        self.params.copy_from_slice(params);
    }

    /// Fingerprint of the layer dimension list.
    pub fn layout_digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.dims.len() * 8);
        for d in &self.dims {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        fnv1a(&bytes)
    }

    pub fn to_blob(&self, policy_name: &str) -> ParameterBlob {
        ParameterBlob {
            policy_name: policy_name.to_string(),
            version: self.version,
            flat_params: self.params.clone(),
            layout_digest: self.layout_digest(),
        }
    }

    /// Load a published blob; the layout digest must match.
    pub fn load_blob(&mut self, blob: &ParameterBlob) -> Result<(), String> {
        if blob.layout_digest != self.layout_digest() {
            return Err(format!(
                "layout digest mismatch: blob {:x} vs policy {:x}",
                blob.layout_digest,
                self.layout_digest()
            ));
        }
        if blob.flat_params.len() != self.params.len() {
            return Err("parameter length mismatch".into());
        }
        self.params.copy_from_slice(&blob.flat_params);
        self.version = blob.version;
        Ok(())
    }

    /// Forward pass without a tape: batched logits and values.
    pub fn forward(&self, obs: &[&ObservationVector]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let batch = obs.len();
        let mut act = Vec::with_capacity(batch * self.obs_dim);
        for o in obs {
            debug_assert_eq!(o.dim(), self.obs_dim);
            act.extend_from_slice(&o.values);
        }
        let mut rows = batch;
        let mut width = self.obs_dim;
        let mut offset = 0;
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut next = vec![0.0; rows * fan_out];
            for r in 0..rows {
                for i in 0..fan_in {
                    let a = act[r * width + i];
                    if a == 0.0 {
                        continue;
                    }
                    let wrow = &w[i * fan_out..(i + 1) * fan_out];
                    let nrow = &mut next[r * fan_out..(r + 1) * fan_out];
                    for (n, &wv) in nrow.iter_mut().zip(wrow) {
                        *n += a * wv;
                    }
                }
                for (n, &bv) in next[r * fan_out..(r + 1) * fan_out].iter_mut().zip(b) {
                    *n += bv;
                }
                if l + 1 != layers {
                    for n in next[r * fan_out..(r + 1) * fan_out].iter_mut() {
                        *n = n.tanh();
                    }
                }
            }
            act = next;
            width = fan_out;
            rows = batch;
        }
        let mut logits = Vec::with_capacity(batch);
        let mut values = Vec::with_capacity(batch);
        for r in 0..batch {
            let row = &act[r * width..(r + 1) * width];
            logits.push(row[..self.action_count].to_vec());
            values.push(row[self.action_count]);
        }
        (logits, values)
    }

    /// Forward pass on a tape: returns (logit node `[N,A]`, value node
    /// `[N,1]`, parameter nodes in layout order).
    pub fn forward_tape(&self, tape: &mut Tape, x: NodeId) -> (NodeId, NodeId, Vec<NodeId>) {
        let mut param_nodes = Vec::new();
        let mut h = x;
        let layers = self.dims.len() - 1;
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = tape.param(Tensor::new(
                fan_in,
                fan_out,
                self.params[offset..offset + fan_in * fan_out].to_vec(),
            ));
            let b = tape.param(Tensor::new(
                1,
                fan_out,
                self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]
                    .to_vec(),
            ));
            offset += fan_in * fan_out + fan_out;
            param_nodes.push(w);
            param_nodes.push(b);
            let z = tape.matmul(h, w);
            let z = tape.add_bias(z, b);
            h = if l + 1 == layers { z } else { tape.tanh(z) };
        }
        let logits = tape.slice_cols(h, 0, self.action_count);
        let values = tape.slice_cols(h, self.action_count, self.action_count + 1);
        (logits, values, param_nodes)
    }

    /// Flatten per-node gradients back into layout order.
    pub fn flatten_grads(
        &self,
        tape: &Tape,
        grads: &super::tape::Gradients,
        param_nodes: &[NodeId],
    ) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.params.len());
        for &n in param_nodes {
            flat.extend(grads.of(n, tape.value(n)).data);
        }
        debug_assert_eq!(flat.len(), self.params.len());
        flat
    }

    /// Action selection for one request row. Sampling is keyed by
    /// (experiment seed, client id, request id), so any two executions of the
    /// same request with the same parameters pick the same action no matter
    /// which process serves it.
    pub fn select_action(
        &self,
        logits: &[f64],
        seed: u64,
        client_id: u64,
        request_id: u64,
        deterministic: bool,
    ) -> (ActionId, f64) {
        let lp = log_softmax_row(logits);
        let idx = if deterministic {
            argmax(logits)
        } else {
            let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let mut rng = CounterRng::from_key(&[seed, client_id, request_id]);
            rng.categorical(&probs)
        };
        (ActionId::new(idx as u32), lp[idx])
    }

    /// Serve a batch of requests: forward plus per-row action selection.
    pub fn rollout(
        &self,
        seed: u64,
        rows: &[RolloutRequest<'_>],
    ) -> Vec<RolloutOutput> {
        let obs: Vec<&ObservationVector> = rows.iter().map(|r| r.obs).collect();
        let (logits, values) = self.forward(&obs);
        rows.iter()
            .zip(logits)
            .zip(values)
            .map(|((row, logits), value)| {
                let (action, log_prob) = self.select_action(
                    &logits,
                    seed,
                    row.client_id,
                    row.request_id,
                    row.deterministic,
                );
                RolloutOutput {
                    logits,
                    action,
                    log_prob,
                    value_pred: value,
                    policy_state: None,
                }
            })
            .collect()
    }
}

/// One rollout input row.
#[derive(Debug, Clone, Copy)]
pub struct RolloutRequest<'a> {
    pub client_id: u64,
    pub request_id: u64,
    pub obs: &'a ObservationVector,
    pub deterministic: bool,
}

pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - log_sum).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec {
            obs_dim: 4,
            action_count: 3,
            hidden: vec![8, 8],
        }
    }

    #[test]
    fn zero_params_give_uniform_distribution_and_zero_value() {
        let mut p = MlpPolicy::init(&spec(), 1);
        let zeros = vec![0.0; p.param_count()];
        p.set_flat_params(&zeros);
        let obs = ObservationVector::new(vec![1.0, -2.0, 0.5, 3.0]);
        let (logits, values) = p.forward(&[&obs]);
        assert_eq!(logits[0], vec![0.0; 3]);
        assert_eq!(values[0], 0.0);
        let lp = log_softmax_row(&logits[0]);
        for v in &lp {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_layer_closed_form() {
        // One linear layer (no hidden): out = x W + b, hand-computable.
        let s = ModelSpec {
            obs_dim: 2,
            action_count: 2,
            hidden: vec![],
        };
        let mut p = MlpPolicy::init(&s, 0);
        // W is [2 x 3] row-major, b is [3]: logits0, logits1, value.
        p.set_flat_params(&[
            1.0, 2.0, 3.0, // W row for x0
            4.0, 5.0, 6.0, // W row for x1
            0.1, 0.2, 0.3, // bias
        ]);
        let obs = ObservationVector::new(vec![1.0, 1.0]);
        let (logits, values) = p.forward(&[&obs]);
        assert!((logits[0][0] - 5.1).abs() < 1e-15);
        assert!((logits[0][1] - 7.2).abs() < 1e-15);
        assert!((values[0] - 9.3).abs() < 1e-15);
    }

    #[test]
    fn batch_equals_loop() {
        let p = MlpPolicy::init(&spec(), 42);
        let obs: Vec<ObservationVector> = (0..16)
            .map(|i| ObservationVector::new(vec![i as f64 * 0.1, -0.3, 0.7, 1.0 - i as f64 * 0.05]))
            .collect();
        let refs: Vec<&ObservationVector> = obs.iter().collect();
        let (batch_logits, batch_values) = p.forward(&refs);
        for (i, o) in obs.iter().enumerate() {
            let (single_logits, single_values) = p.forward(&[o]);
            assert_eq!(single_logits[0], batch_logits[i]);
            assert_eq!(single_values[0], batch_values[i]);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = MlpPolicy::init(&spec(), 7);
        let obs = ObservationVector::new(vec![0.3, -0.2, 0.9, 0.1]);
        let (logits, values) = p.forward(&[&obs]);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(1, 4, obs.values.clone()));
        let (ln, vn, _) = p.forward_tape(&mut tape, x);
        assert_eq!(tape.value(ln).data, logits[0]);
        assert_eq!(tape.value(vn).data, vec![values[0]]);
    }

    #[test]
    fn blob_roundtrip_and_layout_guard() {
        let p = MlpPolicy::init(&spec(), 3);
        let blob = p.to_blob("rl");
        let mut q = MlpPolicy::init(&spec(), 99);
        q.load_blob(&blob).unwrap();
        assert_eq!(q.flat_params(), p.flat_params());

        let other = ModelSpec {
            obs_dim: 4,
            action_count: 3,
            hidden: vec![16],
        };
        let mut r = MlpPolicy::init(&other, 1);
        assert!(r.load_blob(&blob).is_err());
    }

    #[test]
    fn deterministic_sampling_by_key() {
        let p = MlpPolicy::init(&spec(), 5);
        let obs = ObservationVector::new(vec![0.5; 4]);
        let rows = [RolloutRequest {
            client_id: 3,
            request_id: 10,
            obs: &obs,
            deterministic: false,
        }];
        let a = p.rollout(77, &rows);
        let b = p.rollout(77, &rows);
        assert_eq!(a[0].action, b[0].action);
        assert_eq!(a[0].log_prob, b[0].log_prob);
    }
}
