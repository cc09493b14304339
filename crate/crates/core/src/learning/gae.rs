//! Generalized advantage estimation.

/// Compute advantages by the backward recursion
/// `A_t = delta_t + gamma * lambda * A_{t+1}` with
/// `delta_t = r_t + gamma * v_{t+1} * (1 - done_t) - v_t`.
///
/// `values` must hold one bootstrap entry beyond `rewards`; terminal steps
/// are expected to carry a zero bootstrap.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let t = rewards.len();
    assert_eq!(values.len(), t + 1, "values needs a bootstrap entry");
    assert_eq!(dones.len(), t);
    let mut adv = vec![0.0; t];
    let mut carry = 0.0;
    for i in (0..t).rev() {
        let not_done = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * values[i + 1] * not_done - values[i];
        carry = delta + gamma * lambda * carry;
        adv[i] = carry;
    }
    adv
}
