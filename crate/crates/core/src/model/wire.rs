//! The fixed-layout binary wire format.
//!
//! Every message that crosses a stream or the parameter service is encoded
//! with this codec. The format is deterministic (equal values produce
//! byte-identical encodings), little-endian, and bounded: list lengths are
//! explicit and validated against the remaining input, so a corrupted or
//! truncated buffer always surfaces as [`WireError`] instead of a bad value.
//!
//! The byte-level layout is documented in `docs/wire-format.md`.

use thiserror::Error;

use super::types::{
    ActionId, InferenceRequest, InferenceResponse, ObservationVector, ParameterBlob, SampleBatch,
    Trajectory, TransitionStep,
};

/// One-byte type tags. Every record, nested or top-level, starts with one.
pub mod tag {
    pub const OBSERVATION: u8 = 0x01;
    pub const ACTION: u8 = 0x02;
    pub const TRANSITION: u8 = 0x03;
    pub const TRAJECTORY: u8 = 0x04;
    pub const SAMPLE_BATCH: u8 = 0x05;
    pub const INFERENCE_REQUEST: u8 = 0x06;
    pub const INFERENCE_RESPONSE: u8 = 0x07;
    pub const PARAMETER_BLOB: u8 = 0x08;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed bytes: {0}")]
    Malformed(&'static str),
}

impl WireError {
    fn truncated() -> Self {
        WireError::Malformed("truncated input")
    }
}

type Result<T> = std::result::Result<T, WireError>;

/// Types that encode to the wire format.
pub trait WireEncode {
    fn encode_into(&self, out: &mut Vec<u8>);

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }
}

/// Types that decode from the wire format. `decode` consumes the whole
/// buffer; trailing bytes are an error.
pub trait WireDecode: Sized {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self>;

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let v = Self::decode_from(&mut r)?;
        if !r.is_empty() {
            return Err(WireError::Malformed("trailing bytes"));
        }
        Ok(v)
    }
}

/// Cursor over an input buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(WireError::truncated());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::Malformed("invalid bool byte")),
        }
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    /// A finite f64. Non-finite bit patterns signal transport corruption.
    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let v = f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]);
        if !v.is_finite() {
            return Err(WireError::Malformed("non-finite float"));
        }
        Ok(v)
    }

    /// List-length prefix, validated so `min_elem` bytes per element fit in
    /// the remaining input. Prevents huge bogus allocations.
    pub fn len_prefix(&mut self, min_elem: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem.max(1)) > self.remaining() {
            return Err(WireError::Malformed("length prefix exceeds input"));
        }
        Ok(n)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.len_prefix(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed("invalid utf-8"))
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(v)
    }

    pub fn opt_f64_vec(&mut self) -> Result<Option<Vec<f64>>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64_vec()?)),
            _ => Err(WireError::Malformed("invalid option byte")),
        }
    }

    pub fn expect_tag(&mut self, t: u8) -> Result<()> {
        let got = self.u8()?;
        if got != t {
            return Err(WireError::Malformed("unexpected type tag"));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f64_vec(out: &mut Vec<u8>, v: &[f64]) {
    put_u32(out, v.len() as u32);
    for x in v {
        put_f64(out, *x);
    }
}

fn put_opt_f64_vec(out: &mut Vec<u8>, v: &Option<Vec<f64>>) {
    match v {
        None => out.push(0),
        Some(v) => {
            out.push(1);
            put_f64_vec(out, v);
        }
    }
}

impl WireEncode for ObservationVector {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(tag::OBSERVATION);
        put_f64_vec(out, &self.values);
    }
}

impl WireDecode for ObservationVector {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_tag(tag::OBSERVATION)?;
        Ok(Self {
            values: r.f64_vec()?,
        })
    }
}

impl WireEncode for ActionId {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(tag::ACTION);
        put_u32(out, self.index);
    }
}

impl WireDecode for ActionId {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_tag(tag::ACTION)?;
        Ok(Self { index: r.u32()? })
    }
}

impl WireEncode for TransitionStep {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(tag::TRANSITION);
        self.obs.encode_into(out);
        self.action.encode_into(out);
        put_f64(out, self.reward);
        out.push(self.done as u8);
        out.push(self.truncated as u8);
        put_f64(out, self.log_prob_old);
        put_f64(out, self.value_pred);
        put_u64(out, self.policy_version);
    }
}

impl WireDecode for TransitionStep {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_tag(tag::TRANSITION)?;
        let obs = ObservationVector::decode_from(r)?;
        let action = ActionId::decode_from(r)?;
        let reward = r.f64()?;
        let done = r.bool()?;
        let truncated = r.bool()?;
        if done && truncated {
            return Err(WireError::Malformed("done and truncated both set"));
        }
        Ok(Self {
            obs,
            action,
            reward,
            done,
            truncated,
            log_prob_old: r.f64()?,
            value_pred: r.f64()?,
            policy_version: r.u64()?,
        })
    }
}

impl WireEncode for Trajectory {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(tag::TRAJECTORY);
        put_string(out, &self.agent_id);
        put_string(out, &self.policy_name);
        put_u32(out, self.steps.len() as u32);
        for s in &self.steps {
            s.encode_into(out);
        }
        put_f64(out, self.bootstrap_value);
        put_u64(out, self.env_frames);
    }
}

impl WireDecode for Trajectory {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_tag(tag::TRAJECTORY)?;
        let agent_id = r.string()?;
        let policy_name = r.string()?;
        let n = r.len_prefix(32)?;
        if n == 0 {
            return Err(WireError::Malformed("empty trajectory"));
        }
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            steps.push(TransitionStep::decode_from(r)?);
        }
        let t = Self {
            agent_id,
            policy_name,
            steps,
            bootstrap_value: r.f64()?,
            env_frames: r.u64()?,
        };
        if !t.check_invariants() {
            return Err(WireError::Malformed("trajectory invariant violation"));
        }
        Ok(t)
    }
}

impl WireEncode for SampleBatch {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(tag::SAMPLE_BATCH);
        put_u32(out, self.trajectories.len() as u32);
        for t in &self.trajectories {
            t.encode_into(out);
        }
        put_u64(out, self.total_env_frames);
    }
}

impl WireDecode for SampleBatch {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_tag(tag::SAMPLE_BATCH)?;
        let n = r.len_prefix(16)?;
        let mut trajectories = Vec::with_capacity(n);
        for _ in 0..n {
            trajectories.push(Trajectory::decode_from(r)?);
        }
        Ok(Self {
            trajectories,
            total_env_frames: r.u64()?,
        })
    }
}

impl WireEncode for InferenceRequest {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(tag::INFERENCE_REQUEST);
        put_u64(out, self.client_id);
        put_string(out, &self.agent_id);
        put_u64(out, self.request_id);
        self.obs.encode_into(out);
        put_opt_f64_vec(out, &self.policy_state);
        out.push(self.deterministic as u8);
    }
}

impl WireDecode for InferenceRequest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_tag(tag::INFERENCE_REQUEST)?;
        Ok(Self {
            client_id: r.u64()?,
            agent_id: r.string()?,
            request_id: r.u64()?,
            obs: ObservationVector::decode_from(r)?,
            policy_state: r.opt_f64_vec()?,
            deterministic: r.bool()?,
        })
    }
}

impl WireEncode for InferenceResponse {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(tag::INFERENCE_RESPONSE);
        put_u64(out, self.client_id);
        put_u64(out, self.request_id);
        self.action.encode_into(out);
        put_opt_f64_vec(out, &self.policy_state);
        put_f64(out, self.log_prob);
        put_f64(out, self.value_pred);
        put_u64(out, self.policy_version);
    }
}

impl WireDecode for InferenceResponse {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_tag(tag::INFERENCE_RESPONSE)?;
        Ok(Self {
            client_id: r.u64()?,
            request_id: r.u64()?,
            action: ActionId::decode_from(r)?,
            policy_state: r.opt_f64_vec()?,
            log_prob: r.f64()?,
            value_pred: r.f64()?,
            policy_version: r.u64()?,
        })
    }
}

impl WireEncode for ParameterBlob {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(tag::PARAMETER_BLOB);
        put_string(out, &self.policy_name);
        put_u64(out, self.version);
        put_f64_vec(out, &self.flat_params);
        put_u64(out, self.layout_digest);
    }
}

impl WireDecode for ParameterBlob {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_tag(tag::PARAMETER_BLOB)?;
        Ok(Self {
            policy_name: r.string()?,
            version: r.u64()?,
            flat_params: r.f64_vec()?,
            layout_digest: r.u64()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_id_is_five_bytes() {
        let bytes = ActionId::new(0).encode();
        assert_eq!(bytes.len(), 5);
        assert_eq!(bytes[0], tag::ACTION);
    }

    #[test]
    fn empty_input_is_malformed() {
        assert!(Trajectory::decode(&[]).is_err());
        assert!(InferenceRequest::decode(&[]).is_err());
    }

    #[test]
    fn equal_values_equal_bytes() {
        let t = sample_trajectory(3);
        let a = SampleBatch::from_trajectories(vec![t.clone()]);
        let b = SampleBatch::from_trajectories(vec![t]);
        assert_eq!(a.encode(), b.encode());
    }

    #[test]
    fn bad_tag_rejected() {
        let mut bytes = ActionId::new(1).encode();
        bytes[0] = 0x7f;
        assert!(ActionId::decode(&bytes).is_err());
    }

    #[test]
    fn non_finite_float_rejected() {
        let mut bytes = ObservationVector::new(vec![1.0, 2.0]).encode();
        let nan = f64::NAN.to_le_bytes();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&nan);
        assert_eq!(
            ObservationVector::decode(&bytes),
            Err(WireError::Malformed("non-finite float"))
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = ActionId::new(1).encode();
        bytes.push(0);
        assert!(ActionId::decode(&bytes).is_err());
    }

    pub(crate) fn sample_trajectory(n: usize) -> Trajectory {
        let steps = (0..n)
            .map(|i| TransitionStep {
                obs: ObservationVector::new(vec![i as f64, -(i as f64)]),
                action: ActionId::new((i % 3) as u32),
                reward: 0.25 * i as f64,
                done: i + 1 == n,
                truncated: false,
                log_prob_old: -0.7,
                value_pred: 0.5,
                policy_version: 1,
            })
            .collect();
        Trajectory {
            agent_id: "0:0:0".into(),
            policy_name: "rl".into(),
            steps,
            bootstrap_value: 0.0,
            env_frames: n as u64,
        }
    }

    #[test]
    fn roundtrip_each_type() {
        let t = sample_trajectory(3);
        assert_eq!(Trajectory::decode(&t.encode()).unwrap(), t);

        let req = InferenceRequest {
            client_id: 12,
            agent_id: "1:0:1".into(),
            request_id: 99,
            obs: ObservationVector::new(vec![0.5; 4]),
            policy_state: Some(vec![1.0, -1.0]),
            deterministic: true,
        };
        assert_eq!(InferenceRequest::decode(&req.encode()).unwrap(), req);

        let resp = InferenceResponse {
            client_id: 12,
            request_id: 99,
            action: ActionId::new(2),
            policy_state: None,
            log_prob: -0.1,
            value_pred: 3.5,
            policy_version: 7,
        };
        assert_eq!(InferenceResponse::decode(&resp.encode()).unwrap(), resp);

        let blob = ParameterBlob {
            policy_name: "rl".into(),
            version: 4,
            flat_params: vec![0.0, 1.5, -2.25],
            layout_digest: 0xdead_beef,
        };
        assert_eq!(ParameterBlob::decode(&blob.encode()).unwrap(), blob);
    }

    #[test]
    fn truncation_always_errors() {
        let bytes = sample_trajectory(3).encode();
        for cut in 0..bytes.len() {
            assert!(
                Trajectory::decode(&bytes[..cut]).is_err(),
                "prefix of len {cut} decoded"
            );
        }
    }
}
