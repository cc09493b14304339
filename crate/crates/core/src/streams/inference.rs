//! Duplex inference stream endpoints.
//!
//! A client multiplexes the (ring instance, agent) request slots of one
//! actor toward one server endpoint; a server flushes pending requests from
//! all of its clients into batches and responds to each exactly once. The
//! same server type drives remote policy workers (shared memory or socket)
//! and the in-actor inline engine, which is what makes inline and remote
//! inference behaviorally identical.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::model::types::{InferenceRequest, InferenceResponse, ObservationVector};
use crate::model::wire::{WireDecode, WireEncode};

use super::inline::InlineTable;
use super::shm::{SlotTable, STATE_EMPTY, STATE_REQUEST, STATE_RESPONSE};
use super::socket::{connect_retry, write_frame_nonblocking, Acceptor, Connection};
use super::{StreamError, OPEN_TIMEOUT};

/// Binding of one client id to its slot index on the server's table.
#[derive(Debug, Clone, Copy)]
pub struct ClientBinding {
    pub client_id: u64,
    pub slot: u32,
}

struct ClientSlotState {
    slot: u32,
    next_request_id: u64,
    outstanding: bool,
}

enum ClientBackend {
    Inline(Arc<InlineTable>),
    Shm(SlotTable),
    Socket(SocketClient),
}

struct SocketClient {
    stream: std::net::TcpStream,
    reader: super::framing::FrameReader,
    ready: HashMap<u64, InferenceResponse>,
}

/// Actor-side endpoint of an inference stream (one per server the actor's
/// agents are assigned to). Single-owner.
pub struct InferenceClient {
    backend: ClientBackend,
    states: HashMap<u64, ClientSlotState>,
}

impl InferenceClient {
    pub fn inline(table: Arc<InlineTable>, bindings: &[ClientBinding]) -> Self {
        Self {
            backend: ClientBackend::Inline(table),
            states: Self::states(bindings),
        }
    }

    pub fn open_shm(region: &str, bindings: &[ClientBinding]) -> Result<Self, StreamError> {
        let table = SlotTable::open(region, OPEN_TIMEOUT)?;
        for b in bindings {
            if b.slot as usize >= table.slot_count() {
                return Err(StreamError::TransportUnavailable(format!(
                    "slot {} out of range for region {region}",
                    b.slot
                )));
            }
        }
        Ok(Self {
            backend: ClientBackend::Shm(table),
            states: Self::states(bindings),
        })
    }

    pub fn open_socket(addr: SocketAddr, bindings: &[ClientBinding]) -> Result<Self, StreamError> {
        let stream = connect_retry(addr, OPEN_TIMEOUT)?;
        stream.set_nonblocking(true)?;
        Ok(Self {
            backend: ClientBackend::Socket(SocketClient {
                stream,
                reader: super::framing::FrameReader::new(),
                ready: HashMap::new(),
            }),
            states: Self::states(bindings),
        })
    }

    fn states(bindings: &[ClientBinding]) -> HashMap<u64, ClientSlotState> {
        bindings
            .iter()
            .map(|b| {
                (
                    b.client_id,
                    ClientSlotState {
                        slot: b.slot,
                        next_request_id: 1,
                        outstanding: false,
                    },
                )
            })
            .collect()
    }

    /// Post a request for one client. Errors with `SlotBusy` while a prior
    /// request is unanswered. Returns the assigned request id.
    pub fn post(
        &mut self,
        client_id: u64,
        agent_id: &str,
        obs: ObservationVector,
        policy_state: Option<Vec<f64>>,
        deterministic: bool,
    ) -> Result<u64, StreamError> {
        let state = self
            .states
            .get_mut(&client_id)
            .unwrap_or_else(|| panic!("client {client_id} not bound to this endpoint"));
        if state.outstanding {
            return Err(StreamError::SlotBusy(client_id));
        }
        let request_id = state.next_request_id;
        let req = InferenceRequest {
            client_id,
            agent_id: agent_id.to_string(),
            request_id,
            obs,
            policy_state,
            deterministic,
        };
        let bytes = req.encode();
        match &mut self.backend {
            ClientBackend::Inline(table) => {
                let slot = state.slot as usize;
                if table.state(slot) != STATE_EMPTY {
                    return Err(StreamError::SlotBusy(client_id));
                }
                table.publish(slot, &bytes, STATE_REQUEST, true);
            }
            ClientBackend::Shm(table) => {
                let slot = state.slot as usize;
                if table.state(slot).load(Ordering::Acquire) != STATE_EMPTY {
                    return Err(StreamError::SlotBusy(client_id));
                }
                table.seq(slot).store(request_id, Ordering::Relaxed);
                table.publish(slot, &bytes, STATE_REQUEST)?;
            }
            ClientBackend::Socket(sc) => {
                write_frame_nonblocking(&mut sc.stream, &bytes)?;
            }
        }
        state.next_request_id += 1;
        state.outstanding = true;
        Ok(request_id)
    }

    /// Nonblocking poll for one client's response. `Ok(None)` means not
    /// ready yet; a returned response frees the slot for the next post.
    pub fn poll(&mut self, client_id: u64) -> Result<Option<InferenceResponse>, StreamError> {
        let state = self
            .states
            .get_mut(&client_id)
            .unwrap_or_else(|| panic!("client {client_id} not bound to this endpoint"));
        if !state.outstanding {
            return Ok(None);
        }
        let resp = match &mut self.backend {
            ClientBackend::Inline(table) => {
                let slot = state.slot as usize;
                match table.read_if(slot, STATE_RESPONSE) {
                    Some(bytes) => {
                        let resp = InferenceResponse::decode(&bytes)?;
                        table.set_state(slot, STATE_EMPTY);
                        Some(resp)
                    }
                    None => None,
                }
            }
            ClientBackend::Shm(table) => {
                let slot = state.slot as usize;
                if table.state(slot).load(Ordering::Acquire) == STATE_RESPONSE {
                    let bytes = table.read_payload(slot);
                    let resp = InferenceResponse::decode(&bytes)?;
                    table.state(slot).store(STATE_EMPTY, Ordering::Release);
                    Some(resp)
                } else {
                    None
                }
            }
            ClientBackend::Socket(sc) => {
                // Drain whatever arrived; file responses per client.
                loop {
                    match sc.reader.poll_frame(&mut sc.stream) {
                        Ok(Some(frame)) => {
                            let resp = InferenceResponse::decode(&frame)?;
                            sc.ready.insert(resp.client_id, resp);
                        }
                        Ok(None) => break,
                        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                            return Err(StreamError::TransportUnavailable(
                                "inference server closed the connection".into(),
                            ))
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                sc.ready.remove(&client_id)
            }
        };
        if let Some(resp) = resp {
            debug_assert_eq!(resp.request_id + 1, state.next_request_id);
            state.outstanding = false;
            Ok(Some(resp))
        } else {
            Ok(None)
        }
    }

    /// True if this client id currently has a request in flight.
    pub fn outstanding(&self, client_id: u64) -> bool {
        self.states
            .get(&client_id)
            .map(|s| s.outstanding)
            .unwrap_or(false)
    }
}

enum ServerBackend {
    Inline(Arc<InlineTable>),
    Shm(SlotTable),
    Socket {
        acceptor: Acceptor,
        conns: Vec<Connection>,
    },
}

/// Route from a flushed request back to where its response must go.
#[derive(Debug, Clone, Copy)]
enum Route {
    Slot(usize),
    Conn(usize),
}

/// Server-side endpoint: flush pending requests, respond exactly once each.
pub struct InferenceServer {
    backend: ServerBackend,
    /// (client_id, request_id) -> route, for every flushed-but-unanswered
    /// request.
    pending: HashMap<(u64, u64), Route>,
    known_clients: std::collections::BTreeSet<u64>,
}

impl InferenceServer {
    pub fn inline(table: Arc<InlineTable>) -> Self {
        Self {
            backend: ServerBackend::Inline(table),
            pending: HashMap::new(),
            known_clients: Default::default(),
        }
    }

    pub fn create_shm(
        region: &str,
        slot_count: usize,
        payload_cap: usize,
    ) -> Result<Self, StreamError> {
        Ok(Self {
            backend: ServerBackend::Shm(SlotTable::create(region, slot_count, payload_cap)?),
            pending: HashMap::new(),
            known_clients: Default::default(),
        })
    }

    pub fn bind_socket(bind: &str) -> Result<(Self, SocketAddr), StreamError> {
        let acceptor = Acceptor::bind(bind)?;
        let addr = acceptor.local_addr;
        Ok((
            Self {
                backend: ServerBackend::Socket {
                    acceptor,
                    conns: Vec::new(),
                },
                pending: HashMap::new(),
                known_clients: Default::default(),
            },
            addr,
        ))
    }

    /// Clients this server has seen; the default batch bound.
    pub fn client_count(&self) -> usize {
        match &self.backend {
            ServerBackend::Inline(t) => t.slot_count().max(self.known_clients.len()),
            ServerBackend::Shm(t) => t.slot_count().max(self.known_clients.len()),
            ServerBackend::Socket { .. } => self.known_clients.len(),
        }
    }

    /// Collect up to `max_batch` pending requests, waiting at most `max_wait`
    /// for stragglers. Flushed requests stay owned by the server until
    /// `respond`.
    pub fn flush(
        &mut self,
        max_batch: usize,
        max_wait: Duration,
    ) -> Result<Vec<InferenceRequest>, StreamError> {
        let max_batch = if max_batch == 0 {
            self.client_count().max(1)
        } else {
            max_batch
        };
        let deadline = Instant::now() + max_wait;
        let mut batch = Vec::new();
        loop {
            self.collect_ready(&mut batch, max_batch)?;
            if batch.len() >= max_batch || Instant::now() >= deadline {
                return Ok(batch);
            }
            std::thread::sleep(Duration::from_micros(50));
        }
    }

    fn collect_ready(
        &mut self,
        batch: &mut Vec<InferenceRequest>,
        max_batch: usize,
    ) -> Result<(), StreamError> {
        match &mut self.backend {
            ServerBackend::Inline(table) => {
                for slot in 0..table.slot_count() {
                    if batch.len() >= max_batch {
                        break;
                    }
                    if let Some(bytes) = table.read_if(slot, STATE_REQUEST) {
                        let req = InferenceRequest::decode(&bytes)?;
                        let key = (req.client_id, req.request_id);
                        if self.pending.contains_key(&key) {
                            continue;
                        }
                        self.pending.insert(key, Route::Slot(slot));
                        self.known_clients.insert(req.client_id);
                        batch.push(req);
                    }
                }
            }
            ServerBackend::Shm(table) => {
                for slot in 0..table.slot_count() {
                    if batch.len() >= max_batch {
                        break;
                    }
                    if table.state(slot).load(Ordering::Acquire) == STATE_REQUEST {
                        let bytes = table.read_payload(slot);
                        let req = InferenceRequest::decode(&bytes)?;
                        let key = (req.client_id, req.request_id);
                        if self.pending.contains_key(&key) {
                            continue;
                        }
                        self.pending.insert(key, Route::Slot(slot));
                        self.known_clients.insert(req.client_id);
                        batch.push(req);
                    }
                }
            }
            ServerBackend::Socket { acceptor, conns } => {
                conns.extend(acceptor.accept_ready()?);
                for idx in 0..conns.len() {
                    while batch.len() < max_batch {
                        match conns[idx].poll_frame()? {
                            Some(frame) => {
                                let req = InferenceRequest::decode(&frame)?;
                                let key = (req.client_id, req.request_id);
                                self.pending.insert(key, Route::Conn(idx));
                                self.known_clients.insert(req.client_id);
                                batch.push(req);
                            }
                            None => break,
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Respond to flushed requests. Each response consumes its pending
    /// entry; answering a request that was never flushed is an error.
    pub fn respond(&mut self, responses: &[InferenceResponse]) -> Result<(), StreamError> {
        for resp in responses {
            let key = (resp.client_id, resp.request_id);
            let route = self
                .pending
                .remove(&key)
                .ok_or(StreamError::UnknownRequest {
                    client_id: resp.client_id,
                    request_id: resp.request_id,
                })?;
            let bytes = resp.encode();
            match (&mut self.backend, route) {
                (ServerBackend::Inline(table), Route::Slot(slot)) => {
                    table.publish(slot, &bytes, STATE_RESPONSE, false);
                }
                (ServerBackend::Shm(table), Route::Slot(slot)) => {
                    table.publish(slot, &bytes, STATE_RESPONSE)?;
                }
                (ServerBackend::Socket { conns, .. }, Route::Conn(idx)) => {
                    conns[idx].write_frame(&bytes)?;
                }
                _ => unreachable!("route does not match backend"),
            }
        }
        Ok(())
    }

    /// Number of flushed requests awaiting a response.
    pub fn unanswered(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::types::ActionId;

    fn obs(v: f64) -> ObservationVector {
        ObservationVector::new(vec![v, -v])
    }

    fn echo_response(req: &InferenceRequest) -> InferenceResponse {
        InferenceResponse {
            client_id: req.client_id,
            request_id: req.request_id,
            action: ActionId::new(1),
            policy_state: None,
            log_prob: -0.5,
            value_pred: 0.25,
            policy_version: 1,
        }
    }

    fn exercise_pair(mut client: InferenceClient, mut server: InferenceServer) {
        // Post before serve: poll is NotReady.
        client.post(0, "a", obs(1.0), None, false).unwrap();
        assert!(client.poll(0).unwrap().is_none());
        // Double post is a protocol violation.
        assert!(matches!(
            client.post(0, "a", obs(2.0), None, false),
            Err(StreamError::SlotBusy(0))
        ));

        let batch = server.flush(8, Duration::from_millis(50)).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0].request_id, 1);
        let resp = echo_response(&batch[0]);
        server.respond(&[resp]).unwrap();

        let got = client.poll(0).unwrap().expect("response ready");
        assert_eq!(got.request_id, 1);

        // Slot is free again.
        client.post(0, "a", obs(3.0), None, false).unwrap();
        let batch = server.flush(8, Duration::from_millis(50)).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0].request_id, 2);

        // Unknown request id is rejected.
        let mut bogus = echo_response(&batch[0]);
        bogus.request_id = 99;
        assert!(matches!(
            server.respond(&[bogus]),
            Err(StreamError::UnknownRequest { .. })
        ));
        server.respond(&[echo_response(&batch[0])]).unwrap();
        assert!(client.poll(0).unwrap().is_some());
        assert_eq!(server.unanswered(), 0);
    }

    #[test]
    fn inline_pair_protocol() {
        let table = InlineTable::new(2);
        let client = InferenceClient::inline(
            table.clone(),
            &[
                ClientBinding { client_id: 0, slot: 0 },
                ClientBinding { client_id: 1, slot: 1 },
            ],
        );
        let server = InferenceServer::inline(table);
        exercise_pair(client, server);
    }

    #[test]
    fn shm_pair_protocol() {
        let region = format!("/srl-test.inf.{}", std::process::id());
        let server = InferenceServer::create_shm(&region, 2, 512).unwrap();
        let client = InferenceClient::open_shm(
            &region,
            &[
                ClientBinding { client_id: 0, slot: 0 },
                ClientBinding { client_id: 1, slot: 1 },
            ],
        )
        .unwrap();
        exercise_pair(client, server);
    }

    #[test]
    fn socket_pair_protocol() {
        let (server, addr) = InferenceServer::bind_socket("127.0.0.1:0").unwrap();
        let client = InferenceClient::open_socket(
            addr,
            &[
                ClientBinding { client_id: 0, slot: 0 },
                ClientBinding { client_id: 1, slot: 1 },
            ],
        )
        .unwrap();
        exercise_pair(client, server);
    }

    #[test]
    fn batching_arithmetic() {
        // 7 pending, max_batch 4: batch of 4, then batch of 3.
        let table = InlineTable::new(7);
        let bindings: Vec<ClientBinding> = (0..7)
            .map(|i| ClientBinding {
                client_id: i,
                slot: i as u32,
            })
            .collect();
        let mut client = InferenceClient::inline(table.clone(), &bindings);
        let mut server = InferenceServer::inline(table);
        for i in 0..7 {
            client.post(i, "a", obs(i as f64), None, false).unwrap();
        }
        let b1 = server.flush(4, Duration::from_millis(5)).unwrap();
        assert_eq!(b1.len(), 4);
        let b2 = server.flush(4, Duration::from_millis(5)).unwrap();
        assert_eq!(b2.len(), 3);
    }

    #[test]
    fn empty_flush_waits_max_wait() {
        let table = InlineTable::new(1);
        let mut server = InferenceServer::inline(table);
        let start = Instant::now();
        let batch = server.flush(4, Duration::from_millis(10)).unwrap();
        assert!(batch.is_empty());
        let waited = start.elapsed();
        assert!(waited >= Duration::from_millis(10), "{waited:?}");
        assert!(waited < Duration::from_millis(500), "{waited:?}");
    }

    #[test]
    fn sequence_discipline_over_many_cycles() {
        let table = InlineTable::new(1);
        let mut client = InferenceClient::inline(
            table.clone(),
            &[ClientBinding { client_id: 5, slot: 0 }],
        );
        let mut server = InferenceServer::inline(table);
        for round in 1..=100_000u64 {
            let id = client.post(5, "a", obs(0.5), None, false).unwrap();
            assert_eq!(id, round);
            let batch = server.flush(1, Duration::from_millis(10)).unwrap();
            assert_eq!(batch.len(), 1, "round {round}");
            assert_eq!(batch[0].request_id, round);
            server.respond(&[echo_response(&batch[0])]).unwrap();
            let resp = client.poll(5).unwrap().unwrap();
            assert_eq!(resp.request_id, round);
        }
    }
}
