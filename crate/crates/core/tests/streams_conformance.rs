//! Transport conformance: the slot state machine admits no illegal
//! transition under any interleaving, queue counters are conserved under
//! concurrency, backends deliver the same multiset under the Block policy,
//! and flush batching follows the queueing model.

use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use srl_core::model::config::DropPolicy;
use srl_core::model::types::{ActionId, ObservationVector, Trajectory, TransitionStep};
use srl_core::model::wire::WireEncode;
use srl_core::streams::inference::ClientBinding;
use srl_core::streams::shm::{SlotTable, STATE_EMPTY, STATE_REQUEST, STATE_RESPONSE};
use srl_core::streams::{InferenceClient, InferenceServer, SampleConsumer, SampleProducer};

fn traj(tag: u64, steps: usize) -> Trajectory {
    Trajectory {
        agent_id: format!("a{tag}"),
        policy_name: "rl".into(),
        steps: (0..steps)
            .map(|i| TransitionStep {
                obs: ObservationVector::new(vec![tag as f64, i as f64]),
                action: ActionId::new(0),
                reward: 0.0,
                done: i + 1 == steps,
                truncated: false,
                log_prob_old: -0.1,
                value_pred: 0.0,
                policy_version: 1,
            })
            .collect(),
        bootstrap_value: 0.0,
        env_frames: steps as u64,
    }
}

/// Exhaustive model check of the slot protocol on an abstract state machine:
/// enumerate every interleaving of the client program (post, poll) and the
/// server program (flush, respond) over two rounds and assert that only the
/// three legal transitions ever occur.
#[test]
fn slot_state_machine_model_check() {
    // Abstract slot: the client may post when EMPTY, the server may take
    // when REQUEST, respond when taken, the client may collect when
    // RESPONSE. We enumerate all schedules of the two programs' steps.
    #[derive(Clone, Copy, PartialEq, Debug)]
    enum Slot {
        Empty,
        Request,
        Response,
    }
    #[derive(Clone, Copy, PartialEq)]
    enum ClientStep {
        Post,
        Poll,
    }
    #[derive(Clone, Copy, PartialEq)]
    enum ServerStep {
        Flush,
        Respond,
    }

    // Two full request/response rounds per side.
    let client_prog = [ClientStep::Post, ClientStep::Poll, ClientStep::Post, ClientStep::Poll];
    let server_prog = [ServerStep::Flush, ServerStep::Respond, ServerStep::Flush, ServerStep::Respond];

    // Recursively explore all interleavings.
    fn explore(
        slot: Slot,
        flushed: bool,
        ci: usize,
        si: usize,
        client_prog: &[ClientStep],
        server_prog: &[ServerStep],
        transitions: &mut Vec<(Slot, Slot)>,
    ) {
        if ci == client_prog.len() && si == server_prog.len() {
            assert_eq!(slot, Slot::Empty, "terminal state must be EMPTY");
            return;
        }
        // Client moves when its step is enabled; a disabled step blocks
        // (poll before response is NotReady: a no-op retry, modeled by the
        // scheduler just not advancing).
        if ci < client_prog.len() {
            match client_prog[ci] {
                ClientStep::Post if slot == Slot::Empty => {
                    transitions.push((slot, Slot::Request));
                    explore(Slot::Request, flushed, ci + 1, si, client_prog, server_prog, transitions);
                }
                ClientStep::Poll if slot == Slot::Response => {
                    transitions.push((slot, Slot::Empty));
                    explore(Slot::Empty, flushed, ci + 1, si, client_prog, server_prog, transitions);
                }
                _ => {}
            }
        }
        if si < server_prog.len() {
            match server_prog[si] {
                ServerStep::Flush if slot == Slot::Request && !flushed => {
                    // Flush observes but does not change the slot.
                    explore(slot, true, ci, si + 1, client_prog, server_prog, transitions);
                }
                ServerStep::Respond if flushed => {
                    assert_eq!(slot, Slot::Request, "respond outside REQUEST state");
                    transitions.push((slot, Slot::Response));
                    explore(Slot::Response, false, ci, si + 1, client_prog, server_prog, transitions);
                }
                _ => {}
            }
        }
    }

    let mut transitions = Vec::new();
    explore(
        Slot::Empty,
        false,
        0,
        0,
        &client_prog,
        &server_prog,
        &mut transitions,
    );
    assert!(!transitions.is_empty());
    for (from, to) in transitions {
        let legal = matches!(
            (from, to),
            (Slot::Empty, Slot::Request)
                | (Slot::Request, Slot::Response)
                | (Slot::Response, Slot::Empty)
        );
        assert!(legal, "illegal transition {from:?} -> {to:?}");
    }
}

/// The same protocol exercised on the real shared-memory table from two
/// threads at scale, asserting observed states never step outside the legal
/// cycle and no request is lost or duplicated.
#[test]
fn slot_protocol_stress_real_shm() {
    let region = format!("/srl-conf-slots-{}", std::process::id());
    let table = std::sync::Arc::new(SlotTable::create(&region, 1, 128).unwrap());
    let rounds = 10_000u64;

    let server = {
        let table = table.clone();
        std::thread::spawn(move || {
            let mut served = 0u64;
            let mut last_seq = 0u64;
            while served < rounds {
                if table.state(0).load(Ordering::Acquire) == STATE_REQUEST {
                    let seq = table.seq(0).load(Ordering::Relaxed);
                    assert_eq!(seq, last_seq + 1, "lost or duplicated request");
                    last_seq = seq;
                    let payload = table.read_payload(0);
                    table.publish(0, &payload, STATE_RESPONSE).unwrap();
                    served += 1;
                } else {
                    std::hint::spin_loop();
                }
            }
        })
    };

    let mut awaiting = false;
    let mut posted = 0u64;
    let mut received = 0u64;
    while received < rounds {
        let state = table.state(0).load(Ordering::Acquire);
        assert!(
            state == STATE_EMPTY || state == STATE_REQUEST || state == STATE_RESPONSE,
            "corrupt state {state}"
        );
        if !awaiting && state == STATE_EMPTY {
            posted += 1;
            table.seq(0).store(posted, Ordering::Relaxed);
            table
                .publish(0, &posted.to_le_bytes(), STATE_REQUEST)
                .unwrap();
            awaiting = true;
        } else if awaiting && state == STATE_RESPONSE {
            let bytes = table.read_payload(0);
            let echoed = u64::from_le_bytes(bytes.try_into().unwrap());
            assert_eq!(echoed, posted);
            table.state(0).store(STATE_EMPTY, Ordering::Release);
            awaiting = false;
            received += 1;
        }
    }
    server.join().unwrap();
    assert_eq!(posted, rounds);
}

#[test]
fn multi_producer_conservation_shm() {
    let region = format!("/srl-conf-cons-{}", std::process::id());
    let producers = 8usize;
    let per_producer = 10_000u64;
    let mut consumer = SampleConsumer::create_shm(&region, producers, 8, 512).unwrap();

    let handles: Vec<_> = (0..producers)
        .map(|ring| {
            let region = region.clone();
            std::thread::spawn(move || {
                let mut p = SampleProducer::open_shm(&region, ring as u32, false).unwrap();
                for i in 0..per_producer {
                    p.post(&traj(i, 1)).unwrap();
                }
            })
        })
        .collect();

    let mut consumed = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        consumer.consume_to(&mut consumed, 4096).unwrap();
        let c = consumer.counters();
        if c.produced == producers as u64 * per_producer && c.resident() == 0 {
            break;
        }
        assert!(Instant::now() < deadline, "stress did not quiesce");
        std::thread::yield_now();
    }
    for h in handles {
        h.join().unwrap();
    }
    let c = consumer.counters();
    assert_eq!(c.produced, 80_000);
    assert_eq!(c.consumed + c.dropped, 80_000);
    assert_eq!(c.consumed, consumed.len() as u64);
    // Every delivered payload decodes into an invariant-satisfying value.
    for t in &consumed {
        assert!(t.check_invariants());
    }
}

/// Identical deterministic post schedule over shared memory and sockets with
/// the Block policy: the delivered multiset must be identical.
#[test]
fn backend_equivalence_block_policy() {
    let schedule: Vec<Trajectory> = (0..2_000).map(|i| traj(i, 2)).collect();

    let run_shm = |schedule: &[Trajectory]| -> Vec<String> {
        let region = format!("/srl-conf-eq-{}", std::process::id());
        let mut consumer = SampleConsumer::create_shm(&region, 1, 8, 512).unwrap();
        let producer_schedule = schedule.to_vec();
        let producer = std::thread::spawn(move || {
            let mut p = SampleProducer::open_shm(&region, 0, true).unwrap();
            for t in &producer_schedule {
                p.post(t).unwrap();
            }
        });
        let mut got = Vec::new();
        let deadline = Instant::now() + Duration::from_secs(60);
        while got.len() < schedule.len() && Instant::now() < deadline {
            consumer.consume_to(&mut got, 512).unwrap();
        }
        producer.join().unwrap();
        got.iter().map(|t| t.agent_id.clone()).collect()
    };

    let run_socket = |schedule: &[Trajectory]| -> Vec<String> {
        let (mut consumer, addr) =
            SampleConsumer::bind_socket("127.0.0.1:0", 8, DropPolicy::Block).unwrap();
        let producer_schedule = schedule.to_vec();
        let producer = std::thread::spawn(move || {
            let mut p = SampleProducer::open_socket(addr).unwrap();
            for t in &producer_schedule {
                p.post(t).unwrap();
            }
        });
        let mut got = Vec::new();
        let deadline = Instant::now() + Duration::from_secs(60);
        while got.len() < schedule.len() && Instant::now() < deadline {
            consumer.consume_to(&mut got, 512).unwrap();
        }
        producer.join().unwrap();
        got.iter().map(|t| t.agent_id.clone()).collect()
    };

    let shm_ids = run_shm(&schedule);
    let socket_ids = run_socket(&schedule);
    assert_eq!(shm_ids.len(), schedule.len(), "shm delivered short");
    // Single producer: FIFO makes the sequences (not just multisets) equal.
    assert_eq!(shm_ids, socket_ids);
}

/// Stream isolation: payloads posted to one stream are never delivered by a
/// second stream sharing the process.
#[test]
fn stream_isolation_tagged_payloads() {
    let region_a = format!("/srl-conf-isoa-{}", std::process::id());
    let region_b = format!("/srl-conf-isob-{}", std::process::id());
    let mut cons_a = SampleConsumer::create_shm(&region_a, 1, 16, 512).unwrap();
    let mut cons_b = SampleConsumer::create_shm(&region_b, 1, 16, 512).unwrap();
    let mut prod_a = SampleProducer::open_shm(&region_a, 0, true).unwrap();
    let mut prod_b = SampleProducer::open_shm(&region_b, 0, true).unwrap();

    let mut got_a = Vec::new();
    let mut got_b = Vec::new();
    for i in 0..10_000u64 {
        let mut ta = traj(i, 1);
        ta.policy_name = "alpha".into();
        let mut tb = traj(i, 1);
        tb.policy_name = "beta".into();
        prod_a.post(&ta).unwrap();
        prod_b.post(&tb).unwrap();
        if i % 8 == 7 {
            cons_a.consume_to(&mut got_a, 64).unwrap();
            cons_b.consume_to(&mut got_b, 64).unwrap();
        }
    }
    cons_a.consume_to(&mut got_a, usize::MAX >> 1).unwrap();
    cons_b.consume_to(&mut got_b, usize::MAX >> 1).unwrap();
    assert_eq!(got_a.len(), 10_000);
    assert_eq!(got_b.len(), 10_000);
    assert!(got_a.iter().all(|t| t.policy_name == "alpha"));
    assert!(got_b.iter().all(|t| t.policy_name == "beta"));
}

/// Flush batching against the queueing model: with arrivals at rate lambda
/// and a full wait window, the mean batch is about
/// min(max_batch, lambda * max_wait).
#[test]
fn poisson_batching_oracle() {
    let (mut server, addr) = InferenceServer::bind_socket("127.0.0.1:0").unwrap();
    let clients = 64u64;
    let bindings: Vec<ClientBinding> = (0..clients)
        .map(|i| ClientBinding {
            client_id: i,
            slot: i as u32,
        })
        .collect();
    let mut client = InferenceClient::open_socket(addr, &bindings).unwrap();

    // Exponential inter-arrival times, mean 1/lambda, replayed against the
    // wall clock so sleep granularity cannot depress the rate.
    let lambda = 2_000.0f64; // per second
    let max_wait = Duration::from_millis(2);
    let expect = lambda * max_wait.as_secs_f64(); // 4 per flush

    let stop = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
    let poster_stop = stop.clone();
    let poster = std::thread::spawn(move || {
        let mut rng = srl_core::util::rng::CounterRng::from_key(&[0x9015]);
        let start = Instant::now();
        let mut next_event = 0.0f64;
        let mut next_client = 0u64;
        let mut outstanding: std::collections::HashSet<u64> = Default::default();
        while !poster_stop.load(Ordering::Acquire) {
            // Post every arrival whose scheduled time has passed.
            while start.elapsed().as_secs_f64() >= next_event {
                next_event += -rng.next_f64().max(1e-12).ln() / lambda;
                for _ in 0..clients {
                    let c = next_client % clients;
                    next_client += 1;
                    if !outstanding.contains(&c) {
                        client
                            .post(c, "a", ObservationVector::new(vec![0.0]), None, false)
                            .unwrap();
                        outstanding.insert(c);
                        break;
                    }
                }
            }
            // Collect responses to free slots.
            let ids: Vec<u64> = outstanding.iter().copied().collect();
            for c in ids {
                if client.poll(c).unwrap().is_some() {
                    outstanding.remove(&c);
                }
            }
            std::thread::sleep(Duration::from_micros(100));
        }
    });

    // Warm up, then measure mean flush size over many windows.
    let t0 = Instant::now();
    let mut batches = Vec::new();
    while t0.elapsed() < Duration::from_secs(4) {
        let batch = server.flush(usize::MAX, max_wait).unwrap();
        let responses: Vec<_> = batch
            .iter()
            .map(|r| srl_core::model::types::InferenceResponse {
                client_id: r.client_id,
                request_id: r.request_id,
                action: ActionId::new(0),
                policy_state: None,
                log_prob: -0.1,
                value_pred: 0.0,
                policy_version: 1,
            })
            .collect();
        server.respond(&responses).unwrap();
        if t0.elapsed() > Duration::from_millis(500) {
            batches.push(batch.len());
        }
    }
    stop.store(true, Ordering::Release);
    poster.join().unwrap();

    let mean = batches.iter().sum::<usize>() as f64 / batches.len() as f64;
    let ratio = mean / expect;
    assert!(
        (0.5..1.5).contains(&ratio),
        "mean batch {mean:.2} vs expected {expect:.2} (ratio {ratio:.2})"
    );
}

/// Posted payloads that exceed the slot capacity are rejected cleanly.
#[test]
fn oversized_payload_rejected() {
    let region = format!("/srl-conf-big-{}", std::process::id());
    let _consumer = SampleConsumer::create_shm(&region, 1, 4, 64).unwrap();
    let mut producer = SampleProducer::open_shm(&region, 0, false).unwrap();
    let big = traj(0, 64);
    assert!(big.encode().len() > 64);
    assert!(producer.post(&big).is_err());
}
