//! A pass-through buffer worker: consumes one sample stream and re-posts
//! every payload to another, untouched. It is the reference custom worker
//! for the extension seam — a stand-in for sample re-processing stages —
//! and doubles as the parity check that an inserted hop changes nothing
//! about what trainers see.

use std::collections::BTreeMap;

use crate::model::config::{DropPolicy, Transport};
use crate::model::types::PollResult;
use crate::model::validate::{CustomSlice, PlannedStream, ProducerAssignment, WorkerSlice};
use crate::streams::shm::region_name;
use crate::streams::{SampleConsumer, SampleProducer};

use super::registry::BuildOutput;
use super::rpc::ConfigurePayload;
use super::worker::{AddressBook, BoundEndpoints, MetricsSnapshot, Worker, WorkerError};

pub struct BufferWorker {
    experiment: String,
    index: u32,
    slice: CustomSlice,
    stream_info: BTreeMap<String, PlannedStream>,
    consumers: Vec<SampleConsumer>,
    producers: Vec<SampleProducer>,
    moved: u64,
    connected: bool,
}

impl BufferWorker {
    pub fn factory(p: &ConfigurePayload) -> BuildOutput {
        let WorkerSlice::Custom(slice) = &p.worker.slice else {
            return Err(WorkerError::Config(
                "buffer factory got a non-custom slice".into(),
            ));
        };
        if slice.consumes.is_empty() || slice.produces.is_empty() {
            return Err(WorkerError::Config(
                "buffer worker needs one consume stream and one produce stream".into(),
            ));
        }
        let stream_info: BTreeMap<String, PlannedStream> = p
            .streams
            .iter()
            .map(|s| (s.name.clone(), s.clone()))
            .collect();

        let mut bound = BoundEndpoints::default();
        let mut consumers = Vec::new();
        for (stream, consumer_index, rings) in &slice.consumes {
            let info = stream_info.get(stream).ok_or_else(|| {
                WorkerError::Config(format!("stream `{stream}` missing from plan"))
            })?;
            let consumer = match info.transport {
                Transport::SharedMemory => SampleConsumer::create_shm(
                    &region_name(&p.experiment, stream, "cons", *consumer_index),
                    (*rings as usize).max(1),
                    info.capacity,
                    info.payload_capacity as usize,
                )?,
                Transport::Socket => {
                    let (consumer, addr) =
                        SampleConsumer::bind_socket("127.0.0.1:0", info.capacity, info.drop_policy)?;
                    bound
                        .entries
                        .push((AddressBook::sample_key(stream, *consumer_index), addr));
                    consumer
                }
                Transport::Inline => {
                    let queue = crate::streams::inline::register_queue(
                        &p.experiment,
                        stream,
                        *consumer_index,
                        info.capacity,
                        info.drop_policy == DropPolicy::Block,
                    );
                    SampleConsumer::inline(queue)
                }
            };
            consumers.push(consumer);
        }

        Ok((
            Box::new(Self {
                experiment: p.experiment.clone(),
                index: p.worker.index,
                slice: slice.clone(),
                stream_info,
                consumers,
                producers: Vec::new(),
                moved: 0,
                connected: false,
            }),
            bound,
        ))
    }

    fn open_producer(
        &self,
        assignment: &ProducerAssignment,
        book: &AddressBook,
    ) -> Result<SampleProducer, WorkerError> {
        let info = &self.stream_info[&assignment.stream];
        Ok(match assignment.consumer {
            None => SampleProducer::sink(),
            Some(consumer) => match info.transport {
                Transport::SharedMemory => SampleProducer::open_shm(
                    &region_name(&self.experiment, &assignment.stream, "cons", consumer),
                    assignment.ring,
                    info.drop_policy == DropPolicy::Block,
                )?,
                Transport::Socket => {
                    let addr =
                        book.lookup(&AddressBook::sample_key(&assignment.stream, consumer))?;
                    SampleProducer::open_socket(addr)?
                }
                Transport::Inline => {
                    let queue = crate::streams::inline::lookup_queue(
                        &self.experiment,
                        &assignment.stream,
                        consumer,
                        crate::streams::OPEN_TIMEOUT,
                    )?;
                    SampleProducer::inline(queue)
                }
            },
        })
    }
}

impl Worker for BufferWorker {
    fn kind(&self) -> String {
        "buffer".into()
    }

    fn index(&self) -> u32 {
        self.index
    }

    fn connect(&mut self, book: &AddressBook) -> Result<(), WorkerError> {
        for assignment in &self.slice.produces.clone() {
            let producer = self.open_producer(assignment, book)?;
            self.producers.push(producer);
        }
        self.connected = true;
        Ok(())
    }

    fn poll(&mut self) -> Result<PollResult, WorkerError> {
        assert!(self.connected, "poll before connect");
        let mut moved = 0u64;
        let fanout = self.producers.len();
        for (i, consumer) in self.consumers.iter_mut().enumerate() {
            for _ in 0..256 {
                match consumer.pop_bytes()? {
                    Some(bytes) => {
                        self.producers[i % fanout].post_bytes(bytes)?;
                        moved += 1;
                    }
                    None => break,
                }
            }
        }
        self.moved += moved;
        Ok(PollResult {
            sample_count: moved,
            batch_count: u64::from(moved > 0),
        })
    }

    fn metrics(&mut self) -> MetricsSnapshot {
        let mut m = MetricsSnapshot::default();
        m.counters.insert("moved".into(), self.moved);
        m
    }

    fn shutdown(&mut self) {
        for c in &self.consumers {
            c.close();
        }
        self.producers.clear();
    }
}
