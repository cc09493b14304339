//! Blocking client for the parameter service.

use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use crate::model::types::ParameterBlob;
use crate::model::wire::{Reader, WireDecode, WireEncode};
use crate::streams::framing::{read_frame, write_frame};

use super::{op, PublishEvent, ServiceError};

pub struct ParamClient {
    conn: TcpStream,
}

impl ParamClient {
    pub fn connect(addr: SocketAddr) -> Result<Self, ServiceError> {
        let deadline = std::time::Instant::now() + Duration::from_secs(15);
        loop {
            match TcpStream::connect_timeout(&addr, Duration::from_millis(250)) {
                Ok(conn) => {
                    conn.set_nodelay(true).ok();
                    return Ok(Self { conn });
                }
                Err(e) => {
                    if std::time::Instant::now() >= deadline {
                        return Err(ServiceError::Unreachable(format!("connect {addr}: {e}")));
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
            }
        }
    }

    fn call(&mut self, request: &[u8]) -> Result<Vec<u8>, ServiceError> {
        write_frame(&mut self.conn, request)
            .map_err(|e| ServiceError::Unreachable(e.to_string()))?;
        read_frame(&mut self.conn).map_err(|e| ServiceError::Unreachable(e.to_string()))
    }

    pub fn push(&mut self, blob: &ParameterBlob) -> Result<u64, ServiceError> {
        let mut req = vec![op::PUSH];
        blob.encode_into(&mut req);
        let reply = self.call(&req)?;
        match reply.first() {
            Some(&op::OK_PUSH) => Ok(u64_at(&reply, 1)?),
            Some(&op::ERR_VERSION_CONFLICT) => Err(ServiceError::VersionConflict {
                pushed: blob.version,
                current: u64_at(&reply, 1)?,
            }),
            _ => Err(protocol_err(&reply)),
        }
    }

    pub fn head(&mut self, policy_name: &str) -> Result<Option<u64>, ServiceError> {
        let mut req = vec![op::HEAD];
        put_string(&mut req, policy_name);
        let reply = self.call(&req)?;
        match reply.first() {
            Some(&op::OK_HEAD) => match reply.get(1) {
                Some(0) => Ok(None),
                Some(1) => Ok(Some(u64_at(&reply, 2)?)),
                _ => Err(ServiceError::Protocol("bad head reply".into())),
            },
            _ => Err(protocol_err(&reply)),
        }
    }

    pub fn pull(
        &mut self,
        policy_name: &str,
        have_version: u64,
    ) -> Result<Option<ParameterBlob>, ServiceError> {
        let mut req = vec![op::PULL];
        put_string(&mut req, policy_name);
        req.extend_from_slice(&have_version.to_le_bytes());
        let reply = self.call(&req)?;
        match reply.first() {
            Some(&op::OK_PULL_BLOB) => {
                let blob = ParameterBlob::decode(&reply[1..])
                    .map_err(|e| ServiceError::Protocol(e.to_string()))?;
                Ok(Some(blob))
            }
            Some(&op::OK_PULL_UPTODATE) => Ok(None),
            Some(&op::ERR_UNKNOWN_POLICY) => {
                Err(ServiceError::UnknownPolicy(policy_name.to_string()))
            }
            _ => Err(protocol_err(&reply)),
        }
    }

    pub fn publish_log(&mut self, policy_name: &str) -> Result<Vec<PublishEvent>, ServiceError> {
        let mut req = vec![op::LOG];
        put_string(&mut req, policy_name);
        let reply = self.call(&req)?;
        match reply.first() {
            Some(&op::OK_LOG) => {
                let mut r = Reader::new(&reply[1..]);
                let n = r
                    .len_prefix(16)
                    .map_err(|e| ServiceError::Protocol(e.to_string()))?;
                let mut log = Vec::with_capacity(n);
                for _ in 0..n {
                    let version = r.u64().map_err(|e| ServiceError::Protocol(e.to_string()))?;
                    let unix_ms = r.u64().map_err(|e| ServiceError::Protocol(e.to_string()))?;
                    log.push(PublishEvent { version, unix_ms });
                }
                Ok(log)
            }
            _ => Err(protocol_err(&reply)),
        }
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn u64_at(buf: &[u8], at: usize) -> Result<u64, ServiceError> {
    buf.get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| ServiceError::Protocol("short reply".into()))
}

fn protocol_err(reply: &[u8]) -> ServiceError {
    match reply.first() {
        Some(&op::ERR_OTHER) => {
            let msg = String::from_utf8_lossy(reply.get(5..).unwrap_or(&[])).to_string();
            ServiceError::Protocol(msg)
        }
        Some(code) => ServiceError::Protocol(format!("unexpected reply 0x{code:02x}")),
        None => ServiceError::Protocol("empty reply".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ParamServer, ParameterStore};
    use super::*;
    use std::sync::Arc;

    fn blob(version: u64, fill: f64) -> ParameterBlob {
        ParameterBlob {
            policy_name: "rl".into(),
            version,
            flat_params: vec![fill; 16],
            layout_digest: 9,
        }
    }

    #[test]
    fn end_to_end_over_socket() {
        let store = Arc::new(ParameterStore::new());
        let handle = ParamServer::start("127.0.0.1:0", store).unwrap();
        let mut client = ParamClient::connect(handle.addr).unwrap();

        assert_eq!(client.head("rl").unwrap(), None);
        assert!(matches!(
            client.pull("rl", 0),
            Err(ServiceError::UnknownPolicy(_))
        ));

        assert_eq!(client.push(&blob(1, 0.5)).unwrap(), 1);
        assert_eq!(client.head("rl").unwrap(), Some(1));
        let b = client.pull("rl", 0).unwrap().unwrap();
        assert_eq!(b.version, 1);
        assert_eq!(b.flat_params, vec![0.5; 16]);
        assert!(client.pull("rl", 1).unwrap().is_none());

        assert!(matches!(
            client.push(&blob(1, 0.9)),
            Err(ServiceError::VersionConflict { current: 1, .. })
        ));
        assert_eq!(client.push(&blob(2, 0.9)).unwrap(), 2);
        let log = client.publish_log("rl").unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[1].version, 2);
    }

    #[test]
    fn concurrent_clients_monotone_versions() {
        let store = Arc::new(ParameterStore::new());
        let handle = ParamServer::start("127.0.0.1:0", store).unwrap();
        let addr = handle.addr;

        let pusher = std::thread::spawn(move || {
            let mut c = ParamClient::connect(addr).unwrap();
            for v in 1..=50u64 {
                c.push(&blob(v, v as f64)).unwrap();
            }
        });
        let pullers: Vec<_> = (0..3)
            .map(|_| {
                std::thread::spawn(move || {
                    let mut c = ParamClient::connect(addr).unwrap();
                    let mut last = 0u64;
                    for _ in 0..200 {
                        if let Ok(Some(v)) = c.head("rl") {
                            assert!(v >= last);
                            last = v;
                        }
                        if let Ok(Some(b)) = c.pull("rl", last.saturating_sub(1)) {
                            assert_eq!(b.flat_params, vec![b.version as f64; 16]);
                        }
                    }
                })
            })
            .collect();
        pusher.join().unwrap();
        for p in pullers {
            p.join().unwrap();
        }
    }
}
