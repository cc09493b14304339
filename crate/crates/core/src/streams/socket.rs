//! TCP connection plumbing shared by the socket stream backends: bounded
//! connect retry, nonblocking listeners, and connection bookkeeping.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use super::framing::FrameReader;
use super::StreamError;

/// Connect with retry until `timeout`; the server side may not be up yet.
pub fn connect_retry(addr: SocketAddr, timeout: Duration) -> Result<TcpStream, StreamError> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(250)) {
            Ok(s) => {
                s.set_nodelay(true).ok();
                return Ok(s);
            }
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(StreamError::TransportUnavailable(format!(
                        "connect {addr}: {e}"
                    )));
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

/// A nonblocking listener that accepts into a connection list.
pub struct Acceptor {
    listener: TcpListener,
    pub local_addr: SocketAddr,
}

impl Acceptor {
    pub fn bind(addr: &str) -> Result<Self, StreamError> {
        let listener = TcpListener::bind(addr)
            .map_err(|e| StreamError::TransportUnavailable(format!("bind {addr}: {e}")))?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        Ok(Self {
            listener,
            local_addr,
        })
    }

    /// Accept every connection currently pending.
    pub fn accept_ready(&self) -> Result<Vec<Connection>, StreamError> {
        let mut new = Vec::new();
        loop {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    stream.set_nodelay(true).ok();
                    stream.set_nonblocking(true)?;
                    new.push(Connection {
                        stream,
                        peer,
                        reader: FrameReader::new(),
                        open: true,
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(new),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// One accepted connection with incremental frame assembly.
pub struct Connection {
    pub stream: TcpStream,
    pub peer: SocketAddr,
    pub reader: FrameReader,
    pub open: bool,
}

impl Connection {
    /// Next complete frame if one is buffered or readable without blocking.
    pub fn poll_frame(&mut self) -> Result<Option<Vec<u8>>, StreamError> {
        if !self.open {
            return Ok(None);
        }
        match self.reader.poll_frame(&mut self.stream) {
            Ok(f) => Ok(f),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                self.open = false;
                Ok(None)
            }
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => {
                self.open = false;
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Blocking frame write (the socket is nonblocking; spin on WouldBlock).
    pub fn write_frame(&mut self, payload: &[u8]) -> Result<(), StreamError> {
        write_frame_nonblocking(&mut self.stream, payload)
    }
}

/// Write a frame on a nonblocking socket, waiting out transient fullness.
pub fn write_frame_nonblocking(stream: &mut TcpStream, payload: &[u8]) -> Result<(), StreamError> {
    use std::io::Write;
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
    let mut written = 0;
    while written < buf.len() {
        match stream.write(&buf[written..]) {
            Ok(0) => return Err(StreamError::Io("socket closed mid-frame".into())),
            Ok(n) => written += n,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_micros(50));
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}
