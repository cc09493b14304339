//! Length-prefixed framing over TCP: 4-byte little-endian payload length,
//! then the payload. One frame carries one encoded message.

use std::io::{self, Read, Write};
use std::net::TcpStream;

/// Frames larger than this are treated as protocol corruption.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

pub fn write_frame(stream: &mut TcpStream, payload: &[u8]) -> io::Result<()> {
    let len = payload.len() as u32;
    stream.write_all(&len.to_le_bytes())?;
    stream.write_all(payload)
}

/// Blocking read of one complete frame.
pub fn read_frame(stream: &mut TcpStream) -> io::Result<Vec<u8>> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_le_bytes(len_buf) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut payload = vec![0u8; len];
    stream.read_exact(&mut payload)?;
    Ok(payload)
}

/// Incremental frame assembly for nonblocking sockets. Feed it reads; it
/// yields complete frames as they arrive.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pull whatever is available from a nonblocking stream and return the
    /// next complete frame, if any. `Ok(None)` means no full frame yet.
    /// A zero-byte read (peer closed) surfaces as `UnexpectedEof`.
    pub fn poll_frame(&mut self, stream: &mut TcpStream) -> io::Result<Option<Vec<u8>>> {
        loop {
            if let Some(frame) = self.take_frame()? {
                return Ok(Some(frame));
            }
            let mut chunk = [0u8; 16 * 1024];
            match stream.read(&mut chunk) {
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(None),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        }
    }

    fn take_frame(&mut self) -> io::Result<Option<Vec<u8>>> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len > MAX_FRAME {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let frame = self.buf[4..4 + len].to_vec();
        self.buf.drain(..4 + len);
        Ok(Some(frame))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    #[test]
    fn roundtrip_blocking() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let (mut conn, _) = listener.accept().unwrap();
            let f = read_frame(&mut conn).unwrap();
            write_frame(&mut conn, &f).unwrap();
        });
        let mut client = TcpStream::connect(addr).unwrap();
        write_frame(&mut client, b"hello frames").unwrap();
        assert_eq!(read_frame(&mut client).unwrap(), b"hello frames");
        t.join().unwrap();
    }

    #[test]
    fn incremental_reader_handles_split_frames() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let (mut conn, _) = listener.accept().unwrap();
            // Write two frames byte by byte to force partial reads.
            let mut bytes = Vec::new();
            for payload in [b"abc".as_slice(), b"defgh".as_slice()] {
                bytes.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                bytes.extend_from_slice(payload);
            }
            for b in bytes {
                conn.write_all(&[b]).unwrap();
                conn.flush().unwrap();
            }
        });
        let mut client = TcpStream::connect(addr).unwrap();
        client.set_nonblocking(true).unwrap();
        let mut reader = FrameReader::new();
        let mut frames = Vec::new();
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
        while frames.len() < 2 && std::time::Instant::now() < deadline {
            match reader.poll_frame(&mut client) {
                Ok(Some(f)) => frames.push(f),
                Ok(None) => std::thread::sleep(std::time::Duration::from_micros(100)),
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => panic!("{e}"),
            }
        }
        assert_eq!(frames, vec![b"abc".to_vec(), b"defgh".to_vec()]);
        t.join().unwrap();
    }
}
