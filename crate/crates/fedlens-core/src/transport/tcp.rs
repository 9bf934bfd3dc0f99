//! TCP transport: the same length-prefixed frames over a socket.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::{frame, unframe_bytes, Connection, Envelope, TransportError};

pub struct TcpConn {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl TcpConn {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpConn { stream, buf: Vec::new() })
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        Ok(TcpConn { stream, buf: Vec::new() })
    }

    fn parse_buffered(&mut self) -> Result<Option<Envelope>, TransportError> {
        match unframe_bytes(&self.buf)? {
            Some((env, used)) => {
                self.buf.drain(..used);
                Ok(Some(env))
            }
            None => Ok(None),
        }
    }
}

impl Connection for TcpConn {
    fn send(&mut self, envelope: &Envelope) -> Result<(), TransportError> {
        let bytes = frame(envelope)?;
        self.stream.write_all(&bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    fn try_recv(&mut self, timeout: Duration) -> Result<Option<Envelope>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(env) = self.parse_buffered()? {
                return Ok(Some(env));
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            self.stream.set_read_timeout(Some(deadline - now))?;
            let mut chunk = [0u8; 16 * 1024];
            match self.stream.read(&mut chunk) {
                Ok(0) => {
                    return if self.buf.is_empty() {
                        Err(TransportError::Closed)
                    } else {
                        Err(TransportError::TruncatedFrame)
                    };
                }
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Ok(None);
                }
                Err(e) => return Err(TransportError::Io(e)),
            }
        }
    }
}

/// Listener wrapper handing out framed connections.
pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        Ok(TcpAcceptor { listener: TcpListener::bind(addr)? })
    }

    pub fn local_addr(&self) -> Result<std::net::SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }

    pub fn accept(&self) -> Result<TcpConn, TransportError> {
        let (stream, _) = self.listener.accept()?;
        TcpConn::from_stream(stream)
    }
}
