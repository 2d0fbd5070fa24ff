use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::{encode_frame, Connection, FrameDecoder, TransportError};
use crate::model::{BitPayload, Protocol};

/// Framed connection over a real TCP socket.
pub struct TcpConnection {
    stream: TcpStream,
    peer: String,
    decoder: FrameDecoder,
    closed: bool,
    eof: bool,
}

impl TcpConnection {
    pub fn new(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "unknown".into());
        Ok(Self { stream, peer, decoder: FrameDecoder::new(), closed: false, eof: false })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        Self::new(TcpStream::connect(addr)?)
    }

    /// Accepts one connection, giving up after `timeout`.
    pub fn accept(listener: &TcpListener, timeout: Duration) -> Result<Self, TransportError> {
        listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        loop {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    return Self::new(stream);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Io(std::io::Error::new(
                            ErrorKind::TimedOut,
                            "no peer connected",
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Moves whatever bytes are available into the decoder.
    fn fill(&mut self, blocking: Option<Duration>) -> Result<(), TransportError> {
        let mut buf = [0u8; 4096];
        match blocking {
            None => self.stream.set_nonblocking(true)?,
            Some(t) => {
                self.stream.set_nonblocking(false)?;
                self.stream.set_read_timeout(Some(t.max(Duration::from_millis(1))))?;
            }
        }
        let result = self.stream.read(&mut buf);
        self.stream.set_nonblocking(false)?;
        match result {
            Ok(0) => {
                self.eof = true;
                Ok(())
            }
            Ok(n) => {
                self.decoder.push(&buf[..n]);
                Ok(())
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Ok(()),
            Err(e) if e.kind() == ErrorKind::Interrupted => Ok(()),
            Err(e)
                if matches!(e.kind(), ErrorKind::ConnectionReset | ErrorKind::BrokenPipe) =>
            {
                self.eof = true;
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn next_buffered(&mut self) -> Result<Option<BitPayload>, TransportError> {
        if let Some(frame) = self.decoder.next_frame()? {
            return Ok(Some(frame));
        }
        if self.eof {
            return Err(TransportError::ConnectionClosed);
        }
        Ok(None)
    }
}

impl Connection for TcpConnection {
    fn protocol(&self) -> Protocol {
        Protocol::Tcp
    }

    fn peer(&self) -> &str {
        &self.peer
    }

    fn write_frame(&mut self, payload: &BitPayload) -> Result<(), TransportError> {
        if self.closed {
            return Err(TransportError::ConnectionClosed);
        }
        let wire = encode_frame(payload)?;
        self.stream.write_all(&wire).map_err(|e| match e.kind() {
            ErrorKind::BrokenPipe | ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted => {
                TransportError::ConnectionClosed
            }
            _ => TransportError::Io(e),
        })
    }

    fn try_read_frame(&mut self) -> Result<Option<BitPayload>, TransportError> {
        if self.closed {
            return Err(TransportError::ConnectionClosed);
        }
        if let Some(frame) = self.decoder.next_frame()? {
            return Ok(Some(frame));
        }
        if !self.eof {
            self.fill(None)?;
        }
        self.next_buffered()
    }

    fn read_frame_timeout(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<BitPayload>, TransportError> {
        if self.closed {
            return Err(TransportError::ConnectionClosed);
        }
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(frame) = self.next_buffered()? {
                return Ok(Some(frame));
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            self.fill(Some(deadline - now))?;
        }
    }

    fn close(&mut self) {
        if !self.closed {
            self.closed = true;
            let _ = self.stream.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TcpConnection {
    fn drop(&mut self) {
        self.close();
    }
}

/// Two ends of a fresh connection on 127.0.0.1 with an ephemeral port.
pub fn loopback_pair() -> Result<(TcpConnection, TcpConnection), TransportError> {
    let listener = bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let client = TcpConnection::connect(addr)?;
    let server = TcpConnection::accept(&listener, Duration::from_secs(5))?;
    Ok((client, server))
}

pub fn bind(addr: &str) -> Result<TcpListener, TransportError> {
    TcpListener::bind(addr)
        .map_err(|error| TransportError::PortBindFailed { addr: addr.to_string(), error })
}
