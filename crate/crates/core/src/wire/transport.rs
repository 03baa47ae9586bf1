use std::collections::BTreeMap;
use std::io::{self, Cursor, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{decode, encode, Side, Transcript, WireError, WireMessage};

pub const MAX_FRAME_LEN: usize = 64 * 1024;

/// Per-step network timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

fn io_error(err: io::Error) -> WireError {
    match err.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => WireError::Timeout,
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => WireError::TransportClosed,
        _ => WireError::Io(err.to_string()),
    }
}

pub fn write_frame<W: Write + ?Sized>(writer: &mut W, body: &[u8]) -> Result<(), WireError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(body.len()));
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(body);
    writer.write_all(&frame).map_err(io_error)?;
    writer.flush().map_err(io_error)
}

/// Reads one frame body. The declared length is checked before anything is allocated.
pub fn read_frame<R: Read + ?Sized>(reader: &mut R) -> Result<Vec<u8>, WireError> {
    let mut prefix = [0u8; 4];
    reader.read_exact(&mut prefix).map_err(io_error)?;
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(io_error)?;
    Ok(body)
}

/// Moves raw frame bodies.
pub trait FrameIo: Send {
    fn write_frame(&mut self, body: &[u8]) -> Result<(), WireError>;
    fn read_frame(&mut self) -> Result<Vec<u8>, WireError>;
}

/// Framing over a byte stream such as a `TcpStream`.
pub struct StreamIo<S> {
    stream: S,
}

impl<S> StreamIo<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }
}

impl<S: Read + Write + Send> FrameIo for StreamIo<S> {
    fn write_frame(&mut self, body: &[u8]) -> Result<(), WireError> {
        write_frame(&mut self.stream, body)
    }

    fn read_frame(&mut self) -> Result<Vec<u8>, WireError> {
        read_frame(&mut self.stream)
    }
}

/// In-process framing over a pair of channels. Frames keep their length prefix so
/// the same cap applies as on TCP.
pub struct ChannelIo {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

impl ChannelIo {
    /// Sends arbitrary bytes as one frame, prefix included. For adversarial tests.
    pub fn send_raw(&mut self, bytes: Vec<u8>) -> Result<(), WireError> {
        self.tx.send(bytes).map_err(|_| WireError::TransportClosed)
    }
}

impl FrameIo for ChannelIo {
    fn write_frame(&mut self, body: &[u8]) -> Result<(), WireError> {
        let mut frame = Vec::new();
        write_frame(&mut frame, body)?;
        self.send_raw(frame)
    }

    fn read_frame(&mut self) -> Result<Vec<u8>, WireError> {
        let frame = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => WireError::Timeout,
            RecvTimeoutError::Disconnected => WireError::TransportClosed,
        })?;
        let mut cursor = Cursor::new(frame);
        let body = read_frame(&mut cursor)?;
        if cursor.position() as usize != cursor.get_ref().len() {
            return Err(WireError::Malformed("trailing bytes after frame".into()));
        }
        Ok(body)
    }
}

/// Message-level transport. Every message that crosses it lands in the transcript.
pub trait Transport: Send {
    fn send(&mut self, msg: &WireMessage) -> Result<(), WireError>;
    fn recv(&mut self) -> Result<WireMessage, WireError>;
    fn transcript(&self) -> &Transcript;
    fn take_transcript(&mut self) -> Transcript;
}

/// One side of a session over some framing.
pub struct Endpoint<F> {
    io: F,
    side: Side,
    transcript: Transcript,
}

impl<F: FrameIo> Endpoint<F> {
    pub fn new(io: F, side: Side) -> Self {
        Self {
            io,
            side,
            transcript: Transcript::new(),
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn io_mut(&mut self) -> &mut F {
        &mut self.io
    }
}

impl Endpoint<StreamIo<TcpStream>> {
    pub fn tcp(stream: TcpStream, side: Side, timeout: Duration) -> Result<Self, WireError> {
        stream.set_read_timeout(Some(timeout)).map_err(io_error)?;
        stream.set_write_timeout(Some(timeout)).map_err(io_error)?;
        stream.set_nodelay(true).map_err(io_error)?;
        Ok(Self::new(StreamIo::new(stream), side))
    }
}

impl<F: FrameIo> Transport for Endpoint<F> {
    fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        let body = encode(msg);
        self.io.write_frame(&body)?;
        self.transcript
            .record(self.side.outbound(), msg.clone(), body.len());
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage, WireError> {
        let body = self.io.read_frame()?;
        let msg = decode(&body)?;
        self.transcript
            .record(self.side.inbound(), msg.clone(), body.len());
        Ok(msg)
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    fn take_transcript(&mut self) -> Transcript {
        std::mem::take(&mut self.transcript)
    }
}

/// Connected Broker and bank endpoints sharing an in-process channel.
pub fn inproc_pair(timeout: Duration) -> (Endpoint<ChannelIo>, Endpoint<ChannelIo>) {
    let (to_bank, from_broker) = mpsc::channel();
    let (to_broker, from_bank) = mpsc::channel();
    let broker = ChannelIo {
        tx: to_bank,
        rx: from_bank,
        timeout,
    };
    let bank = ChannelIo {
        tx: to_broker,
        rx: from_broker,
        timeout,
    };
    (Endpoint::new(broker, Side::Broker), Endpoint::new(bank, Side::Bank))
}

/// Opens a Broker-side transport to the provider at `url`.
pub trait Dialer {
    fn dial(&self, url: &str) -> Result<Box<dyn Transport>, WireError>;
}

impl<T: Dialer + ?Sized> Dialer for &T {
    fn dial(&self, url: &str) -> Result<Box<dyn Transport>, WireError> {
        (**self).dial(url)
    }
}

/// Dials over TCP. URLs are looked up in `routes` first, then parsed as `host:port`.
#[derive(Debug, Clone)]
pub struct TcpDialer {
    routes: BTreeMap<String, SocketAddr>,
    timeout: Duration,
}

impl Default for TcpDialer {
    fn default() -> Self {
        Self::new()
    }
}

impl TcpDialer {
    pub fn new() -> Self {
        Self {
            routes: BTreeMap::new(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn route(mut self, url: &str, addr: SocketAddr) -> Self {
        self.routes.insert(url.to_owned(), addr);
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Dialer for TcpDialer {
    fn dial(&self, url: &str) -> Result<Box<dyn Transport>, WireError> {
        let addr = match self.routes.get(url) {
            Some(addr) => *addr,
            None => url
                .to_socket_addrs()
                .map_err(io_error)?
                .next()
                .ok_or_else(|| WireError::Io(format!("cannot resolve {url}")))?,
        };
        let stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(io_error)?;
        Ok(Box::new(Endpoint::tcp(stream, Side::Broker, self.timeout)?))
    }
}
