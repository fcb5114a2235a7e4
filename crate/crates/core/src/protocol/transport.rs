//! Point-to-point transports. Every receive names its sender, and each
//! ordered pair of ranks is a FIFO stream.
//!
//! The first frame on every `(sender, receiver)` stream is a HELLO from the
//! sender, sent lazily before its first real message. Both backends do this,
//! so their ledgers agree.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::wire::{
    decode_message, encode_message, read_frame, write_frame, FrameError, MsgType, ReadError, WireMessage,
};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer {peer} disconnected")]
    Disconnected { peer: usize },
    #[error("no message from peer {peer} within {waited:?}")]
    Timeout { peer: usize, waited: Duration },
    #[error("bad frame from peer {peer}: {source}")]
    Frame { peer: usize, source: FrameError },
    #[error("no route to peer {peer}")]
    NoRoute { peer: usize },
    #[error("unexpected handshake: {0}")]
    Handshake(String),
    #[error("i/o with peer {peer}: {source}")]
    Io { peer: usize, source: io::Error },
}

pub trait Transport: Send {
    fn rank(&self) -> usize;

    fn world(&self) -> usize;

    /// Sends `m` to `to`, returning every frame written in the process
    /// (a HELLO first if the stream was not yet open).
    fn send(&mut self, to: usize, m: &WireMessage) -> Result<Vec<WireMessage>, TransportError>;

    /// Blocks for the next frame from `from`, excluding the handshake.
    fn recv(&mut self, from: usize, timeout: Duration) -> Result<WireMessage, TransportError>;
}

fn hello(rank: usize) -> WireMessage {
    WireMessage::control(MsgType::Hello, rank as u16)
}

/// In-process endpoint over unbounded channels carrying encoded frames.
pub struct LoopbackEndpoint {
    rank: usize,
    world: usize,
    tx: Vec<Option<Sender<Vec<u8>>>>,
    rx: Vec<Option<Receiver<Vec<u8>>>>,
    opened: Vec<bool>,
    greeted: Vec<bool>,
}

/// Channels for the pairs the protocol uses: rank 0 with every other rank,
/// in both directions.
pub fn loopback_mesh(world: usize) -> Vec<LoopbackEndpoint> {
    let mut eps: Vec<LoopbackEndpoint> = (0..world)
        .map(|rank| LoopbackEndpoint {
            rank,
            world,
            tx: (0..world).map(|_| None).collect(),
            rx: (0..world).map(|_| None).collect(),
            opened: vec![false; world],
            greeted: vec![false; world],
        })
        .collect();
    for r in 1..world {
        for (a, b) in [(0, r), (r, 0)] {
            let (tx, rx) = mpsc::channel();
            eps[a].tx[b] = Some(tx);
            eps[b].rx[a] = Some(rx);
        }
    }
    eps
}

impl Transport for LoopbackEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world(&self) -> usize {
        self.world
    }

    fn send(&mut self, to: usize, m: &WireMessage) -> Result<Vec<WireMessage>, TransportError> {
        let tx = self
            .tx
            .get(to)
            .and_then(Option::as_ref)
            .ok_or(TransportError::NoRoute { peer: to })?;
        let mut sent = Vec::with_capacity(2);
        if !self.opened[to] {
            tx.send(encode_message(&hello(self.rank)))
                .map_err(|_| TransportError::Disconnected { peer: to })?;
            self.opened[to] = true;
            sent.push(hello(self.rank));
        }
        tx.send(encode_message(m))
            .map_err(|_| TransportError::Disconnected { peer: to })?;
        sent.push(m.clone());
        Ok(sent)
    }

    fn recv(&mut self, from: usize, timeout: Duration) -> Result<WireMessage, TransportError> {
        let rx = self
            .rx
            .get(from)
            .and_then(Option::as_ref)
            .ok_or(TransportError::NoRoute { peer: from })?;
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let bytes = rx.recv_timeout(left).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout {
                    peer: from,
                    waited: timeout,
                },
                RecvTimeoutError::Disconnected => TransportError::Disconnected { peer: from },
            })?;
            let m = decode_message(&bytes).map_err(|source| TransportError::Frame { peer: from, source })?;
            if self.greeted[from] {
                return Ok(m);
            }
            if m.msg_type != MsgType::Hello || m.sender as usize != from {
                return Err(TransportError::Handshake(format!(
                    "expected HELLO from {from}, got {} from {}",
                    m.msg_type, m.sender
                )));
            }
            self.greeted[from] = true;
        }
    }
}

/// Localhost TCP endpoint: one connection per ordered pair, opened by the
/// sender on first use; the acceptor learns the peer from its HELLO.
pub struct TcpEndpoint {
    rank: usize,
    peers: Vec<SocketAddr>,
    listener: TcpListener,
    out: Vec<Option<BufWriter<TcpStream>>>,
    inc: Vec<Option<BufReader<TcpStream>>>,
    connect_timeout: Duration,
}

pub fn resolve_hosts(hosts: &[String]) -> io::Result<Vec<SocketAddr>> {
    hosts
        .iter()
        .map(|h| {
            h.to_socket_addrs()?
                .next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {h}")))
        })
        .collect()
}

impl TcpEndpoint {
    /// Binds `peers[rank]` and returns an endpoint for that rank.
    pub fn bind(rank: usize, peers: Vec<SocketAddr>, connect_timeout: Duration) -> io::Result<Self> {
        let addr = *peers
            .get(rank)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("rank {rank} has no address")))?;
        Ok(Self::from_listener(
            rank,
            peers,
            TcpListener::bind(addr)?,
            connect_timeout,
        ))
    }

    /// Uses an already bound listener, which lets callers bind port 0 first
    /// and publish the chosen ports.
    pub fn from_listener(
        rank: usize,
        peers: Vec<SocketAddr>,
        listener: TcpListener,
        connect_timeout: Duration,
    ) -> Self {
        let world = peers.len();
        Self {
            rank,
            peers,
            listener,
            out: (0..world).map(|_| None).collect(),
            inc: (0..world).map(|_| None).collect(),
            connect_timeout,
        }
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    fn connect(&self, to: usize) -> Result<TcpStream, TransportError> {
        let addr = self.peers[to];
        let deadline = Instant::now() + self.connect_timeout;
        loop {
            match TcpStream::connect(addr) {
                Ok(s) => {
                    s.set_nodelay(true)
                        .map_err(|source| TransportError::Io { peer: to, source })?;
                    return Ok(s);
                }
                Err(e) if Instant::now() < deadline && is_retryable(&e) => {
                    thread::sleep(Duration::from_millis(20));
                }
                Err(source) => return Err(TransportError::Io { peer: to, source }),
            }
        }
    }

    /// Accepts connections until one from `from` has arrived.
    fn accept_from(&mut self, from: usize, deadline: Instant, timeout: Duration) -> Result<(), TransportError> {
        let io_err = |source| TransportError::Io { peer: from, source };
        self.listener.set_nonblocking(true).map_err(io_err)?;
        while self.inc[from].is_none() {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false).map_err(io_err)?;
                    stream.set_nodelay(true).map_err(io_err)?;
                    let left = deadline
                        .saturating_duration_since(Instant::now())
                        .max(Duration::from_millis(1));
                    stream.set_read_timeout(Some(left)).map_err(io_err)?;
                    let mut reader = BufReader::new(stream);
                    let m = read_frame(&mut reader).map_err(|e| map_read(e, from, timeout))?;
                    let sender = m.sender as usize;
                    if m.msg_type != MsgType::Hello || sender >= self.inc.len() || self.inc[sender].is_some() {
                        return Err(TransportError::Handshake(format!(
                            "rank {} got {} from {} as first frame",
                            self.rank, m.msg_type, m.sender
                        )));
                    }
                    self.inc[sender] = Some(reader);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout {
                            peer: from,
                            waited: timeout,
                        });
                    }
                    thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(io_err(e)),
            }
        }
        Ok(())
    }
}

fn is_retryable(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionRefused | io::ErrorKind::ConnectionReset | io::ErrorKind::Interrupted
    )
}

fn map_read(e: ReadError, peer: usize, timeout: Duration) -> TransportError {
    match e {
        ReadError::Closed => TransportError::Disconnected { peer },
        ReadError::Frame(source) => TransportError::Frame { peer, source },
        ReadError::Io(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
            TransportError::Timeout { peer, waited: timeout }
        }
        ReadError::Io(e) if matches!(e.kind(), io::ErrorKind::ConnectionReset | io::ErrorKind::UnexpectedEof) => {
            TransportError::Disconnected { peer }
        }
        ReadError::Io(source) => TransportError::Io { peer, source },
    }
}

impl Transport for TcpEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world(&self) -> usize {
        self.peers.len()
    }

    fn send(&mut self, to: usize, m: &WireMessage) -> Result<Vec<WireMessage>, TransportError> {
        if to >= self.peers.len() || to == self.rank {
            return Err(TransportError::NoRoute { peer: to });
        }
        let write_err = |source: io::Error| match source.kind() {
            io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset => TransportError::Disconnected { peer: to },
            _ => TransportError::Io { peer: to, source },
        };
        let mut sent = Vec::with_capacity(2);
        if self.out[to].is_none() {
            let mut w = BufWriter::new(self.connect(to)?);
            write_frame(&mut w, &hello(self.rank)).map_err(write_err)?;
            self.out[to] = Some(w);
            sent.push(hello(self.rank));
        }
        let w = self.out[to].as_mut().expect("opened above");
        write_frame(w, m).map_err(write_err)?;
        sent.push(m.clone());
        Ok(sent)
    }

    fn recv(&mut self, from: usize, timeout: Duration) -> Result<WireMessage, TransportError> {
        if from >= self.peers.len() || from == self.rank {
            return Err(TransportError::NoRoute { peer: from });
        }
        let deadline = Instant::now() + timeout;
        self.accept_from(from, deadline, timeout)?;
        let reader = self.inc[from].as_mut().expect("accepted above");
        let left = deadline
            .saturating_duration_since(Instant::now())
            .max(Duration::from_millis(1));
        reader
            .get_ref()
            .set_read_timeout(Some(left))
            .map_err(|source| TransportError::Io { peer: from, source })?;
        read_frame(reader).map_err(|e| map_read(e, from, timeout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(sender: u16, step: u32) -> WireMessage {
        WireMessage {
            msg_type: MsgType::Noise,
            sender,
            step,
            payload: vec![step as f64, -1.0],
        }
    }

    #[test]
    fn loopback_fifo_and_handshake() {
        let mut mesh = loopback_mesh(3);
        let mut r2 = mesh.pop().unwrap();
        let _r1 = mesh.pop().unwrap();
        let mut r0 = mesh.pop().unwrap();
        let first = r2.send(0, &noise(2, 9)).unwrap();
        assert_eq!(first.len(), 2);
        assert_eq!(first[0].msg_type, MsgType::Hello);
        assert_eq!(r2.send(0, &noise(2, 8)).unwrap().len(), 1);
        let t = Duration::from_secs(1);
        assert_eq!(r0.recv(2, t).unwrap().step, 9);
        assert_eq!(r0.recv(2, t).unwrap().step, 8);
        assert!(matches!(
            r0.recv(2, Duration::from_millis(5)),
            Err(TransportError::Timeout { peer: 2, .. })
        ));
        assert!(matches!(
            r2.send(1, &noise(2, 1)),
            Err(TransportError::NoRoute { peer: 1 })
        ));
        drop(r2);
        assert!(matches!(r0.recv(2, t), Err(TransportError::Disconnected { peer: 2 })));
    }

    #[test]
    fn tcp_pair_exchanges_frames() {
        let l0 = TcpListener::bind("127.0.0.1:0").unwrap();
        let l1 = TcpListener::bind("127.0.0.1:0").unwrap();
        let peers = vec![l0.local_addr().unwrap(), l1.local_addr().unwrap()];
        let t = Duration::from_secs(5);
        let mut e0 = TcpEndpoint::from_listener(0, peers.clone(), l0, t);
        let mut e1 = TcpEndpoint::from_listener(1, peers, l1, t);
        let h = thread::spawn(move || {
            e1.send(0, &noise(1, 3)).unwrap();
            e1.send(0, &noise(1, 2)).unwrap();
            let back = e1.recv(0, t).unwrap();
            assert_eq!(back.msg_type, MsgType::Shutdown);
            e1
        });
        assert!(e0.recv(1, t).unwrap().bits_eq(&noise(1, 3)));
        assert!(e0.recv(1, t).unwrap().bits_eq(&noise(1, 2)));
        e0.send(1, &WireMessage::control(MsgType::Shutdown, 0)).unwrap();
        let e1 = h.join().unwrap();
        drop(e1);
        assert!(matches!(e0.recv(1, t), Err(TransportError::Disconnected { peer: 1 })));
    }

    #[test]
    fn tcp_recv_times_out() {
        let l0 = TcpListener::bind("127.0.0.1:0").unwrap();
        let l1 = TcpListener::bind("127.0.0.1:0").unwrap();
        let peers = vec![l0.local_addr().unwrap(), l1.local_addr().unwrap()];
        let mut e0 = TcpEndpoint::from_listener(0, peers, l0, Duration::from_secs(1));
        let r = e0.recv(1, Duration::from_millis(50));
        assert!(matches!(r, Err(TransportError::Timeout { peer: 1, .. })), "{r:?}");
        drop(l1);
    }
}
