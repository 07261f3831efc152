//! One process per rank over a full mesh of TCP connections.
//!
//! Rank `r` listens on `endpoints[r]`, dials every lower rank and accepts
//! every higher one. Each connection opens with a handshake of magic,
//! version, rank and size. Every connection then gets a writer thread fed by
//! a channel and a reader thread applying frames to the local inbox.

use std::io::{BufWriter, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bls_core::frame::{FrameHeader, CONTROL_SLOT, FRAME_HEADER_LEN, FRAME_MAGIC as MAGIC, FRAME_VERSION as VERSION};
use bls_core::RankId;

use super::{BackendKind, Clock, CommOptions, Communicator, Frame, Inbox, Link, TransportError, KIND_GOODBYE};

const HANDSHAKE_LEN: usize = 9;

fn handshake(rank: RankId, size: usize) -> [u8; HANDSHAKE_LEN] {
    let mut b = [0u8; HANDSHAKE_LEN];
    b[0..4].copy_from_slice(&MAGIC.to_be_bytes());
    b[4] = VERSION;
    b[5..7].copy_from_slice(&(rank as u16).to_be_bytes());
    b[7..9].copy_from_slice(&(size as u16).to_be_bytes());
    b
}

fn parse_handshake(b: &[u8; HANDSHAKE_LEN], size: usize) -> Result<RankId, TransportError> {
    if u32::from_be_bytes(b[0..4].try_into().expect("4 bytes")) != MAGIC || b[4] != VERSION {
        return Err(TransportError::Setup("bad handshake magic or version".into()));
    }
    let peer_size = u16::from_be_bytes([b[7], b[8]]) as usize;
    if peer_size != size {
        return Err(TransportError::Setup(format!("peer expects comm_size {peer_size}, local is {size}")));
    }
    Ok(u16::from_be_bytes([b[5], b[6]]) as usize)
}

fn resolve(addr: &str) -> Result<SocketAddr, TransportError> {
    addr.to_socket_addrs()
        .map_err(|e| TransportError::Setup(format!("cannot resolve {addr:?}: {e}")))?
        .next()
        .ok_or_else(|| TransportError::Setup(format!("no address for {addr:?}")))
}

/// Read an endpoint list: one `host:port` per line, `#` comments allowed.
pub fn parse_endpoints(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Bind `endpoints[rank]` and join the mesh.
pub fn connect(rank: RankId, endpoints: &[String], opts: CommOptions) -> Result<Communicator, TransportError> {
    let addr = endpoints
        .get(rank)
        .ok_or_else(|| TransportError::InvalidArgument(format!("no endpoint for rank {rank}")))?;
    let listener = TcpListener::bind(resolve(addr)?).map_err(|e| TransportError::Setup(format!("bind {addr}: {e}")))?;
    connect_with_listener(rank, endpoints, listener, opts)
}

/// Join the mesh using an already bound listener for this rank.
pub fn connect_with_listener(
    rank: RankId,
    endpoints: &[String],
    listener: TcpListener,
    opts: CommOptions,
) -> Result<Communicator, TransportError> {
    let size = endpoints.len();
    if size == 0 || rank >= size || size > u16::MAX as usize {
        return Err(TransportError::InvalidArgument(format!("rank {rank} of {size} endpoints")));
    }
    let deadline = Instant::now() + opts.setup_timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();

    for q in 0..rank {
        let target = resolve(&endpoints[q])?;
        let stream = loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(TransportError::SetupTimeout(format!("rank {rank} could not reach rank {q} at {target}")));
            }
            match TcpStream::connect_timeout(&target, left.min(Duration::from_secs(1))) {
                Ok(s) => break s,
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        };
        let mut stream = stream;
        stream.write_all(&handshake(rank, size))?;
        streams[q] = Some(stream);
    }

    listener.set_nonblocking(true)?;
    let mut pending = size - 1 - rank;
    while pending > 0 {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                let left = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
                stream.set_read_timeout(Some(left))?;
                let mut b = [0u8; HANDSHAKE_LEN];
                stream
                    .read_exact(&mut b)
                    .map_err(|e| TransportError::Setup(format!("handshake read: {e}")))?;
                stream.set_read_timeout(None)?;
                let q = parse_handshake(&b, size)?;
                if q >= size {
                    return Err(TransportError::Setup(format!("peer claims rank {q} of {size}")));
                }
                if q == rank {
                    return Err(TransportError::DuplicateRank(q));
                }
                if q < rank {
                    return Err(TransportError::Setup(format!("rank {q} dialed rank {rank}; lower ranks only listen")));
                }
                if streams[q].is_some() {
                    return Err(TransportError::DuplicateRank(q));
                }
                streams[q] = Some(stream);
                pending -= 1;
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing: Vec<usize> = (rank + 1..size).filter(|&q| streams[q].is_none()).collect();
                    return Err(TransportError::SetupTimeout(format!("rank {rank} still waiting for ranks {missing:?}")));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(TransportError::Setup(format!("accept: {e}"))),
        }
    }
    drop(listener);

    let inbox = Arc::new(Inbox::new(size));
    let mut senders: Vec<Option<Sender<Frame>>> = (0..size).map(|_| None).collect();
    let mut writers = Vec::new();
    for (q, s) in streams.into_iter().enumerate() {
        let Some(stream) = s else { continue };
        stream.set_nodelay(true)?;
        let read_half = stream.try_clone()?;
        let ib = Arc::clone(&inbox);
        thread::Builder::new()
            .name(format!("bls-tcp-read-{rank}-{q}"))
            .spawn(move || reader(ib, read_half, q))?;
        let (tx, rx) = mpsc::channel();
        let ib = Arc::clone(&inbox);
        writers.push(
            thread::Builder::new()
                .name(format!("bls-tcp-write-{rank}-{q}"))
                .spawn(move || writer(ib, stream, rx, rank, q))?,
        );
        senders[q] = Some(tx);
    }
    Ok(Communicator::new(
        rank,
        size,
        BackendKind::Tcp,
        inbox,
        Box::new(TcpLink { senders, writers }),
        opts,
        Clock::Wall,
    ))
}

struct TcpLink {
    senders: Vec<Option<Sender<Frame>>>,
    writers: Vec<JoinHandle<()>>,
}

impl Link for TcpLink {
    fn send(&mut self, dest: RankId, frame: Frame) -> Result<(), TransportError> {
        self.senders
            .get(dest)
            .and_then(Option::as_ref)
            .ok_or_else(|| TransportError::Failed(format!("no connection to rank {dest}")))?
            .send(frame)
            .map_err(|_| TransportError::Failed(format!("writer for rank {dest} is gone")))
    }

    fn close(&mut self) {
        for s in &mut self.senders {
            s.take();
        }
        for w in self.writers.drain(..) {
            let _ = w.join();
        }
    }
}

fn write_frame(w: &mut impl Write, f: &Frame) -> std::io::Result<()> {
    w.write_all(&f.header.encode())?;
    w.write_all(&f.payload)
}

fn writer(inbox: Arc<Inbox>, stream: TcpStream, rx: Receiver<Frame>, rank: RankId, peer: RankId) {
    let mut w = BufWriter::with_capacity(1 << 16, stream);
    let result = (|| -> std::io::Result<()> {
        while let Ok(f) = rx.recv() {
            write_frame(&mut w, &f)?;
            while let Ok(f) = rx.try_recv() {
                write_frame(&mut w, &f)?;
            }
            w.flush()?;
        }
        let bye = Frame {
            header: FrameHeader {
                tag: KIND_GOODBYE,
                slot: CONTROL_SLOT,
                source: rank as u16,
                iteration: u64::MAX,
                offset: 0,
                length: 0,
            },
            payload: Vec::new(),
        };
        write_frame(&mut w, &bye)?;
        w.flush()?;
        w.get_ref().shutdown(Shutdown::Write)
    })();
    if let Err(e) = result {
        inbox.fail(format!("write to rank {peer}: {e}"));
    }
}

fn reader(inbox: Arc<Inbox>, mut stream: TcpStream, peer: RankId) {
    let mut hdr = [0u8; FRAME_HEADER_LEN];
    loop {
        if let Err(e) = stream.read_exact(&mut hdr) {
            inbox.fail(format!("connection to rank {peer} lost: {e}"));
            return;
        }
        let header = match FrameHeader::decode(&hdr) {
            Ok(h) => h,
            Err(e) => {
                inbox.fail(format!("bad frame from rank {peer}: {e}"));
                return;
            }
        };
        if header.source as usize != peer {
            inbox.fail(format!("frame on rank {peer}'s connection claims source {}", header.source));
            return;
        }
        let mut payload = vec![0u8; header.length as usize];
        if let Err(e) = stream.read_exact(&mut payload) {
            inbox.fail(format!("connection to rank {peer} lost mid-frame: {e}"));
            return;
        }
        if header.is_control() && header.tag == KIND_GOODBYE {
            inbox.mark_closed(peer);
            return;
        }
        inbox.apply(Frame { header, payload }, true);
    }
}
