//! Point-to-point frame delivery: an in-process simulated network with
//! latency and bandwidth, and plain TCP.

use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::frame::{encode_frame, read_frame, Frame, MsgType};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportParams {
    /// s per message
    pub latency: f64,
    /// bytes/s
    pub bandwidth: f64,
}

impl Default for TransportParams {
    fn default() -> Self {
        Self {
            latency: 1e-3,
            bandwidth: 1.25e9,
        }
    }
}

impl TransportParams {
    pub fn validate(&self) -> Result<()> {
        if self.latency.is_nan() || self.latency < 0.0 {
            return Err(Error::Config(format!("network.latency must be >= 0, got {}", self.latency)));
        }
        if self.bandwidth.is_nan() || self.bandwidth <= 0.0 {
            return Err(Error::Config(format!(
                "network.bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }
}

/// Arrival time of a lone message of `bytes` sent at `now`.
pub fn simulated_send(bytes: usize, now: f64, params: &TransportParams) -> f64 {
    now + params.latency + bytes as f64 / params.bandwidth
}

/// Raw bytes on their way to a node.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub from: usize,
    pub bytes: Vec<u8>,
    /// Simulated arrival time; `None` for frames outside the timing model.
    pub deliver_at: Option<f64>,
}

pub trait Transport: Send {
    /// Sends `frame` to node `to` at local time `now`. Untimed frames
    /// (bootstrap, verification) bypass the latency/bandwidth model.
    fn send(&mut self, to: usize, frame: &Frame, now: f64, timed: bool) -> Result<()>;

    fn frames_sent(&self) -> u64;
    fn bytes_sent(&self) -> u64;
}

/// Each node owns one outgoing link: frames serialize onto it back to back,
/// then spend `latency` in flight.
pub struct SimTransport {
    me: usize,
    peers: Vec<Option<Sender<Envelope>>>,
    params: TransportParams,
    link_free: f64,
    frames: u64,
    bytes: u64,
}

impl SimTransport {
    pub fn new(me: usize, peers: Vec<Option<Sender<Envelope>>>, params: TransportParams) -> Self {
        Self {
            me,
            peers,
            params,
            link_free: f64::NEG_INFINITY,
            frames: 0,
            bytes: 0,
        }
    }
}

impl Transport for SimTransport {
    fn send(&mut self, to: usize, frame: &Frame, now: f64, timed: bool) -> Result<()> {
        let bytes = encode_frame(frame)?;
        let deliver_at = timed.then(|| {
            let start = self.link_free.max(now);
            self.link_free = start + bytes.len() as f64 / self.params.bandwidth;
            self.link_free + self.params.latency
        });
        if timed {
            self.frames += 1;
            self.bytes += bytes.len() as u64;
        }
        let peer = self
            .peers
            .get(to)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Cluster {
                node: self.me as u32,
                reason: format!("no link to node {to}"),
            })?;
        peer.send(Envelope {
            from: self.me,
            bytes,
            deliver_at,
        })
        .map_err(|_| Error::Cluster {
            node: to as u32,
            reason: "peer has gone away".into(),
        })
    }

    fn frames_sent(&self) -> u64 {
        self.frames
    }

    fn bytes_sent(&self) -> u64 {
        self.bytes
    }
}

pub struct TcpTransport {
    me: usize,
    streams: Vec<Option<TcpStream>>,
    frames: u64,
    bytes: u64,
}

impl Transport for TcpTransport {
    fn send(&mut self, to: usize, frame: &Frame, _now: f64, timed: bool) -> Result<()> {
        let bytes = encode_frame(frame)?;
        let stream = self
            .streams
            .get_mut(to)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::Cluster {
                node: self.me as u32,
                reason: format!("no connection to node {to}"),
            })?;
        stream.write_all(&bytes).map_err(|e| Error::Cluster {
            node: to as u32,
            reason: format!("send failed: {e}"),
        })?;
        if timed {
            self.frames += 1;
            self.bytes += bytes.len() as u64;
        }
        Ok(())
    }

    fn frames_sent(&self) -> u64 {
        self.frames
    }

    fn bytes_sent(&self) -> u64 {
        self.bytes
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for s in self.streams.iter().flatten() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }
}

fn spawn_reader(stream: TcpStream, from: usize, inbox: Sender<Envelope>) -> Result<()> {
    let mut reader = BufReader::new(stream);
    thread::Builder::new()
        .name(format!("tcp-reader-{from}"))
        .spawn(move || {
            while let Ok(Some(frame)) = read_frame(&mut reader) {
                let Ok(bytes) = encode_frame(&frame) else { break };
                let env = Envelope {
                    from,
                    bytes,
                    deliver_at: None,
                };
                if inbox.send(env).is_err() {
                    break;
                }
            }
        })?;
    Ok(())
}

/// Full mesh over TCP. Node `me` accepts connections from higher ids and
/// dials lower ids; the first frame on every connection is a HELLO naming
/// the dialing node.
pub fn connect_mesh(
    me: usize,
    listener: TcpListener,
    roster: &[SocketAddr],
    inbox: Sender<Envelope>,
    timeout: Duration,
) -> Result<TcpTransport> {
    let n = roster.len();
    let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();
    let deadline = Instant::now() + timeout;

    for (peer, addr) in roster.iter().enumerate().take(me) {
        let mut stream = loop {
            match TcpStream::connect_timeout(addr, Duration::from_millis(200)) {
                Ok(s) => break s,
                Err(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
                Err(_) => return Err(Error::Timeout { node: peer as u32 }),
            }
        };
        stream.set_nodelay(true)?;
        let hello = Frame::new(MsgType::Hello, 0, me as u32, 0, Vec::new());
        stream.write_all(&encode_frame(&hello)?)?;
        streams[peer] = Some(stream);
    }

    listener.set_nonblocking(true)?;
    let mut pending = n - me - 1;
    while pending > 0 {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                stream.set_read_timeout(Some(timeout))?;
                let mut s = &stream;
                let hello = read_frame(&mut s)?
                    .filter(|f| f.msg_type == MsgType::Hello)
                    .ok_or_else(|| Error::Protocol("connection did not open with HELLO".into()))?;
                let peer = hello.node_id as usize;
                if peer <= me || peer >= n || streams[peer].is_some() {
                    return Err(Error::Protocol(format!("unexpected HELLO from node {peer}")));
                }
                stream.set_read_timeout(None)?;
                streams[peer] = Some(stream);
                pending -= 1;
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing = (me + 1..n).find(|&p| streams[p].is_none()).unwrap_or(me);
                    return Err(Error::Timeout { node: missing as u32 });
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }

    for (peer, s) in streams.iter().enumerate() {
        if let Some(s) = s {
            spawn_reader(s.try_clone()?, peer, inbox.clone())?;
        }
    }
    Ok(TcpTransport {
        me,
        streams,
        frames: 0,
        bytes: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossbeam_channel::unbounded;

    #[test]
    fn lone_message_timing() {
        let p = TransportParams {
            latency: 0.0,
            bandwidth: 1.25e9,
        };
        assert!((simulated_send(2_000_000, 0.0, &p) - 0.0016).abs() < 1e-15);
        let d = TransportParams::default();
        assert_eq!(simulated_send(0, 3.0, &d), 3.0 + 1e-3);
        assert!((40.0 * d.latency - 0.040).abs() < 1e-15);
    }

    #[test]
    fn link_serializes_back_to_back_frames() {
        let (tx, rx) = unbounded();
        let params = TransportParams {
            latency: 1.0,
            bandwidth: 21.0,
        };
        let mut t = SimTransport::new(0, vec![None, Some(tx)], params);
        let f = Frame::new(MsgType::Hello, 0, 0, 0, Vec::new());
        t.send(1, &f, 0.0, true).unwrap();
        t.send(1, &f, 0.0, true).unwrap();
        t.send(1, &f, 0.0, false).unwrap();
        let times: Vec<Option<f64>> = rx.try_iter().map(|e| e.deliver_at).collect();
        assert_eq!(times, vec![Some(2.0), Some(3.0), None]);
        assert_eq!(t.frames_sent(), 2);
        assert_eq!(t.bytes_sent(), 42);
    }
}
