//! The envoy: a dispatcher thread per node that drains the inbound link,
//! decodes frames and files them per sender, so arrivals never wait on the
//! compute thread.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::Receiver;

use crate::error::{Error, Result};
use crate::runtime::frame::{decode_frame, Frame, MsgType};
use crate::runtime::transport::Envelope;

#[derive(Debug, Clone, PartialEq)]
pub struct Delivered {
    pub frame: Frame,
    pub deliver_at: Option<f64>,
}

#[derive(Debug, Default)]
struct Inbox {
    queues: Vec<VecDeque<Delivered>>,
    acked: u64,
    shutdown_seen: bool,
    closed: bool,
    failure: Option<String>,
}

/// Per-sender FIFO queues shared between the envoy and the compute thread.
#[derive(Debug)]
pub struct Mailbox {
    me: usize,
    inbox: Mutex<Inbox>,
    ready: Condvar,
    abort: Arc<AtomicBool>,
}

impl Mailbox {
    pub fn new(me: usize, n_nodes: usize, abort: Arc<AtomicBool>) -> Arc<Self> {
        Arc::new(Self {
            me,
            inbox: Mutex::new(Inbox {
                queues: (0..n_nodes).map(|_| VecDeque::new()).collect(),
                ..Inbox::default()
            }),
            ready: Condvar::new(),
            abort,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inbox> {
        self.inbox.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn push(&self, from: usize, d: Delivered) -> Result<()> {
        let mut inbox = self.lock();
        let q = inbox
            .queues
            .get_mut(from)
            .ok_or_else(|| Error::Protocol(format!("frame from unknown node {from}")))?;
        let is_shutdown = d.frame.msg_type == MsgType::Shutdown;
        q.push_back(d);
        inbox.acked += 1;
        inbox.shutdown_seen |= is_shutdown;
        drop(inbox);
        self.ready.notify_all();
        Ok(())
    }

    fn fail(&self, reason: String) {
        self.lock().failure.get_or_insert(reason);
        self.ready.notify_all();
    }

    fn close(&self) {
        self.lock().closed = true;
        self.ready.notify_all();
    }

    /// Frames received so far, whether or not anyone has consumed them.
    pub fn acked(&self) -> u64 {
        self.lock().acked
    }

    pub fn shutdown_seen(&self) -> bool {
        self.lock().shutdown_seen
    }

    pub fn pending(&self, from: usize) -> usize {
        self.lock().queues.get(from).map_or(0, VecDeque::len)
    }

    /// Removes and returns the oldest frame from `from` that satisfies
    /// `pred`, waiting up to `timeout` for it to arrive.
    pub fn recv_where(
        &self,
        from: usize,
        pred: impl Fn(&Frame) -> bool,
        timeout: Duration,
    ) -> Result<Delivered> {
        let deadline = Instant::now() + timeout;
        let mut inbox = self.lock();
        loop {
            let q = inbox
                .queues
                .get_mut(from)
                .ok_or_else(|| Error::invalid(format!("no such node {from}")))?;
            if let Some(pos) = q.iter().position(|d| pred(&d.frame)) {
                return Ok(q.remove(pos).expect("position is in range"));
            }
            if let Some(reason) = &inbox.failure {
                return Err(Error::Cluster {
                    node: self.me as u32,
                    reason: reason.clone(),
                });
            }
            if inbox.closed {
                return Err(Error::Cluster {
                    node: from as u32,
                    reason: "disconnected before sending the expected frame".into(),
                });
            }
            if self.abort.load(Ordering::Relaxed) {
                return Err(Error::Cluster {
                    node: self.me as u32,
                    reason: "cluster aborted".into(),
                });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout { node: from as u32 });
            }
            let slice = (deadline - now).min(Duration::from_millis(50));
            inbox = self
                .ready
                .wait_timeout(inbox, slice)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }
}

/// Starts the dispatcher. It runs until every sender on `rx` is gone.
pub fn spawn_envoy(rx: Receiver<Envelope>, mailbox: Arc<Mailbox>) -> Result<JoinHandle<()>> {
    let name = format!("envoy-{}", mailbox.me);
    let handle = thread::Builder::new().name(name).spawn(move || {
        for env in rx.iter() {
            let result = decode_frame(&env.bytes).and_then(|frame| {
                mailbox.push(
                    env.from,
                    Delivered {
                        frame,
                        deliver_at: env.deliver_at,
                    },
                )
            });
            if let Err(e) = result {
                mailbox.fail(e.to_string());
            }
        }
        mailbox.close();
    })?;
    Ok(handle)
}
