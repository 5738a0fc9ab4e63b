//! Launching a whole cluster and summarizing node 0's timings.

use std::fmt::Write as _;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use serde::Serialize;

use crate::config::{Mode, RunConfig, TransportKind};
use crate::error::{Error, Result};
use crate::model::{prompt_from_seed, ModelWeights};
use crate::placement::{build_shard_plan, ShardPlan, Strategy};
use crate::runtime::envoy::{spawn_envoy, Mailbox};
use crate::runtime::node::{Node, NodeOutput, NodeSetup, NodeStats, PassRecord};
use crate::runtime::transport::{connect_mesh, Envelope, SimTransport, Transport};
use crate::wiring::ClockMode;

/// Per generated token, as seen by node 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenRow {
    pub token: usize,
    pub id: u32,
    pub total_s: f64,
    pub moe_s: f64,
    pub comm_s: f64,
    pub misc_s: f64,
    pub comm_rounds: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub n_nodes: usize,
    pub mode: Mode,
    pub strategy: Strategy,
    pub latency: f64,
    pub tokens: Vec<u32>,
    pub rows: Vec<TokenRow>,
    /// Layer-output checksums for every forward pass, prompt included.
    pub layer_checksums: Vec<Vec<u64>>,
    /// Cluster-wide per-layer maximum of experts executed on one node,
    /// averaged over the generation passes.
    pub mean_executed_per_layer: f64,
    /// Simulated time from the request to the first generated token, prompt
    /// passes included.
    pub time_to_first_token: f64,
    pub nodes: Vec<NodeStats>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl RunReport {
    fn from_passes(
        cfg: &RunConfig,
        mode: Mode,
        passes: Vec<PassRecord>,
        nodes: Vec<NodeStats>,
    ) -> Self {
        let mut rows = Vec::new();
        let mut tokens = Vec::new();
        let mut executed = Vec::new();
        let mut layer_checksums = Vec::with_capacity(passes.len());
        let mut time_to_first_token = 0.0;
        for p in passes {
            if tokens.is_empty() {
                time_to_first_token += p.elapsed;
            }
            if let Some(id) = p.token {
                rows.push(TokenRow {
                    token: rows.len(),
                    id,
                    total_s: p.elapsed,
                    moe_s: p.moe,
                    comm_s: p.elapsed - p.moe - p.misc,
                    misc_s: p.misc,
                    comm_rounds: p.rounds,
                });
                tokens.push(id);
                executed.extend(p.max_executed.iter().map(|&m| m as f64));
            }
            layer_checksums.push(p.checksums);
        }
        Self {
            n_nodes: cfg.cluster.nodes,
            mode,
            strategy: cfg.cluster.strategy,
            latency: cfg.network.latency,
            tokens,
            rows,
            layer_checksums,
            mean_executed_per_layer: mean(executed.into_iter()),
            time_to_first_token,
            nodes,
        }
    }

    pub fn mean_token_time(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.total_s))
    }

    pub fn mean_moe_time(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.moe_s))
    }

    pub fn mean_comm_time(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.comm_s))
    }

    /// Fraction of the generation time spent communicating.
    pub fn comm_share(&self) -> f64 {
        let total: f64 = self.rows.iter().map(|r| r.total_s).sum();
        let comm: f64 = self.rows.iter().map(|r| r.comm_s).sum();
        comm / total
    }

    pub fn comm_rounds_per_token(&self) -> f64 {
        let rounds: u64 = self.rows.iter().map(|r| r.comm_rounds).sum();
        rounds as f64 / self.rows.len().max(1) as f64
    }

    /// Message-latency part of the per-token communication time.
    pub fn comm_latency_per_token(&self) -> f64 {
        self.comm_rounds_per_token() * self.latency
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("token,moe_s,comm_s,misc_s\n");
        for r in &self.rows {
            writeln!(out, "{},{:.9},{:.9},{:.9}", r.token, r.moe_s, r.comm_s, r.misc_s).expect("string write");
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(
                out,
                "{{\"token\":{},\"moe_s\":{:.9},\"comm_s\":{:.9},\"misc_s\":{:.9}}}",
                r.token, r.moe_s, r.comm_s, r.misc_s
            )
            .expect("string write");
        }
        out
    }
}

/// Everything the nodes of one run share.
struct Job {
    cfg: RunConfig,
    weights: ModelWeights,
    plan: ShardPlan,
    prompt: Vec<u32>,
}

impl Job {
    fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = ModelWeights::generate(cfg.model, cfg.seed)?;
        let plan = build_shard_plan(cfg.model.n_experts, cfg.cluster.nodes, cfg.cluster.replication)?;
        let prompt = prompt_from_seed(cfg.seed, cfg.run.prompt_tokens, cfg.model.vocab_size);
        Ok(Self {
            cfg: cfg.clone(),
            weights,
            plan,
            prompt,
        })
    }

    fn setup<'a>(
        &'a self,
        id: usize,
        transport: Box<dyn Transport + 'a>,
        mailbox: Arc<Mailbox>,
        clock: ClockMode,
    ) -> NodeSetup<'a> {
        NodeSetup {
            id,
            cfg: &self.cfg,
            resolved: self.cfg.resolved(),
            weights: &self.weights,
            plan: &self.plan,
            prompt: &self.prompt,
            transport,
            mailbox,
            clock,
        }
    }

    fn report(&self, outputs: Vec<NodeOutput>) -> RunReport {
        let mut outputs = outputs;
        let passes = std::mem::take(&mut outputs[0].passes);
        let stats = outputs.into_iter().map(|o| o.stats).collect();
        RunReport::from_passes(&self.cfg, self.cfg.resolved().mode, passes, stats)
    }
}

/// Runs every node of the cluster inside this process, over the configured
/// transport (`tcp` uses loopback listeners on ephemeral ports).
pub fn run_cluster(cfg: &RunConfig) -> Result<RunReport> {
    let job = Job::new(cfg)?;
    let outputs = match cfg.cluster.transport {
        TransportKind::Sim => run_sim(&job)?,
        TransportKind::Tcp => run_tcp_local(&job)?,
    };
    Ok(job.report(outputs))
}

type Links = (Vec<Sender<Envelope>>, Vec<Receiver<Envelope>>);

fn links(n: usize) -> Links {
    (0..n).map(|_| unbounded()).unzip()
}

/// Joins node threads and picks the most informative failure: the first
/// error that is not a side effect of the cluster being aborted.
fn collect(results: Vec<thread::Result<Result<NodeOutput>>>) -> Result<Vec<NodeOutput>> {
    let mut outputs = Vec::new();
    let mut first_err: Option<Error> = None;
    for (id, r) in results.into_iter().enumerate() {
        let r = r.unwrap_or_else(|_| {
            Err(Error::Cluster {
                node: id as u32,
                reason: "node thread panicked".into(),
            })
        });
        match r {
            Ok(o) => outputs.push(o),
            Err(e) => {
                let secondary = matches!(&e, Error::Cluster { reason, .. } if reason == "cluster aborted");
                if first_err.is_none() || !secondary && is_secondary(first_err.as_ref()) {
                    first_err = Some(e);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(outputs),
    }
}

fn is_secondary(e: Option<&Error>) -> bool {
    matches!(e, Some(Error::Cluster { reason, .. }) if reason == "cluster aborted")
}

fn run_sim(job: &Job) -> Result<Vec<NodeOutput>> {
    let n = job.cfg.cluster.nodes;
    let abort = Arc::new(AtomicBool::new(false));
    let (txs, rxs) = links(n);
    let mut envoys = Vec::with_capacity(n);
    let mut mailboxes = Vec::with_capacity(n);
    for (id, rx) in rxs.into_iter().enumerate() {
        let mb = Mailbox::new(id, n, abort.clone());
        envoys.push(spawn_envoy(rx, mb.clone())?);
        mailboxes.push(mb);
    }

    let results = thread::scope(|s| {
        let handles: Vec<_> = mailboxes
            .into_iter()
            .enumerate()
            .map(|(id, mb)| {
                let peers = txs
                    .iter()
                    .enumerate()
                    .map(|(j, tx)| (j != id).then(|| tx.clone()))
                    .collect();
                let transport = SimTransport::new(id, peers, job.cfg.network);
                let abort = abort.clone();
                s.spawn(move || {
                    let setup = job.setup(id, Box::new(transport), mb, ClockMode::Simulated);
                    let r = Node::new(setup).and_then(Node::run);
                    if r.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    r
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect::<Vec<_>>()
    });
    drop(txs);
    for e in envoys {
        let _ = e.join();
    }
    collect(results)
}

fn bind_loopback(n: usize) -> Result<(Vec<TcpListener>, Vec<SocketAddr>)> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<Vec<_>>>()?;
    let addrs = listeners
        .iter()
        .map(TcpListener::local_addr)
        .collect::<std::io::Result<Vec<_>>>()?;
    Ok((listeners, addrs))
}

fn run_tcp_local(job: &Job) -> Result<Vec<NodeOutput>> {
    let n = job.cfg.cluster.nodes;
    let (listeners, roster) = bind_loopback(n)?;
    let abort = Arc::new(AtomicBool::new(false));
    let timeout = Duration::from_secs_f64(job.cfg.run.timeout_s);
    let results = thread::scope(|s| {
        let handles: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(id, listener)| {
                let roster = roster.clone();
                let abort = abort.clone();
                s.spawn(move || {
                    let r = run_tcp_member(job, id, listener, &roster, abort.clone(), timeout);
                    if r.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    r
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect::<Vec<_>>()
    });
    collect(results)
}

fn run_tcp_member(
    job: &Job,
    id: usize,
    listener: TcpListener,
    roster: &[SocketAddr],
    abort: Arc<AtomicBool>,
    timeout: Duration,
) -> Result<NodeOutput> {
    let (tx, rx) = unbounded();
    let mailbox = Mailbox::new(id, roster.len(), abort);
    let envoy = spawn_envoy(rx, mailbox.clone())?;
    let transport = connect_mesh(id, listener, roster, tx, timeout)?;
    let out = Node::new(job.setup(id, Box::new(transport), mailbox, ClockMode::Wall)).and_then(Node::run);
    // the transport is gone once the node returns, closing every stream and
    // with them the reader threads feeding the envoy
    let _ = envoy.join();
    out
}

/// Runs one node of a multi-process TCP cluster whose addresses come from
/// the roster. Node 0 returns the report; the others return `None`.
pub fn run_tcp_node(cfg: &RunConfig, node_id: usize) -> Result<Option<RunReport>> {
    let job = Job::new(cfg)?;
    let roster = cfg.roster_addrs()?;
    if node_id >= roster.len() {
        return Err(Error::Config(format!(
            "node id {node_id} is outside the {}-node roster",
            roster.len()
        )));
    }
    let listener = TcpListener::bind(roster[node_id])?;
    let abort = Arc::new(AtomicBool::new(false));
    let timeout = Duration::from_secs_f64(cfg.run.timeout_s);
    let out = run_tcp_member(&job, node_id, listener, &roster, abort, timeout)?;
    if node_id != 0 {
        return Ok(None);
    }
    let report = RunReport::from_passes(&job.cfg, cfg.resolved().mode, out.passes, vec![out.stats]);
    Ok(Some(report))
}
