//! One cluster node: its share of the experts, a residency simulator, the
//! scheduler state and the per-layer dataflow for both execution modes.

use std::sync::Arc;
use std::time::Duration;

use crate::config::{Mode, Resolved, RunConfig};
use crate::error::{Error, Result};
use crate::model::{attention_block, expert_forward, route, KvCache, ModelConfig, ModelWeights, RouterDecision};
use crate::numerics::Vector;
use crate::placement::{schedule, standby_keepalive, LruState, ScheduleDecision, ShardPlan, Strategy};
use crate::runtime::collective::all_reduce;
use crate::runtime::cost::DeviceParams;
use crate::runtime::envoy::{Delivered, Mailbox};
use crate::runtime::frame::{
    decode_expert_input, decode_partial, encode_expert_input, encode_partial, Frame, MsgType,
};
use crate::runtime::transport::Transport;
use crate::wiring::{arrays_for_use, expert_arrays, ArrayId, ClockMode, WiringParams, WiringState};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeStats {
    pub node: usize,
    pub local_experts: usize,
    /// Arrays wired before the request started (startup warmup).
    pub warmup_wire_events: u64,
    pub wire_events: u64,
    pub unwire_events: u64,
    pub wire_time_s: f64,
    pub experts_executed: u64,
    pub comm_rounds: u64,
    pub frames_sent: u64,
    pub bytes_sent: u64,
}

/// Node 0's account of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PassRecord {
    pub elapsed: f64,
    pub moe: f64,
    pub misc: f64,
    pub rounds: u64,
    /// Cluster-wide largest per-node execution count, per layer.
    pub max_executed: Vec<usize>,
    pub checksums: Vec<u64>,
    pub token: Option<u32>,
}

#[derive(Debug, Default)]
pub(crate) struct NodeOutput {
    pub stats: NodeStats,
    pub passes: Vec<PassRecord>,
}

pub(crate) struct NodeSetup<'a> {
    pub id: usize,
    pub cfg: &'a RunConfig,
    pub resolved: Resolved,
    pub weights: &'a ModelWeights,
    pub plan: &'a ShardPlan,
    pub prompt: &'a [u32],
    pub transport: Box<dyn Transport + 'a>,
    pub mailbox: Arc<Mailbox>,
    pub clock: ClockMode,
}

#[derive(Debug, Default, Clone, Copy)]
struct Charges {
    moe: f64,
    misc: f64,
    rounds: u64,
}

pub(crate) struct Node<'a> {
    id: usize,
    n: usize,
    config: &'a ModelConfig,
    /// Dimensions used for time and residency charges.
    cost: ModelConfig,
    strategy: Strategy,
    resolved: Resolved,
    device: DeviceParams,
    weights: &'a ModelWeights,
    plan: &'a ShardPlan,
    prompt: &'a [u32],
    gen_tokens: usize,
    idle_before: f64,
    timeout: Duration,
    transport: Box<dyn Transport + 'a>,
    mailbox: Arc<Mailbox>,
    wiring: WiringState,
    lru: LruState,
    cache: KvCache,
    local_arrays: Vec<ArrayId>,
    charges: Charges,
    layer_max: Vec<usize>,
    stats: NodeStats,
}

impl<'a> Node<'a> {
    pub fn new(setup: NodeSetup<'a>) -> Result<Self> {
        let cfg = setup.cfg;
        let config = &setup.weights.config;
        let cost = cfg.cost_config();
        let wiring_params = WiringParams {
            clock_mode: setup.clock,
            ..cfg.wiring
        };
        let mut wiring = WiringState::new(wiring_params)?;
        let local = setup.plan.local_experts(setup.id);
        for &e in &local {
            wiring.register_all(expert_arrays(&cost, setup.resolved.packing, e));
        }
        let local_arrays = wiring.array_ids();
        Ok(Self {
            id: setup.id,
            n: setup.plan.n_nodes(),
            config,
            cost,
            strategy: cfg.cluster.strategy,
            resolved: setup.resolved,
            device: cfg.device,
            weights: setup.weights,
            plan: setup.plan,
            prompt: setup.prompt,
            gen_tokens: cfg.run.gen_tokens,
            idle_before: cfg.run.idle_before_s,
            timeout: Duration::from_secs_f64(cfg.run.timeout_s),
            transport: setup.transport,
            mailbox: setup.mailbox,
            wiring,
            lru: LruState::new(setup.plan.n_nodes(), config.n_experts),
            cache: KvCache::new(config.n_layers),
            local_arrays,
            charges: Charges::default(),
            layer_max: Vec::new(),
            stats: NodeStats {
                node: setup.id,
                local_experts: local.len(),
                ..NodeStats::default()
            },
        })
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Cluster {
            node: self.id as u32,
            reason: reason.into(),
        }
    }

    fn passes(&self) -> usize {
        if self.gen_tokens == 0 {
            0
        } else {
            self.prompt.len() + self.gen_tokens - 1
        }
    }

    fn peers(&self) -> impl Iterator<Item = usize> {
        let (id, n) = (self.id, self.n);
        (1..n).map(move |off| (id + off) % n)
    }

    fn send(&mut self, to: usize, frame: Frame, timed: bool) -> Result<()> {
        let now = self.wiring.now();
        self.transport.send(to, &frame, now, timed)
    }

    fn recv(&mut self, from: usize, pred: impl Fn(&Frame) -> bool) -> Result<Frame> {
        let d = self.mailbox.recv_where(from, pred, self.timeout)?;
        self.arrive(&d)?;
        Ok(d.frame)
    }

    fn arrive(&mut self, d: &Delivered) -> Result<()> {
        match (self.wiring.clock_mode(), d.deliver_at) {
            (ClockMode::Simulated, Some(t)) => {
                self.wiring.advance_to(t)?;
            }
            (ClockMode::Wall, _) => self.wiring.catch_up(),
            (ClockMode::Simulated, None) => {}
        }
        Ok(())
    }

    fn misc(&mut self, dt: f64, layer: usize) -> Result<()> {
        self.wiring.compute(dt, layer as u32)?;
        self.charges.misc += dt;
        Ok(())
    }

    pub fn run(mut self) -> Result<NodeOutput> {
        if self.resolved.warmup {
            self.wiring.touch_all()?;
        }
        self.stats.warmup_wire_events = self.wiring.stats().wire_events;
        self.barrier()?;
        if self.idle_before > 0.0 {
            if self.resolved.keepalive {
                let ids = self.local_arrays.clone();
                standby_keepalive(&mut self.wiring, &ids, self.resolved.keepalive_period, self.idle_before)?;
            } else {
                self.wiring.advance(self.idle_before)?;
            }
        }

        let passes = match (self.resolved.mode, self.id) {
            (Mode::Centralized, 0) | (Mode::Decentralized, _) => self.generate()?,
            (Mode::Centralized, _) => {
                self.serve_centralized()?;
                Vec::new()
            }
        };
        self.finish()?;

        let w = self.wiring.stats();
        self.stats.wire_events = w.wire_events;
        self.stats.unwire_events = w.unwire_events;
        self.stats.wire_time_s = w.wire_time;
        self.stats.frames_sent = self.transport.frames_sent();
        self.stats.bytes_sent = self.transport.bytes_sent();
        Ok(NodeOutput {
            stats: self.stats,
            passes: if self.id == 0 { passes } else { Vec::new() },
        })
    }

    /// Node 0 collects every node's ready time and answers with the latest;
    /// all clocks start the request from there.
    fn barrier(&mut self) -> Result<()> {
        if self.n == 1 {
            return Ok(());
        }
        let hello = |t: f64, id: usize| Frame::new(MsgType::Hello, 0, id as u32, 0, t.to_le_bytes().to_vec());
        let parse = |f: &Frame| -> Result<f64> {
            let b: [u8; 8] = f
                .payload
                .as_slice()
                .try_into()
                .map_err(|_| Error::Protocol("barrier HELLO must carry an f64".into()))?;
            Ok(f64::from_le_bytes(b))
        };
        let is_hello = |f: &Frame| f.msg_type == MsgType::Hello;
        let start = if self.id == 0 {
            let mut t0 = self.wiring.now();
            for peer in 1..self.n {
                let f = self.recv(peer, is_hello)?;
                t0 = t0.max(parse(&f)?);
            }
            for peer in 1..self.n {
                self.send(peer, hello(t0, 0), false)?;
            }
            t0
        } else {
            let now = self.wiring.now();
            self.send(0, hello(now, self.id), false)?;
            let f = self.recv(0, is_hello)?;
            parse(&f)?
        };
        if self.wiring.clock_mode() == ClockMode::Simulated {
            self.wiring.advance_to(start)?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if self.n == 1 {
            return Ok(());
        }
        if self.id == 0 {
            for peer in 1..self.n {
                self.send(peer, Frame::new(MsgType::Shutdown, 0, 0, 0, Vec::new()), false)?;
            }
        } else if self.resolved.mode == Mode::Decentralized {
            self.recv(0, |f| f.msg_type == MsgType::Shutdown)?;
        }
        Ok(())
    }

    /// The forward passes: prompt tokens first, then greedy generation.
    fn generate(&mut self) -> Result<Vec<PassRecord>> {
        let n_passes = self.passes();
        let mut records = Vec::with_capacity(n_passes);
        let mut current = self.prompt.first().copied().unwrap_or(0);
        for pass in 0..n_passes {
            self.charges = Charges::default();
            self.layer_max.clear();
            let start = self.wiring.now();

            let mut x = self.weights.embed_token(current)?;
            let mut checksums = Vec::with_capacity(self.config.n_layers);
            for layer in 0..self.config.n_layers {
                x = match self.resolved.mode {
                    Mode::Decentralized => self.decentralized_layer(&x, pass, layer)?,
                    Mode::Centralized => self.centralized_layer(&x, pass, layer)?,
                };
                checksums.push(x.checksum());
            }
            let logits = self.weights.logits(&x)?;
            let dt = self.device.lm_head(&self.cost);
            self.misc(dt, self.config.n_layers)?;
            let next = logits.argmax() as u32;

            let generating = pass + 1 >= self.prompt.len();
            current = if generating { next } else { self.prompt[pass + 1] };
            let elapsed = self.wiring.now() - start;
            if self.resolved.mode == Mode::Decentralized {
                self.token_sync(pass, next, &checksums)?;
            }
            records.push(PassRecord {
                elapsed,
                moe: self.charges.moe,
                misc: self.charges.misc,
                rounds: self.charges.rounds,
                max_executed: self.layer_max.clone(),
                checksums,
                token: generating.then_some(next),
            });
        }
        Ok(records)
    }

    /// Every node reports its layer checksums and token to node 0, outside
    /// the timing model; any disagreement stops the run.
    fn token_sync(&mut self, pass: usize, token: u32, checksums: &[u64]) -> Result<()> {
        if self.n == 1 {
            return Ok(());
        }
        if self.id != 0 {
            let mut payload = token.to_le_bytes().to_vec();
            for c in checksums {
                payload.extend_from_slice(&c.to_le_bytes());
            }
            let frame = Frame::new(MsgType::TokenSync, 0, self.id as u32, pass as u64, payload);
            return self.send(0, frame, false);
        }
        for peer in 1..self.n {
            let f = self.recv(peer, |f| f.msg_type == MsgType::TokenSync && f.seq == pass as u64)?;
            compare_sync(&f.payload, token, checksums).map_err(|layer| Error::Determinism {
                node: peer as u32,
                token: pass as u64,
                layer,
            })?;
        }
        Ok(())
    }

    fn run_experts(
        &mut self,
        sched: &ScheduleDecision,
        h: &Vector,
        decision: &RouterDecision,
        layer: usize,
    ) -> Result<Vec<(usize, Vector)>> {
        let mut out = Vec::new();
        for exec in &sched.per_node[self.id] {
            if !self.plan.holds(self.id, exec.expert) {
                return Err(self.err(format!("scheduled expert {} is not stored here", exec.expert)));
            }
            for id in arrays_for_use(self.resolved.packing, exec.expert, layer) {
                self.charges.moe += self.wiring.touch(id)?;
            }
            let dt = self.device.expert_layer(&self.cost);
            self.wiring.compute(dt, layer as u32)?;
            self.charges.moe += dt;
            self.stats.experts_executed += 1;

            let y = expert_forward(h, &self.weights.experts[exec.expert], self.config, layer)?;
            if exec.real {
                let gate = decision
                    .gate_of(exec.expert)
                    .ok_or_else(|| self.err(format!("expert {} has no gate", exec.expert)))?;
                out.push((exec.expert, y.scale(gate)));
            }
        }
        Ok(out)
    }

    fn attention_and_route(&mut self, x: &Vector, layer: usize) -> Result<(Vector, RouterDecision, ScheduleDecision)> {
        let weights = self.weights;
        let lw = &weights.layers[layer];
        let h = attention_block(x, lw, &mut self.cache, layer)?;
        let dt = self.device.attention(&self.cost);
        self.misc(dt, layer)?;
        let decision = route(&h, lw, layer, self.config.top_k)?;
        let dt = self.device.router(&self.cost);
        self.misc(dt, layer)?;
        let sched = schedule(self.strategy, &decision, self.plan, &mut self.lru)?;
        self.layer_max.push(sched.max_executed());
        Ok((h, decision, sched))
    }

    fn collect_partials(&mut self, pass: usize, layer: usize, sched: &ScheduleDecision, into: &mut Vec<(usize, Vector)>) -> Result<()> {
        for peer in 0..self.n {
            if peer == self.id {
                continue;
            }
            let (l, s) = (layer as u32, pass as u64);
            let f = self.recv(peer, |f| {
                f.msg_type == MsgType::ExpertPartial && f.layer == l && f.seq == s
            })?;
            let experts = sched.real_experts(peer);
            let terms = decode_partial(&f.payload, self.config.d_embed, experts.len())?;
            into.extend(experts.into_iter().zip(terms));
        }
        Ok(())
    }

    fn reduce(&mut self, h: &Vector, contributions: Vec<(usize, Vector)>, layer: usize) -> Result<Vector> {
        let k = contributions.len();
        let sum = all_reduce(contributions)?;
        let dt = self.device.combine(&self.cost, k);
        self.misc(dt, layer)?;
        h.add(&sum)
    }

    fn partial_frame(&self, pass: usize, layer: usize, terms: &[(usize, Vector)]) -> Frame {
        let refs: Vec<&Vector> = terms.iter().map(|(_, v)| v).collect();
        Frame::new(
            MsgType::ExpertPartial,
            layer as u32,
            self.id as u32,
            pass as u64,
            encode_partial(&refs),
        )
    }

    fn decentralized_layer(&mut self, x: &Vector, pass: usize, layer: usize) -> Result<Vector> {
        let (h, decision, sched) = self.attention_and_route(x, layer)?;
        let mut contributions = self.run_experts(&sched, &h, &decision, layer)?;
        if self.n > 1 {
            let frame = self.partial_frame(pass, layer, &contributions);
            for peer in self.peers().collect::<Vec<_>>() {
                self.send(peer, frame.clone(), true)?;
            }
            self.charges.rounds += 1;
            self.stats.comm_rounds += 1;
            self.collect_partials(pass, layer, &sched, &mut contributions)?;
        }
        self.reduce(&h, contributions, layer)
    }

    fn centralized_layer(&mut self, x: &Vector, pass: usize, layer: usize) -> Result<Vector> {
        let (h, decision, sched) = self.attention_and_route(x, layer)?;
        if self.n > 1 {
            let payload = encode_expert_input(&h, &decision.expert_indices, &decision.gates);
            let frame = Frame::new(MsgType::ExpertInput, layer as u32, 0, pass as u64, payload);
            for peer in self.peers().collect::<Vec<_>>() {
                self.send(peer, frame.clone(), true)?;
            }
            self.charges.rounds += 1;
            self.stats.comm_rounds += 1;
        }
        let mut contributions = self.run_experts(&sched, &h, &decision, layer)?;
        if self.n > 1 {
            self.collect_partials(pass, layer, &sched, &mut contributions)?;
            self.charges.rounds += 1;
            self.stats.comm_rounds += 1;
        }
        self.reduce(&h, contributions, layer)
    }

    /// Worker side of the centralized mode: run the scheduled experts for
    /// every input node 0 sends, until it says stop.
    fn serve_centralized(&mut self) -> Result<()> {
        loop {
            let f = self.recv(0, |f| matches!(f.msg_type, MsgType::ExpertInput | MsgType::Shutdown))?;
            if f.msg_type == MsgType::Shutdown {
                return Ok(());
            }
            let layer = f.layer as usize;
            if layer >= self.config.n_layers {
                return Err(Error::Protocol(format!("input for layer {layer} out of range")));
            }
            let (h, expert_indices, gates) = decode_expert_input(&f.payload, self.config.d_embed)?;
            let decision = RouterDecision {
                layer,
                expert_indices,
                gates,
            };
            let sched = schedule(self.strategy, &decision, self.plan, &mut self.lru)?;
            let terms = self.run_experts(&sched, &h, &decision, layer)?;
            let frame = self.partial_frame(f.seq as usize, layer, &terms);
            self.send(0, frame, true)?;
        }
    }
}

/// `Err(layer)` names the first layer whose checksum differs; a token
/// mismatch with equal checksums reports `n_layers`.
fn compare_sync(payload: &[u8], token: u32, checksums: &[u64]) -> std::result::Result<(), u32> {
    let n = checksums.len();
    if payload.len() != 4 + 8 * n {
        return Err(0);
    }
    for (layer, (own, theirs)) in checksums.iter().zip(payload[4..].chunks_exact(8)).enumerate() {
        if own.to_le_bytes() != theirs {
            return Err(layer as u32);
        }
    }
    if payload[..4] != token.to_le_bytes() {
        return Err(n as u32);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(token: u32, sums: &[u64]) -> Vec<u8> {
        let mut p = token.to_le_bytes().to_vec();
        for s in sums {
            p.extend_from_slice(&s.to_le_bytes());
        }
        p
    }

    #[test]
    fn sync_comparison() {
        assert_eq!(compare_sync(&payload(5, &[1, 2, 3]), 5, &[1, 2, 3]), Ok(()));
        assert_eq!(compare_sync(&payload(5, &[1, 9, 3]), 5, &[1, 2, 3]), Err(1));
        assert_eq!(compare_sync(&payload(6, &[1, 2, 3]), 5, &[1, 2, 3]), Err(3));
        assert_eq!(compare_sync(&[0; 3], 5, &[1]), Err(0));
    }
}
