//! Expert placement and the per-layer execution schedules.
//!
//! Three schedulers decide which experts each node runs for a layer:
//!
//! * naive: only the router-selected experts run, on their owner node;
//! * busy full: every node runs all of its local experts and the unselected
//!   outputs are dropped from the weighted sum;
//! * router-aided: every node runs exactly `m` experts, where `m` is the
//!   largest number of selected experts any node owns this layer; nodes with
//!   fewer selections pad with their least recently used local experts.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RouterDecision;
use crate::wiring::{ArrayId, WiringState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    n_nodes: usize,
    /// `replicas[e]`: nodes holding expert `e`, in placement order.
    replicas: Vec<Vec<usize>>,
}

impl ShardPlan {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_experts(&self) -> usize {
        self.replicas.len()
    }

    pub fn replicas(&self, expert: usize) -> &[usize] {
        &self.replicas[expert]
    }

    pub fn holds(&self, node: usize, expert: usize) -> bool {
        self.replicas.get(expert).is_some_and(|r| r.contains(&node))
    }

    /// Experts stored on `node`, ascending.
    pub fn local_experts(&self, node: usize) -> Vec<usize> {
        (0..self.n_experts()).filter(|&e| self.holds(node, e)).collect()
    }

    /// Owner node of each selected expert, in ascending expert order. Each
    /// expert goes to the replica that owns the fewest experts so far, ties
    /// to the lowest node id.
    pub fn assign_owners(&self, selected: &[usize]) -> Result<Vec<(usize, usize)>> {
        let mut experts = selected.to_vec();
        experts.sort_unstable();
        experts.dedup();
        if experts.len() != selected.len() {
            return Err(Error::invalid("router selection contains duplicates"));
        }
        let mut load = vec![0usize; self.n_nodes];
        let mut owners = Vec::with_capacity(experts.len());
        for e in experts {
            let reps = self
                .replicas
                .get(e)
                .ok_or_else(|| Error::invalid(format!("expert {e} is not placed")))?;
            let node = *reps
                .iter()
                .min_by_key(|&&n| (load[n], n))
                .expect("every expert has a replica");
            load[node] += 1;
            owners.push((e, node));
        }
        Ok(owners)
    }

    /// Number of selected experts owned by each node.
    pub fn owned_counts(&self, selected: &[usize]) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.n_nodes];
        for (_, node) in self.assign_owners(selected)? {
            counts[node] += 1;
        }
        Ok(counts)
    }
}

/// Block placement: expert `e` lives on nodes
/// `(e * n_nodes / n_experts + i) mod n_nodes` for `i < replication`.
pub fn build_shard_plan(n_experts: usize, n_nodes: usize, replication: usize) -> Result<ShardPlan> {
    if n_experts == 0 || n_nodes == 0 {
        return Err(Error::invalid("need at least one expert and one node"));
    }
    if replication == 0 {
        return Err(Error::invalid("replication factor must be at least 1"));
    }
    if replication > n_nodes {
        return Err(Error::invalid(format!(
            "replication factor {replication} exceeds node count {n_nodes}"
        )));
    }
    let replicas = (0..n_experts)
        .map(|e| {
            let base = e * n_nodes / n_experts;
            (0..replication).map(|i| (base + i) % n_nodes).collect()
        })
        .collect();
    Ok(ShardPlan { n_nodes, replicas })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Naive,
    BusyFull,
    RouterAided,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive, Strategy::BusyFull, Strategy::RouterAided];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::BusyFull => "busy-full",
            Strategy::RouterAided => "router-aided",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Execution {
    pub expert: usize,
    /// Router-selected, as opposed to padding or busy work.
    pub real: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleDecision {
    pub layer: usize,
    /// Executions per node, ascending expert id.
    pub per_node: Vec<Vec<Execution>>,
}

impl ScheduleDecision {
    pub fn executed_count(&self, node: usize) -> usize {
        self.per_node[node].len()
    }

    pub fn max_executed(&self) -> usize {
        self.per_node.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn total_executed(&self) -> usize {
        self.per_node.iter().map(Vec::len).sum()
    }

    /// Real experts run by `node`, ascending.
    pub fn real_experts(&self, node: usize) -> Vec<usize> {
        self.per_node[node]
            .iter()
            .filter(|x| x.real)
            .map(|x| x.expert)
            .collect()
    }

    pub fn owner_of(&self, expert: usize) -> Option<usize> {
        self.per_node
            .iter()
            .position(|execs| execs.iter().any(|x| x.real && x.expert == expert))
    }
}

/// Last-executed logical time of each local expert, per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LruState {
    stamps: Vec<Vec<u64>>,
    ticks: Vec<u64>,
}

impl LruState {
    pub fn new(n_nodes: usize, n_experts: usize) -> Self {
        Self {
            stamps: vec![vec![0; n_experts]; n_nodes],
            ticks: vec![0; n_nodes],
        }
    }

    pub fn stamp(&self, node: usize, expert: usize) -> u64 {
        self.stamps[node][expert]
    }

    fn record(&mut self, node: usize, experts: impl IntoIterator<Item = usize>) {
        self.ticks[node] += 1;
        let tick = self.ticks[node];
        for e in experts {
            self.stamps[node][e] = tick;
        }
    }
}

fn selection_of(decision: &RouterDecision) -> &[usize] {
    &decision.expert_indices
}

fn owned_per_node(plan: &ShardPlan, selected: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut owned = vec![Vec::new(); plan.n_nodes()];
    for (e, node) in plan.assign_owners(selected)? {
        owned[node].push(e);
    }
    Ok(owned)
}

pub fn schedule_naive(decision: &RouterDecision, plan: &ShardPlan) -> Result<ScheduleDecision> {
    let per_node = owned_per_node(plan, selection_of(decision))?
        .into_iter()
        .map(|es| es.into_iter().map(|expert| Execution { expert, real: true }).collect())
        .collect();
    Ok(ScheduleDecision {
        layer: decision.layer,
        per_node,
    })
}

pub fn schedule_busy_full(decision: &RouterDecision, plan: &ShardPlan) -> Result<ScheduleDecision> {
    let owned = owned_per_node(plan, selection_of(decision))?;
    let per_node = (0..plan.n_nodes())
        .map(|node| {
            plan.local_experts(node)
                .into_iter()
                .map(|expert| Execution {
                    expert,
                    real: owned[node].contains(&expert),
                })
                .collect()
        })
        .collect();
    Ok(ScheduleDecision {
        layer: decision.layer,
        per_node,
    })
}

pub fn schedule_router_aided(
    decision: &RouterDecision,
    plan: &ShardPlan,
    lru: &mut LruState,
) -> Result<ScheduleDecision> {
    let owned = owned_per_node(plan, selection_of(decision))?;
    let m = owned.iter().map(Vec::len).max().unwrap_or(0);
    let mut per_node = Vec::with_capacity(plan.n_nodes());
    for (node, mine) in owned.iter().enumerate() {
        let mut padding: Vec<usize> = plan
            .local_experts(node)
            .into_iter()
            .filter(|e| !mine.contains(e))
            .collect();
        padding.sort_by_key(|&e| (lru.stamp(node, e), e));
        padding.truncate(m - mine.len());

        let mut execs: Vec<Execution> = mine
            .iter()
            .map(|&expert| Execution { expert, real: true })
            .chain(padding.into_iter().map(|expert| Execution { expert, real: false }))
            .collect();
        execs.sort_by_key(|x| x.expert);
        lru.record(node, execs.iter().map(|x| x.expert));
        per_node.push(execs);
    }
    Ok(ScheduleDecision {
        layer: decision.layer,
        per_node,
    })
}

pub fn schedule(
    strategy: Strategy,
    decision: &RouterDecision,
    plan: &ShardPlan,
    lru: &mut LruState,
) -> Result<ScheduleDecision> {
    match strategy {
        Strategy::Naive => schedule_naive(decision, plan),
        Strategy::BusyFull => schedule_busy_full(decision, plan),
        Strategy::RouterAided => schedule_router_aided(decision, plan, lru),
    }
}

/// Exact `E[max over nodes of selected experts owned]` as a fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expectation {
    pub total: u64,
    pub selections: u64,
}

impl Expectation {
    pub fn value(&self) -> f64 {
        self.total as f64 / self.selections as f64
    }
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.total, self.selections)
    }
}

pub const MAX_ENUMERATED_EXPERTS: usize = 20;

/// Enumerates every `top_k`-subset of experts, each equally likely under a
/// uniform router.
pub fn expected_executed_experts(
    n_nodes: usize,
    n_experts: usize,
    top_k: usize,
    plan: &ShardPlan,
) -> Result<Expectation> {
    if n_experts > MAX_ENUMERATED_EXPERTS {
        return Err(Error::invalid(format!(
            "enumeration over {n_experts} experts is too large (limit {MAX_ENUMERATED_EXPERTS})"
        )));
    }
    if plan.n_nodes() != n_nodes || plan.n_experts() != n_experts {
        return Err(Error::invalid("shard plan does not match nodes/experts"));
    }
    if top_k == 0 || top_k > n_experts {
        return Err(Error::invalid(format!("top_k {top_k} out of range")));
    }
    let mut total = 0u64;
    let mut selections = 0u64;
    let mut selected = Vec::with_capacity(top_k);
    for mask in 0u32..(1u32 << n_experts) {
        if mask.count_ones() as usize != top_k {
            continue;
        }
        selected.clear();
        selected.extend((0..n_experts).filter(|&e| mask & (1 << e) != 0));
        let counts = plan.owned_counts(&selected)?;
        total += *counts.iter().max().expect("at least one node") as u64;
        selections += 1;
    }
    Ok(Expectation { total, selections })
}

/// Mean per-layer executions per node of the router-aided scheduler under a
/// uniform random router.
pub fn monte_carlo_executed(plan: &ShardPlan, top_k: usize, layers: usize, seed: u64) -> Result<f64> {
    if layers == 0 {
        return Err(Error::invalid("need at least one layer"));
    }
    if top_k == 0 || top_k > plan.n_experts() {
        return Err(Error::invalid(format!("top_k {top_k} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lru = LruState::new(plan.n_nodes(), plan.n_experts());
    let gates = crate::numerics::Vector::zeros(top_k);
    let mut sum = 0u64;
    for layer in 0..layers {
        let mut expert_indices = sample(&mut rng, plan.n_experts(), top_k).into_vec();
        expert_indices.sort_unstable();
        let decision = RouterDecision {
            layer,
            expert_indices,
            gates: gates.clone(),
        };
        sum += schedule_router_aided(&decision, plan, &mut lru)?.max_executed() as u64;
    }
    Ok(sum as f64 / layers as f64)
}

/// Idles for `idle_s` seconds while touching every array in `arrays` at least
/// once per `period`, so none of them crosses the inactivity threshold.
pub fn standby_keepalive(
    state: &mut WiringState,
    arrays: &[ArrayId],
    period: f64,
    idle_s: f64,
) -> Result<()> {
    let theta = state.params().inactivity_threshold;
    if !(period > 0.0 && period < theta) {
        return Err(Error::invalid(format!(
            "keepalive period {period} must lie in (0, {theta})"
        )));
    }
    if idle_s.is_nan() || idle_s < 0.0 {
        return Err(Error::invalid(format!("idle time {idle_s} is negative")));
    }
    let end = state.now() + idle_s;
    while state.now() < end {
        for &id in arrays {
            state.touch(id)?;
        }
        let step = period.min(end - state.now()).max(0.0);
        state.advance(step)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Vector;
    use crate::wiring::{ArraySpec, WiringParams};

    fn decision(selected: &[usize]) -> RouterDecision {
        RouterDecision {
            layer: 0,
            expert_indices: selected.to_vec(),
            gates: Vector::zeros(selected.len()),
        }
    }

    #[test]
    fn block_placement() {
        let plan = build_shard_plan(16, 4, 1).unwrap();
        for node in 0..4 {
            assert_eq!(plan.local_experts(node), (node * 4..node * 4 + 4).collect::<Vec<_>>());
        }
        let single = build_shard_plan(16, 1, 1).unwrap();
        assert_eq!(single.local_experts(0).len(), 16);
    }

    #[test]
    fn replication_beyond_nodes_fails() {
        assert!(build_shard_plan(16, 2, 3).is_err());
        assert!(build_shard_plan(16, 2, 0).is_err());
    }

    #[test]
    fn full_replication_balances_owners() {
        let plan = build_shard_plan(4, 2, 2).unwrap();
        for mask in 1u32..16 {
            let sel: Vec<usize> = (0..4).filter(|&e| mask & (1 << e) != 0).collect();
            let counts = plan.owned_counts(&sel).unwrap();
            assert!(counts[0].abs_diff(counts[1]) <= 1, "{sel:?} -> {counts:?}");
        }
    }

    #[test]
    fn busy_full_runs_everything_local() {
        let plan = build_shard_plan(16, 2, 1).unwrap();
        let s = schedule_busy_full(&decision(&[0, 1, 9, 15]), &plan).unwrap();
        assert_eq!(s.executed_count(0), 8);
        assert_eq!(s.executed_count(1), 8);
        assert_eq!(s.total_executed(), 16);
        assert_eq!(s.real_experts(0), vec![0, 1]);
        assert_eq!(s.real_experts(1), vec![9, 15]);
    }

    #[test]
    fn busy_full_with_all_selected_is_all_real() {
        let plan = build_shard_plan(4, 2, 1).unwrap();
        let s = schedule_busy_full(&decision(&[0, 1, 2, 3]), &plan).unwrap();
        assert!(s.per_node.iter().flatten().all(|x| x.real));
    }

    #[test]
    fn router_aided_pads_to_max() {
        let plan = build_shard_plan(16, 2, 1).unwrap();
        let mut lru = LruState::new(2, 16);
        let s = schedule_router_aided(&decision(&[0, 3, 5, 12]), &plan, &mut lru).unwrap();
        assert_eq!(s.executed_count(0), 3);
        assert_eq!(s.executed_count(1), 3);
        // node 1 pads with the two lowest-id (all equally stale) experts
        assert_eq!(
            s.per_node[1],
            vec![
                Execution { expert: 8, real: false },
                Execution { expert: 9, real: false },
                Execution { expert: 12, real: true },
            ]
        );

        let s = schedule_router_aided(&decision(&[0, 3, 5, 12]), &plan, &mut lru).unwrap();
        assert_eq!(s.real_experts(1), vec![12]);
        let pads: Vec<usize> = s.per_node[1].iter().filter(|x| !x.real).map(|x| x.expert).collect();
        assert_eq!(pads, vec![10, 11]);
    }

    #[test]
    fn router_aided_extreme_split() {
        let plan = build_shard_plan(16, 2, 1).unwrap();
        let mut lru = LruState::new(2, 16);
        let s = schedule_router_aided(&decision(&[0, 1, 2, 3]), &plan, &mut lru).unwrap();
        assert_eq!(s.executed_count(1), 4);
        assert!(s.per_node[1].iter().all(|x| !x.real));
    }

    #[test]
    fn router_aided_degenerate_node() {
        // 3 experts on 2 nodes: node 0 holds {0, 1}, node 1 holds {2}
        let plan = build_shard_plan(3, 2, 1).unwrap();
        assert_eq!(plan.local_experts(1), vec![2]);
        let mut lru = LruState::new(2, 3);
        let s = schedule_router_aided(&decision(&[0, 1]), &plan, &mut lru).unwrap();
        assert_eq!(s.executed_count(0), 2);
        assert_eq!(s.executed_count(1), 1);
    }

    #[test]
    fn enumeration_values() {
        let two = build_shard_plan(16, 2, 1).unwrap();
        let e = expected_executed_experts(2, 16, 4, &two).unwrap();
        assert_eq!((e.total, e.selections), (4816, 1820));
        let four = build_shard_plan(16, 4, 1).unwrap();
        let e = expected_executed_experts(4, 16, 4, &four).unwrap();
        assert_eq!((e.total, e.selections), (3584, 1820));
        let one = build_shard_plan(16, 1, 1).unwrap();
        assert_eq!(expected_executed_experts(1, 16, 4, &one).unwrap().value(), 4.0);
        let big = build_shard_plan(21, 1, 1).unwrap();
        assert!(expected_executed_experts(1, 21, 4, &big).is_err());
    }

    #[test]
    fn keepalive_prevents_unwiring() {
        let mut s = WiringState::new(WiringParams::default()).unwrap();
        let ids: Vec<ArrayId> = (0..4).map(ArrayId::Expert).collect();
        for &id in &ids {
            s.register(ArraySpec { id, bytes: 1 << 20 });
            s.touch(id).unwrap();
        }
        let before = s.stats().unwire_events;
        standby_keepalive(&mut s, &ids, 0.2, 4.0).unwrap();
        assert_eq!(s.stats().unwire_events, before);
        assert!(ids.iter().all(|&id| s.is_wired(id)));
    }

    #[test]
    fn keepalive_period_must_be_below_threshold() {
        let mut s = WiringState::new(WiringParams::default()).unwrap();
        assert!(standby_keepalive(&mut s, &[], 0.4, 1.0).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fast".parse::<Strategy>().is_err());
    }
}
