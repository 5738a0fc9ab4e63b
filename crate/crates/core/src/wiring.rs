//! Memory-residency ("driver processing") simulator.
//!
//! Weight arrays must be wired down before the GPU may use them. Wiring an
//! array costs `base_latency + bytes / wire_bandwidth`; an array that has not
//! been touched for longer than the inactivity threshold is unwired again and
//! pays the full cost on its next use. Residency is tracked per loaded array,
//! so the packing of the weights (one array per matrix, or one per expert)
//! decides how often arrays go idle.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertMatrix, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Packing {
    /// One array per (expert, layer, matrix).
    Unstacked,
    /// One contiguous array per expert holding every layer.
    Prestacked,
}

impl fmt::Display for Packing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Packing::Unstacked => "unstacking",
            Packing::Prestacked => "prestacking",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ArrayId {
    Expert(u32),
    Matrix { expert: u32, layer: u32, matrix: u8 },
}

impl fmt::Display for ArrayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArrayId::Expert(e) => write!(f, "expert{e}"),
            ArrayId::Matrix { expert, layer, matrix } => {
                write!(f, "expert{expert}/layer{layer}/m{matrix}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArraySpec {
    pub id: ArrayId,
    pub bytes: u64,
}

/// Arrays a load of `expert` registers under `packing`, sized at the model's
/// deployed precision.
pub fn expert_arrays(config: &ModelConfig, packing: Packing, expert: usize) -> Vec<ArraySpec> {
    let e = expert as u32;
    match packing {
        Packing::Prestacked => vec![ArraySpec {
            id: ArrayId::Expert(e),
            bytes: config.params_per_expert_bytes(),
        }],
        Packing::Unstacked => (0..config.n_layers)
            .flat_map(|l| {
                ExpertMatrix::ALL.into_iter().map(move |which| {
                    let (r, c) = which.shape(config);
                    ArraySpec {
                        id: ArrayId::Matrix {
                            expert: e,
                            layer: l as u32,
                            matrix: which as u8,
                        },
                        bytes: (r * c * config.precision_bytes) as u64,
                    }
                })
            })
            .collect(),
    }
}

/// Arrays touched when `expert` runs at `layer`.
pub fn arrays_for_use(packing: Packing, expert: usize, layer: usize) -> Vec<ArrayId> {
    match packing {
        Packing::Prestacked => vec![ArrayId::Expert(expert as u32)],
        Packing::Unstacked => ExpertMatrix::ALL
            .iter()
            .map(|&w| ArrayId::Matrix {
                expert: expert as u32,
                layer: layer as u32,
                matrix: w as u8,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    Simulated,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WiringParams {
    /// bytes/s
    pub wire_bandwidth: f64,
    /// s
    pub wire_base_latency: f64,
    /// s; may be infinite to disable unwiring.
    pub inactivity_threshold: f64,
    pub clock_mode: ClockMode,
}

impl Default for WiringParams {
    fn default() -> Self {
        Self {
            wire_bandwidth: 40e9,
            wire_base_latency: 1e-4,
            inactivity_threshold: 0.400,
            clock_mode: ClockMode::Simulated,
        }
    }
}

impl WiringParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("wire_bandwidth", self.wire_bandwidth),
            ("wire_base_latency", self.wire_base_latency),
            ("inactivity_threshold", self.inactivity_threshold),
        ];
        for (name, v) in fields {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Config(format!("wiring.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn wire_cost(&self, bytes: u64) -> f64 {
        self.wire_base_latency + bytes as f64 / self.wire_bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayRecord {
    pub id: ArrayId,
    pub bytes: u64,
    pub wired: bool,
    pub last_touch: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WiringStats {
    pub wire_events: u64,
    pub unwire_events: u64,
    pub wire_time: f64,
}

/// Timeline entry, recorded only when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WiringEvent {
    Wire { id: ArrayId, at: f64, cost: f64 },
    Unwire { id: ArrayId, at: f64 },
    Compute { tag: u32, at: f64, dt: f64 },
    Idle { at: f64, dt: f64 },
}

#[derive(Debug, Clone)]
pub struct WiringState {
    params: WiringParams,
    records: BTreeMap<ArrayId, ArrayRecord>,
    now: f64,
    stats: WiringStats,
    trace: Option<Vec<WiringEvent>>,
    origin: Instant,
}

impl WiringState {
    pub fn new(params: WiringParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            records: BTreeMap::new(),
            now: 0.0,
            stats: WiringStats::default(),
            trace: None,
            origin: Instant::now(),
        })
    }

    pub fn params(&self) -> &WiringParams {
        &self.params
    }

    /// Registers an unwired array. Re-registering an id replaces its size.
    pub fn register(&mut self, spec: ArraySpec) {
        self.records.insert(
            spec.id,
            ArrayRecord {
                id: spec.id,
                bytes: spec.bytes,
                wired: false,
                last_touch: self.now,
            },
        );
    }

    pub fn register_all(&mut self, specs: impl IntoIterator<Item = ArraySpec>) {
        for spec in specs {
            self.register(spec);
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn stats(&self) -> WiringStats {
        self.stats
    }

    pub fn array_ids(&self) -> Vec<ArrayId> {
        self.records.keys().copied().collect()
    }

    pub fn record(&self, id: ArrayId) -> Option<&ArrayRecord> {
        self.records.get(&id)
    }

    pub fn is_wired(&self, id: ArrayId) -> bool {
        self.records.get(&id).is_some_and(|r| r.wired)
    }

    pub fn wired_count(&self) -> usize {
        self.records.values().filter(|r| r.wired).count()
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<WiringEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn log(&mut self, event: WiringEvent) {
        if let Some(t) = self.trace.as_mut() {
            t.push(event);
        }
    }

    fn pass_time(&mut self, dt: f64) {
        match self.params.clock_mode {
            ClockMode::Simulated => self.now += dt,
            ClockMode::Wall => {
                if dt > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(dt));
                }
                self.now = self.now.max(self.origin.elapsed().as_secs_f64());
            }
        }
    }

    fn expired(&self, record: &ArrayRecord) -> bool {
        record.wired && self.now - record.last_touch > self.params.inactivity_threshold
    }

    /// Makes `id` resident and returns the wiring time charged (zero when it
    /// was already wired). The clock advances by the returned cost and the
    /// array's last use is stamped at the end of the wiring.
    pub fn touch(&mut self, id: ArrayId) -> Result<f64> {
        let record = *self
            .records
            .get(&id)
            .ok_or_else(|| Error::UnknownArray(id.to_string()))?;
        if self.expired(&record) {
            self.unwire(id);
        }
        let wired = self.records[&id].wired;
        let cost = if wired {
            0.0
        } else {
            let cost = self.params.wire_cost(record.bytes);
            let at = self.now;
            self.pass_time(cost);
            self.stats.wire_events += 1;
            self.stats.wire_time += cost;
            self.log(WiringEvent::Wire { id, at, cost });
            cost
        };
        let now = self.now;
        let r = self.records.get_mut(&id).expect("checked above");
        r.wired = true;
        r.last_touch = now;
        Ok(cost)
    }

    pub fn touch_all(&mut self) -> Result<f64> {
        let mut total = 0.0;
        for id in self.array_ids() {
            total += self.touch(id)?;
        }
        Ok(total)
    }

    fn unwire(&mut self, id: ArrayId) {
        let at = self.now;
        if let Some(r) = self.records.get_mut(&id) {
            if r.wired {
                r.wired = false;
                self.stats.unwire_events += 1;
                self.log(WiringEvent::Unwire { id, at });
            }
        }
    }

    /// Unwires every array idle for longer than the threshold.
    pub fn sweep_unwire(&mut self) {
        let stale: Vec<ArrayId> = self
            .records
            .values()
            .filter(|r| self.expired(r))
            .map(|r| r.id)
            .collect();
        for id in stale {
            self.unwire(id);
        }
    }

    /// Lets `dt` seconds pass with no array in use, then sweeps.
    pub fn advance(&mut self, dt: f64) -> Result<()> {
        if dt.is_nan() || dt < 0.0 {
            return Err(Error::invalid(format!("cannot advance the clock by {dt}")));
        }
        if dt == 0.0 {
            return Ok(());
        }
        let at = self.now;
        self.pass_time(dt);
        self.log(WiringEvent::Idle { at, dt });
        self.sweep_unwire();
        Ok(())
    }

    /// Charges `dt` seconds of compute; arrays not in use may expire meanwhile.
    pub fn compute(&mut self, dt: f64, tag: u32) -> Result<()> {
        if dt.is_nan() || dt < 0.0 {
            return Err(Error::invalid(format!("negative compute time {dt}")));
        }
        let at = self.now;
        self.pass_time(dt);
        self.log(WiringEvent::Compute { tag, at, dt });
        self.sweep_unwire();
        Ok(())
    }

    /// Wall-clock mode: brings `now` up to real elapsed time after blocking
    /// elsewhere, then sweeps. No effect on a simulated clock.
    pub fn catch_up(&mut self) {
        if self.params.clock_mode == ClockMode::Wall {
            let at = self.now;
            let t = self.origin.elapsed().as_secs_f64();
            if t > at {
                self.now = t;
                self.log(WiringEvent::Idle { at, dt: t - at });
            }
            self.sweep_unwire();
        }
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.params.clock_mode
    }

    /// Moves the clock forward to `t` if it lies in the future.
    pub fn advance_to(&mut self, t: f64) -> Result<f64> {
        let dt = (t - self.now).max(0.0);
        self.advance(dt)?;
        Ok(dt)
    }
}

/// Parameters of the matrix-chain packing benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchParams {
    pub n_layers: usize,
    /// Matrices per layer.
    pub n_mpl: usize,
    /// Side of each square matrix.
    pub n: usize,
    pub n_samples: usize,
    pub precision_bytes: usize,
    /// FLOP/s charged for each vector-matrix product.
    pub effective_flops: f64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            n_layers: 40,
            n_mpl: 3,
            n: 8192,
            n_samples: 5,
            precision_bytes: 2,
            effective_flops: 1e12,
        }
    }
}

impl BenchParams {
    pub fn matmul_time(&self) -> f64 {
        2.0 * (self.n * self.n) as f64 / self.effective_flops
    }

    fn matrix_bytes(&self) -> u64 {
        (self.n * self.n * self.precision_bytes) as u64
    }
}

/// `0, 1, 2, 4, ..., 2048` milliseconds, in seconds.
pub fn default_t_waits() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((0..=11).map(|p| f64::from(1u32 << p) * 1e-3))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchPoint {
    pub packing: Packing,
    /// s
    pub t_wait: f64,
    /// Mean time per sample with the injected waits subtracted, s.
    pub t_sample: f64,
}

/// A vector pushed through `n_layers x n_mpl` matrices on the residency
/// simulator, with a sleep after every layer.
#[derive(Debug, Clone)]
pub struct PackingBench {
    packing: Packing,
    params: BenchParams,
    state: WiringState,
}

impl PackingBench {
    pub fn new(packing: Packing, params: BenchParams, wiring: WiringParams) -> Result<Self> {
        if params.n_layers == 0 || params.n_mpl == 0 || params.n == 0 || params.n_samples == 0 {
            return Err(Error::invalid("benchmark dimensions must be positive"));
        }
        if params.n_mpl > usize::from(u8::MAX) {
            return Err(Error::invalid("at most 255 matrices per layer"));
        }
        let mut state = WiringState::new(wiring)?;
        match packing {
            Packing::Prestacked => state.register(ArraySpec {
                id: ArrayId::Expert(0),
                bytes: params.matrix_bytes() * (params.n_layers * params.n_mpl) as u64,
            }),
            Packing::Unstacked => {
                for i in 0..params.n_layers {
                    for j in 0..params.n_mpl {
                        state.register(ArraySpec {
                            id: Self::matrix_id(i, j),
                            bytes: params.matrix_bytes(),
                        });
                    }
                }
            }
        }
        Ok(Self {
            packing,
            params,
            state,
        })
    }

    fn matrix_id(layer: usize, j: usize) -> ArrayId {
        ArrayId::Matrix {
            expert: 0,
            layer: layer as u32,
            matrix: j as u8,
        }
    }

    pub fn state(&self) -> &WiringState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut WiringState {
        &mut self.state
    }

    fn pass(&mut self, t_wait: Option<f64>) -> Result<()> {
        let matmul = self.params.matmul_time();
        for i in 0..self.params.n_layers {
            for j in 0..self.params.n_mpl {
                let id = match self.packing {
                    Packing::Unstacked => Self::matrix_id(i, j),
                    Packing::Prestacked => ArrayId::Expert(0),
                };
                self.state.touch(id)?;
                self.state.compute(matmul, i as u32)?;
            }
            if let Some(wait) = t_wait {
                self.state.advance(wait)?;
            }
        }
        Ok(())
    }

    /// Warmup pass, then `n_samples` timed passes with `t_wait` after each
    /// layer. Returns the mean sample time minus the injected waits.
    pub fn measure(&mut self, t_wait: f64) -> Result<f64> {
        self.pass(None)?;
        let start = self.state.now();
        for _ in 0..self.params.n_samples {
            self.pass(Some(t_wait))?;
        }
        let end = self.state.now();
        Ok((end - start) / self.params.n_samples as f64 - t_wait * self.params.n_layers as f64)
    }
}

pub fn bench_packing(
    packing: Packing,
    t_waits: &[f64],
    params: BenchParams,
    wiring: WiringParams,
) -> Result<Vec<BenchPoint>> {
    let mut bench = PackingBench::new(packing, params, wiring)?;
    t_waits
        .iter()
        .map(|&t_wait| {
            Ok(BenchPoint {
                packing,
                t_wait,
                t_sample: bench.measure(t_wait)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with(arrays: &[(ArrayId, u64)]) -> WiringState {
        let mut s = WiringState::new(WiringParams::default()).unwrap();
        for &(id, bytes) in arrays {
            s.register(ArraySpec { id, bytes });
        }
        s
    }

    const A: ArrayId = ArrayId::Expert(0);
    const B: ArrayId = ArrayId::Expert(1);

    #[test]
    fn second_touch_is_free() {
        let mut s = state_with(&[(A, 1000)]);
        assert!(s.touch(A).unwrap() > 0.0);
        assert_eq!(s.touch(A).unwrap(), 0.0);
    }

    #[test]
    fn wire_cost_formula() {
        let mut s = state_with(&[(A, 4_000_000_000)]);
        let cost = s.touch(A).unwrap();
        assert!((cost - 0.1001).abs() < 1e-12);
        assert!((s.now() - 0.1001).abs() < 1e-12);
    }

    #[test]
    fn idle_beyond_threshold_rewires() {
        let mut s = state_with(&[(A, 10)]);
        s.touch(A).unwrap();
        s.advance(0.0).unwrap();
        assert!(s.is_wired(A));
        s.advance(0.400 + 1e-6).unwrap();
        assert!(!s.is_wired(A));
        assert!(s.touch(A).unwrap() > 0.0);
        assert_eq!(s.stats().unwire_events, 1);
        assert_eq!(s.stats().wire_events, 2);
    }

    #[test]
    fn only_the_older_array_expires() {
        let mut s = state_with(&[(A, 0), (B, 0)]);
        s.touch(A).unwrap();
        let t0 = s.now();
        s.advance(0.2 - (s.now() - t0)).unwrap();
        s.touch(B).unwrap();
        let last_a = s.record(A).unwrap().last_touch;
        s.advance_to(last_a + 0.400 + 1e-6).unwrap();
        assert!(!s.is_wired(A));
        assert!(s.is_wired(B));
    }

    #[test]
    fn touching_unknown_array_fails() {
        let mut s = state_with(&[]);
        assert!(matches!(s.touch(A), Err(Error::UnknownArray(_))));
    }

    #[test]
    fn negative_advance_rejected() {
        let mut s = state_with(&[]);
        assert!(s.advance(-1.0).is_err());
    }

    #[test]
    fn wire_time_accounting_is_exact() {
        let mut s = state_with(&[(A, 123_456), (B, 7)]);
        let p = *s.params();
        let mut expected = 0.0;
        for _ in 0..3 {
            expected += s.touch(A).unwrap();
            expected += s.touch(B).unwrap();
            s.advance(1.0).unwrap();
        }
        assert_eq!(s.stats().wire_events, 6);
        let formula = 3.0 * p.wire_cost(123_456) + 3.0 * p.wire_cost(7);
        assert!((s.stats().wire_time - formula).abs() < 1e-15);
        assert_eq!(s.stats().wire_time, expected);
    }

    #[test]
    fn infinite_threshold_never_unwires() {
        let wiring = WiringParams {
            inactivity_threshold: f64::INFINITY,
            ..WiringParams::default()
        };
        let params = BenchParams {
            n: 256,
            ..BenchParams::default()
        };
        let waits = default_t_waits();
        let un = bench_packing(Packing::Unstacked, &waits, params, wiring).unwrap();
        let pre = bench_packing(Packing::Prestacked, &waits, params, wiring).unwrap();
        let base = 120.0 * params.matmul_time();
        for (u, p) in un.iter().zip(&pre) {
            assert!((u.t_sample - p.t_sample).abs() < 1e-9);
            assert!((u.t_sample - base).abs() < 1e-9);
        }
    }

    #[test]
    fn wall_clock_mode_sleeps() {
        let params = WiringParams {
            clock_mode: ClockMode::Wall,
            ..WiringParams::default()
        };
        let mut s = WiringState::new(params).unwrap();
        s.advance(0.01).unwrap();
        assert!(s.now() >= 0.01);
    }
}
