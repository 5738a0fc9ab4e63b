//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! n_layers = 4
//!
//! [cluster]
//! nodes = 2
//! strategy = "router-aided"     # naive | busy-full | router-aided
//! mode = "decentralized"        # default follows the strategy
//! transport = "sim"             # sim | tcp
//! roster = ["10.0.0.1:7100", "10.0.0.2:7100"]
//!
//! [run]
//! prompt_tokens = 8
//! gen_tokens = 128
//!
//! [network]
//! latency = 1e-3
//! bandwidth = 1.25e9
//! ```
//!
//! Every table and field is optional. The roster can also be given as a
//! comma-separated list in `MOE_CLUSTER_ROSTER`.

use std::fmt;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::placement::Strategy;
use crate::runtime::cost::DeviceParams;
use crate::runtime::transport::TransportParams;
use crate::wiring::{Packing, WiringParams};

pub const ROSTER_ENV: &str = "MOE_CLUSTER_ROSTER";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Node 0 runs attention and the router and fans inputs out (2 rounds
    /// per layer).
    Centralized,
    /// Every node replicates attention and the router; one all-reduce per
    /// layer.
    Decentralized,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Centralized => "centralized",
            Mode::Decentralized => "decentralized",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centralized" => Ok(Mode::Centralized),
            "decentralized" => Ok(Mode::Decentralized),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    Sim,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(TransportKind::Sim),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(Error::invalid(format!("unknown transport {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub nodes: usize,
    pub strategy: Strategy,
    pub mode: Option<Mode>,
    pub transport: TransportKind,
    pub replication: usize,
    pub roster: Vec<String>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            nodes: 2,
            strategy: Strategy::RouterAided,
            mode: None,
            transport: TransportKind::Sim,
            replication: 1,
            roster: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub prompt_tokens: usize,
    pub gen_tokens: usize,
    /// Idle time between startup and the request, s.
    pub idle_before_s: f64,
    /// Overrides for the strategy's preset.
    pub packing: Option<Packing>,
    pub warmup: Option<bool>,
    pub keepalive: Option<bool>,
    pub keepalive_period_s: Option<f64>,
    /// Real-time limit on any single wait for a peer, s.
    pub timeout_s: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            prompt_tokens: 8,
            gen_tokens: 128,
            idle_before_s: 0.0,
            packing: None,
            warmup: None,
            keepalive: None,
            keepalive_period_s: None,
            timeout_s: 30.0,
        }
    }
}

/// Dimensions the simulator charges time for, when they should differ from
/// the dimensions actually computed (e.g. full-size costs on a desk-size
/// model). Layer, expert and routing counts always follow the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostDims {
    pub d_embed: Option<usize>,
    pub d_ffn: Option<usize>,
    pub d_qkv_hidden: Option<usize>,
    pub vocab_size: Option<usize>,
    pub precision_bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub run: RunOptions,
    pub network: TransportParams,
    pub wiring: WiringParams,
    pub device: DeviceParams,
    pub cost: CostDims,
}

/// Settings after applying the strategy presets and overrides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub mode: Mode,
    pub packing: Packing,
    pub warmup: bool,
    pub keepalive: bool,
    pub keepalive_period: f64,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(format!("[model] {e}")))?;
        let c = &self.cluster;
        if c.nodes == 0 {
            return Err(Error::Config("cluster.nodes must be at least 1".into()));
        }
        if c.nodes > self.model.n_experts {
            return Err(Error::Config(format!(
                "cluster.nodes = {} exceeds the {} experts; some nodes would hold nothing",
                c.nodes, self.model.n_experts
            )));
        }
        if c.replication == 0 || c.replication > c.nodes {
            return Err(Error::Config(format!(
                "cluster.replication must lie in 1..={}, got {}",
                c.nodes, c.replication
            )));
        }
        if self.run.prompt_tokens == 0 {
            return Err(Error::Config("run.prompt_tokens must be at least 1".into()));
        }
        if self.run.idle_before_s.is_nan() || self.run.idle_before_s < 0.0 {
            return Err(Error::Config("run.idle_before_s must be >= 0".into()));
        }
        if self.run.timeout_s.is_nan() || self.run.timeout_s <= 0.0 {
            return Err(Error::Config("run.timeout_s must be positive".into()));
        }
        self.cost_config()
            .validate()
            .map_err(|e| Error::Config(format!("[cost] {e}")))?;
        self.network.validate()?;
        self.wiring.validate()?;
        self.device.validate()?;
        let r = self.resolved();
        if r.keepalive && !(r.keepalive_period > 0.0 && r.keepalive_period < self.wiring.inactivity_threshold) {
            return Err(Error::Config(format!(
                "run.keepalive_period_s = {} must lie strictly between 0 and the inactivity threshold {}",
                r.keepalive_period, self.wiring.inactivity_threshold
            )));
        }
        Ok(())
    }

    /// The model as the cost model sees it.
    pub fn cost_config(&self) -> ModelConfig {
        let c = &self.cost;
        ModelConfig {
            d_embed: c.d_embed.unwrap_or(self.model.d_embed),
            d_ffn: c.d_ffn.unwrap_or(self.model.d_ffn),
            d_qkv_hidden: c.d_qkv_hidden.unwrap_or(self.model.d_qkv_hidden),
            vocab_size: c.vocab_size.unwrap_or(self.model.vocab_size),
            precision_bytes: c.precision_bytes.unwrap_or(self.model.precision_bytes),
            ..self.model
        }
    }

    pub fn resolved(&self) -> Resolved {
        let strategy = self.cluster.strategy;
        let aided = strategy == Strategy::RouterAided;
        Resolved {
            mode: self.cluster.mode.unwrap_or(if aided {
                Mode::Decentralized
            } else {
                Mode::Centralized
            }),
            packing: self.run.packing.unwrap_or(if strategy == Strategy::Naive {
                Packing::Unstacked
            } else {
                Packing::Prestacked
            }),
            warmup: self.run.warmup.unwrap_or(aided),
            keepalive: self.run.keepalive.unwrap_or(aided),
            keepalive_period: self
                .run
                .keepalive_period_s
                .unwrap_or(self.wiring.inactivity_threshold / 2.0),
        }
    }

    /// Peer addresses, from the environment override if set, else the file.
    pub fn roster_addrs(&self) -> Result<Vec<SocketAddr>> {
        let from_env = std::env::var(ROSTER_ENV).ok().filter(|s| !s.trim().is_empty());
        let entries: Vec<String> = match from_env {
            Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
            None => self.cluster.roster.clone(),
        };
        if entries.len() != self.cluster.nodes {
            return Err(Error::Config(format!(
                "roster lists {} addresses for {} nodes",
                entries.len(),
                self.cluster.nodes
            )));
        }
        entries
            .iter()
            .map(|e| {
                e.to_socket_addrs()
                    .ok()
                    .and_then(|mut a| a.next())
                    .ok_or_else(|| Error::Config(format!("roster entry {e:?} is not host:port")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.resolved().mode, Mode::Decentralized);
    }

    #[test]
    fn presets_follow_strategy() {
        let cfg = RunConfig::from_toml_str("[cluster]\nstrategy = \"naive\"\n").unwrap();
        let r = cfg.resolved();
        assert_eq!(r.mode, Mode::Centralized);
        assert_eq!(r.packing, Packing::Unstacked);
        assert!(!r.warmup && !r.keepalive);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.cluster.nodes = 3;
        cfg.run.keepalive = Some(false);
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn actionable_errors() {
        let err = RunConfig::from_toml_str("[cluster]\nreplication = 3\n").unwrap_err();
        assert!(err.to_string().contains("replication"));
        let err = RunConfig::from_toml_str("[cluster]\nnodes = 2\ncolour = 1\n").unwrap_err();
        assert!(err.to_string().contains("colour"));
        let err = RunConfig::from_toml_str("[run]\nkeepalive_period_s = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("keepalive_period_s"));
    }
}
