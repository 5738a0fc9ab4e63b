use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use moe_cluster::config::{Mode, RunConfig, TransportKind};
use moe_cluster::model::io::{pack_weights, write_unstacked};
use moe_cluster::model::ModelWeights;
use moe_cluster::perfmodel::{
    cost_efficiency, nic, nics, sweep_nic, sweep_nodes, CostSpec, PerfParams, PredictRow, TABLE_NODES,
};
use moe_cluster::placement::{build_shard_plan, expected_executed_experts, monte_carlo_executed, Strategy};
use moe_cluster::runtime::{run_cluster, run_tcp_node, RunReport};
use moe_cluster::wiring::{bench_packing, default_t_waits, BenchParams, Packing, WiringParams};

#[derive(Parser)]
#[command(name = "moe-cluster", version, about = "Expert-parallel MoE inference on a small simulated cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate tokens on a cluster and print the per-token time breakdown.
    RunCluster(RunArgs),
    /// Sweep the per-layer wait of the packing benchmark on the residency simulator.
    BenchPacking(BenchArgs),
    /// Closed-form per-token time bound and throughput.
    Predict(PredictArgs),
    /// Throughput per USD for one or more systems.
    Cost(CostArgs),
    /// Pack a directory of per-matrix weight files into one prestacked bundle.
    PackWeights(PackArgs),
    /// Exact expected number of experts the busiest node executes per layer.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Naive,
    BusyFull,
    RouterAided,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Naive => Strategy::Naive,
            StrategyArg::BusyFull => Strategy::BusyFull,
            StrategyArg::RouterAided => Strategy::RouterAided,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Centralized,
    Decentralized,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Sim,
    Tcp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    #[arg(long)]
    replication: Option<usize>,
    #[arg(long)]
    prompt_tokens: Option<usize>,
    #[arg(long)]
    gen_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Idle seconds before the request arrives.
    #[arg(long)]
    idle_before: Option<f64>,
    /// With `--transport tcp`, run every node in this process on loopback.
    #[arg(long)]
    local: bool,
    /// With `--transport tcp` and no `--local`, which roster entry this process is.
    #[arg(long)]
    node_id: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PackingArg {
    Both,
    Prestacked,
    Unstacked,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Wiring parameters are read from the `[wiring]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    packing: PackingArg,
    /// Side of each square matrix.
    #[arg(long, default_value_t = BenchParams::default().n)]
    n: usize,
    #[arg(long, default_value_t = BenchParams::default().n_layers)]
    layers: usize,
    #[arg(long, default_value_t = BenchParams::default().n_mpl)]
    matrices_per_layer: usize,
    #[arg(long, default_value_t = BenchParams::default().n_samples)]
    samples: usize,
    #[arg(long, default_value_t = BenchParams::default().effective_flops)]
    flops: f64,
    /// Inactivity threshold, s.
    #[arg(long)]
    theta: Option<f64>,
    /// Comma-separated waits in ms (default 0,1,2,4,...,2048).
    #[arg(long, value_delimiter = ',')]
    t_wait_ms: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NicArg {
    #[value(name = "10gbe")]
    TenGbe,
    Rocev2,
    Infiniband,
    All,
}

#[derive(clap::Args)]
struct PredictArgs {
    /// Node count; all of 2,3,4,6,8 when omitted.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, value_enum, default_value = "10gbe")]
    nic: NicArg,
    /// Mean experts executed per node per layer (needed for node counts
    /// without a measured value).
    #[arg(long = "E")]
    expected_experts: Option<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(clap::Args)]
struct CostArgs {
    /// TOML file with one or more `[[system]]` tables
    /// (name, n_nodes, price_per_node, throughput).
    #[arg(long)]
    spec: PathBuf,
}

#[derive(clap::Args)]
struct PackArgs {
    /// Directory of per-matrix `.moew` files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// First write the experts of the configured model into `--input`.
    #[arg(long)]
    generate: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct OracleArgs {
    #[arg(long)]
    nodes: usize,
    #[arg(long, default_value_t = 16)]
    experts: usize,
    #[arg(long, default_value_t = 4)]
    topk: usize,
    #[arg(long, default_value_t = 1)]
    replication: usize,
    /// Also simulate the router-aided scheduler for this many layers.
    #[arg(long)]
    monte_carlo: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn emit(text: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report_text(report: &RunReport, format: Format) -> String {
    match format {
        Format::Csv => report.to_csv(),
        Format::Jsonl => report.to_jsonl(),
    }
}

fn run_cluster_cmd(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.nodes {
        cfg.cluster.nodes = n;
    }
    if let Some(m) = a.mode {
        cfg.cluster.mode = Some(match m {
            ModeArg::Centralized => Mode::Centralized,
            ModeArg::Decentralized => Mode::Decentralized,
        });
    }
    if let Some(s) = a.strategy {
        cfg.cluster.strategy = s.into();
    }
    if let Some(t) = a.transport {
        cfg.cluster.transport = match t {
            TransportArg::Sim => TransportKind::Sim,
            TransportArg::Tcp => TransportKind::Tcp,
        };
    }
    if let Some(r) = a.replication {
        cfg.cluster.replication = r;
    }
    if let Some(p) = a.prompt_tokens {
        cfg.run.prompt_tokens = p;
    }
    if let Some(g) = a.gen_tokens {
        cfg.run.gen_tokens = g;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(i) = a.idle_before {
        cfg.run.idle_before_s = i;
    }
    cfg.validate()?;

    let report = match (cfg.cluster.transport, a.local, a.node_id) {
        (TransportKind::Tcp, false, Some(id)) => match run_tcp_node(&cfg, id)? {
            Some(r) => r,
            None => {
                eprintln!("node {id} done");
                return Ok(());
            }
        },
        (TransportKind::Tcp, false, None) => {
            bail!("--transport tcp needs --local or --node-id (with a roster in the config or MOE_CLUSTER_ROSTER)")
        }
        (TransportKind::Sim, _, Some(_)) => bail!("--node-id only applies to --transport tcp"),
        _ => run_cluster(&cfg)?,
    };
    eprintln!(
        "{} nodes, {}, {}: {} tokens, {:.6} s/token, comm share {:.3}",
        report.n_nodes,
        report.strategy,
        report.mode,
        report.tokens.len(),
        report.mean_token_time(),
        report.comm_share()
    );
    emit(&report_text(&report, a.format), a.output.as_deref())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let mut wiring: WiringParams = load_config(a.config.as_deref())?.wiring;
    if let Some(t) = a.theta {
        wiring.inactivity_threshold = t;
    }
    let params = BenchParams {
        n_layers: a.layers,
        n_mpl: a.matrices_per_layer,
        n: a.n,
        n_samples: a.samples,
        effective_flops: a.flops,
        ..BenchParams::default()
    };
    let waits: Vec<f64> = if a.t_wait_ms.is_empty() {
        default_t_waits()
    } else {
        a.t_wait_ms.iter().map(|ms| ms * 1e-3).collect()
    };
    if let Some(bad) = waits.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        bail!("waits must be finite and non-negative, got {} ms", bad * 1e3);
    }
    let packings: &[Packing] = match a.packing {
        PackingArg::Both => &[Packing::Prestacked, Packing::Unstacked],
        PackingArg::Prestacked => &[Packing::Prestacked],
        PackingArg::Unstacked => &[Packing::Unstacked],
    };
    let mut out = String::from("strategy,T_wait_ms,mean_sample_time_ms\n");
    for &packing in packings {
        for p in bench_packing(packing, &waits, params, wiring)? {
            writeln!(out, "{},{},{:.6}", p.packing, p.t_wait * 1e3, p.t_sample * 1e3)?;
        }
    }
    emit(&out, None)
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let nodes: Vec<usize> = match a.nodes {
        Some(0) => bail!("--nodes must be at least 1"),
        Some(n) => vec![n],
        None => TABLE_NODES.to_vec(),
    };
    let rows: Vec<(usize, Option<f64>)> = nodes.iter().map(|&n| (n, a.expected_experts)).collect();
    let base = PerfParams::default();
    let table: Vec<PredictRow> = match a.nic {
        NicArg::All => sweep_nic(&base, nics(), &rows)?,
        one => {
            let name = match one {
                NicArg::TenGbe => "10gbe",
                NicArg::Rocev2 => "rocev2",
                _ => "infiniband",
            };
            sweep_nodes(&base.with_nic(nic(name)?), name, &rows)?
        }
    };
    let mut out = String::new();
    match a.format {
        Format::Csv => {
            out.push_str("nic,nodes,E,load_s,compute_s,latency_s,transfer_s,time_s,throughput_tps\n");
            for r in &table {
                let e = &r.estimate;
                writeln!(
                    out,
                    "{},{},{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
                    r.nic,
                    r.n_nodes,
                    r.expected_experts,
                    e.gpu_load_s,
                    e.gpu_compute_s,
                    e.comm_latency_s,
                    e.transfer_s,
                    e.total_s,
                    e.throughput_tps
                )?;
            }
        }
        Format::Jsonl => {
            for r in &table {
                writeln!(out, "{}", serde_json::to_string(r)?)?;
            }
        }
    }
    emit(&out, None)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    system: Vec<SystemEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemEntry {
    #[serde(default)]
    name: Option<String>,
    n_nodes: usize,
    price_per_node: f64,
    throughput: f64,
}

fn cost_cmd(a: CostArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("cannot read {}", a.spec.display()))?;
    let file: CostFile = toml::from_str(&text).with_context(|| format!("{}", a.spec.display()))?;
    let mut out = String::from("name,nodes,price_per_node_usd,throughput_tps,tp_per_usd\n");
    for (i, s) in file.system.iter().enumerate() {
        let spec = CostSpec {
            n_nodes: s.n_nodes,
            price_per_node: s.price_per_node,
            throughput: s.throughput,
        };
        let eff = cost_efficiency(&spec).with_context(|| format!("system {}", i + 1))?;
        let name = s.name.clone().unwrap_or_else(|| format!("system{}", i + 1));
        writeln!(out, "{name},{},{},{},{eff:.6}", s.n_nodes, s.price_per_node, s.throughput)?;
    }
    emit(&out, None)
}

fn pack_cmd(a: PackArgs) -> Result<()> {
    if a.generate {
        let mut cfg = load_config(a.config.as_deref())?;
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        let weights = ModelWeights::generate(cfg.model, cfg.seed)?;
        write_unstacked(&a.input, &cfg.model, &weights.experts)?;
        eprintln!("wrote unstacked experts to {}", a.input.display());
    } else if a.config.is_some() || a.seed.is_some() {
        bail!("--config and --seed only apply with --generate");
    }
    let s = pack_weights(&a.input, &a.output)?;
    println!("experts,layers,d_embed,d_ffn,bytes");
    println!("{},{},{},{},{}", s.n_experts, s.n_layers, s.d_embed, s.d_ffn, s.bytes_written);
    Ok(())
}

fn oracle_cmd(a: OracleArgs) -> Result<()> {
    let plan = build_shard_plan(a.experts, a.nodes, a.replication)?;
    let exact = expected_executed_experts(a.nodes, a.experts, a.topk, &plan)?;
    let mut out = String::from("nodes,experts,topk,replication,expected,fraction");
    let mut row = format!(
        "{},{},{},{},{:.4},{exact}",
        a.nodes,
        a.experts,
        a.topk,
        a.replication,
        exact.value()
    );
    if let Some(layers) = a.monte_carlo {
        out.push_str(",monte_carlo");
        write!(row, ",{:.4}", monte_carlo_executed(&plan, a.topk, layers, 0)?)?;
    }
    println!("{out}\n{row}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RunCluster(a) => run_cluster_cmd(a),
        Command::BenchPacking(a) => bench_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Cost(a) => cost_cmd(a),
        Command::PackWeights(a) => pack_cmd(a),
        Command::Oracle(a) => oracle_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
