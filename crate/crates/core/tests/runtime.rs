use moe_cluster::config::{Mode, RunConfig, TransportKind};
use moe_cluster::model::{generate_reference_traced, prompt_from_seed, ModelWeights, ReferenceTrace};
use moe_cluster::placement::Strategy;
use moe_cluster::runtime::{run_cluster, DeviceParams, RunReport};
use moe_cluster::Error;

fn reference(cfg: &RunConfig) -> ReferenceTrace {
    let w = ModelWeights::generate(cfg.model, cfg.seed).unwrap();
    let prompt = prompt_from_seed(cfg.seed, cfg.run.prompt_tokens, cfg.model.vocab_size);
    generate_reference_traced(&w, &prompt, cfg.run.gen_tokens).unwrap()
}

fn config(seed: u64, nodes: usize, strategy: Strategy, mode: Mode) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.cluster.nodes = nodes;
    cfg.cluster.strategy = strategy;
    cfg.cluster.mode = Some(mode);
    cfg.run.gen_tokens = 12;
    cfg
}

fn assert_matches(report: &RunReport, trace: &ReferenceTrace, what: &str) {
    assert_eq!(report.tokens, trace.tokens, "{what}: tokens");
    assert_eq!(report.layer_checksums, trace.layer_checksums, "{what}: checksums");
}

#[test]
fn every_strategy_and_mode_matches_the_reference() {
    for seed in 0..3 {
        let trace = reference(&config(seed, 1, Strategy::Naive, Mode::Centralized));
        for nodes in 1..=4 {
            for strategy in Strategy::ALL {
                for mode in [Mode::Centralized, Mode::Decentralized] {
                    for replication in 1..=nodes.min(2) {
                        let mut cfg = config(seed, nodes, strategy, mode);
                        cfg.cluster.replication = replication;
                        let what = format!("seed {seed}, {nodes} nodes, {strategy}, {mode}, r={replication}");
                        assert_matches(&run_cluster(&cfg).unwrap(), &trace, &what);
                    }
                }
            }
        }
    }
}

#[test]
fn tcp_loopback_matches_the_reference() {
    for (nodes, mode) in [(2, Mode::Decentralized), (3, Mode::Centralized), (3, Mode::Decentralized)] {
        let mut cfg = config(9, nodes, Strategy::RouterAided, mode);
        cfg.cluster.transport = TransportKind::Tcp;
        cfg.run.gen_tokens = 6;
        let report = run_cluster(&cfg).unwrap();
        assert_matches(&report, &reference(&cfg), &format!("tcp {nodes} {mode}"));
    }
}

#[test]
fn zero_generated_tokens() {
    let mut cfg = config(1, 2, Strategy::RouterAided, Mode::Decentralized);
    cfg.run.gen_tokens = 0;
    let report = run_cluster(&cfg).unwrap();
    assert!(report.tokens.is_empty() && report.rows.is_empty());
    assert!(report.layer_checksums.is_empty());
}

#[test]
fn simulated_runs_are_deterministic() {
    let cfg = config(4, 3, Strategy::BusyFull, Mode::Centralized);
    let a = run_cluster(&cfg).unwrap();
    let b = run_cluster(&cfg).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.nodes, b.nodes);
}

/// With free compute and an exactly representable latency, all communication
/// time is message latency.
#[test]
fn measured_comm_time_halves_exactly() {
    let latency = 1.0 / 1024.0;
    let mut times = Vec::new();
    for mode in [Mode::Centralized, Mode::Decentralized] {
        let mut cfg = config(2, 3, Strategy::RouterAided, mode);
        cfg.network.latency = latency;
        cfg.network.bandwidth = f64::INFINITY;
        cfg.device = DeviceParams {
            mem_bandwidth: f64::INFINITY,
            gpu_flops: f64::INFINITY,
        };
        let r = run_cluster(&cfg).unwrap();
        for row in &r.rows {
            assert_eq!(row.comm_s, row.comm_rounds as f64 * latency);
        }
        times.push(r.mean_comm_time());
    }
    assert_eq!(times[0] / times[1], 2.0);
}

#[test]
fn router_aided_spends_less_on_experts_than_busy_full() {
    for nodes in [2, 3, 4] {
        for seed in 0..3 {
            let busy = run_cluster(&config(seed, nodes, Strategy::BusyFull, Mode::Decentralized)).unwrap();
            let aided = run_cluster(&config(seed, nodes, Strategy::RouterAided, Mode::Decentralized)).unwrap();
            assert!(
                aided.mean_moe_time() < busy.mean_moe_time(),
                "{nodes} nodes, seed {seed}: {} vs {}",
                aided.mean_moe_time(),
                busy.mean_moe_time()
            );
        }
    }
}

#[test]
fn keepalive_shortens_the_first_token_after_idling() {
    let mut cfg = config(0, 2, Strategy::RouterAided, Mode::Decentralized);
    cfg.run.idle_before_s = 5.0 * cfg.wiring.inactivity_threshold;
    let kept = run_cluster(&cfg).unwrap();
    cfg.run.keepalive = Some(false);
    let lapsed = run_cluster(&cfg).unwrap();
    assert_eq!(kept.tokens, lapsed.tokens);
    assert!(kept.time_to_first_token < lapsed.time_to_first_token);
    for n in &kept.nodes {
        assert_eq!(n.wire_events, n.warmup_wire_events, "node {} rewired", n.node);
        assert_eq!(n.unwire_events, 0);
    }
    for n in &lapsed.nodes {
        assert!(n.unwire_events > 0 && n.wire_events > n.warmup_wire_events);
    }
}

#[test]
fn naive_pays_first_touch_wiring_during_generation() {
    let naive = run_cluster(&config(0, 2, Strategy::Naive, Mode::Centralized)).unwrap();
    assert!(naive.nodes.iter().all(|n| n.warmup_wire_events == 0));
    assert!(naive.nodes.iter().any(|n| n.wire_events > 0));
    let aided = run_cluster(&config(0, 2, Strategy::RouterAided, Mode::Decentralized)).unwrap();
    for n in &aided.nodes {
        assert_eq!(n.wire_events, n.warmup_wire_events);
        assert_eq!(n.warmup_wire_events as usize, n.local_experts);
    }
}

#[test]
fn rounds_per_layer_follow_the_mode() {
    let layers = RunConfig::default().model.n_layers as u64;
    for nodes in [2, 4] {
        let c = run_cluster(&config(1, nodes, Strategy::Naive, Mode::Centralized)).unwrap();
        let d = run_cluster(&config(1, nodes, Strategy::Naive, Mode::Decentralized)).unwrap();
        assert!(c.rows.iter().all(|r| r.comm_rounds == 2 * layers));
        assert!(d.rows.iter().all(|r| r.comm_rounds == layers));
    }
}

/// Charging full-size layer costs on the desk model gives the communication
/// share a realistic magnitude, and it still grows with the node count.
#[test]
fn comm_share_grows_with_full_size_costs() {
    for seed in 0..3 {
        let shares: Vec<f64> = [2, 3, 4]
            .into_iter()
            .map(|nodes| {
                let mut cfg = config(seed, nodes, Strategy::RouterAided, Mode::Decentralized);
                cfg.run.gen_tokens = 64;
                cfg.cost.d_embed = Some(6144);
                cfg.cost.d_ffn = Some(10752);
                cfg.cost.d_qkv_hidden = Some(8192);
                cfg.cost.vocab_size = Some(100352);
                run_cluster(&cfg).unwrap().comm_share()
            })
            .collect();
        assert!(shares[0] < shares[1] && shares[1] < shares[2], "seed {seed}: {shares:?}");
        assert!(shares.iter().all(|s| (0.1..0.7).contains(s)), "seed {seed}: {shares:?}");
    }
}

#[test]
fn invalid_configs_are_rejected_before_starting() {
    let mut cfg = RunConfig::default();
    cfg.cluster.nodes = 17;
    assert!(matches!(run_cluster(&cfg), Err(Error::Config(_))));
    let mut cfg = RunConfig::default();
    cfg.network.bandwidth = 0.0;
    assert!(matches!(run_cluster(&cfg), Err(Error::Config(_))));
}
