use std::net::TcpListener;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moe-cluster"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn predict_two_nodes() {
    let o = run(&["predict", "--nodes", "2", "--nic", "10gbe", "--E", "2.65"]);
    assert!(o.status.success());
    let rows = csv_rows(&stdout(&o));
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let total: f64 = rows[1][col("time_s")].parse().unwrap();
    let tp: f64 = rows[1][col("throughput_tps")].parse().unwrap();
    assert_eq!(format!("{total:.3}"), "0.103");
    assert_eq!(format!("{tp:.1}"), "9.7");
}

#[test]
fn predict_needs_e_for_unmeasured_node_count() {
    let o = run(&["predict", "--nodes", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("expected expert"));
    assert!(run(&["predict", "--nodes", "5", "--E", "1.3"]).status.success());
}

#[test]
fn predict_jsonl() {
    let o = run(&["predict", "--nic", "all", "--format", "jsonl"]);
    assert!(o.status.success());
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 15);
    assert_eq!(lines[0]["nic"], "10gbe");
}

#[test]
fn oracle_two_nodes() {
    let o = run(&["oracle", "--nodes", "2", "--experts", "16", "--topk", "4"]);
    assert!(o.status.success());
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows[1][4], "2.6462");
    assert_eq!(rows[1][5], "4816/1820");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["predict", "--nodes", "two"]).status.code(), Some(2));
    assert_eq!(run(&["run-cluster", "--strategy", "fastest"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let o = run(&["run-cluster", "--nodes", "40"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("cluster.nodes"));
    let o = run(&["run-cluster", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\n[cluster]\nnodes = 3\nstrategy = \"busy-full\"\n[run]\ngen_tokens = 12\n").unwrap();
    for format in ["csv", "jsonl"] {
        let mut reports = Vec::new();
        for i in 0..2 {
            let out = dir.path().join(format!("r{i}.{format}"));
            let o = run(&[
                "run-cluster",
                "--config",
                cfg.to_str().unwrap(),
                "--format",
                format,
                "--output",
                out.to_str().unwrap(),
            ]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            reports.push(std::fs::read(&out).unwrap());
        }
        assert_eq!(reports[0], reports[1]);
        assert_eq!(String::from_utf8_lossy(&reports[0]).lines().count(), if format == "csv" { 13 } else { 12 });
    }
}

#[test]
fn run_cluster_csv_shape() {
    let o = run(&["run-cluster", "--nodes", "2", "--mode", "centralized", "--gen-tokens", "5", "--prompt-tokens", "3"]);
    assert!(o.status.success());
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows[0], ["token", "moe_s", "comm_s", "misc_s"]);
    assert_eq!(rows.len(), 6);
}

#[test]
fn tcp_needs_local_or_node_id() {
    let o = run(&["run-cluster", "--transport", "tcp"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tcp_local_cluster() {
    let o = run(&["run-cluster", "--transport", "tcp", "--local", "--nodes", "3", "--gen-tokens", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 5);
}

#[test]
fn tcp_cluster_across_processes() {
    // reserve two ports, then release them for the node processes
    let ports: Vec<u16> = {
        let ls: Vec<TcpListener> = (0..2).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
        ls.iter().map(|l| l.local_addr().unwrap().port()).collect()
    };
    let roster = ports.iter().map(|p| format!("127.0.0.1:{p}")).collect::<Vec<_>>().join(",");
    let spawn = |id: &str| {
        bin()
            .args(["run-cluster", "--transport", "tcp", "--nodes", "2", "--gen-tokens", "3", "--node-id", id])
            .env("MOE_CLUSTER_ROSTER", &roster)
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()
            .unwrap()
    };
    let remote = spawn("1");
    let head = spawn("0");
    let head = head.wait_with_output().unwrap();
    let remote = remote.wait_with_output().unwrap();
    assert!(head.status.success(), "{}", String::from_utf8_lossy(&head.stderr));
    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    assert_eq!(stdout(&head).lines().count(), 4);
    assert!(remote.stdout.is_empty());
}

#[test]
fn cost_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("cost.toml");
    std::fs::write(
        &spec,
        "[[system]]\nname = \"h100\"\nn_nodes = 1\nprice_per_node = 289000\nthroughput = 112.5\n\n\
         [[system]]\nname = \"studio\"\nn_nodes = 2\nprice_per_node = 6599\nthroughput = 5.9\n",
    )
    .unwrap();
    let o = run(&["cost", "--spec", spec.to_str().unwrap()]);
    assert!(o.status.success());
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows[1][4], "0.000389");
    assert_eq!(rows[2][4], "0.000447");
}

#[test]
fn bench_packing_csv() {
    let o = run(&["bench-packing", "--n", "128", "--t-wait-ms", "0,16,1024"]);
    assert!(o.status.success());
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows[0], ["strategy", "T_wait_ms", "mean_sample_time_ms"]);
    assert_eq!(rows.len(), 7);
    let t = |i: usize| rows[i][2].parse::<f64>().unwrap();
    // prestacked: 0, 16, 1024; unstacked: 0, 16, 1024
    assert!(t(3) > 2.0 * t(1));
    assert!(t(5) > t(2));
}

#[test]
fn pack_weights_generates_and_packs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("unstacked");
    let output = dir.path().join("experts.moew");
    let o = run(&[
        "pack-weights",
        "--generate",
        "--seed",
        "5",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&stdout(&o));
    assert_eq!(&rows[1][..4], ["16", "4", "64", "128"]);
    assert_eq!(std::fs::metadata(&output).unwrap().len().to_string(), rows[1][4]);
    assert_eq!(std::fs::read_dir(&input).unwrap().count(), 16 * 4 * 3);
}
