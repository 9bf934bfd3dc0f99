//! End-to-end checks of the `fedlens` binary: exit codes, file outputs, and
//! the TCP serve/client pair.

use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedlens_core::pipeline::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedlens"))
}

fn write_quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(
        &path,
        r#"
seed = 7
hidden_layers = [4]

[data]
source = "synthetic"

[data.spec]
target_bias = 0.2
target_noise = 0.05
target_weights = [1.0, -0.5]
rows_per_client = [40, 50, 45]
holdout_rows = 60
client_shift_std = 0.1
poisoned = []
generators = [
    { kind = "normal", mean = 0.0, std = 1.0 },
    { kind = "normal", mean = 0.0, std = 1.0 },
]

[data.spec.schema]
features = [["a", "numeric"], ["b", "numeric"], ["y", "numeric"]]
target = "y"

[selection]
min_samples = 5
skew_low = -3.0
skew_high = 3.0

[train]
rounds = 3
local_epochs = 1
batch_size = 16
"#,
    )
    .unwrap();
    path
}

fn stdout_json(output: &Output) -> serde_json::Value {
    serde_json::from_slice(&output.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&output.stdout)
        )
    })
}

#[test]
fn run_writes_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_quick_config(dir.path());
    let out_dir = dir.path().join("out");
    let output = bin()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--out-dir"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("metrics.csv").exists());
    let summary = stdout_json(&output);
    assert_eq!(summary["selected"], serde_json::json!([1, 2, 3]));
    assert!(summary["final_fa_assisted_mae"].as_f64().unwrap() >= 0.0);
    // Logs are JSON lines on stderr.
    let stderr = String::from_utf8_lossy(&output.stderr);
    for line in stderr.lines().filter(|l| !l.is_empty()) {
        let parsed: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(parsed["level"].is_string(), "{line}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let output = bin().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(!output.stderr.is_empty());

    let output = bin().output().unwrap();
    assert_eq!(output.status.code(), Some(1));

    let output = bin().args(["run"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let output = bin().arg("--help").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&output.stdout).contains("fedlens"));
}

#[test]
fn runtime_errors_exit_two() {
    let output = bin()
        .args(["run", "--config", "/nonexistent/exp.toml"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("cannot read config"));
}

#[test]
fn replay_accepts_clean_and_rejects_tampered_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_quick_config(dir.path());
    let out_dir = dir.path().join("out");
    let status = bin()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--out-dir"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());

    let report_path = out_dir.join("report.json");
    let output = bin().args(["replay", "--report"]).arg(&report_path).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    assert_eq!(stdout_json(&output)["replay"], "ok");

    // Flip one curve value; replay must fail with a mismatch diff.
    let mut report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let v = report["curves"]["fa_assisted_raw"][0].as_f64().unwrap();
    report["curves"]["fa_assisted_raw"][0] = serde_json::json!(v + 1e-6);
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap()).unwrap();

    let output = bin().args(["replay", "--report"]).arg(&report_path).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("replay mismatch"));
}

#[test]
fn query_prints_result_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_quick_config(dir.path());
    let spec_path = dir.path().join("q.json");
    std::fs::write(
        &spec_path,
        r#"{
  "query_id": "q-count",
  "category": "statistical_testing",
  "kernel": "count",
  "aggregation": "addition",
  "cohort": [1, 2, 3],
  "secure": false
}"#,
    )
    .unwrap();
    let output = bin()
        .args(["query", "--spec"])
        .arg(&spec_path)
        .args(["--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let result = stdout_json(&output);
    assert_eq!(result["aggregated"]["scalar"], serde_json::json!(135.0));
    assert_eq!(result["respondent_count"], serde_json::json!(3));
}

#[test]
fn gen_synth_then_partition_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_quick_config(dir.path());

    // Materialize the synthetic federation to CSVs.
    let synth_dir = dir.path().join("synth");
    let output = bin()
        .args(["gen-synth", "--config"])
        .arg(&config)
        .args(["--out-dir"])
        .arg(&synth_dir)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for name in ["client_01.csv", "client_02.csv", "client_03.csv", "holdout.csv", "manifest.json"] {
        assert!(synth_dir.join(name).exists(), "{name} missing");
    }

    // Partition one of the emitted CSVs through a csv-source config.
    let csv_config = dir.path().join("csv.toml");
    let mut file = std::fs::File::create(&csv_config).unwrap();
    write!(
        file,
        r#"
seed = 3

[data]
source = "csv"
path = {:?}

[data.partition]
strategy = "uniform"
clients = 2
seed = 5
holdout_fraction = 0.2

[selection]
min_samples = 1
"#,
        synth_dir.join("client_01.csv")
    )
    .unwrap();
    // The firewall default schema does not apply here; supply one.
    let schema_path = dir.path().join("schema.json");
    std::fs::write(
        &schema_path,
        r#"{"features": [["a","numeric"],["b","numeric"],["y","numeric"]], "target": "y"}"#,
    )
    .unwrap();
    let text = std::fs::read_to_string(&csv_config).unwrap();
    let text = text.replace(
        "source = \"csv\"",
        &format!("source = \"csv\"\nschema_path = {:?}", schema_path),
    );
    std::fs::write(&csv_config, text).unwrap();

    let part_dir = dir.path().join("parts");
    let output = bin()
        .args(["partition", "--config"])
        .arg(&csv_config)
        .args(["--out-dir"])
        .arg(&part_dir)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(part_dir.join("manifest.json")).unwrap())
            .unwrap();
    let rows: u64 = manifest["datasets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["rows"].as_u64().unwrap())
        .sum();
    assert_eq!(rows, 40);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    for name in ["configs/default-synthetic.toml", "configs/firewall-csv.toml"] {
        let text = std::fs::read_to_string(root.join(name)).unwrap();
        let cfg: ExperimentConfig = toml::from_str(&text)
            .unwrap_or_else(|e| panic!("{name} does not parse: {e}"));
        cfg.resolve().unwrap_or_else(|e| panic!("{name} does not resolve: {e}"));
    }
    let spec = std::fs::read_to_string(root.join("configs/query-skew-profile.json")).unwrap();
    let _: fedlens_core::query::QuerySpec = serde_json::from_str(&spec).unwrap();
    let schema = std::fs::read_to_string(root.join("schemas/firewall.json")).unwrap();
    let parsed: fedlens_core::model::Schema = serde_json::from_str(&schema).unwrap();
    assert_eq!(parsed, fedlens_core::model::Schema::firewall());
}

#[test]
fn tcp_serve_and_clients_produce_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_quick_config(dir.path());
    let out_dir = dir.path().join("out");

    // Reserve a port, then free it for the server.
    let port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    let addr = format!("127.0.0.1:{port}");

    let mut server = bin()
        .args(["serve", "--config"])
        .arg(&config)
        .args(["--out-dir"])
        .arg(&out_dir)
        .env("FEDLENS_BIND", &addr)
        .spawn()
        .unwrap();

    // Clients retry while the server comes up.
    let mut clients = Vec::new();
    for _ in 0..3 {
        let config = config.clone();
        let addr = addr.clone();
        clients.push(std::thread::spawn(move || {
            for attempt in 0..50 {
                let status = bin()
                    .args(["client", "--config"])
                    .arg(&config)
                    .args(["--connect", &addr])
                    .status()
                    .unwrap();
                if status.success() {
                    return;
                }
                std::thread::sleep(std::time::Duration::from_millis(50 * (attempt + 1)));
            }
            panic!("client never joined");
        }));
    }
    for c in clients {
        c.join().unwrap();
    }
    let status = server.wait().unwrap();
    assert!(status.success());
    assert!(out_dir.join("report.json").exists());
}
