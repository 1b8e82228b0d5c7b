//! End-to-end runs of the `fedsim` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SYNC: &str = r#"
schema = 1

[fleet]
compute_time = [1.0, 2.0]

[fleet.objective]
family = "quadratic"
optima = [[0.0], [4.0]]

[scheme]
policy = "sync"
weights = "fedavg"

[optimization]
local_lr = 0.1
local_steps = 5
initial = [10.0]

[horizon]
rounds = 20
"#;

const ASYNC_TIME: &str = r#"
schema = 1

[fleet]
compute_time = [1.0, 1.5, 2.0, 3.0]

[fleet.objective]
family = "quadratic"
optima = [[-2.0], [0.0], [1.0], [4.0]]
noise_std = 0.5

[scheme]
policy = "async"
weights = "async-time-based"

[optimization]
server_lr = 0.5
local_lr = 0.05
local_steps = 3

[horizon]
time = 60.0
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn fedsim(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}{}",
        o.status.code(),
        stdout(o),
        stderr(o)
    );
}

/// Value of a `key = value` line.
fn field(text: &str, key: &str) -> String {
    let prefix = format!("{key} = ");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
        .to_string()
}

fn csv_column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(idx).unwrap().to_string())
        .collect()
}

#[test]
fn simulate_sync_golden_header_and_first_row() {
    let ws = Workspace::new();
    let out = ws.out("run");
    let o = fedsim(&["simulate"], &ws.config("sync.toml", SYNC), &out);
    assert_ok(&o);
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "n,t,participants,loss_fed,loss_surrogate,dist_sq,loss_client_0,loss_client_1"
    );
    // θ^0 = 10: losses ½·10² and ½·6², θ* = 2
    assert_eq!(
        lines.next().unwrap(),
        "0,0.0000000000000000e0,11,3.4000000000000000e1,3.4000000000000000e1,\
         6.4000000000000000e1,5.0000000000000000e1,1.8000000000000000e1"
    );
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn simulate_sync_contracts() {
    let ws = Workspace::new();
    let out = ws.out("run");
    assert_ok(&fedsim(
        &["simulate", "--quiet"],
        &ws.config("sync.toml", SYNC),
        &out,
    ));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let dist: Vec<f64> = csv_column(&csv, "dist_sq")
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    assert!(dist.windows(2).all(|w| w[1] < w[0]), "{dist:?}");
    let times: Vec<f64> = csv_column(&csv, "t")
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(times.last(), Some(&40.0));
}

#[test]
fn quiet_suppresses_stdout() {
    let ws = Workspace::new();
    let o = fedsim(
        &["simulate", "--quiet"],
        &ws.config("sync.toml", SYNC),
        &ws.out("run"),
    );
    assert_ok(&o);
    assert!(o.stdout.is_empty());
}

#[test]
fn time_horizon_async_row_count() {
    let ws = Workspace::new();
    let out = ws.out("run");
    assert_ok(&fedsim(
        &["simulate"],
        &ws.config("async.toml", ASYNC_TIME),
        &out,
    ));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let rows = csv.lines().count() as i64 - 1;
    // Σ ⌊60/τ_i⌋ = 60 + 40 + 30 + 20
    assert!((rows - 150).abs() <= 4, "{rows} rows");
}

#[test]
fn reruns_are_byte_identical() {
    let ws = Workspace::new();
    let text = ASYNC_TIME
        .replace(
            "[fleet.objective]",
            "hardware = \"exponential\"\n\n[fleet.objective]",
        )
        .replace("async-time-based", "identical");
    let config = ws.config("async.toml", &text);
    let a = ws.out("a");
    let b = ws.out("b");
    let c = ws.out("c");
    assert_ok(&fedsim(&["simulate", "--seed", "5"], &config, &a));
    assert_ok(&fedsim(&["simulate", "--seed", "5"], &config, &b));
    assert_ok(&fedsim(&["simulate", "--seed", "6"], &config, &c));
    let read = |d: &Path| fs::read(d.join("trajectory.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn run_log_is_enough_to_rerun() {
    let ws = Workspace::new();
    let out = ws.out("run");
    assert_ok(&fedsim(
        &["simulate", "--seed", "9"],
        &ws.config("async.toml", ASYNC_TIME),
        &out,
    ));
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(log["schema_version"], 1);
    assert_eq!(log["diverged"], false);
    assert_eq!(log["seeds"][0]["base"], 9);
    let hash = log["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(log["wall_time_s"].as_f64().unwrap() >= 0.0);

    // the logged config (seed included) reproduces the trajectory without --seed
    let config: toml::Value = serde_json::from_value(log["config"].clone()).unwrap();
    let replay = ws.config("replay.toml", &toml::to_string(&config).unwrap());
    let again = ws.out("again");
    assert_ok(&fedsim(&["simulate"], &replay, &again));
    let read = |d: &Path| fs::read(d.join("trajectory.csv")).unwrap();
    assert_eq!(read(&out), read(&again));
    let relog: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(again.join("run.json")).unwrap()).unwrap();
    assert_eq!(relog["config_hash"], hash);
}

#[test]
fn divergence_is_a_result() {
    let ws = Workspace::new();
    let text = SYNC
        .replace("local_lr = 0.1", "local_lr = 3.0")
        .replace("rounds = 20", "rounds = 200");
    let out = ws.out("run");
    let o = fedsim(&["simulate"], &ws.config("boom.toml", &text), &out);
    assert_ok(&o);
    assert!(stdout(&o).contains("diverged at round"));
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(log["diverged"], true);
}

#[test]
fn invalid_configs_exit_2() {
    let ws = Workspace::new();
    let typo = SYNC.replace("local_steps = 5", "local_stepz = 5");
    let o = fedsim(&["simulate"], &ws.config("typo.toml", &typo), &ws.out("x"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("local_stepz"), "{}", stderr(&o));

    let version = SYNC.replace("schema = 1", "schema = 7");
    let o = fedsim(
        &["simulate"],
        &ws.config("version.toml", &version),
        &ws.out("x"),
    );
    assert_eq!(o.status.code(), Some(2));

    let mismatch = SYNC.replace("optima = [[0.0], [4.0]]", "optima = [[0.0]]");
    let o = fedsim(
        &["simulate"],
        &ws.config("mismatch.toml", &mismatch),
        &ws.out("x"),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!ws.out("x").join("trajectory.csv").exists());
}

#[test]
fn oracle_check_sync_is_exact() {
    let ws = Workspace::new();
    let text = SYNC.replace(
        "compute_time = [1.0, 2.0]",
        "compute_time = [1.0, 2.0]\nimportance = [0.5, 0.5]",
    );
    let out = ws.out("oracle");
    let o = fedsim(&["oracle-check"], &ws.config("sync.toml", &text), &out);
    assert_ok(&o);
    assert_eq!(field(&stdout(&o), "overall"), "PASS");
    let csv = fs::read_to_string(out.join("oracle_check.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "n,quantity,oracle,empirical,std_err,judged,pass"
    );
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true,true")));
    let rounds: Vec<String> = csv_column(&csv, "n");
    assert_eq!(rounds, ["1", "1", "5", "5", "20", "20"]);
    let predicted = fs::read_to_string(out.join("oracle.csv")).unwrap();
    assert!(predicted.starts_with(
        "n,t,participants,loss_fed,loss_surrogate,dist_sq,loss_client_0,loss_client_1\n"
    ));
}

#[test]
fn oracle_check_uniform_fixed_point() {
    let ws = Workspace::new();
    let text = r#"
schema = 1

[fleet]
compute_time = [1.0, 1.0, 1.0]

[fleet.objective]
family = "quadratic"
optima = [[0.0], [0.0], [1.0]]

[scheme]
policy = "uniform"
m = 1
weights = "custom"
custom_weights = [1.0, 1.0, 1.0]

[optimization]
local_lr = 0.5
local_steps = 1

[horizon]
rounds = 30

[ensemble]
seeds = 2000
"#;
    let out = ws.out("oracle");
    let o = fedsim(&["oracle-check"], &ws.config("uniform.toml", text), &out);
    assert_ok(&o);
    assert_eq!(field(&stdout(&o), "overall"), "PASS");
    let csv = fs::read_to_string(out.join("oracle_check.csv")).unwrap();
    let last = csv.lines().find(|l| l.starts_with("30,mean,")).unwrap();
    let oracle: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert!((oracle - 1.0 / 3.0).abs() < 1e-8);
}

#[test]
fn oracle_check_rejects_heterogeneous_async() {
    let ws = Workspace::new();
    let text = r#"
schema = 1

[fleet]
compute_time = [1.0, 2.0]
hardware = "exponential"

[fleet.objective]
family = "quadratic"
optima = [[0.0], [1.0]]

[scheme]
policy = "async"
weights = "identical"

[optimization]
local_lr = 0.5
local_steps = 1

[horizon]
rounds = 10
"#;
    let o = fedsim(
        &["oracle-check"],
        &ws.config("async.toml", text),
        &ws.out("x"),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(
        err.contains("unsupported") && err.contains("heterogeneous"),
        "{err}"
    );
}

#[test]
fn bounds_presets_and_smoothness_note() {
    let ws = Workspace::new();
    let out = ws.out("bounds");
    let o = fedsim(&["bounds"], &ws.config("sync.toml", SYNC), &out);
    assert_ok(&o);
    let text = stdout(&o);
    assert!(text.starts_with("# all O(.) constants set to 1"));
    assert!(text.contains("# L not set; using the largest client smoothness 1"));
    assert_eq!(field(&text, "preset.sync.tau"), "0");
    assert_eq!(field(&text, "preset.sync.W"), "1");
    // τ = (1, 2): the async cycle holds 3 rounds, client 2 lands 2 rounds stale
    assert_eq!(field(&text, "preset.async.W"), "3");
    assert_eq!(field(&text, "preset.async.tau"), "2");
    assert_eq!(field(&text, "tau").parse::<f64>().unwrap(), 0.0);
    assert_eq!(fs::read_to_string(out.join("bounds.txt")).unwrap(), text);

    let with_l = SYNC.to_string() + "\n[bounds]\nsmoothness = 2.0\n";
    let o = fedsim(&["bounds"], &ws.config("l.toml", &with_l), &out);
    assert_ok(&o);
    assert!(!stdout(&o).contains("L not set"));
    assert_eq!(field(&stdout(&o), "L").parse::<f64>().unwrap(), 2.0);
}

#[test]
fn single_value_sweep_matches_simulate() {
    let ws = Workspace::new();
    let config = ws.config("async.toml", ASYNC_TIME);
    let sim = fedsim(&["simulate"], &config, &ws.out("sim"));
    assert_ok(&sim);
    let sweep_out = ws.out("sweep");
    assert_ok(&fedsim(
        &["sweep", "--axis", "local-steps", "--values", "3"],
        &config,
        &sweep_out,
    ));
    let csv = fs::read_to_string(sweep_out.join("sweep.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "axis,value,loss_mean,loss_std,seed_std,members,diverged"
    );
    assert_eq!(
        csv_column(&csv, "loss_mean"),
        [field(&stdout(&sim), "final_window.mean")]
    );
    assert_eq!(
        csv_column(&csv, "loss_std"),
        [field(&stdout(&sim), "final_window.std")]
    );
}

#[test]
fn wide_fedfix_sweep_equals_sync() {
    let ws = Workspace::new();
    let noisy = SYNC.replace(
        "optima = [[0.0], [4.0]]",
        "optima = [[0.0], [4.0]]\nnoise_std = 0.3",
    );
    let sim = fedsim(
        &["simulate"],
        &ws.config("sync.toml", &noisy),
        &ws.out("sim"),
    );
    assert_ok(&sim);
    let fedfix = noisy.replace("policy = \"sync\"", "policy = \"fedfix\"\ninterval = 1.0");
    let out = ws.out("sweep");
    assert_ok(&fedsim(
        &["sweep", "--axis", "interval", "--values", "2,4"],
        &ws.config("fix.toml", &fedfix),
        &out,
    ));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let expected = field(&stdout(&sim), "final_window.mean");
    assert_eq!(csv_column(&csv, "loss_mean"), [expected.clone(), expected]);
}

#[test]
fn sweep_reads_config_table_and_uses_seeds() {
    let ws = Workspace::new();
    let text = ASYNC_TIME.to_string()
        + "\n[ensemble]\nseeds = 3\n\n[sweep]\naxis = \"local-lr\"\nvalues = [0.01, 0.05]\n";
    let out = ws.out("sweep");
    assert_ok(&fedsim(&["sweep"], &ws.config("s.toml", &text), &out));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv_column(&csv, "axis"), ["local_lr", "local_lr"]);
    assert_eq!(csv_column(&csv, "members"), ["3", "3"]);
    assert!(csv_column(&csv, "seed_std")
        .iter()
        .all(|s| s.parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn empty_sweep_values_rejected() {
    let ws = Workspace::new();
    let text = SYNC.to_string() + "\n[sweep]\naxis = \"local-steps\"\nvalues = []\n";
    let o = fedsim(&["sweep"], &ws.config("s.toml", &text), &ws.out("x"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"));

    let o = fedsim(
        &["sweep", "--axis", "m", "--values", "1"],
        &ws.config("sync.toml", SYNC),
        &ws.out("x"),
    );
    assert_eq!(o.status.code(), Some(2), "sync has no m");
}

#[test]
fn gen_shards_writes_one_file_per_client() {
    let ws = Workspace::new();
    let text = r#"
schema = 1

[fleet]
compute_time = [1.0, 2.0, 3.0]

[fleet.objective]
family = "logistic"
features = 3
samples = 16
shard_seed = 4

[scheme]
policy = "sync"
weights = "fedavg"

[optimization]
local_lr = 0.1
local_steps = 2
batch = 4

[horizon]
rounds = 5
"#;
    let out = ws.out("g");
    assert_ok(&fedsim(&["gen-shards"], &ws.config("glm.toml", text), &out));
    for i in 0..3 {
        let csv = fs::read_to_string(out.join("shards").join(format!("client_{i}.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "x0,x1,x2,x3,y");
        assert_eq!(csv.lines().count(), 17);
    }
    let o = fedsim(&["gen-shards"], &ws.config("sync.toml", SYNC), &ws.out("h"));
    assert_eq!(o.status.code(), Some(2));
}
