use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--K", "4", "--N", "16", "--d-model", "8", "--d-ffn", "16", "--layers", "1", "--heads", "2",
    "--actions", "3", "--horizon", "3", "--batch", "2", "--reps", "2",
];

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench")).args(args).env("RPOP_THREADS", "1").output().unwrap()
}

fn with_tiny<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(TINY).chain(tail).copied().collect()
}

#[test]
fn run_writes_csv_with_one_row_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    let out = bench(&with_tiny(&["run"], &["--out", path.to_str().unwrap()]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "config,mode,calls,tokens_per_call,wall_ms_mean,wall_ms_std,tok_per_s,speedup");
    assert_eq!(lines.len(), 4);
    let calls: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<_> = l.split(',').collect();
            (f[1], f[2])
        })
        .collect();
    assert_eq!(calls, [("pop-default", "6"), ("pop-combined", "3"), ("no-pop-oracle", "12")]);
    assert!(lines[3].ends_with(",1"));
}

#[test]
fn single_mode_csv_leaves_speedup_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    let out = bench(&with_tiny(&["run"], &["--mode", "pop-combined", "--out", path.to_str().unwrap()]));
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn verify_reports_call_counts() {
    let out = bench(&with_tiny(&["verify"], &[]));
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("6/3/12"), "{stdout}");
}

#[test]
fn sweep_covers_each_size() {
    let args: Vec<&str> = ["sweep", "--K", "1,4", "--format", "csv"]
        .into_iter()
        .chain(TINY.iter().copied().skip(2))
        .collect();
    let out = bench(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 7);
}

#[test]
fn train_forward_mode_is_reported() {
    let out = bench(&with_tiny(&["run"], &["--train-forward", "--format", "csv"]));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(",train-forward,"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(bench(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(bench(&with_tiny(&["run"], &["--mode", "fastest"])).status.code(), Some(1));
    assert_eq!(bench(&with_tiny(&["run"], &["--preset", "huge"])).status.code(), Some(1));
    assert_eq!(bench(&["run", "--K", "64", "--d-model", "4096", "--d-ffn", "16384"]).status.code(), Some(1));
    assert_eq!(bench(&["--help"]).status.code(), Some(0));
}

#[test]
fn unreadable_model_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rpop");
    std::fs::write(&path, b"not a model").unwrap();
    let out = bench(&["verify", "--model", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn saved_model_sets_the_shape() {
    use rpop_core::bench::{seeded_bundle, BenchConfig};
    let config = BenchConfig {
        tokens_per_obs: 9,
        vocab_size: 12,
        d_model: 8,
        d_ffn: 16,
        layers: 1,
        heads: 2,
        num_actions: 5,
        ..BenchConfig::paper()
    };
    let bundle = seeded_bundle::<f64>(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rpop");
    rpop_core::io::save_bundle(&bundle, &path).unwrap();
    let out = bench(&["verify", "--model", path.to_str().unwrap(), "--horizon", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("4/2/18"));
}
