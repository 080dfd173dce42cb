use std::path::Path;
use std::process::{Command, Output};

use ephys_core::io::{load_series, read_csv, read_index_column, save_array, write_index_column};
use ephys_core::repro::four_class_set;

fn ephys(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ephys")).args(args).output().expect("run ephys")
}

fn ok(args: &[&str]) {
    let out = ephys(args);
    assert!(out.status.success(), "ephys {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_writes_declared_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim8.json");
    std::fs::write(&cfg, r#"{"preset": "sim8", "duration_s": 4}"#).unwrap();
    let run = dir.path().join("run1");
    ok(&["simulate", "--config", p(&cfg), "--seed", "7", "--out", p(&run)]);
    let series = load_series(run.join("series.nkt")).unwrap();
    assert_eq!((series.channels(), series.timesteps(), series.fs()), (1, 1000, 250.0));
    let states = read_index_column(run.join("states.csv")).unwrap();
    assert_eq!(states.len(), 1000);
    assert!(states.iter().all(|&s| (0..8).contains(&s)));
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 7);
    assert_eq!(resolved["threads"], 1);
    assert_eq!(resolved["params"]["spec"]["frequencies"].as_array().unwrap().len(), 8);
}

#[test]
fn flags_override_config_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"preset": "sim4", "duration_s": 100, "seed": 3}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--config", p(&cfg), "--duration-s", "2", "--out", p(&a)]);
    ok(&["simulate", "--config", p(&cfg), "--duration-s", "2", "--out", p(&b)]);
    assert_eq!(load_series(a.join("series.nkt")).unwrap().timesteps(), 500);
    for f in ["series.nkt", "states.csv", "config.resolved.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let resolved = std::fs::read_to_string(a.join("config.resolved.json")).unwrap();
    assert!(resolved.contains("\"seed\": 3"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = ephys(&["simulate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(ephys(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_fails_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"q": 16, "bogus": 1}"#).unwrap();
    let out = ephys(&["quantize", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn module_errors_surface_with_their_name() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("sim");
    ok(&["simulate", "--preset", "sim4", "--duration-s", "2", "--out", p(&run)]);
    let series = run.join("series.nkt");
    let out = ephys(&["quantize", "--input", p(&series), "--q", "1", "--out", p(&dir.path().join("q"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Error"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn series_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("sim");
    ok(&["simulate", "--preset", "sim4", "--duration-s", "20", "--out", p(&run)]);
    let series = run.join("series.nkt");
    let out = |name: &str| dir.path().join(name);
    ok(&["quantize", "--input", p(&series), "--out", p(&out("q"))]);
    assert!(out("q").join("tokens.nkt.json").exists());
    ok(&["fit-ar", "--input", p(&series), "--order", "8", "--out", p(&out("ar"))]);
    let ar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out("ar").join("ar.json")).unwrap()).unwrap();
    assert_eq!(ar["order"], 8);
    ok(&["eval-psd", "--input", p(&series), "--morlet", "10,24", "--out", p(&out("psd"))]);
    let (header, rows) = read_csv(out("psd").join("psd.csv")).unwrap();
    assert_eq!(header, ["channel", "freq_hz", "power"]);
    assert_eq!(rows.len(), 126);
    assert!(out("psd").join("wavelet.nkt").exists());
    ok(&["eval-cov", "--input", p(&series), "--out", p(&out("cov"))]);
    ok(&["fit-hmm", "--input", p(&series), "--states", "3", "--tde", "5", "--pca", "3", "--restarts", "1", "--out", p(&out("hmm"))]);
    let (header, rows) = read_csv(out("hmm").join("stats.csv")).unwrap();
    assert_eq!(header, ["state", "fo", "lifetime_s", "interval_s", "switch_hz"]);
    let fo: f64 = rows.iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
    assert!((fo - 1.0).abs() < 1e-9);
}

#[test]
fn decoding_and_pfi_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let set = four_class_set(80, 3.0, 1).unwrap();
    let data = dir.path().join("trials.nkt");
    let labels = dir.path().join("labels.csv");
    save_array(&data, &set.data.trials().clone().into_dyn(), set.data.fs()).unwrap();
    let l: Vec<i64> = set.data.labels().iter().map(|&v| v as i64).collect();
    write_index_column(&labels, "label", &l).unwrap();
    let out = dir.path().join("dec");
    ok(&["train-decoder", "--data", p(&data), "--labels", p(&labels), "--pipeline", "lda-pca", "--window", "100", "--folds", "4", "--out", p(&out)]);
    let (header, rows) = read_csv(out.join("metrics.csv")).unwrap();
    assert_eq!(header, ["fold", "window_start_ms", "accuracy"]);
    // 50 samples, 10-sample windows at stride 1, four folds.
    assert_eq!(rows.len(), 4 * 41);
    let out = dir.path().join("eval");
    ok(&["evaluate", "--data", p(&data), "--labels", p(&labels), "--test-data", p(&data), "--test-labels", p(&labels), "--out", p(&out)]);
    assert_eq!(read_csv(out.join("metrics.csv")).unwrap().1.len(), 1);
    let out = dir.path().join("pfi");
    ok(&["pfi", "--data", p(&data), "--labels", p(&labels), "--kind", "spatial", "--window-sensors", "4", "--n-perm", "3", "--out", p(&out)]);
    let (_, rows) = read_csv(out.join("pfi.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(read_csv(out.join("pfi_raw.csv")).unwrap().1.len(), 12);
}

#[test]
fn forecaster_train_generate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("sim");
    ok(&["simulate", "--preset", "sim4", "--duration-s", "8", "--out", p(&run)]);
    let series = run.join("series.nkt");
    let cfg = dir.path().join("wn.json");
    std::fs::write(&cfg, r#"{"simple": {"layers": 4, "schedule": {"segment": 64, "max_epochs": 2}}}"#).unwrap();
    let train = dir.path().join("train");
    ok(&["train-forecaster", "--config", p(&cfg), "--input", p(&series), "--hidden", "4", "--out", p(&train)]);
    assert!(train.join("model").join("manifest.json").exists());
    let (a, b) = (dir.path().join("g1"), dir.path().join("g2"));
    for o in [&a, &b] {
        ok(&["generate", "--model", p(&train.join("model")), "--primer", p(&series), "--steps", "200", "--seed", "5", "--out", p(o)]);
    }
    let g = load_series(a.join("generated.nkt")).unwrap();
    assert_eq!((g.channels(), g.timesteps()), (1, 200));
    assert_eq!(std::fs::read(a.join("generated.nkt")).unwrap(), std::fs::read(b.join("generated.nkt")).unwrap());
}

#[test]
fn repro_metrics_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        let out = ephys(&["repro", "numerics", "--seed", "4", "--out", p(o)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() == 2, "{stdout}");
    }
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(ephys(&["repro", "c99", "--out", p(&a)]).status.code(), Some(1));
}
