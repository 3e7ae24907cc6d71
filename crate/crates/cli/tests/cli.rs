use std::fs;

use saicl_cli::run_with;
use saicl_core::tasks::read_dataset;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("saicl").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn accuracy_lines(stdout: &str) -> Vec<String> {
    stdout.lines().map(|l| l.split_once(' ').unwrap().1.to_string()).collect()
}

#[test]
fn quick_verify_passes() {
    let (code, out, _) = run(&["verify", "--quick"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.lines().all(|l| l.starts_with("PASS")));
    assert!(out.lines().count() >= 7);
}

#[test]
fn help_exits_zero_with_synopsis() {
    let (code, out, _) = run(&["bench", "--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("Usage"));
    assert!(out.contains("--k-grid"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["eval", "--scheme", "bogus"]).0, 2);
    assert_eq!(run(&["eval", "--scheme", "ensemble", "--groups", "5", "--test-k", "2"]).0, 2);
    assert_eq!(run(&["bench", "--repetitions", "2"]).0, 2);
    let (code, _, err) = run(&["bench", "--k-grid", "4,2"]);
    assert_eq!(code, 2);
    assert!(err.contains("usage"));
}

#[test]
fn one_group_ensemble_equals_single() {
    let common = ["--test-k", "2,4", "--episodes", "20", "--seeds", "2", "--seed", "3", "--d-model", "16", "--ff-width", "32"];
    let single = run(&[&["eval", "--scheme", "single"][..], &common].concat());
    let ensemble = run(&[&["eval", "--scheme", "ensemble", "--groups", "1"][..], &common].concat());
    assert_eq!(single.0, 0, "{}", single.2);
    assert_eq!(ensemble.0, 0, "{}", ensemble.2);
    assert_eq!(accuracy_lines(&single.1), accuracy_lines(&ensemble.1));
}

#[test]
fn gen_data_round_trips_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lookup.jsonl");
    let p = path.to_str().unwrap();
    let (code, out, _) = run(&["gen-data", "--k", "4", "--episodes", "6", "--seed", "9", "--out", p]);
    assert_eq!(code, 0);
    assert!(out.contains("wrote 30 examples"));
    let examples = read_dataset(&path).unwrap();
    assert_eq!(examples.len(), 30);
    assert!(examples.iter().all(|e| e.validate().is_ok()));

    let again = dir.path().join("again.jsonl");
    run(&["gen-data", "--k", "4", "--episodes", "6", "--seed", "9", "--out", again.to_str().unwrap()]);
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let (code, out, err) = run(&["eval", "--data", p, "--test-k", "4", "--d-model", "16", "--ff-width", "32"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("test_k=4 episodes=6"));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.csv");
    let config = dir.path().join("train.cfg");
    fs::write(&config, "# tiny run\nsteps = 4\nbatch-size = 2\nd_model = 16\nff_width = 32\nlr = 0.5\n").unwrap();
    let (code, _, err) = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--lr",
        "0.001",
        "--train-k",
        "2",
        "--seed",
        "1",
        "--out",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let csv = fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,lr");
    assert_eq!(lines.len(), 5);
    // the flag overrides the file: peak lr 1e-3 is never exceeded
    for row in &lines[1..] {
        let lr: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(lr <= 0.001 + 1e-15);
    }

    let args = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--test-k", "2", "--episodes", "5", "--seeds", "1", "--json"];
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(report["test_k"], 2);
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 1);
}

#[test]
fn bench_csv_has_fixed_schema() {
    let (code, out, _) = run(&["bench", "--k-grid", "1,2", "--lengths", "4", "--repetitions", "3"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "variant,k,L,mean_ms,median_ms,std_ms,score_storage");
    assert_eq!(lines.len(), 5);
    let storage: Vec<&str> = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(storage, ["64", "112", "64", "144"]);
    assert!(lines[3].starts_with("full,1,4,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 7));

    let (code, out, _) = run(&["bench", "--k-grid", "1", "--lengths", "4", "--repetitions", "3", "--memory-ceiling-mb", "0"]);
    assert_eq!(code, 0);
    assert!(out.contains("full,1,4,OOM,OOM,OOM,64"));
}
