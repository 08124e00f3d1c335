use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const CORPUS: &str = "\
i am great
i am grateful for it
great job today
see you soon
see you at home
how are you
call me later
call you now
thank you so much
i will see you tomorrow
are you coming home
i am on my way
let me know when you are home
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_autocomplete"))
}

fn run(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&run(args)).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("corpus.txt"), CORPUS).unwrap();
        let f = Fixture { _dir: dir, root };
        run(&["build-lm", "--corpus", f.s("corpus.txt"), "--out", f.s("lm.bin")]);
        f
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn s(&self, name: &str) -> &'static str {
        Box::leak(self.p(name).to_string_lossy().into_owned().into_boxed_str())
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn filter_and_build_report_counts() {
    let f = Fixture::new();
    std::fs::write(f.p("raw.txt"), format!("{CORPUS}this line has far too many words for the filter to keep around\nbad <html>\n")).unwrap();
    let summary = json(&["filter-corpus", "--input", f.s("raw.txt"), "--output", f.s("kept.txt")]);
    assert_eq!(summary["input_count"], 15);
    assert_eq!(summary["kept_count"], 13);
    assert_eq!(read(&f.p("kept.txt")).lines().count(), 13);

    let built = json(&["build-lm", "--corpus", f.s("corpus.txt"), "--out", f.s("again.bin")]);
    assert_eq!(built["sentences"], 13);
    assert_eq!(built["hash"].as_str().unwrap().len(), 64);
    assert_eq!(std::fs::read(f.p("lm.bin")).unwrap(), std::fs::read(f.p("again.bin")).unwrap());
}

#[test]
fn suggest_completes_the_partial_word() {
    let f = Fixture::new();
    let v = json(&["suggest", "--model", f.s("lm.bin"), "--context", "i am gr", "--k", "2"]);
    let slate = v.as_array().unwrap();
    assert_eq!(slate.len(), 2);
    assert_eq!(slate[0]["full_words"][0], "great");
    assert_eq!(slate[0]["completion"], "eat");
}

#[test]
fn two_word_reports_interval_and_brute_force() {
    let v = json(&["two-word", "--n", "4", "--m", "2", "--alpha", "0.4"]);
    assert!(v["disagreement_interval"].is_array() || v["disagreement_interval"].is_object());
    assert_eq!(v["brute_force_gamma1"].as_array().unwrap().len(), v["brute_force_gamma0"].as_array().unwrap().len());
}

#[test]
fn disagree_sweep_writes_csv() {
    let f = Fixture::new();
    run(&["disagree-sweep", "--model", f.s("lm.bin"), "--words", "20", "--out", f.s("sweep.csv")]);
    let text = read(&f.p("sweep.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("alpha,states,disagreements,fraction"));
    assert!(lines.count() >= 10);
}

#[test]
fn offline_pipeline_and_eval() {
    let f = Fixture::new();
    let data = &["--model", f.s("lm.bin"), "--corpus", f.s("corpus.txt"), "--split", "all"];
    let collected = json(&[&["collect-offline"], &data[..], &["--n", "200", "--out", f.s("d.jsonl")]].concat());
    assert_eq!(collected["trajectories"], 200);
    let n_lines = read(&f.p("d.jsonl")).lines().count() as u64;
    assert_eq!(n_lines, 1 + collected["transitions"].as_u64().unwrap());

    let trained = json(&[&["train-q", "--mode", "offline"], &data[..], &["--dataset", f.s("d.jsonl"), "--out", f.s("q.json")]].concat());
    assert!(trained["entries"].as_u64().unwrap() > 0);
    json(&[&["train-q", "--mode", "online"], &data[..], &["--steps", "3000", "--out", f.s("qon.json"), "--curve", f.s("curve.csv")]].concat());
    assert!(read(&f.p("curve.csv")).lines().count() > 1);

    let q = format!("q:{}", f.s("q.json"));
    let policies = format!("oracle,random,threshold:0.3,wait,{q}");
    run(&[&["run-eval"], &data[..], &["--policies", &policies, "--runs", "2", "--csv", f.s("m.csv"), "--json", f.s("b.json")]].concat());
    let csv = read(&f.p("m.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("policy,runs,mean_return"));
    assert_eq!(rows.len(), 6);
    assert!(rows[4].starts_with("wait,2,0.0,"));
    assert!(rows[5].starts_with(&q));
    let bundle: Value = serde_json::from_str(&read(&f.p("b.json"))).unwrap();
    assert_eq!(bundle["rows"].as_array().unwrap().len(), 5);
}

#[test]
fn offline_training_requires_dataset() {
    let f = Fixture::new();
    let out = bin()
        .args(["train-q", "--mode", "offline", "--model", f.s("lm.bin"), "--corpus", f.s("corpus.txt"), "--out", f.s("q.json")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dataset"));
}

#[test]
fn unknown_policy_is_rejected() {
    let f = Fixture::new();
    let out = bin()
        .args(["run-eval", "--model", f.s("lm.bin"), "--corpus", f.s("corpus.txt"), "--split", "all", "--policies", "ppo"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn simulated_study_analyzes_to_planted_load() {
    let f = Fixture::new();
    std::fs::write(f.p("prompts.txt"), "see you soon\ncall me later\nhow are you\ni am great\n").unwrap();
    let sim = json(&[
        "simulate-study", "--model", f.s("lm.bin"), "--prompts", f.s("prompts.txt"), "--logs", f.s("logs"),
        "--sessions", "6",
    ]);
    assert_eq!(sim["sessions"].as_array().unwrap().len(), 6);
    let a = json(&["analyze-study", "--logs", f.s("logs"), "--out-dir", f.s("out"), "--bin", "10"]);
    assert_eq!(a["sessions"], 6);
    let load = a["load"]["mean_load_ms"].as_f64().unwrap();
    assert!((load - 30.0).abs() < 5.0, "{load}");
    assert!(read(&f.p("out/load.csv")).starts_with("quantity,ms,ci95_ms"));
    assert!(read(&f.p("out/fatigue.csv")).starts_with("curve,bin_start"));
}

#[test]
fn analyze_empty_log_dir_fails() {
    let f = Fixture::new();
    std::fs::create_dir(f.p("empty")).unwrap();
    let out = bin().args(["analyze-study", "--logs", f.s("empty")]).output().unwrap();
    assert!(!out.status.success());
}
