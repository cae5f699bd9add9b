use std::fs;
use std::path::{Path, PathBuf};

use cpft::cli::{run, Manifest};
use cpft::conformal::split_cp;
use cpft::data::read_dataset;
use cpft::eval::MetricReport;
use cpft::model::read_checkpoint;

fn cpft(args: &[&str]) -> (i32, String) {
    let mut argv = vec!["cpft"];
    argv.extend_from_slice(args);
    let mut out = Vec::new();
    let code = run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out) = cpft(args);
    assert_eq!(code, 0, "{args:?}\n{out}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        ok(&["synth", "--users", "80", "--items", "25", "--seed", "3", "--out", s(&root.join("synth"))]);
        ok(&[
            "pretrain",
            "--data",
            s(&root.join("synth/dataset.bin")),
            "--set",
            "d=8",
            "--set",
            "epochs=3",
            "--set",
            "learning_rate=5e-3",
            "--out",
            s(&root.join("pre")),
        ]);
        Self { _tmp: tmp, root }
    }

    fn data(&self) -> PathBuf {
        self.root.join("synth/dataset.bin")
    }

    fn model(&self) -> PathBuf {
        self.root.join("pre/model.ckpt")
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn pipeline_produces_every_artifact() {
    let p = Pipeline::new();
    for f in ["dataset.bin", "synth.json", "manifest.json"] {
        assert!(p.dir("synth").join(f).exists(), "{f}");
    }
    for f in ["model.ckpt", "trace.jsonl", "manifest.json"] {
        assert!(p.dir("pre").join(f).exists(), "{f}");
    }
    ok(&[
        "finetune",
        "--data",
        s(&p.data()),
        "--model",
        s(&p.model()),
        "--set",
        "epochs=2",
        "--set",
        "beta=0.01",
        "--out",
        s(&p.dir("ft")),
    ]);
    let out = ok(&["evaluate", "--data", s(&p.data()), "--model", s(&p.dir("ft/model.ckpt")), "--out", s(&p.dir("ev"))]);
    assert!(out.contains("Recall@10"));
    let report: MetricReport = serde_json::from_slice(&fs::read(p.dir("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report.n_users, 80);
    assert!(report.recall(10) >= 0.0 && report.recall(10) <= 1.0);

    let m = Manifest::read(&p.dir("ev/manifest.json")).unwrap();
    assert_eq!(m.verb, "evaluate");
    assert_eq!(m.inputs.len(), 2);
    assert!(m.outputs.iter().any(|o| o.path == "report.json"));
}

#[test]
fn calibrate_prints_split_cp_numbers() {
    let p = Pipeline::new();
    let out = ok(&["calibrate", "--data", s(&p.data()), "--model", s(&p.model()), "--set", "alpha=0.2", "--out", s(&p.dir("cal"))]);
    let ds = read_dataset(&p.data()).unwrap();
    let model = read_checkpoint(&p.model()).unwrap();
    let cp = split_cp(&model, &ds.validation_pairs(), &ds.test_pairs(), 0.2).unwrap();
    assert!(out.contains(&format!("coverage={}\n", cp.coverage)), "{out}");
    assert!(out.contains(&format!("mean_set_size={}\n", cp.mean_set_size)), "{out}");
    assert!(out.contains(&format!("q_hat={}\n", cp.threshold.q_hat)), "{out}");
    let audit = fs::read_to_string(p.dir("cal/audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 80);
}

#[test]
fn replay_reproduces_outputs_bit_for_bit() {
    let p = Pipeline::new();
    ok(&[
        "finetune",
        "--data",
        s(&p.data()),
        "--model",
        s(&p.model()),
        "--set",
        "epochs=2",
        "--set",
        "beta=0.01",
        "--out",
        s(&p.dir("ft")),
    ]);
    ok(&["replay", s(&p.dir("ft/manifest.json")), "--out", s(&p.dir("ft2"))]);
    for f in ["trace.jsonl", "model.ckpt"] {
        assert_eq!(fs::read(p.dir("ft").join(f)).unwrap(), fs::read(p.dir("ft2").join(f)).unwrap(), "{f}");
    }
    ok(&["replay", s(&p.dir("pre/manifest.json")), "--out", s(&p.dir("pre2"))]);
    assert_eq!(fs::read(p.dir("pre/trace.jsonl")).unwrap(), fs::read(p.dir("pre2/trace.jsonl")).unwrap());
}

#[test]
fn replay_rejects_changed_inputs() {
    let p = Pipeline::new();
    ok(&["evaluate", "--data", s(&p.data()), "--model", s(&p.model()), "--out", s(&p.dir("ev"))]);
    let mut bytes = fs::read(p.model()).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(p.model(), bytes).unwrap();
    let (code, _) = cpft(&["replay", s(&p.dir("ev/manifest.json")), "--out", s(&p.dir("ev2"))]);
    assert_eq!(code, 2);
}

#[test]
fn ablate_writes_five_ordered_reports() {
    let p = Pipeline::new();
    let out = ok(&["ablate", "--data", s(&p.data()), "--model", s(&p.model()), "--set", "epochs=1", "--out", s(&p.dir("ab"))]);
    let mut reports: Vec<String> = fs::read_dir(p.dir("ab"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("report_"))
        .collect();
    reports.sort();
    assert_eq!(
        reports,
        [
            "report_1_ce.json",
            "report_2_cps.json",
            "report_3_ce_cps.json",
            "report_4_cps_cpd.json",
            "report_5_ce_cps_cpd.json"
        ]
    );
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with('[')).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("[CE]\t") && rows[4].starts_with("[CE,CPS,CPD]\t"));
}

#[test]
fn sensitivity_sweeps_each_value() {
    let p = Pipeline::new();
    ok(&[
        "sensitivity",
        "--data",
        s(&p.data()),
        "--model",
        s(&p.model()),
        "--set",
        "epochs=1",
        "--grid",
        "alpha=0.1,0.3,0.5,0.7",
        "--out",
        s(&p.dir("sens")),
    ]);
    for a in ["0.1", "0.3", "0.5", "0.7"] {
        let r: MetricReport =
            serde_json::from_slice(&fs::read(p.dir("sens").join(format!("report_alpha_{a}.json"))).unwrap()).unwrap();
        assert_eq!(r.alpha.to_string(), a);
    }
    let (code, _) = cpft(&[
        "sensitivity",
        "--data",
        s(&p.data()),
        "--model",
        s(&p.model()),
        "--grid",
        "alpha=2",
        "--out",
        s(&p.dir("bad")),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn config_file_then_overrides() {
    let p = Pipeline::new();
    let cfg = p.dir("c.toml");
    fs::write(&cfg, "alpha = 0.2\nbeta = 3.0\nepochs = 1\n").unwrap();
    ok(&[
        "finetune",
        "--data",
        s(&p.data()),
        "--model",
        s(&p.model()),
        "--config",
        s(&cfg),
        "--set",
        "beta=0.5",
        "--out",
        s(&p.dir("ft")),
    ]);
    let m = Manifest::read(&p.dir("ft/manifest.json")).unwrap();
    assert_eq!(m.config["alpha"], "0.2");
    assert_eq!(m.config["beta"], "0.5");
    assert_eq!(m.config["gamma"], "1");
}

#[test]
fn exit_codes_follow_error_kind() {
    let p = Pipeline::new();
    let (code, _) = cpft(&[
        "pretrain",
        "--data",
        s(&p.data()),
        "--set",
        "learning_rate=1e200",
        "--set",
        "d=8",
        "--out",
        s(&p.dir("div")),
    ]);
    assert_eq!(code, 3);
    let (code, _) = cpft(&["evaluate", "--data", s(&p.data()), "--model", s(&p.dir("missing.ckpt")), "--out", s(&p.dir("x"))]);
    assert_eq!(code, 2);
    let (code, _) = cpft(&["evaluate", "--data", s(&p.data())]);
    assert_eq!(code, 1);
    let (code, _) = cpft(&["finetune", "--data", s(&p.data()), "--model", s(&p.model()), "--set", "alpha=1.5"]);
    assert_eq!(code, 1);
}

#[test]
fn ingest_reads_raw_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log.csv");
    fs::write(&log, "user,item,ts\nu1,a,1\nu1,b,2\nu1,c,3\nu2,b,1\nu2,c,2\nu2,a,3\nu3,a,1\n").unwrap();
    let out = ok(&["ingest", "--input", s(&log), "--out", s(&tmp.path().join("ing"))]);
    assert!(out.contains("users=2 items=3"), "{out}");
    let vocab = fs::read_to_string(tmp.path().join("ing/vocab.tsv")).unwrap();
    assert_eq!(vocab.lines().count(), 3);
}

#[test]
fn default_output_directory_comes_from_env() {
    let tmp = tempfile::tempdir().unwrap();
    std::env::set_var(cpft::cli::OUTPUT_DIR_ENV, tmp.path());
    let out = ok(&["synth", "--users", "10", "--items", "5"]);
    std::env::remove_var(cpft::cli::OUTPUT_DIR_ENV);
    let dirs: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].starts_with("synth-"), "{dirs:?}");
    assert!(out.contains(&dirs[0]));
}
