use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
scene.height = 16
scene.width = 16
scene.snap = 2
data.train = 4
data.val = 2
model.channels = 8
model.query_down = 1
model.kv_down = 4,2,1
train.iters = 4
train.batch_size = 2
train.eval_interval = 2
train.checkpoint_interval = 2
train.log_interval = 1
";

fn bridgenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bridgenet"))
        .args(args)
        .env_remove("BRIDGENET_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.cfg"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn gen_data(&self) {
        let o = bridgenet(&["gen-data", "--config", &self.arg("run.cfg"), "--out", &self.arg("data")]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, data, out) = (self.arg("run.cfg"), self.arg("data"), self.arg(out));
        let mut args = vec!["train", "--config", &cfg, "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        bridgenet(&args)
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic() {
    let ws = Workspace::new(TINY);
    let cfg = ws.arg("run.cfg");
    for out in ["a", "b"] {
        let o = bridgenet(&["gen-data", "--config", &cfg, "--out", &ws.arg(out), "--seed", "3"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = tree(&ws.path("a"));
    assert_eq!(a.len(), 7);
    assert!(a.iter().any(|(n, _)| n == "manifest.tsv"));
    assert_eq!(a, tree(&ws.path("b")));

    let o = bridgenet(&["gen-data", "--config", &cfg, "--out", &ws.arg("c"), "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(a, tree(&ws.path("c")));
}

#[test]
fn missing_or_bad_config_is_a_usage_error() {
    let o = bridgenet(&["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"), "{}", stderr(&o));

    let ws = Workspace::new("scene.colour = red\n");
    let o = bridgenet(&["gen-data", "--config", &ws.arg("run.cfg")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scene.colour"), "{}", stderr(&o));

    let o = bridgenet(&["gen-data", "--config", &ws.arg("absent.cfg")]);
    assert_eq!(o.status.code(), Some(2));

    let ws = Workspace::new("scene.near = 3\nscene.far = 2\n");
    let o = bridgenet(&["gen-data", "--config", &ws.arg("run.cfg")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scene"), "{}", stderr(&o));
}

#[test]
fn train_then_eval() {
    let ws = Workspace::new(TINY);
    ws.gen_data();
    let o = ws.train("bn", &["--variant", "bridgenet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = stdout(&o);
    assert!(log.starts_with("variant bridgenet modules tpp,bfe,tfr params "), "{log}");

    let files: Vec<String> = tree(&ws.path("bn")).into_iter().map(|(n, _)| n).collect();
    for f in ["checkpoint_000002.btnr", "config.txt", "eval.tsv", "final.btnr", "report.kv", "train.tsv"] {
        assert!(files.iter().any(|n| n == f), "missing {f} in {files:?}");
    }
    let tsv = fs::read_to_string(ws.path("bn/train.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "iter\tlr\ttotal\tseg\tdepth");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 5));

    let o = bridgenet(&["eval", "--checkpoint", &ws.arg("bn/final.btnr"), "--data", &ws.arg("data")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("seg.value = ") && !text.contains("delta_mtl"), "{text}");

    // A report against itself has zero gain everywhere.
    let o = bridgenet(&[
        "eval",
        "--checkpoint",
        &ws.arg("bn/final.btnr"),
        "--data",
        &ws.arg("data"),
        "--stl-ref",
        &ws.arg("bn/report.kv"),
        "--out",
        &ws.arg("ev"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let kv = fs::read_to_string(ws.path("ev/report.kv")).unwrap();
    assert!(kv.contains("delta_mtl = 0"), "{kv}");
}

#[test]
fn baseline_is_smaller_and_mismatch_is_rejected() {
    let ws = Workspace::new(TINY);
    ws.gen_data();
    let params = |o: &Output| -> usize {
        let log = stdout(o);
        log.lines().next().unwrap().rsplit(' ').next().unwrap().parse().unwrap()
    };
    let bn = ws.train("bn", &["--iters", "1"]);
    let base = ws.train("base", &["--iters", "1", "--variant", "mtl_baseline"]);
    assert_eq!(base.status.code(), Some(0), "{}", stderr(&base));
    assert!(stdout(&base).starts_with("variant mtl_baseline modules none"));
    assert!(params(&base) < params(&bn));

    let o = bridgenet(&[
        "eval",
        "--checkpoint",
        &ws.arg("base/final.btnr"),
        "--config",
        &ws.arg("run.cfg"),
        "--data",
        &ws.arg("data"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different model configuration"), "{}", stderr(&o));
}

#[test]
fn stl_and_ablation_flags() {
    let ws = Workspace::new(TINY);
    ws.gen_data();
    let o = ws.train("stl", &["--iters", "1", "--variant", "stl", "--task", "depth"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let head = fs::read_to_string(ws.path("stl/train.tsv")).unwrap();
    assert!(head.starts_with("iter\tlr\ttotal\tdepth\n"));

    let o = ws.train("abl", &["--iters", "1", "--ablate", "tpp", "--ablate", "tfr"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("variant bridgenet modules bfe "), "{}", stdout(&o));

    let o = ws.train("bad", &["--iters", "1", "--ablate", "hdc"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ws.train("bad", &["--iters", "1", "--tfr", "giant"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_without_dataset_fails_at_runtime() {
    let ws = Workspace::new(TINY);
    let o = ws.train("r", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}

#[test]
fn diverging_run_reports_the_iteration() {
    let ws = Workspace::new(&format!("{TINY}optim.kind = sgd\noptim.lr = 1e30\noptim.weight_decay = 0\n"));
    ws.gen_data();
    let o = ws.train("r", &["--iters", "20"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("non-finite loss at iteration 1"), "{}", stderr(&o));
}

#[test]
fn thread_cap_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_bridgenet"))
        .args(["eval", "--reference-tables"])
        .env("BRIDGENET_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("BRIDGENET_THREADS"));
}

#[test]
fn reference_tables_are_reproduced() {
    let o = bridgenet(&["eval", "--reference-tables"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for (row, d) in [("mtl_baseline", "-1.17"), ("bfe ", "+0.96"), ("bfe+tpp ", "+1.29"), ("bfe+tpp+tfr_huge", "+2.45")] {
        let line = text.lines().find(|l| l.starts_with(row)).unwrap_or_else(|| panic!("no row {row}"));
        assert!(line.contains(&format!("ΔMTL   {d}")), "{line}");
    }
}

#[test]
fn gradcheck_single_block_and_injected_fault() {
    let o = bridgenet(&["gradcheck", "--block", "ffn"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("ffn\t") && stdout(&o).contains("\tok"));

    let o = bridgenet(&["gradcheck", "--block", "ffn", "--inject-fault", "gelu"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).contains("in: ffn"), "{}", stderr(&o));

    let o = bridgenet(&["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bridgenet(&["gradcheck", "--block", "encoder"]);
    assert_eq!(o.status.code(), Some(2));
}
