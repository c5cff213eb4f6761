use std::fs;
use std::path::{Path, PathBuf};

use mtlseg_cli::commands::{ABLATION_ROWS, CHECKPOINT_FILE, EVAL_FILE, LOSS_FILE, RUN_CONFIG_FILE, SWEEP_FILE};
use mtlseg_cli::{run, EXIT_RUNTIME, EXIT_USAGE};

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// A small generated dataset plus a config pointing at it.
    fn new(train_section: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let cfg = format!(
            "[data]\ndataset = {}\ncount = 12\nsize = 16\nbuildings_max = 2\nbuilding_size_min = 4\nbuilding_size_max = 7\n\n\
             [model]\nwidths = 4,4\n\n[train]\nepochs = 2\nbatch_size = 3\n{train_section}\n\n[sweep]\nw_bnd = 0,1\nw_rec = 0,0.5\n",
            f.path("ds").display()
        );
        fs::write(f.path("cfg.txt"), cfg).unwrap();
        assert_eq!(f.cli(&["gen-data", "--out", "ds"]), 0);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Run with `--config cfg.txt`; `--out` values are taken relative to the fixture.
    fn cli(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["mtlseg".to_string(), args[0].to_string()];
        let mut it = args[1..].iter();
        while let Some(&a) = it.next() {
            argv.push(a.to_string());
            if matches!(a, "--out" | "--checkpoint" | "--predictions" | "--config") {
                argv.push(self.path(it.next().unwrap()).display().to_string());
            }
        }
        if !args.contains(&"--config") {
            argv.extend(["--config".to_string(), self.path("cfg.txt").display().to_string()]);
        }
        run(argv)
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.path(name)).unwrap()
    }
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_layout_and_refusal() {
    let f = Fixture::new("");
    let names = files(&f.path("ds"));
    assert_eq!(names.len(), 12 * 3 + 2);
    assert!(names.contains(&"img_11.ppm".to_string()));
    let split = f.read("ds/split.csv");
    assert_eq!(split.lines().next(), Some("id,subset"));
    assert_eq!(split.lines().filter(|l| l.ends_with(",train")).count(), 9);

    assert_eq!(f.cli(&["gen-data", "--out", "ds"]), EXIT_RUNTIME);
    fs::write(f.path("ds/notes.txt"), "keep").unwrap();
    assert_eq!(f.cli(&["gen-data", "--out", "ds", "--force"]), 0);
    assert!(f.path("ds/notes.txt").exists());
}

#[test]
fn gen_data_too_few_items() {
    let f = Fixture::new("");
    fs::write(f.path("tiny.txt"), "[data]\ncount = 2\n").unwrap();
    assert_eq!(f.cli(&["gen-data", "--config", "tiny.txt", "--out", "tiny"]), EXIT_RUNTIME);
}

#[test]
fn seg_only_loss_log() {
    let f = Fixture::new("tasks = S\nweighting = fixed");
    assert_eq!(f.cli(&["train", "--out", "run"]), 0);
    let loss = f.read("run/loss.csv");
    // 9 training scenes in batches of 3, two epochs
    assert_eq!(loss.lines().count(), 1 + 3 * 2);
    assert_eq!(column(&loss, "l_joint"), column(&loss, "l_seg"));
    assert!(column(&loss, "l_bnd").iter().all(String::is_empty));
    assert!(f.read("run/val_metrics.csv").lines().next().unwrap().ends_with("model_seed,data_seed,shuffle_seed"));
}

#[test]
fn uncertainty_weights_start_at_one() {
    let f = Fixture::new("");
    assert_eq!(f.cli(&["train", "--out", "run", "--seed", "5"]), 0);
    let loss = f.read("run/loss.csv");
    let row0: Vec<&str> = loss.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row0[5..8], &["1", "1", "0.5"]);
    for w in ["w_seg_eff", "w_bnd_eff", "w_rec_eff"] {
        assert!(column(&loss, w).iter().all(|v| v.parse::<f32>().unwrap() > 0.0));
    }
    let run_cfg = f.read("run/run_config.txt");
    for key in ["model_seed = 5", "data_seed = 5", "shuffle_seed = 5"] {
        assert!(run_cfg.contains(key), "{key}");
    }
    assert!(f.read("run/test_metrics.csv").lines().nth(1).unwrap().ends_with(",5,5,5"));
}

#[test]
fn train_refuses_to_overwrite() {
    let f = Fixture::new("");
    assert_eq!(f.cli(&["train", "--out", "run"]), 0);
    assert_eq!(f.cli(&["train", "--out", "run"]), EXIT_RUNTIME);
    assert_eq!(f.cli(&["train", "--out", "run", "--force"]), 0);
}

#[test]
fn eval_is_repeatable_and_checks_compatibility() {
    let f = Fixture::new("tasks = S\nweighting = fixed");
    assert_eq!(f.cli(&["train", "--out", "run"]), 0);
    let eval = |out: &str, extra: &[&str]| {
        let mut args = vec!["eval", "--config", "run/run_config.txt", "--checkpoint", "run/checkpoint.bin", "--out", out];
        args.extend_from_slice(extra);
        f.cli(&args)
    };
    assert_eq!(eval("e1", &[]), 0);
    assert_eq!(eval("e2", &[]), 0);
    assert_eq!(f.read("e1/eval.csv"), f.read("e2/eval.csv"));
    assert!(f.read("e1/eval.csv").lines().nth(1).unwrap().starts_with("S,test,"));

    // no boundary head to fuse with
    assert_eq!(eval("e3", &["--postprocess"]), EXIT_RUNTIME);

    let other = f.read("run/run_config.txt").replace("widths = 4,4", "widths = 8,4");
    fs::write(f.path("other.txt"), other).unwrap();
    let code = f.cli(&["eval", "--config", "other.txt", "--checkpoint", "run/checkpoint.bin", "--out", "e4"]);
    assert_eq!(code, EXIT_RUNTIME);
    assert_eq!(f.cli(&["eval", "--out", "e5"]), EXIT_USAGE);
}

#[test]
fn sweep_rows_and_determinism() {
    let f = Fixture::new("weighting = fixed");
    assert_eq!(f.cli(&["sweep", "--out", "sw1"]), 0);
    assert_eq!(f.cli(&["sweep", "--out", "sw2"]), 0);
    let csv = f.read("sw1/sweep.csv");
    assert_eq!(csv, f.read("sw2/sweep.csv"));
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(f.read("sw1/sweep_grid.txt").lines().count(), 3);
}

#[test]
fn zero_auxiliary_weights_match_seg_only_run() {
    let f = Fixture::new("weighting = fixed");
    let cfg = f.read("cfg.txt").replace("w_bnd = 0,1\nw_rec = 0,0.5", "w_bnd = 0\nw_rec = 0");
    fs::write(f.path("zero.txt"), cfg.replace("weighting = fixed", "weighting = fixed\ntasks = S")).unwrap();
    assert_eq!(f.cli(&["sweep", "--config", "zero.txt", "--out", "sw"]), 0);
    assert_eq!(f.cli(&["train", "--config", "zero.txt", "--out", "run"]), 0);
    let sweep = f.read("sw/sweep.csv");
    let test = f.read("run/test_metrics.csv");
    assert_eq!(column(&sweep, "iou"), column(&test, "iou"));
    assert_eq!(column(&sweep, "f1"), column(&test, "f1"));
}

#[test]
fn sweep_preconditions() {
    let f = Fixture::new("");
    assert_eq!(f.cli(&["sweep", "--out", "sw"]), EXIT_RUNTIME);
    let cfg = f.read("cfg.txt").replace("w_bnd = 0,1", "w_bnd =") + "";
    fs::write(f.path("empty.txt"), cfg.replace("[train]\n", "[train]\nweighting = fixed\n")).unwrap();
    assert_eq!(f.cli(&["sweep", "--config", "empty.txt", "--out", "sw"]), EXIT_RUNTIME);
    assert!(!f.path("sw").join(SWEEP_FILE).exists());
}

#[test]
fn ablation_table() {
    let f = Fixture::new("");
    assert_eq!(f.cli(&["ablation", "--out", "ab"]), 0);
    let csv = f.read("ab/ablation.csv");
    assert_eq!(column(&csv, "experiment"), ABLATION_ROWS);
    let seeds: Vec<String> = csv.lines().skip(1).map(|l| l.rsplitn(4, ',').take(3).collect::<Vec<_>>().join(",")).collect();
    assert!(seeds.windows(2).all(|w| w[0] == w[1]));
    for run in ["s", "s_r", "s_b", "s_b_r"] {
        for file in [CHECKPOINT_FILE, LOSS_FILE, RUN_CONFIG_FILE] {
            assert!(f.path("ab").join(run).join(file).exists());
        }
    }

    // the +P row equals evaluating the S+B+R checkpoint with post-processing
    let args = [
        "eval", "--config", "ab/s_b_r/run_config.txt", "--checkpoint", "ab/s_b_r/checkpoint.bin", "--out", "ev",
        "--postprocess",
    ];
    assert_eq!(f.cli(&args), 0);
    let row = f.read(&format!("ev/{EVAL_FILE}")).lines().nth(1).unwrap().to_string();
    assert_eq!(csv.lines().nth(5).unwrap(), row);
}

#[test]
fn usage_errors() {
    let f = Fixture::new("");
    assert_eq!(run(["mtlseg", "bogus"]), EXIT_USAGE);
    assert_eq!(run(["mtlseg", "train"]), EXIT_USAGE);
    assert_eq!(run(["mtlseg", "--help"]), 0);
    fs::write(f.path("typo.txt"), "[train]\nepocs = 3\n").unwrap();
    assert_eq!(f.cli(&["train", "--config", "typo.txt", "--out", "run"]), EXIT_USAGE);
    assert_eq!(f.cli(&["eval", "--checkpoint", "x.bin", "--predictions", "p", "--out", "e"]), EXIT_USAGE);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mtlseg");
    let status = std::process::Command::new(bin).arg("nope").output().unwrap().status;
    assert_eq!(status.code(), Some(EXIT_USAGE));
    let dir = tempfile::tempdir().unwrap();
    let status = std::process::Command::new(bin)
        .args(["train", "--out"])
        .arg(dir.path())
        .output()
        .unwrap()
        .status;
    // no dataset configured
    assert_eq!(status.code(), Some(EXIT_RUNTIME));
}
