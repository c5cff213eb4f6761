use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;

use mtlseg_core::data::{generate_dataset, load_dataset, netpbm, write_dataset, Dataset, Sample, Subset};
use mtlseg_core::eval::{metrics, ConfusionCounts, MetricsReport};
use mtlseg_core::train::{evaluate, score_prediction, train, EvalOptions, Seeds, TrainConfig, TrainOutcome, Weighting};
use mtlseg_core::{Checkpoint, LossBreakdown, TaskSet, TaskWeights};

use crate::config::{Config, WeightingMode};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const VAL_FILE: &str = "val_metrics.csv";
pub const TEST_FILE: &str = "test_metrics.csv";
pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_GRID_FILE: &str = "sweep_grid.txt";
pub const ABLATION_FILE: &str = "ablation.csv";

const SEED_HEADER: &str = "model_seed,data_seed,shuffle_seed";
const REPORT_HEADER: &str = "experiment,subset,tp,fp,fn,tn,iou,f1,model_seed,data_seed,shuffle_seed";

fn seed_fields(s: &Seeds) -> String {
    format!("{},{},{}", s.model, s.data, s.shuffle)
}

/// Refuse to overwrite existing outputs unless `force` is set.
fn claim_outputs(dir: &Path, names: &[&str], force: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    if !force {
        if let Some(name) = names.iter().find(|n| dir.join(n).exists()) {
            bail!("{} already exists (use --force to overwrite)", dir.join(name).display());
        }
    }
    Ok(())
}

fn write(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn is_dataset_file(name: &str) -> bool {
    let numbered = |prefix: &str, ext: &str| {
        name.strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(ext))
            .is_some_and(|id| !id.is_empty() && id.bytes().all(|b| b.is_ascii_digit()))
    };
    name == "split.csv"
        || name == "gen_config.txt"
        || numbered("img_", ".ppm")
        || numbered("seg_", ".pgm")
        || numbered("bnd_", ".pgm")
}

pub fn gen_data(cfg: &Config, out: &Path, force: bool) -> Result<Dataset> {
    if out.exists() {
        let mut entries = fs::read_dir(out).with_context(|| format!("cannot read {}", out.display()))?;
        if entries.next().is_some() {
            if !force {
                bail!("{} is not empty (use --force to overwrite)", out.display());
            }
            for entry in fs::read_dir(out)? {
                let entry = entry?;
                if entry.file_type()?.is_file() && entry.file_name().to_str().is_some_and(is_dataset_file) {
                    fs::remove_file(entry.path())?;
                }
            }
        }
    }
    let ds = generate_dataset(&cfg.data.scene, cfg.data.count, &cfg.data.split)?;
    write_dataset(out, &ds)?;
    Ok(ds)
}

pub fn dataset_path(cfg: &Config) -> Result<&Path> {
    cfg.data
        .dataset
        .as_deref()
        .context("no dataset directory given (set `dataset` in [data] or pass --data)")
}

pub fn open_dataset(cfg: &Config) -> Result<Dataset> {
    let path = dataset_path(cfg)?;
    let ds = load_dataset(path).with_context(|| format!("cannot load dataset {}", path.display()))?;
    ensure!(
        ds.scene.channels == cfg.data.scene.channels,
        "dataset has {} image channels but the configuration expects {}",
        ds.scene.channels,
        cfg.data.scene.channels
    );
    Ok(ds)
}

/// Result of one training run together with its test-subset score.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
    pub test: MetricsReport,
}

pub fn loss_csv(losses: &[LossBreakdown]) -> String {
    let mut out = format!("{}\n", LossBreakdown::CSV_HEADER);
    for (step, b) in losses.iter().enumerate() {
        out.push_str(&b.csv_row(step));
        out.push('\n');
    }
    out
}

/// Train with `train_cfg` on the dataset's train subset, selecting on its
/// validation subset and scoring the selected model on the test subset.
/// Artifacts are written to `out` when given.
pub fn run_training(
    cfg: &Config,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    out: Option<&Path>,
    verbose: bool,
) -> Result<RunResult> {
    let train_set = ds.subset_cloned(Subset::Train);
    let val_set = ds.subset_cloned(Subset::Val);
    let tag = train_cfg.tasks.to_string();
    let outcome = train(train_cfg, &train_set, &val_set, |r| {
        if verbose {
            let val = r.val.map(|m| format!(" val_iou {:.4}", m.iou)).unwrap_or_default();
            eprintln!("[{tag}] epoch {}/{} joint {:.5}{val}", r.epoch + 1, train_cfg.epochs, r.mean_joint);
        }
    })?;
    let opts = EvalOptions {
        threshold: train_cfg.threshold,
        postprocess: None,
        batch_size: train_cfg.batch_size,
    };
    let test = evaluate(&outcome.model, ds.subset(Subset::Test), &opts)?;
    let checkpoint = Checkpoint {
        model: outcome.model.clone(),
        tasks: train_cfg.tasks,
        uncertainty: outcome.uncertainty.clone(),
    };

    if let Some(dir) = out {
        let seeds = seed_fields(&train_cfg.seeds);
        checkpoint.save(dir.join(CHECKPOINT_FILE))?;
        write(dir.join(LOSS_FILE), &loss_csv(&outcome.losses))?;
        let mut val = format!("epoch,{},{SEED_HEADER}\n", MetricsReport::CSV_HEADER);
        for r in &outcome.epochs {
            if let Some(m) = &r.val {
                writeln!(val, "{},{},{seeds}", r.epoch, m.csv_fields()).unwrap();
            }
        }
        write(dir.join(VAL_FILE), &val)?;
        write(
            dir.join(TEST_FILE),
            &format!(
                "subset,{},{SEED_HEADER}\ntest,{},{seeds}\n",
                MetricsReport::CSV_HEADER,
                test.csv_fields()
            ),
        )?;
        let mut run_cfg = cfg.clone();
        run_cfg.train.tasks = train_cfg.tasks;
        if let Weighting::Fixed(w) = train_cfg.weighting {
            run_cfg.train.weighting = WeightingMode::Fixed;
            run_cfg.train.weights = w;
        } else {
            run_cfg.train.weighting = WeightingMode::Uncertainty;
        }
        write(dir.join(RUN_CONFIG_FILE), &run_cfg.to_text())?;
    }
    Ok(RunResult {
        outcome,
        checkpoint,
        test,
    })
}

const RUN_FILES: [&str; 5] = [CHECKPOINT_FILE, LOSS_FILE, VAL_FILE, TEST_FILE, RUN_CONFIG_FILE];

pub fn train_cmd(cfg: &Config, out: &Path, force: bool, verbose: bool) -> Result<RunResult> {
    let ds = open_dataset(cfg)?;
    claim_outputs(out, &RUN_FILES, force)?;
    run_training(cfg, &cfg.train_config(), &ds, Some(out), verbose)
}

/// One `eval.csv` row.
pub fn report_row(experiment: &str, subset: Subset, m: &MetricsReport, seeds: &Seeds) -> String {
    format!("{experiment},{subset},{},{}", m.csv_fields(), seed_fields(seeds))
}

fn read_map(path: &Path) -> Result<mtlseg_core::Tensor> {
    netpbm::read_netpbm(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Score precomputed probability maps `seg_<id>.pgm` (and `bnd_<id>.pgm`
/// when post-processing) against the dataset masks.
pub fn score_prediction_dir(
    dir: &Path,
    samples: &[&Sample],
    opts: &EvalOptions,
) -> Result<(MetricsReport, bool)> {
    let has_bnd = samples
        .iter()
        .all(|s| dir.join(format!("bnd_{}.pgm", s.id)).exists());
    let mut total = ConfusionCounts::default();
    for s in samples {
        let seg = read_map(&dir.join(format!("seg_{}.pgm", s.id)))?;
        let bnd = match opts.postprocess.is_some() && has_bnd {
            true => Some(read_map(&dir.join(format!("bnd_{}.pgm", s.id)))?),
            false => None,
        };
        total += score_prediction(&seg, bnd.as_ref(), &s.seg_mask, opts)
            .with_context(|| format!("scoring sample {}", s.id))?;
    }
    Ok((metrics(total), has_bnd))
}

pub struct EvalRequest<'a> {
    pub checkpoint: Option<&'a Path>,
    pub predictions: Option<&'a Path>,
}

pub fn eval_cmd(cfg: &Config, req: &EvalRequest, out: &Path, force: bool) -> Result<String> {
    let ds = open_dataset(cfg)?;
    let subset = cfg.eval.subset;
    let opts = EvalOptions {
        threshold: cfg.train.threshold,
        postprocess: cfg.eval.postprocess.then_some(cfg.eval.se_radius),
        batch_size: cfg.train.batch_size,
    };
    let samples = ds.subset(subset);
    let (label, report) = match (req.checkpoint, req.predictions) {
        (Some(path), None) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load {}", path.display()))?;
            let expected = cfg.model_config();
            ensure!(
                *ckpt.model.config() == expected,
                "checkpoint model {:?} does not match the configured model {:?}",
                ckpt.model.config(),
                expected
            );
            if cfg.eval.postprocess && !ckpt.tasks.boundary {
                bail!("post-processing needs a boundary head, but the checkpoint was trained on {}", ckpt.tasks);
            }
            (ckpt.tasks.to_string(), evaluate(&ckpt.model, samples, &opts)?)
        }
        (None, Some(dir)) => {
            let (report, has_bnd) = score_prediction_dir(dir, &samples, &opts)?;
            if cfg.eval.postprocess && !has_bnd {
                bail!("post-processing needs bnd_<id>.pgm maps in {}", dir.display());
            }
            let tasks = if has_bnd { TaskSet::S_B } else { TaskSet::S };
            (tasks.to_string(), report)
        }
        _ => bail!("exactly one of --checkpoint and --predictions is required"),
    };
    let label = if cfg.eval.postprocess { format!("{label}+P") } else { label };
    let csv = format!("{REPORT_HEADER}\n{}\n", report_row(&label, subset, &report, &cfg.train.seeds));
    claim_outputs(out, &[EVAL_FILE], force)?;
    write(out.join(EVAL_FILE), &csv)?;
    Ok(csv)
}

pub fn sweep_cmd(cfg: &Config, out: &Path, force: bool, verbose: bool) -> Result<String> {
    ensure!(
        cfg.train.weighting == WeightingMode::Fixed,
        "the weight sweep needs `weighting = fixed` in [train]"
    );
    let grid: Vec<(f64, f64)> = cfg
        .sweep
        .w_bnd
        .iter()
        .flat_map(|&b| cfg.sweep.w_rec.iter().map(move |&r| (b, r)))
        .collect();
    ensure!(!grid.is_empty(), "the sweep grid is empty");
    let ds = open_dataset(cfg)?;
    claim_outputs(out, &[SWEEP_FILE, SWEEP_GRID_FILE], force)?;

    let base = cfg.train_config();
    let results = grid
        .par_iter()
        .map(|&(w_bnd, w_rec)| {
            let tc = TrainConfig {
                tasks: TaskSet::S_B_R,
                weighting: Weighting::Fixed(TaskWeights::new(cfg.train.weights.seg, w_bnd, w_rec)?),
                ..base.clone()
            };
            run_training(cfg, &tc, &ds, None, verbose).map(|r| r.test)
        })
        .collect::<Result<Vec<_>>>()?;

    let seeds = seed_fields(&base.seeds);
    let mut csv = format!("w_bnd,w_rec,iou,f1,{SEED_HEADER}\n");
    for ((b, r), m) in grid.iter().zip(&results) {
        writeln!(csv, "{b},{r},{:.6},{:.6},{seeds}", m.iou, m.f1).unwrap();
    }
    // test IoU laid out as a w_bnd × w_rec matrix for heat-map plotting
    let mut plot = format!("w_bnd\\w_rec {}\n", cfg.sweep.w_rec.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" "));
    for (i, b) in cfg.sweep.w_bnd.iter().enumerate() {
        let row: Vec<String> = (0..cfg.sweep.w_rec.len())
            .map(|j| format!("{:.6}", results[i * cfg.sweep.w_rec.len() + j].iou))
            .collect();
        writeln!(plot, "{b} {}", row.join(" ")).unwrap();
    }
    write(out.join(SWEEP_FILE), &csv)?;
    write(out.join(SWEEP_GRID_FILE), &plot)?;
    Ok(csv)
}

/// Row labels of the ablation table, in order.
pub const ABLATION_ROWS: [&str; 5] = ["S", "S+R", "S+B", "S+B+R", "S+B+R+P"];

fn run_dir_name(tasks: TaskSet) -> String {
    tasks.to_string().to_lowercase().replace('+', "_")
}

pub fn ablation_cmd(cfg: &Config, out: &Path, force: bool, verbose: bool) -> Result<String> {
    let ds = open_dataset(cfg)?;
    claim_outputs(out, &[ABLATION_FILE], force)?;
    let base = cfg.train_config();
    let task_sets = [TaskSet::S, TaskSet::S_R, TaskSet::S_B, TaskSet::S_B_R];
    for tasks in task_sets {
        claim_outputs(&out.join(run_dir_name(tasks)), &RUN_FILES, force)?;
    }

    let runs = task_sets
        .par_iter()
        .map(|&tasks| {
            let weighting = match base.weighting {
                Weighting::Fixed(w) => Weighting::Fixed(TaskWeights {
                    seg: w.seg,
                    bnd: if tasks.boundary { w.bnd } else { 0.0 },
                    rec: if tasks.reconstruction { w.rec } else { 0.0 },
                }),
                Weighting::Uncertainty => Weighting::Uncertainty,
            };
            let tc = TrainConfig {
                tasks,
                weighting,
                ..base.clone()
            };
            run_training(cfg, &tc, &ds, Some(&out.join(run_dir_name(tasks))), verbose)
        })
        .collect::<Result<Vec<_>>>()?;

    // post-processing is evaluation-only: reuse the S+B+R model
    let full = &runs[3];
    let opts = EvalOptions {
        threshold: base.threshold,
        postprocess: Some(cfg.eval.se_radius),
        batch_size: base.batch_size,
    };
    let with_p = evaluate(&full.outcome.model, ds.subset(Subset::Test), &opts)?;

    let mut csv = format!("{REPORT_HEADER}\n");
    let reports = runs.iter().map(|r| &r.test).chain(std::iter::once(&with_p));
    for (label, m) in ABLATION_ROWS.iter().zip(reports) {
        writeln!(csv, "{}", report_row(label, Subset::Test, m, &base.seeds)).unwrap();
    }
    write(out.join(ABLATION_FILE), &csv)?;
    Ok(csv)
}
