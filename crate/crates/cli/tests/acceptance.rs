//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtlseg_core::data::{extract_boundary, generate_scene, netpbm, write_dataset, Dataset, Sample, SceneConfig, Split, SplitSpec};
use mtlseg_core::eval::{confusion, dilate, erode, metrics, opening};
use mtlseg_core::loss::{bce_loss, joint_loss_uncertainty, mae_loss, BoundUncertainty, TaskLosses};
use mtlseg_core::tensor::{finite_diff_grad, sgd_step};
use mtlseg_core::train::{evaluate, train, EvalOptions, TrainConfig};
use mtlseg_core::{Checkpoint, Model, ModelConfig, Tape, TaskSet, Tensor, UncertaintyParams, Var};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn mtlseg(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mtlseg")).args(args).output().expect("spawn mtlseg");
    if !out.status.success() {
        eprintln!("mtlseg {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

// ---------------------------------------------------------------------------
// 1. gradient fidelity

const EPS: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const ABS_TOL: f64 = 1e-5;
const INSTANCES: usize = 20;

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Values at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(gap..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn compare(op: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>, worst: &mut f64) -> Result<(), String> {
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if err > ABS_TOL && err > REL_TOL * scale {
            return Err(format!("{op}: element {i} analytic {a:e} numeric {n:e}"));
        }
        *worst = worst.max(err);
    }
    Ok(())
}

/// Builds a scalar from the inputs; the closure receives one leaf per input.
type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Checks the gradient of `build` with respect to every input.
fn grad_check(op: &str, inputs: &[Tensor<f64>], build: &Build, worst: &mut f64) -> Result<(), String> {
    let eval = |values: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).map_err(|e| e.to_string())?;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).ok_or(format!("{op}: no gradient for input {k}"))?;
        let numeric = finite_diff_grad(
            |t| {
                let mut values = inputs.to_vec();
                values[k] = t.clone();
                eval(&values)
            },
            input,
            EPS,
        );
        compare(&format!("{op} input {k}"), analytic, &numeric, worst)?;
    }
    Ok(())
}

/// `Σ y ⊙ r` for a fixed random projection `r`, making any op scalar.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = tape.shape(y);
    let r = uniform(&mut rng, (s.n, s.c, s.h, s.w), -1.0, 1.0);
    let r = tape.constant(r);
    let m = tape.mul(y, r).unwrap();
    tape.sum(m)
}

/// Pool inputs whose 2×2 windows have a clear maximum.
fn poolable(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Tensor<f64> {
    let (n, c, h, w) = shape;
    let mut t = Tensor::zeros(shape);
    for b in 0..n {
        for ch in 0..c {
            for y in (0..h).step_by(2) {
                for x in (0..w).step_by(2) {
                    let mut levels = [0.0, 0.25, 0.5, 0.75];
                    for i in (1..4).rev() {
                        levels.swap(i, rng.random_range(0..=i));
                    }
                    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        t.set(b, ch, y + dy, x + dx, levels[k] + rng.random_range(-0.05..0.05));
                    }
                }
            }
        }
    }
    t
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..INSTANCES as u64 {
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (2 * rng.random_range(2..4), 2 * rng.random_range(2..4));
        let k = [1, 3][rng.random_range(0..2)];
        let (stride, padding) = (rng.random_range(1..3), rng.random_range(0..2));
        if (h + 2 * padding) < k || (w + 2 * padding) < k || (h + 2 * padding - k) % stride != 0 || (w + 2 * padding - k) % stride != 0 {
            // fall back to a geometry every kernel accepts
            let x = uniform(&mut rng, (n, cin, h, w), -1.0, 1.0);
            let wt = uniform(&mut rng, (cout, cin, 3, 3), -1.0, 1.0);
            let b = uniform(&mut rng, (1, cout, 1, 1), -1.0, 1.0);
            grad_check("conv2d", &[x, wt, b], &move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                project(t, y, i)
            }, &mut worst)?;
        } else {
            let x = uniform(&mut rng, (n, cin, h, w), -1.0, 1.0);
            let wt = uniform(&mut rng, (cout, cin, k, k), -1.0, 1.0);
            let b = uniform(&mut rng, (1, cout, 1, 1), -1.0, 1.0);
            grad_check("conv2d", &[x, wt, b], &move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
                project(t, y, i)
            }, &mut worst)?;
        }

        let x = away_from_zero(&mut rng, (n, 2, h, w), 0.01);
        grad_check("relu", &[x], &move |t, v| {
            let y = t.relu(v[0]);
            project(t, y, i)
        }, &mut worst)?;

        let x = uniform(&mut rng, (n, 2, h, w), -4.0, 4.0);
        grad_check("sigmoid", &[x], &move |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, i)
        }, &mut worst)?;

        let x = poolable(&mut rng, (n, 2, h, w));
        grad_check("max_pool2", &[x], &move |t, v| {
            let y = t.max_pool2(v[0]).unwrap();
            project(t, y, i)
        }, &mut worst)?;

        let x = uniform(&mut rng, (n, 2, h / 2, w / 2), -1.0, 1.0);
        grad_check("upsample2", &[x], &move |t, v| {
            let y = t.upsample2(v[0]);
            project(t, y, i)
        }, &mut worst)?;

        let a = uniform(&mut rng, (n, 1 + i as usize % 3, h, w), -1.0, 1.0);
        let b = uniform(&mut rng, (n, 2, h, w), -1.0, 1.0);
        grad_check("concat_channels", &[a, b], &move |t, v| {
            let y = t.concat_channels(v[0], v[1]).unwrap();
            project(t, y, i)
        }, &mut worst)?;

        let logits = uniform(&mut rng, (n, 1, h, w), -5.0, 5.0);
        let target = Tensor::from_fn((n, 1, h, w), |_, _, _, _| rng.random_range(0..2) as f64);
        grad_check("bce_loss", &[logits], &move |t, v| {
            let tg = t.constant(target.clone());
            bce_loss(t, v[0], tg).unwrap()
        }, &mut worst)?;

        let image = uniform(&mut rng, (n, 3, h, w), 0.0, 1.0);
        let offset = away_from_zero(&mut rng, (n, 3, h, w), 0.01);
        let mut recon = image.clone();
        for (r, o) in recon.data_mut().iter_mut().zip(offset.data()) {
            *r += o * 0.2;
        }
        grad_check("mae_loss", &[recon], &move |t, v| {
            let im = t.constant(image.clone());
            mae_loss(t, v[0], im).unwrap()
        }, &mut worst)?;

        let losses: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::scalar(rng.random_range(0.05..3.0))).collect();
        let s: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::scalar(rng.random_range(-2.0..2.0))).collect();
        let inputs: Vec<Tensor<f64>> = losses.into_iter().chain(s).collect();
        grad_check("joint_loss_uncertainty (L and s)", &inputs, &|t, v| {
            let l = TaskLosses {
                seg: v[0],
                bnd: Some(v[1]),
                rec: Some(v[2]),
            };
            let u = BoundUncertainty { vars: [v[3], v[4], v[5]] };
            joint_loss_uncertainty(t, &l, &u).unwrap().0
        }, &mut worst)?;
        checked += 9;
    }
    Ok(format!(
        "{checked} op instances ({INSTANCES} per op) in f64, max |analytic - numeric| {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. closed forms of the uncertainty-weighted loss

fn criterion_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let l: [f64; 3] = [0; 3].map(|_| rng.random_range(0.0..10.0));
        let mut tape = Tape::<f64>::new();
        let v = l.map(|x| tape.constant(Tensor::scalar(x)));
        let u = UncertaintyParams::<f64>::new().bind(&mut tape);
        let losses = TaskLosses {
            seg: v[0],
            bnd: Some(v[1]),
            rec: Some(v[2]),
        };
        let (j, _) = joint_loss_uncertainty(&mut tape, &losses, &u).map_err(|e| e.to_string())?;
        let err = (tape.value(j).item() - (l[0] + l[1] + 0.5 * l[2])).abs();
        max_err = max_err.max(err);
    }
    check!(max_err <= 1e-6, "s = 0 deviates from L_seg + L_bnd + L_rec/2 by {max_err:e}");

    let frozen = [1.0, 4.0, 2.0];
    let target = [2f64.ln(), 8f64.ln(), 2f64.ln()];
    let mut u = UncertaintyParams::<f64>::new();
    let mut steps = 0;
    while steps < 5000 {
        let s = u.values();
        if (0..3).all(|i| (s[i] - target[i]).abs() <= 1e-2) {
            break;
        }
        let mut tape = Tape::<f64>::new();
        let v = frozen.map(|x| tape.constant(Tensor::scalar(x)));
        let b = u.bind(&mut tape);
        let losses = TaskLosses {
            seg: v[0],
            bnd: Some(v[1]),
            rec: Some(v[2]),
        };
        let (j, _) = joint_loss_uncertainty(&mut tape, &losses, &b).map_err(|e| e.to_string())?;
        let mut grads = tape.backward(j).map_err(|e| e.to_string())?;
        for (param, &var) in u.params_mut().iter_mut().zip(&b.vars) {
            grads.assign(var, param).map_err(|e| e.to_string())?;
        }
        sgd_step(u.params_mut().iter_mut(), 0.1, 0.0, 0.0).map_err(|e| e.to_string())?;
        steps += 1;
    }
    let s = u.values();
    let dist = (0..3).map(|i| (s[i] - target[i]).abs()).fold(0.0, f64::max);
    check!(dist <= 1e-2, "s = {s:?} after {steps} steps, target {target:?}");
    Ok(format!(
        "max |J - closed form| {max_err:.1e} over 100 triples; s -> ({:.4}, {:.4}, {:.4}) in {steps} steps",
        s[0], s[1], s[2]
    ))
}

// ---------------------------------------------------------------------------
// 3. oracle equivalence

fn random_mask(rng: &mut ChaCha8Rng) -> Tensor {
    let density = rng.random_range(0.05..0.95);
    Tensor::from_fn((1, 1, 16, 16), |_, _, _, _| rng.random_bool(density) as u8 as f32)
}

fn bit(m: &Tensor, y: i64, x: i64) -> bool {
    y >= 0 && x >= 0 && y < 16 && x < 16 && m.get(0, 0, y as usize, x as usize) != 0.0
}

fn oracle_from(f: impl Fn(i64, i64) -> bool) -> Tensor {
    Tensor::from_fn((1, 1, 16, 16), |_, _, y, x| f(y as i64, x as i64) as u8 as f32)
}

fn oracle_dilate(m: &Tensor, r: i64) -> Tensor {
    oracle_from(|y, x| (-r..=r).any(|dy| (-r..=r).any(|dx| bit(m, y + dy, x + dx))))
}

fn oracle_erode(m: &Tensor, r: i64) -> Tensor {
    oracle_from(|y, x| (-r..=r).all(|dy| (-r..=r).all(|dx| bit(m, y + dy, x + dx))))
}

fn criterion_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = 250;
    for case in 0..cases {
        let (pred, gt) = (random_mask(&mut rng), random_mask(&mut rng));
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..16 {
            for x in 0..16 {
                match (bit(&pred, y, x), bit(&gt, y, x)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let c = confusion(&pred, &gt).map_err(|e| e.to_string())?;
        check!((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), "case {case}: confusion {c:?}");
        let m = metrics(c);
        let union = tp + fp + fn_;
        let (iou, f1) = if union == 0 {
            (1.0, 1.0)
        } else {
            (tp as f64 / union as f64, 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        };
        check!(m.iou == iou && m.f1 == f1, "case {case}: metrics {m:?} vs ({iou}, {f1})");

        let boundary = oracle_from(|y, x| {
            bit(&gt, y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !bit(&gt, y + dy, x + dx))
        });
        check!(extract_boundary(&gt, 0).map_err(|e| e.to_string())? == boundary, "case {case}: boundary");

        let r = 1 + case % 2;
        let d = dilate(&gt, r).map_err(|e| e.to_string())?;
        let e = erode(&gt, r).map_err(|e| e.to_string())?;
        let o = opening(&gt, r).map_err(|e| e.to_string())?;
        let r = r as i64;
        check!(d == oracle_dilate(&gt, r), "case {case}: dilate r={r}");
        check!(e == oracle_erode(&gt, r), "case {case}: erode r={r}");
        check!(o == oracle_dilate(&oracle_erode(&gt, r), r), "case {case}: opening r={r}");
    }
    Ok(format!(
        "{cases} random 16x16 mask pairs: confusion, IoU/F1, boundary (r=0), erode/dilate/opening (r=1,2) all exact"
    ))
}

// ---------------------------------------------------------------------------
// 4. overfit capability

fn criterion_overfit() -> Outcome {
    let samples: Vec<Sample> = (0..8)
        .map(|i| generate_scene(&SceneConfig::default(), i))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        model: ModelConfig::with_widths(3, vec![32, 16, 8]),
        epochs: 300,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&cfg, &samples, &[], |_| {}).map_err(|e| e.to_string())?;
    let iou = evaluate(&out.final_model, samples.iter(), &EvalOptions::default())
        .map_err(|e| e.to_string())?
        .iou;
    let elapsed = start.elapsed();
    check!(iou >= 0.90, "train IoU {iou:.4} < 0.90 after 300 epochs");
    check!(elapsed < Duration::from_secs(15 * 60), "took {elapsed:?}");
    Ok(format!(
        "S-only depth 3 (32,16,8), 8 scenes 64x64, 300 epochs: train IoU {iou:.4} in {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 5. post-processing on the speckle fixture

fn block_mask(size: usize, blocks: &[(usize, usize, usize, usize)]) -> Tensor {
    Tensor::from_fn((1, 1, size, size), |_, _, y, x| {
        blocks.iter().any(|&(y0, x0, h, w)| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w) as u8 as f32
    })
}

fn criterion_postprocess(work: &Path) -> Outcome {
    let size = 32;
    let gt = block_mask(size, &[(4, 4, 8, 10), (18, 14, 9, 9)]);
    let speckles = [(2, 28), (14, 2), (28, 4), (16, 26), (29, 29)];
    let mut pred = gt.clone();
    for &(y, x) in &speckles {
        check!(pred.get(0, 0, y, x) == 0.0, "speckle ({y}, {x}) overlaps the footprint");
        pred.set(0, 0, y, x, 1.0);
    }
    let scene = SceneConfig {
        size,
        ..SceneConfig::default()
    };
    let sample = Sample {
        id: 0,
        image: Tensor::full((1, 3, size, size), 0.5),
        bnd_mask: extract_boundary(&gt, scene.boundary_radius).map_err(|e| e.to_string())?,
        seg_mask: gt,
    };
    let ds = Dataset {
        scene,
        split_spec: SplitSpec {
            ratios: [0.0, 0.0, 1.0],
            seed: 0,
        },
        samples: vec![sample],
        split: Split {
            test: vec![0],
            ..Split::default()
        },
    };
    let data = work.join("speckle_data");
    let preds = work.join("speckle_pred");
    write_dataset(&data, &ds).map_err(|e| e.to_string())?;
    fs::create_dir_all(&preds).map_err(|e| e.to_string())?;
    netpbm::write_netpbm(preds.join("seg_0.pgm"), &pred).map_err(|e| e.to_string())?;
    netpbm::write_netpbm(preds.join("bnd_0.pgm"), &Tensor::zeros((1, 1, size, size))).map_err(|e| e.to_string())?;
    let cfg = work.join("speckle.txt");
    fs::write(&cfg, format!("[data]\ndataset = {}\nsize = {size}\n", p(&data))).map_err(|e| e.to_string())?;

    let iou_of = |out: &Path, extra: &[&str]| -> Result<f64, String> {
        let mut args = vec!["eval", "--config", p(&cfg), "--predictions", p(&preds), "--out", p(out), "--force"];
        args.extend_from_slice(extra);
        let o = mtlseg(&args);
        check!(o.status.success(), "eval {extra:?} failed");
        let csv = fs::read_to_string(out.join("eval.csv")).map_err(|e| e.to_string())?;
        let header: Vec<&str> = csv.lines().next().unwrap_or_default().split(',').collect();
        let row: Vec<&str> = csv.lines().nth(1).unwrap_or_default().split(',').collect();
        let idx = header.iter().position(|h| *h == "iou").ok_or("no iou column")?;
        row.get(idx).and_then(|v| v.parse().ok()).ok_or_else(|| "bad iou".to_string())
    };
    let plain = iou_of(&work.join("speckle_eval"), &[])?;
    let post = iou_of(&work.join("speckle_eval_p"), &["--postprocess"])?;
    check!(post > plain, "post-processed IoU {post} not above {plain}");

    let once = opening(&pred, 1).map_err(|e| e.to_string())?;
    check!(opening(&once, 1).map_err(|e| e.to_string())? == once, "opening is not idempotent");
    Ok(format!("eval IoU {plain:.4} -> {post:.4} with --postprocess; opening idempotent"))
}

// ---------------------------------------------------------------------------
// 6. ablation harness

const ABLATION_LABELS: [&str; 5] = ["S", "S+R", "S+B", "S+B+R", "S+B+R+P"];

fn ablation_config(work: &Path, data: &Path) -> Result<PathBuf, String> {
    let cfg = work.join("ablation.txt");
    let text = format!(
        "[data]\ndataset = {}\ncount = 40\nsize = 32\nbuildings_min = 1\nbuildings_max = 3\n\
         building_size_min = 5\nbuilding_size_max = 11\nboundary_radius = 1\n\n\
         [model]\nwidths = 16,8\n\n[train]\nepochs = 25\nbatch_size = 4\nlr = 0.01\n",
        p(data)
    );
    fs::write(&cfg, text).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn ablation_ious(csv: &str) -> Result<Vec<f64>, String> {
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap_or("")).collect();
    check!(labels == ABLATION_LABELS, "row labels {labels:?}");
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(6).and_then(|v| v.parse().ok()).ok_or(format!("bad row {l}")))
        .collect()
}

fn criterion_ablation(work: &Path) -> Outcome {
    let data = work.join("ablation_data");
    let cfg = ablation_config(work, &data)?;
    check!(mtlseg(&["gen-data", "--config", p(&cfg), "--out", p(&data)]).status.success(), "gen-data failed");

    let seeds = [11u64, 12, 13];
    let mut tables = Vec::new();
    for seed in seeds {
        let out = work.join(format!("ablation_{seed}"));
        let o = mtlseg(&["ablation", "--config", p(&cfg), "--out", p(&out), "--seed", &seed.to_string()]);
        check!(o.status.success(), "ablation with seed {seed} failed");
        tables.push(fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?);
    }
    let again = work.join("ablation_11_again");
    let o = mtlseg(&["ablation", "--config", p(&cfg), "--out", p(&again), "--seed", "11"]);
    check!(o.status.success(), "repeated ablation failed");
    let repeat = fs::read_to_string(again.join("ablation.csv")).map_err(|e| e.to_string())?;
    check!(repeat == tables[0], "ablation output differs between identical runs");

    let mut mean = [0.0f64; 5];
    for (t, seed) in tables.iter().zip(seeds) {
        let ious = ablation_ious(t)?;
        let suffix = format!(",{seed},{seed},{seed}");
        check!(t.lines().skip(1).all(|l| l.ends_with(&suffix)), "seed columns differ from {seed}");
        for (m, v) in mean.iter_mut().zip(ious) {
            *m += v / seeds.len() as f64;
        }
    }
    let trend = if mean[3] >= mean[0] { "holds" } else { "does not hold" };
    let row_means: Vec<String> = ABLATION_LABELS.iter().zip(mean).map(|(l, m)| format!("{l} {m:.4}")).collect();
    Ok(format!(
        "5 labelled rows, byte-identical on rerun; mean test IoU over seeds {seeds:?}: {}; soft trend S+B+R >= S {trend} (not gating)",
        row_means.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 7. determinism

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        let bytes = fs::read(e.path()).map_err(|e| e.to_string())?;
        out.push((e.file_name().to_string_lossy().into_owned(), bytes));
    }
    out.sort();
    Ok(out)
}

fn criterion_determinism(work: &Path) -> Outcome {
    let cfg = work.join("determinism.txt");
    let data_a = work.join("det_data_a");
    let data_b = work.join("det_data_b");
    let text = format!(
        "[data]\ndataset = {}\ncount = 64\nsize = 32\nbuilding_size_min = 5\nbuilding_size_max = 11\n\n\
         [model]\nwidths = 8,8\n\n[train]\nepochs = 3\naugment = true\ncrop_size = 16\n",
        p(&data_a)
    );
    fs::write(&cfg, text).map_err(|e| e.to_string())?;
    for d in [&data_a, &data_b] {
        check!(mtlseg(&["gen-data", "--config", p(&cfg), "--out", p(d), "--seed", "7"]).status.success(), "gen-data failed");
    }
    let (a, b) = (dir_bytes(&data_a)?, dir_bytes(&data_b)?);
    check!(a == b, "gen-data directories differ");

    let runs = [work.join("det_run_a"), work.join("det_run_b")];
    for r in &runs {
        check!(mtlseg(&["train", "--config", p(&cfg), "--out", p(r)]).status.success(), "train failed");
    }
    for file in ["loss.csv", "checkpoint.bin"] {
        let x = fs::read(runs[0].join(file)).map_err(|e| e.to_string())?;
        let y = fs::read(runs[1].join(file)).map_err(|e| e.to_string())?;
        check!(x == y, "{file} differs between identical train runs");
    }
    Ok(format!(
        "gen-data (64 scenes, {} files) and train (loss.csv, checkpoint.bin) byte-identical across two invocations",
        a.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. file formats

fn criterion_formats(work: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut images = 0;
    for c in [1, 3] {
        for _ in 0..10 {
            let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
            let t = Tensor::from_fn((1, c, h, w), |_, _, _, _| rng.random_range(0..=255u8) as f32 / 255.0);
            let path = work.join(format!("img_{images}.pnm"));
            netpbm::write_netpbm(&path, &t).map_err(|e| e.to_string())?;
            let back = netpbm::read_netpbm(&path).map_err(|e| e.to_string())?;
            check!(back.shape() == t.shape(), "shape changed");
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            check!(same, "netpbm round trip not bit-exact");
            images += 1;
        }
    }

    let mut params = 0;
    for (seed, tasks) in [(1, TaskSet::S), (2, TaskSet::S_B_R)] {
        let model = Model::new(ModelConfig::with_widths(3, vec![8, 4]), seed).map_err(|e| e.to_string())?;
        let uncertainty = (tasks == TaskSet::S_B_R).then(|| UncertaintyParams::from_values([0.1, -0.7, 1.3]));
        let ckpt = Checkpoint {
            model,
            tasks,
            uncertainty,
        };
        let path = work.join(format!("ckpt_{seed}.bin"));
        ckpt.save(&path).map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        check!(back.tasks == ckpt.tasks && back.model.config() == ckpt.model.config(), "metadata changed");
        for (a, b) in back.model.params().iter().zip(ckpt.model.params()) {
            let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            check!(same, "parameter {} not restored bit-exactly", a.name());
            params += a.numel();
        }
        let s = |c: &Checkpoint| c.uncertainty.as_ref().map(|u| u.values().map(f32::to_bits));
        check!(s(&back) == s(&ckpt), "log-variances changed");
    }
    Ok(format!("{images} netpbm images (P5 and P6) and 2 checkpoints ({params} parameters) bit-exact"))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient fidelity", Box::new(criterion_gradients)),
        ("uncertainty loss closed forms", Box::new(criterion_closed_forms)),
        ("oracle equivalence", Box::new(criterion_oracles)),
        ("overfit capability", Box::new(criterion_overfit)),
        ("post-processing", Box::new(|| criterion_postprocess(w))),
        ("ablation harness", Box::new(|| criterion_ablation(w))),
        ("determinism", Box::new(|| criterion_determinism(w))),
        ("file formats", Box::new(|| criterion_formats(w))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.1}s) {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
