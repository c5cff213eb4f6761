//! Mini-batch training of the multi-task model and pixel-level evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{augment, random_crop, AugmentPolicy, DataError, Sample};
use crate::eval::{self, ConfusionCounts, EvalError, MetricsReport};
use crate::loss::{
    bce_loss, joint_loss_fixed, joint_loss_uncertainty, mae_loss, LossBreakdown, LossError, Task, TaskLosses, TaskSet,
    TaskWeights, UncertaintyParams,
};
use crate::nn::{Model, ModelConfig, ModelError};
use crate::tensor::{Sgd, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: {}", describe(.breakdown))]
    Diverged { step: usize, breakdown: LossBreakdown },
}

fn describe(b: &LossBreakdown) -> String {
    format!(
        "losses {:?}, joint {}, effective weights {:?}, log-variances {:?}",
        b.losses, b.joint, b.effective_weights, b.log_variances
    )
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// How task losses are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Fixed(TaskWeights),
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seeds {
    /// Weight initialisation.
    pub model: u64,
    /// Augmentation and cropping.
    pub data: u64,
    /// Mini-batch order.
    pub shuffle: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            model: seed,
            data: seed,
            shuffle: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tasks: TaskSet,
    pub weighting: Weighting,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Sgd,
    /// Side of the square training crops; `None` trains on full samples.
    pub crop_size: Option<usize>,
    pub augment: Option<AugmentPolicy>,
    pub seeds: Seeds,
    pub threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tasks: TaskSet::S,
            weighting: Weighting::Fixed(TaskWeights::SEG_ONLY),
            model: ModelConfig::default(),
            epochs: 300,
            batch_size: 4,
            optimizer: Sgd::default(),
            crop_size: None,
            augment: None,
            seeds: Seeds::all(0),
            threshold: eval::DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return bad(format!("invalid optimiser settings {o:?}"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(EvalError::InvalidThreshold(self.threshold).into());
        }
        if self.crop_size == Some(0) {
            return bad("crop size must be positive".into());
        }
        if let Weighting::Fixed(w) = &self.weighting {
            w.validate()?;
            if w.seg <= 0.0 {
                return bad("segmentation weight must be positive".into());
            }
            for task in [Task::Boundary, Task::Reconstruction] {
                if !self.tasks.contains(task) && w.get(task) != 0.0 {
                    return bad(format!("task {task} is not trained but has weight {}", w.get(task)));
                }
            }
        }
        Ok(())
    }

    /// Heads that take part in the loss: tasks in the set, minus zero-weight
    /// tasks in fixed mode.
    pub fn active_tasks(&self) -> TaskSet {
        match &self.weighting {
            Weighting::Fixed(w) => TaskSet {
                boundary: self.tasks.boundary && w.bnd > 0.0,
                reconstruction: self.tasks.reconstruction && w.rec > 0.0,
            },
            Weighting::Uncertainty => self.tasks,
        }
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_joint: f64,
    /// `None` when there is no validation data.
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation model, or the final one without validation data.
    pub model: Model,
    pub uncertainty: Option<UncertaintyParams>,
    pub best_epoch: usize,
    pub final_model: Model,
    /// One entry per optimisation step.
    pub losses: Vec<LossBreakdown>,
    pub epochs: Vec<EpochReport>,
}

fn prepare(sample: &Sample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut s = match &cfg.augment {
        Some(policy) => augment(sample, rng, policy)?,
        None => sample.clone(),
    };
    if let Some(size) = cfg.crop_size {
        if size != s.height() || size != s.width() {
            s = random_crop(&s, size, rng)?;
        }
    }
    Ok(s)
}

fn stack(samples: &[Sample], pick: impl Fn(&Sample) -> &Tensor) -> Result<Tensor> {
    let parts: Vec<&Tensor> = samples.iter().map(pick).collect();
    Ok(Tensor::stack(&parts)?)
}

struct Step<'a> {
    cfg: &'a TrainConfig,
    active: TaskSet,
    model: &'a mut Model,
    uncertainty: Option<&'a mut UncertaintyParams>,
}

impl Step<'_> {
    fn run(&mut self, batch: &[Sample], step: usize) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let bound_s = self.uncertainty.as_deref().map(|u| u.bind(&mut tape));
        let image = tape.constant(stack(batch, |s| &s.image)?);
        let out = self.model.forward(&mut tape, &bound, image, self.active)?;

        let seg_t = tape.constant(stack(batch, |s| &s.seg_mask)?);
        let seg = bce_loss(&mut tape, out.seg, seg_t)?;
        let bnd = match out.bnd {
            Some(logits) => {
                let t = tape.constant(stack(batch, |s| &s.bnd_mask)?);
                Some(bce_loss(&mut tape, logits, t)?)
            }
            None => None,
        };
        let rec = out.rec.map(|r| mae_loss(&mut tape, r, image)).transpose()?;
        let losses = TaskLosses { seg, bnd, rec };

        let raw = Task::ALL.map(|t| losses.get(t).map(|v| tape.value(v).item()));
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.diverged(step, raw));
        }
        let (joint, breakdown) = match (&self.cfg.weighting, bound_s) {
            (Weighting::Fixed(w), _) => joint_loss_fixed(&mut tape, &losses, w)?,
            (Weighting::Uncertainty, Some(b)) => joint_loss_uncertainty(&mut tape, &losses, &b)?,
            (Weighting::Uncertainty, None) => unreachable!("uncertainty parameters exist in uncertainty mode"),
        };
        if !breakdown.joint.is_finite() {
            return Err(TrainError::Diverged { step, breakdown });
        }

        let mut grads = tape.backward(joint)?;
        self.model.assign_grads(&mut grads, &bound)?;
        if let (Some(u), Some(b)) = (self.uncertainty.as_deref_mut(), bound_s) {
            for (p, &v) in u.params_mut().iter_mut().zip(&b.vars) {
                grads.assign(v, p)?;
            }
        }
        let opt = &self.cfg.optimizer;
        match self.uncertainty.as_deref_mut() {
            Some(u) => opt.step(self.model.params_mut().iter_mut().chain(u.params_mut().iter_mut()))?,
            None => opt.step(self.model.params_mut().iter_mut())?,
        }
        Ok(breakdown)
    }

    fn diverged(&self, step: usize, raw: [Option<f32>; 3]) -> TrainError {
        let (weights, s) = match (&self.cfg.weighting, self.uncertainty.as_deref()) {
            (Weighting::Fixed(w), _) => (w.as_array().map(|v| v as f32), None),
            (_, Some(u)) => {
                let s = u.values();
                (
                    Task::ALL.map(|t| {
                        let w = (-s[t.index()]).exp();
                        if t == Task::Reconstruction {
                            0.5 * w
                        } else {
                            w
                        }
                    }),
                    Some(s),
                )
            }
            _ => ([0.0; 3], None),
        };
        TrainError::Diverged {
            step,
            breakdown: LossBreakdown {
                losses: raw,
                joint: f32::NAN,
                effective_weights: weights,
                regularizers: s.map(|s| s.map(|v| 0.5 * v)).unwrap_or([0.0; 3]),
                log_variances: s,
            },
        }
    }
}

/// Train a fresh model. `progress` is called after every epoch.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut progress: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::InvalidConfig("training set is empty".into()));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seeds.model)?;
    let mut uncertainty = matches!(cfg.weighting, Weighting::Uncertainty).then(UncertaintyParams::new);
    let active = cfg.active_tasks();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);

    let mut losses = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch(train_set.len()));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model, Option<UncertaintyParams>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut joint_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| prepare(&train_set[i], cfg, &mut data_rng))
                .collect::<Result<Vec<_>>>()?;
            let mut step = Step {
                cfg,
                active,
                model: &mut model,
                uncertainty: uncertainty.as_mut(),
            };
            let b = step.run(&batch, losses.len())?;
            joint_sum += b.joint as f64;
            steps += 1;
            losses.push(b);
        }

        let val = if val_set.is_empty() {
            None
        } else {
            let opts = EvalOptions {
                threshold: cfg.threshold,
                postprocess: None,
                batch_size: cfg.batch_size,
            };
            Some(evaluate(&model, val_set.iter(), &opts)?)
        };
        if let Some(m) = &val {
            if best.as_ref().is_none_or(|b| m.iou > b.0) {
                best = Some((m.iou, epoch, model.clone(), uncertainty.clone()));
            }
        }
        let report = EpochReport {
            epoch,
            mean_joint: joint_sum / steps as f64,
            val,
        };
        progress(&report);
        epochs.push(report);
    }

    let (best_epoch, best_model, best_u) = match best {
        Some((_, e, m, u)) => (e, m, u),
        None => (cfg.epochs - 1, model.clone(), uncertainty.clone()),
    };
    Ok(TrainOutcome {
        model: best_model,
        uncertainty: best_u,
        best_epoch,
        final_model: model,
        losses,
        epochs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub threshold: f32,
    /// Structuring-element radius for boundary fusion and opening; `None`
    /// scores the thresholded segmentation directly.
    pub postprocess: Option<usize>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: eval::DEFAULT_THRESHOLD,
            postprocess: None,
            batch_size: 8,
        }
    }
}

/// Confusion counts of one predicted map against its mask. Probability maps
/// are thresholded; with post-processing the boundary map is required.
pub fn score_prediction(
    seg_prob: &Tensor,
    bnd_prob: Option<&Tensor>,
    gt: &Tensor,
    opts: &EvalOptions,
) -> Result<ConfusionCounts> {
    let seg = eval::threshold(seg_prob, opts.threshold)?;
    let pred = match (opts.postprocess, bnd_prob) {
        (None, _) => seg,
        (Some(r), Some(bnd)) => eval::fuse_postprocess(&seg, &eval::threshold(bnd, opts.threshold)?, r)?,
        (Some(_), None) => {
            return Err(TrainError::InvalidConfig(
                "post-processing needs a boundary prediction".into(),
            ))
        }
    };
    Ok(eval::confusion(&pred, gt)?)
}

/// Segmentation metrics of `model` over `samples`, aggregated pixelwise.
pub fn evaluate<'a>(
    model: &Model,
    samples: impl IntoIterator<Item = &'a Sample>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let samples: Vec<&Sample> = samples.into_iter().collect();
    let tasks = if opts.postprocess.is_some() { TaskSet::S_B } else { TaskSet::S };
    let mut total = ConfusionCounts::default();
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::stack(&images)?);
        let out = model.forward(&mut tape, &b, x, tasks)?;
        let seg = tape.sigmoid(out.seg);
        let bnd = out.bnd.map(|v| tape.sigmoid(v));
        for (i, s) in chunk.iter().enumerate() {
            let seg_i = tape.value(seg).batch_item(i);
            let bnd_i = bnd.map(|v| tape.value(v).batch_item(i));
            total += score_prediction(&seg_i, bnd_i.as_ref(), &s.seg_mask, opts)?;
        }
    }
    Ok(eval::metrics(total))
}
