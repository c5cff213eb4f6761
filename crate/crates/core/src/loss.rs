//! Task losses and the two ways of combining them into one objective.
//!
//! * Fixed weighting: `L = w_seg·L_seg + w_bnd·L_bnd + w_rec·L_rec`.
//! * Homoscedastic-uncertainty weighting with learnable log-variances
//!   `s_t = log σ_t²`:
//!
//!   ```text
//!   L = e^(-s_seg)·L_seg + s_seg/2
//!     + e^(-s_bnd)·L_bnd + s_bnd/2
//!     + ½·e^(-s_rec)·L_rec + s_rec/2
//!   ```
//!
//!   Classification tasks (segmentation, boundary) carry weight `1/σ²`, the
//!   reconstruction regression task `1/(2σ²)`. Each `s_t/2 = log σ_t` term
//!   keeps σ from growing without bound.

use std::fmt;

use thiserror::Error;

use crate::tensor::{Parameter, Real, Shape, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("target must be binary (0 or 1), found {0}")]
    NonBinaryTarget(f64),
    #[error("task weights must be non-negative with at least one positive, got {0}")]
    InvalidWeights(TaskWeights),
    #[error("{0} loss is weighted but was not computed")]
    MissingTask(Task),
    #[error("non-finite {task} loss ({value})")]
    NonFinite { task: Task, value: f64 },
    #[error("constant loss must be positive, got {0}")]
    NonPositiveLoss(f64),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// The three tasks of the multi-task model, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Segmentation,
    Boundary,
    Reconstruction,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Segmentation, Task::Boundary, Task::Reconstruction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Segmentation | Task::Boundary => TaskKind::Classification,
            Task::Reconstruction => TaskKind::Regression,
        }
    }

    /// Single-letter label used in experiment names (`S`, `B`, `R`).
    pub fn letter(self) -> char {
        match self {
            Task::Segmentation => 'S',
            Task::Boundary => 'B',
            Task::Reconstruction => 'R',
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Segmentation => "segmentation",
            Task::Boundary => "boundary",
            Task::Reconstruction => "reconstruction",
        })
    }
}

/// Which tasks are trained. Segmentation is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskSet {
    pub boundary: bool,
    pub reconstruction: bool,
}

impl TaskSet {
    pub const S: TaskSet = TaskSet::new(false, false);
    pub const S_R: TaskSet = TaskSet::new(false, true);
    pub const S_B: TaskSet = TaskSet::new(true, false);
    pub const S_B_R: TaskSet = TaskSet::new(true, true);

    pub const fn new(boundary: bool, reconstruction: bool) -> Self {
        TaskSet {
            boundary,
            reconstruction,
        }
    }

    pub fn contains(&self, task: Task) -> bool {
        match task {
            Task::Segmentation => true,
            Task::Boundary => self.boundary,
            Task::Reconstruction => self.reconstruction,
        }
    }

    pub fn tasks(self) -> impl Iterator<Item = Task> {
        Task::ALL.into_iter().filter(move |t| self.contains(*t))
    }

    /// Bit 0 segmentation, bit 1 boundary, bit 2 reconstruction.
    pub fn bits(&self) -> u32 {
        self.tasks().map(|t| 1 << t.index()).sum()
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        if bits & 1 == 0 || bits > 7 {
            return None;
        }
        Some(TaskSet::new(bits & 2 != 0, bits & 4 != 0))
    }

    /// Parse labels such as `S`, `S+B`, `S+B+R` (order and spacing free).
    pub fn parse(label: &str) -> Option<Self> {
        let mut bits = 0u32;
        for part in label.split('+') {
            let bit = match part.trim() {
                "S" | "s" => 1,
                "B" | "b" => 2,
                "R" | "r" => 4,
                _ => return None,
            };
            if bits & bit != 0 {
                return None;
            }
            bits |= bit;
        }
        Self::from_bits(bits)
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letters: Vec<String> = self.tasks().map(|t| t.letter().to_string()).collect();
        f.write_str(&letters.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

fn check_binary<T: Real>(t: &Tensor<T>) -> Result<()> {
    match t.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(LossError::NonBinaryTarget(v.to_f64_lossy())),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and a binary mask.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: Var) -> Result<Var> {
    check_binary(tape.value(target))?;
    Ok(tape.bce_with_logits(logits, target)?)
}

/// Mean absolute error; the subgradient at zero difference is zero.
pub fn mae_loss<T: Real>(tape: &mut Tape<T>, recon: Var, image: Var) -> Result<Var> {
    Ok(tape.l1(recon, image)?)
}

/// Fixed, hand-chosen contribution of each task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub seg: f64,
    pub bnd: f64,
    pub rec: f64,
}

impl TaskWeights {
    pub const SEG_ONLY: TaskWeights = TaskWeights {
        seg: 1.0,
        bnd: 0.0,
        rec: 0.0,
    };

    pub fn new(seg: f64, bnd: f64, rec: f64) -> Result<Self> {
        let w = TaskWeights { seg, bnd, rec };
        w.validate()?;
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.seg, self.bnd, self.rec]
    }

    pub fn get(&self, task: Task) -> f64 {
        self.as_array()[task.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        let valid = w.iter().all(|v| v.is_finite() && *v >= 0.0) && w.iter().any(|v| *v > 0.0);
        if valid {
            Ok(())
        } else {
            Err(LossError::InvalidWeights(*self))
        }
    }
}

impl fmt::Display for TaskWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.seg, self.bnd, self.rec)
    }
}

/// Scalar task losses recorded on a tape. Tasks whose head was not evaluated
/// are `None`.
#[derive(Debug, Clone, Copy)]
pub struct TaskLosses {
    pub seg: Var,
    pub bnd: Option<Var>,
    pub rec: Option<Var>,
}

impl TaskLosses {
    pub fn get(&self, task: Task) -> Option<Var> {
        match task {
            Task::Segmentation => Some(self.seg),
            Task::Boundary => self.bnd,
            Task::Reconstruction => self.rec,
        }
    }
}

/// Per-step record of how the joint objective was assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Raw task losses; `None` for tasks not evaluated this step.
    pub losses: [Option<f32>; 3],
    pub joint: f32,
    pub effective_weights: [f32; 3],
    pub regularizers: [f32; 3],
    /// Log-variances in uncertainty mode.
    pub log_variances: Option<[f32; 3]>,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,l_seg,l_bnd,l_rec,l_joint,w_seg_eff,w_bnd_eff,w_rec_eff,s_seg,s_bnd,s_rec";

    /// `Σ w_t·L_t + Σ r_t`, recomputed from the recorded parts.
    pub fn recombined(&self) -> f64 {
        (0..3)
            .map(|i| {
                self.effective_weights[i] as f64 * self.losses[i].unwrap_or(0.0) as f64 + self.regularizers[i] as f64
            })
            .sum()
    }

    /// One CSV row in the [`Self::CSV_HEADER`] layout. Tasks that were not
    /// evaluated, and log-variances in fixed mode, are left empty.
    pub fn csv_row(&self, step: usize) -> String {
        fn opt(v: Option<f32>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let s = self.log_variances;
        format!(
            "{step},{},{},{},{},{},{},{},{},{},{}",
            opt(self.losses[0]),
            opt(self.losses[1]),
            opt(self.losses[2]),
            self.joint,
            self.effective_weights[0],
            self.effective_weights[1],
            self.effective_weights[2],
            opt(s.map(|s| s[0])),
            opt(s.map(|s| s[1])),
            opt(s.map(|s| s[2])),
        )
    }
}

fn scalar_of<T: Real>(tape: &Tape<T>, v: Var) -> Result<f64> {
    let s = tape.shape(v);
    if s != Shape::SCALAR {
        return Err(TensorError::NotScalar(s).into());
    }
    Ok(tape.value(v).item().to_f64_lossy())
}

fn add_terms<T: Real>(tape: &mut Tape<T>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("at least one term");
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn record<T: Real>(tape: &Tape<T>, losses: &TaskLosses) -> Result<[Option<f32>; 3]> {
    let mut out = [None; 3];
    for task in Task::ALL {
        if let Some(v) = losses.get(task) {
            let value = scalar_of(tape, v)?;
            if !value.is_finite() {
                return Err(LossError::NonFinite { task, value });
            }
            out[task.index()] = Some(value as f32);
        }
    }
    Ok(out)
}

/// `Σ w_t·L_t` over the tasks with non-zero weight.
pub fn joint_loss_fixed<T: Real>(
    tape: &mut Tape<T>,
    losses: &TaskLosses,
    weights: &TaskWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let recorded = record(tape, losses)?;
    let mut terms = Vec::new();
    for task in Task::ALL {
        let w = weights.get(task);
        if w == 0.0 {
            continue;
        }
        let l = losses.get(task).ok_or(LossError::MissingTask(task))?;
        terms.push(if w == 1.0 { l } else { tape.scale(l, T::from_f64_lossy(w)) });
    }
    let joint = add_terms(tape, terms)?;
    let breakdown = LossBreakdown {
        losses: recorded,
        joint: tape.value(joint).item().to_f64_lossy() as f32,
        effective_weights: weights.as_array().map(|w| w as f32),
        regularizers: [0.0; 3],
        log_variances: None,
    };
    Ok((joint, breakdown))
}

/// Learnable log-variances `s_t = log σ_t²`, one per task, starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyParams<T: Real = f32> {
    params: [Parameter<T>; 3],
}

impl<T: Real> Default for UncertaintyParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> UncertaintyParams<T> {
    pub fn new() -> Self {
        Self::from_values([0.0; 3])
    }

    pub fn from_values(s: [f64; 3]) -> Self {
        let names = ["s_seg", "s_bnd", "s_rec"];
        UncertaintyParams {
            params: [0, 1, 2].map(|i| Parameter::decay_exempt(names[i], Tensor::scalar(T::from_f64_lossy(s[i])))),
        }
    }

    pub fn get(&self, task: Task) -> T {
        self.params[task.index()].value.item()
    }

    pub fn values(&self) -> [T; 3] {
        [0, 1, 2].map(|i| self.params[i].value.item())
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn params(&self) -> &[Parameter<T>; 3] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>; 3] {
        &mut self.params
    }

    /// Record all three log-variances on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundUncertainty {
        BoundUncertainty {
            vars: [0, 1, 2].map(|i| tape.param(&self.params[i])),
        }
    }
}

/// Tape handles of the three log-variances for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundUncertainty {
    pub vars: [Var; 3],
}

impl BoundUncertainty {
    pub fn get(&self, task: Task) -> Var {
        self.vars[task.index()]
    }
}

/// Uncertainty-weighted joint loss over the tasks present in `losses`.
/// Absent tasks contribute nothing and get zero effective weight.
pub fn joint_loss_uncertainty<T: Real>(
    tape: &mut Tape<T>,
    losses: &TaskLosses,
    u: &BoundUncertainty,
) -> Result<(Var, LossBreakdown)> {
    let recorded = record(tape, losses)?;
    let half = T::from_f64_lossy(0.5);
    let mut terms = Vec::new();
    let mut weights = [0.0f32; 3];
    let mut regs = [0.0f32; 3];
    let mut s_values = [0.0f32; 3];
    for task in Task::ALL {
        let s = u.get(task);
        let s_val = scalar_of(tape, s)?;
        s_values[task.index()] = s_val as f32;
        let Some(l) = losses.get(task) else { continue };
        if !s_val.is_finite() {
            return Err(LossError::NonFinite { task, value: s_val });
        }
        let neg = tape.scale(s, -T::one());
        let mut w = tape.exp(neg);
        if task.kind() == TaskKind::Regression {
            w = tape.scale(w, half);
        }
        let weighted = tape.mul(w, l)?;
        let reg = tape.scale(s, half);
        weights[task.index()] = tape.value(w).item().to_f64_lossy() as f32;
        regs[task.index()] = tape.value(reg).item().to_f64_lossy() as f32;
        terms.push(weighted);
        terms.push(reg);
    }
    let joint = add_terms(tape, terms)?;
    let breakdown = LossBreakdown {
        losses: recorded,
        joint: tape.value(joint).item().to_f64_lossy() as f32,
        effective_weights: weights,
        regularizers: regs,
        log_variances: Some(s_values),
    };
    Ok((joint, breakdown))
}

/// Minimiser of one task's uncertainty term for a loss held constant at `loss`:
/// `ln(2L)` for `e^(-s)·L + s/2`, `ln L` for `½e^(-s)·L + s/2`.
pub fn optimal_s_for_constant_loss(loss: f64, kind: TaskKind) -> Result<f64> {
    if !(loss > 0.0) {
        return Err(LossError::NonPositiveLoss(loss));
    }
    Ok(match kind {
        TaskKind::Classification => (2.0 * loss).ln(),
        TaskKind::Regression => loss.ln(),
    })
}
