//! Three-headed fully-convolutional encoder-decoder.
//!
//! One shared encoder (two 3×3 conv+ReLU per level, then 2×2 max-pool), a
//! bottleneck block, and three decoders for segmentation, boundary and
//! reconstruction. Each decoder level upsamples ×2 (nearest), optionally
//! concatenates the encoder feature map of matching resolution, then applies a
//! 3×3 conv+ReLU. The reconstruction decoder never sees encoder skips, so the
//! image has to be regenerated from the bottleneck alone.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::loss::{Task, TaskSet};
use crate::tensor::{Gradients, Parameter, Tape, Tensor, TensorError, Var};

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("depth must be positive")]
    ZeroDepth,
    #[error("depth {depth} needs {depth} widths, got {widths}")]
    WidthsMismatch { depth: usize, widths: usize },
    #[error("channel widths and in_channels must be positive")]
    ZeroWidth,
    #[error("the reconstruction head must not use skip connections")]
    ReconstructionSkip,
    #[error("segmentation and boundary heads require skip connections")]
    MissingSkip,
    #[error("input {h}x{w} is not divisible by {required} (2^depth)")]
    Indivisible { h: usize, w: usize, required: usize },
    #[error("model expects {expected} input channels, got {found}")]
    InputChannels { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

const KERNEL: usize = 3;

/// Architecture hyper-parameters.
///
/// `widths` lists decoder widths from the deepest level to the shallowest;
/// the encoder uses the same widths in reverse, and the bottleneck the widest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub seg_skip: bool,
    pub bnd_skip: bool,
    pub rec_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_widths(3, vec![32, 16, 8])
    }
}

impl ModelConfig {
    pub fn with_widths(in_channels: usize, widths: Vec<usize>) -> Self {
        ModelConfig {
            in_channels,
            depth: widths.len(),
            widths,
            seg_skip: true,
            bnd_skip: true,
            rec_skip: false,
        }
    }

    /// Five levels with decoder widths (256, 128, 64, 32, 16).
    pub fn large() -> Self {
        Self::with_widths(3, vec![256, 128, 64, 32, 16])
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(ModelError::ZeroDepth);
        }
        if self.widths.len() != self.depth {
            return Err(ModelError::WidthsMismatch {
                depth: self.depth,
                widths: self.widths.len(),
            });
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(ModelError::ZeroWidth);
        }
        if self.rec_skip {
            return Err(ModelError::ReconstructionSkip);
        }
        if !self.seg_skip || !self.bnd_skip {
            return Err(ModelError::MissingSkip);
        }
        Ok(())
    }

    /// Encoder widths, shallowest level first.
    pub fn encoder_widths(&self) -> Vec<usize> {
        self.widths.iter().rev().copied().collect()
    }

    pub fn bottleneck_width(&self) -> usize {
        self.widths[0]
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn skip(&self, head: Task) -> bool {
        match head {
            Task::Segmentation => self.seg_skip,
            Task::Boundary => self.bnd_skip,
            Task::Reconstruction => self.rec_skip,
        }
    }

    pub fn head_channels(&self, head: Task) -> usize {
        match head {
            Task::Segmentation | Task::Boundary => 1,
            Task::Reconstruction => self.in_channels,
        }
    }

    /// Every conv layer as `(cin, cout, kernel)` in registry order.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let enc = self.encoder_widths();
        let mut layers = Vec::new();
        let mut cin = self.in_channels;
        for &w in &enc {
            layers.push((cin, w, KERNEL));
            layers.push((w, w, KERNEL));
            cin = w;
        }
        let b = self.bottleneck_width();
        layers.push((cin, b, KERNEL));
        layers.push((b, b, KERNEL));
        for head in Task::ALL {
            let mut prev = b;
            for &w in &self.widths {
                let skip = if self.skip(head) { w } else { 0 };
                layers.push((prev + skip, w, KERNEL));
                prev = w;
            }
            layers.push((prev, self.head_channels(head), 1));
        }
        layers
    }

    /// Learnable scalars of the network alone.
    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|&(cin, cout, k)| cout * cin * k * k + cout).sum()
    }
}

/// Learnable scalars of a model built from `config`, plus the three
/// log-variances when uncertainty weighting is attached.
pub fn parameter_count(config: &ModelConfig, with_uncertainty: bool) -> usize {
    config.parameter_count() + if with_uncertainty { 3 } else { 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    blocks: Vec<ConvLayer>,
    output: ConvLayer,
    skip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
    encoder: Vec<[ConvLayer; 2]>,
    bottleneck: [ConvLayer; 2],
    heads: [Decoder; 3],
}

/// Tape handles for every parameter of a model, in registry order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Encoder outputs: skip features (shallowest first) and the bottleneck.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

/// Head outputs of one forward pass: segmentation and boundary logits, and
/// the sigmoid-squashed reconstruction.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub seg: Var,
    pub bnd: Option<Var>,
    pub rec: Option<Var>,
}

/// Per-pixel probabilities from [`Model::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub seg: Tensor,
    pub bnd: Tensor,
    pub recon: Tensor,
}

impl Model {
    /// Fresh model with He-normal conv weights and zero biases, drawn from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut make = |name: String, cin: usize, cout: usize, k: usize| {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let w: Vec<f32> = (0..cout * cin * k * k).map(|_| normal.sample(&mut rng) as f32).collect();
            let weight = params.len();
            params.push(Parameter::new(
                format!("{name}.weight"),
                Tensor::new((cout, cin, k, k), w).expect("consistent"),
            ));
            params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros((1, cout, 1, 1))));
            ConvLayer {
                weight,
                bias: weight + 1,
                padding: k / 2,
            }
        };

        let mut layers = config.layers().into_iter();
        let mut next = |name: String| {
            let (cin, cout, k) = layers.next().expect("layer list matches structure");
            make(name, cin, cout, k)
        };
        let encoder = (0..config.depth)
            .map(|l| [next(format!("enc{l}.conv0")), next(format!("enc{l}.conv1"))])
            .collect();
        let bottleneck = [next("mid.conv0".into()), next("mid.conv1".into())];
        let heads = Task::ALL.map(|head| {
            let tag = head.letter().to_ascii_lowercase();
            Decoder {
                blocks: (0..config.depth).map(|l| next(format!("dec_{tag}{l}.conv"))).collect(),
                output: next(format!("dec_{tag}.out")),
                skip: config.skip(head),
            }
        });
        Ok(Model {
            config,
            params,
            encoder,
            bottleneck,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every learnable tensor, each exactly once.
    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Registry indices of the parameters used only by `head`'s decoder.
    pub fn head_param_indices(&self, head: Task) -> Vec<usize> {
        let d = &self.heads[head.index()];
        d.blocks
            .iter()
            .chain(std::iter::once(&d.output))
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }

    /// Record every parameter on `tape`; trainable ones receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p)
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        BoundModel { vars }
    }

    fn conv(&self, tape: &mut Tape, b: &BoundModel, layer: ConvLayer, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, b.vars[layer.weight], b.vars[layer.bias], 1, layer.padding)?)
    }

    fn conv_relu(&self, tape: &mut Tape, b: &BoundModel, layer: ConvLayer, x: Var) -> Result<Var> {
        let y = self.conv(tape, b, layer, x)?;
        Ok(tape.relu(y))
    }

    pub fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.c != self.config.in_channels {
            return Err(ModelError::InputChannels {
                expected: self.config.in_channels,
                found: s.c,
            });
        }
        let m = self.config.size_multiple();
        if s.h % m != 0 || s.w % m != 0 {
            return Err(ModelError::Indivisible {
                h: s.h,
                w: s.w,
                required: m,
            });
        }
        Ok(())
    }

    pub fn encode(&self, tape: &mut Tape, b: &BoundModel, x: Var) -> Result<Encoded> {
        self.check_input(tape, x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for [c0, c1] in &self.encoder {
            h = self.conv_relu(tape, b, *c0, h)?;
            h = self.conv_relu(tape, b, *c1, h)?;
            skips.push(h);
            h = tape.max_pool2(h)?;
        }
        h = self.conv_relu(tape, b, self.bottleneck[0], h)?;
        h = self.conv_relu(tape, b, self.bottleneck[1], h)?;
        Ok(Encoded { skips, bottleneck: h })
    }

    /// Run one decoder. Segmentation and boundary return logits; the
    /// reconstruction head returns sigmoid outputs in (0, 1).
    pub fn decode(&self, tape: &mut Tape, b: &BoundModel, head: Task, enc: &Encoded) -> Result<Var> {
        let d = &self.heads[head.index()];
        let mut h = enc.bottleneck;
        for (level, block) in d.blocks.iter().enumerate() {
            h = tape.upsample2(h);
            if d.skip {
                let skip = enc.skips[self.config.depth - 1 - level];
                h = tape.concat_channels(h, skip)?;
            }
            h = self.conv_relu(tape, b, *block, h)?;
        }
        let out = self.conv(tape, b, d.output, h)?;
        Ok(match head {
            Task::Reconstruction => tape.sigmoid(out),
            _ => out,
        })
    }

    /// Encoder plus the decoders of the requested tasks.
    pub fn forward(&self, tape: &mut Tape, b: &BoundModel, x: Var, tasks: TaskSet) -> Result<HeadOutputs> {
        let enc = self.encode(tape, b, x)?;
        let seg = self.decode(tape, b, Task::Segmentation, &enc)?;
        let bnd = tasks
            .boundary
            .then(|| self.decode(tape, b, Task::Boundary, &enc))
            .transpose()?;
        let rec = tasks
            .reconstruction
            .then(|| self.decode(tape, b, Task::Reconstruction, &enc))
            .transpose()?;
        Ok(HeadOutputs { seg, bnd, rec })
    }

    /// Inference on a batch: segmentation and boundary probabilities and the
    /// reconstructed image.
    pub fn predict(&self, batch: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &b, x, TaskSet::S_B_R)?;
        let seg = tape.sigmoid(out.seg);
        let bnd = tape.sigmoid(out.bnd.expect("requested"));
        Ok(Prediction {
            seg: tape.value(seg).clone(),
            bnd: tape.value(bnd).clone(),
            recon: tape.value(out.rec.expect("requested")).clone(),
        })
    }

    /// Move gradients from a consumed tape onto the parameters.
    pub fn assign_grads(&mut self, grads: &mut Gradients, b: &BoundModel) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&b.vars) {
            grads.assign(v, p)?;
        }
        Ok(())
    }
}
