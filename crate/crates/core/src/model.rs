//! Convolutional backbone, shared prototype layer and cosine task heads.
//!
//! The prototype layer is the backbone's final convolution: each of its `D`
//! output channels is a prototype. A channel softmax at every location
//! followed by a spatial max gives the presence vector `p`. Task heads score
//! `p` by temperature-scaled cosine similarity against nonnegative weights.

use cipnet_tensor::{concat, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the presence-vector norm inside the cosine score.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub layers: Vec<ConvSpec>,
}

impl BackboneConfig {
    /// Stride-2 3x3 stages over `hidden` widths, then a 1x1 prototype layer
    /// with `prototypes` channels and no nonlinearity.
    pub fn new(image_size: usize, hidden: &[usize], prototypes: usize) -> Self {
        let mut layers: Vec<ConvSpec> = hidden
            .iter()
            .map(|&c| ConvSpec {
                out_channels: c,
                kernel: 3,
                stride: 2,
                padding: 1,
                relu: true,
            })
            .collect();
        layers.push(ConvSpec {
            out_channels: prototypes,
            kernel: 1,
            stride: 1,
            padding: 0,
            relu: false,
        });
        Self {
            in_channels: 3,
            image_size,
            layers,
        }
    }

    /// 3 -> 16 -> 32 -> 64 -> D; 56x56 inputs give a 7x7 prototype map.
    pub fn desk(image_size: usize, prototypes: usize) -> Self {
        Self::new(image_size, &[16, 32, 64], prototypes)
    }

    pub fn prototypes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn feature_size(&self) -> usize {
        self.layers.iter().fold(self.image_size, |s, l| {
            if s + 2 * l.padding < l.kernel {
                0
            } else {
                cipnet_tensor::conv_output_len(s, l.kernel, l.stride, l.padding)
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        if self.prototypes() < 2 {
            return Err(Error::Config("need at least 2 prototypes".into()));
        }
        if self.layers.iter().any(|l| l.stride == 0 || l.kernel == 0) {
            return Err(Error::Config("kernel and stride must be >= 1".into()));
        }
        let fs = self.feature_size();
        if fs < 2 {
            return Err(Error::Config(format!(
                "prototype map is {fs}x{fs}; local explanations need at least 2x2"
            )));
        }
        Ok(())
    }

    /// Number of backbone parameters implied by the layer specs alone.
    pub fn backbone_parameter_count(&self) -> usize {
        let mut c_in = self.in_channels;
        let mut total = 0;
        for l in &self.layers {
            total += l.out_channels * c_in * l.kernel * l.kernel + l.out_channels;
            c_in = l.out_channels;
        }
        total
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        let mut rf = ReceptiveField {
            size: 1,
            jump: 1,
            start: 0.0,
        };
        for l in &self.layers {
            rf.start += ((l.kernel as f64 - 1.0) / 2.0 - l.padding as f64) * rf.jump as f64;
            rf.size += (l.kernel - 1) * rf.jump;
            rf.jump *= l.stride;
        }
        rf
    }
}

/// Input-pixel footprint of one prototype-map cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptiveField {
    pub size: usize,
    pub jump: usize,
    /// Pixel coordinate of the centre of cell 0.
    pub start: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl ReceptiveField {
    /// Rectangle around map cell `(row, col)`, clipped to a square image.
    pub fn rect(&self, row: usize, col: usize, image_size: usize) -> PixelRect {
        let half = (self.size as f64 - 1.0) / 2.0;
        let span = |cell: usize| {
            let centre = self.start + (cell * self.jump) as f64;
            let lo = (centre - half).round().max(0.0) as usize;
            let hi = ((centre + half).round() as usize).min(image_size - 1);
            (lo, hi - lo + 1)
        };
        let (x, w) = span(col);
        let (y, h) = span(row);
        PixelRect { x, y, w, h }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// One task's classifier: `weights[c, d]` links class `class_ids[c]` to prototype `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead<T> {
    pub weights: Tensor<T>,
    pub class_ids: Vec<usize>,
    pub frozen: bool,
}

impl<T: Scalar> TaskHead<T> {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Project onto the nonnegative orthant.
    pub fn clamp_nonnegative(&mut self) {
        for w in self.weights.data_mut() {
            if *w < T::zero() {
                *w = T::zero();
            }
        }
    }
}

/// Head weights drawn from N(1, 0.1^2) and clamped at zero.
pub fn init_head<T: Scalar>(class_ids: Vec<usize>, prototypes: usize, seed: u64) -> TaskHead<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(1.0, 0.1).expect("valid normal");
    let weights = Tensor::from_fn(&[class_ids.len(), prototypes], |_| {
        T::of(f64::max(normal.sample(&mut rng), 0.0))
    });
    TaskHead {
        weights,
        class_ids,
        frozen: false,
    }
}

/// Backbone + prototype layer + ordered task heads + shared temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeModel<T> {
    pub config: BackboneConfig,
    pub layers: Vec<ConvLayer<T>>,
    pub heads: Vec<TaskHead<T>>,
    /// The temperature is stored as its logarithm so it stays positive.
    pub log_tau: T,
    pub learnable_tau: bool,
}

/// Which parameter groups receive gradients on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub backbone: bool,
    pub head: Option<usize>,
    pub tau: bool,
}

impl<T: Scalar> PrototypeModel<T> {
    /// He-uniform weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, and zero biases.
    pub fn new(config: BackboneConfig, tau: f64, learnable_tau: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = config.in_channels;
        let mut layers = Vec::with_capacity(config.layers.len());
        for spec in &config.layers {
            let fan_in = c_in * spec.kernel * spec.kernel;
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = Tensor::from_fn(
                &[spec.out_channels, c_in, spec.kernel, spec.kernel],
                |_| T::of(rng.random_range(-bound..bound)),
            );
            let bias = Tensor::zeros(&[spec.out_channels]);
            layers.push(ConvLayer { weight, bias });
            c_in = spec.out_channels;
        }
        Ok(Self {
            config,
            layers,
            heads: Vec::new(),
            log_tau: T::of(tau.ln()),
            learnable_tau,
        })
    }

    pub fn prototypes(&self) -> usize {
        self.config.prototypes()
    }

    pub fn tau(&self) -> T {
        self.log_tau.exp()
    }

    pub fn num_classes(&self) -> usize {
        self.heads.iter().map(|h| h.num_classes()).sum()
    }

    /// Append a head for a new task; class ids must be disjoint from every existing head.
    pub fn add_head(&mut self, head: TaskHead<T>) -> Result<()> {
        if head.weights.shape() != [head.class_ids.len(), self.prototypes()] {
            return Err(Error::Contract(format!(
                "head weights {:?} do not match {} classes x {} prototypes",
                head.weights.shape(),
                head.class_ids.len(),
                self.prototypes()
            )));
        }
        for existing in &self.heads {
            if let Some(c) = head.class_ids.iter().find(|c| existing.class_ids.contains(c)) {
                return Err(Error::Contract(format!("class {c} already owned by an earlier head")));
            }
        }
        self.heads.push(head);
        Ok(())
    }

    pub fn freeze_heads(&mut self) {
        self.heads.iter_mut().for_each(|h| h.frozen = true);
    }

    pub fn backbone_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Every learnable scalar: backbone (including the prototype layer),
    /// temperature and head weights.
    pub fn parameter_count(&self) -> usize {
        self.backbone_parameter_count()
            + 1
            + self.heads.iter().map(|h| h.weights.numel()).sum::<usize>()
    }

    /// Parameters spent on prototype reasoning beyond a plain conv stack
    /// with the same layer specs.
    pub fn prototype_layer_overhead(&self) -> usize {
        self.backbone_parameter_count() - self.config.backbone_parameter_count()
    }

    /// Named view of every tensor, used for checkpoints and hashing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("backbone/{i}/weight"), l.weight.clone()));
            out.push((format!("backbone/{i}/bias"), l.bias.clone()));
        }
        for (t, h) in self.heads.iter().enumerate() {
            out.push((format!("heads/{t}/weights"), h.weights.clone()));
        }
        out.push(("tau/log".to_string(), Tensor::scalar(self.log_tau)));
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: Trainable) -> BoundModel<'t, T> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone(), trainable.backbone),
                    tape.leaf(l.bias.clone(), trainable.backbone),
                )
            })
            .collect();
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| tape.leaf(h.weights.clone(), trainable.head == Some(i) && !h.frozen))
            .collect();
        let log_tau = tape.leaf(Tensor::scalar(self.log_tau), trainable.tau && self.learnable_tau);
        BoundModel {
            specs: self.config.layers.clone(),
            layers,
            heads,
            log_tau,
        }
    }

    /// Channel-softmaxed map and presence scores without recording gradients.
    pub fn forward_features(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_images(images)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, Trainable::default());
        let f = bound.features(tape.constant(images.clone()))?;
        Ok(((*f.zsoft.value()).clone(), (*f.presence.value()).clone()))
    }

    /// Presence scores plus the flat argmax location per prototype.
    pub fn presence_with_locations(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        self.check_images(images)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, Trainable::default());
        let zsoft = bound.softmax_map(tape.constant(images.clone()))?;
        let (p, idx) = zsoft.spatial_max_with_index()?;
        Ok(((*p.value()).clone(), idx))
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != size || s[3] != size {
            return Err(Error::Tensor(cipnet_tensor::TensorError::Dimension {
                op: "forward_features",
                axes: "1,2,3".into(),
                detail: format!(
                    "expected [B, {}, {size}, {size}], got {:?}",
                    self.config.in_channels, s
                ),
            }));
        }
        Ok(())
    }

    /// Scores of every head on (already masked) presence vectors, concatenated
    /// in head order so column `j` is global class `j`.
    pub fn scores_from_presence(&self, presence: &Tensor<T>, head: Option<usize>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, Trainable::default());
        let p = tape.constant(presence.clone());
        let scores = match head {
            Some(t) => bound.head_scores(p, t)?,
            None => bound.all_scores(p)?,
        };
        Ok((*scores.value()).clone())
    }

    /// Task-aware prediction with head `task`, returned as global class ids.
    pub fn predict_til(&self, images: &Tensor<T>, task: usize, threshold: f64) -> Result<Vec<usize>> {
        let head = self.heads.get(task).ok_or_else(|| {
            Error::Range(format!("task {task} but only {} heads trained", self.heads.len()))
        })?;
        let (_, p) = self.forward_features(images)?;
        let scores = self.scores_from_presence(&mask_presence(&p, threshold), Some(task))?;
        Ok(argmax_rows(&scores)
            .into_iter()
            .map(|c| head.class_ids[c])
            .collect())
    }

    /// Task-agnostic prediction over the concatenation of all heads.
    pub fn predict_cil(&self, images: &Tensor<T>, threshold: f64) -> Result<Vec<usize>> {
        if self.heads.is_empty() {
            return Err(Error::Range("model has no trained heads".into()));
        }
        let (_, p) = self.forward_features(images)?;
        let scores = self.scores_from_presence(&mask_presence(&p, threshold), None)?;
        let probs = softmax_rows(&scores);
        let ids: Vec<usize> = self.heads.iter().flat_map(|h| h.class_ids.iter().copied()).collect();
        Ok(argmax_rows(&probs).into_iter().map(|c| ids[c]).collect())
    }
}

/// Zero every presence score below `threshold`.
pub fn mask_presence<T: Scalar>(p: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::of(threshold);
    p.map(|v| if v < t { T::zero() } else { v })
}

pub fn softmax_rows<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let k = scores.shape()[1];
    let mut out = Vec::with_capacity(scores.numel());
    for row in scores.data().chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(scores.shape().to_vec(), out).expect("same shape")
}

/// First maximal column per row.
pub fn argmax_rows<T: Scalar>(m: &Tensor<T>) -> Vec<usize> {
    let k = m.shape()[1];
    m.data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Output of the prototype layer for a batch.
pub struct Features<'t, T: Scalar> {
    pub zsoft: Var<'t, T>,
    pub presence: Var<'t, T>,
}

/// Model parameters registered as leaves on one tape.
pub struct BoundModel<'t, T: Scalar> {
    specs: Vec<ConvSpec>,
    pub layers: Vec<(Var<'t, T>, Var<'t, T>)>,
    pub heads: Vec<Var<'t, T>>,
    pub log_tau: Var<'t, T>,
}

impl<'t, T: Scalar> BoundModel<'t, T> {
    /// Assemble from variables already on a tape, e.g. for finite-difference checks.
    pub fn from_vars(
        config: &BackboneConfig,
        layers: Vec<(Var<'t, T>, Var<'t, T>)>,
        heads: Vec<Var<'t, T>>,
        log_tau: Var<'t, T>,
    ) -> Result<Self> {
        if layers.len() != config.layers.len() {
            return Err(Error::Contract(format!(
                "{} layer variables for a {}-layer backbone",
                layers.len(),
                config.layers.len()
            )));
        }
        Ok(Self {
            specs: config.layers.clone(),
            layers,
            heads,
            log_tau,
        })
    }

    fn softmax_map(&self, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = images;
        for (spec, (w, b)) in self.specs.iter().zip(&self.layers) {
            h = h.conv2d(*w, spec.stride, spec.padding)?.add_channel_bias(*b)?;
            if spec.relu {
                h = h.relu()?;
            }
        }
        Ok(h.channel_softmax()?)
    }

    pub fn features(&self, images: Var<'t, T>) -> Result<Features<'t, T>> {
        let zsoft = self.softmax_map(images)?;
        let presence = zsoft.spatial_max()?;
        Ok(Features { zsoft, presence })
    }

    pub fn tau(&self) -> Result<Var<'t, T>> {
        Ok(self.log_tau.exp()?)
    }

    pub fn head_scores(&self, p: Var<'t, T>, head: usize) -> Result<Var<'t, T>> {
        let w = *self
            .heads
            .get(head)
            .ok_or_else(|| Error::Range(format!("no head {head}")))?;
        head_scores(p, w, self.tau()?)
    }

    pub fn all_scores(&self, p: Var<'t, T>) -> Result<Var<'t, T>> {
        let tau = self.tau()?;
        let parts = self
            .heads
            .iter()
            .map(|&w| head_scores(p, w, tau))
            .collect::<Result<Vec<_>>>()?;
        Ok(concat(&parts, 1)?)
    }
}

/// `s[b, c] = tau * <p_b, w_c> / (|p_b| |w_c|)`.
pub fn head_scores<'t, T: Scalar>(p: Var<'t, T>, weights: Var<'t, T>, tau: Var<'t, T>) -> Result<Var<'t, T>> {
    let (ps, ws) = (p.shape(), weights.shape());
    if ps.len() != 2 || ws.len() != 2 || ps[1] != ws[1] {
        return Err(Error::Tensor(cipnet_tensor::TensorError::Dimension {
            op: "head_scores",
            axes: "1".into(),
            detail: format!("presence {:?} vs weights {:?}", ps, ws),
        }));
    }
    let w_norm = weights.norm_l2(1)?;
    if let Some(row) = w_norm.value().data().iter().position(|&n| n == T::zero()) {
        return Err(Error::DegenerateHead { row });
    }
    let (b, c, d) = (ps[0], ws[0], ps[1]);
    let p_norm = p.norm_l2(1)?.clamp_min(NORM_FLOOR)?.reshape(&[b, 1])?.broadcast_to(&[b, d])?;
    let w_norm = w_norm.reshape(&[c, 1])?.broadcast_to(&[c, d])?;
    let cosine = p.div(p_norm)?.matmul(weights.div(w_norm)?.transpose()?)?;
    Ok(tau.mul(cosine)?)
}
