//! Lightweight encoder-decoder pixel classifier with hand-written backprop.
//!
//! ```text
//! E1 conv3x3/2  3->16  relu     (H/2)
//! E2 conv3x3/2 16->32  relu     (H/4)
//! E3 conv3x3/1 32->32  relu     (H/4)   <- encoder output
//! D1 conv3x3/1 32->16  relu     (H/4)
//!    bilinear x2                (H/2)
//! D2 conv3x3/1 16->16  relu
//!    bilinear x2                (H)
//! D3 conv1x1   16->2            logits (free, obstacle)
//! ```
//!
//! All arithmetic is `f64`. Weights are stored HWIO (`[ky][kx][cin][cout]`).

pub mod gradcheck;
pub mod layers;
mod params_io;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::{LabelHistogram, LabelMap};
pub use layers::FeatureMap;
use layers::{
    conv_backward, conv_forward, relu_backward_in_place, relu_in_place, upsample2x, upsample2x_backward, ConvWeights,
};
pub use params_io::{load_params, save_params, ParamsFile, PARAMS_MAGIC, PARAMS_VERSION};

/// Network input resolution used by the pipeline.
pub const INPUT_WIDTH: usize = 160;
pub const INPUT_HEIGHT: usize = 120;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
    pub part: Part,
    pub relu: bool,
    /// Bilinear 2x upsample applied to the layer input.
    pub upsample_before: bool,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    pub fn fan_out(&self) -> usize {
        self.kernel * self.kernel * self.cout
    }
}

#[allow(clippy::too_many_arguments)]
const fn layer(
    name: &'static str,
    kernel: usize,
    stride: usize,
    cin: usize,
    cout: usize,
    part: Part,
    relu: bool,
    upsample_before: bool,
) -> LayerSpec {
    LayerSpec {
        name,
        kernel,
        stride,
        cin,
        cout,
        part,
        relu,
        upsample_before,
    }
}

pub const ARCHITECTURE: [LayerSpec; 6] = [
    layer("E1", 3, 2, 3, 16, Part::Encoder, true, false),
    layer("E2", 3, 2, 16, 32, Part::Encoder, true, false),
    layer("E3", 3, 1, 32, 32, Part::Encoder, true, false),
    layer("D1", 3, 1, 32, 16, Part::Decoder, true, false),
    layer("D2", 3, 1, 16, 16, Part::Decoder, true, true),
    layer("D3", 1, 1, 16, 2, Part::Decoder, false, true),
];

/// Index of the first decoder layer.
pub const DECODER_START: usize = 3;

/// Canonical text description of [`ARCHITECTURE`]; its hash is the
/// parameter-file fingerprint.
pub fn architecture_descriptor() -> String {
    ARCHITECTURE
        .iter()
        .map(|l| {
            format!(
                "{}:k{}s{}:{}->{}:{}{}{}",
                l.name,
                l.kernel,
                l.stride,
                l.cin,
                l.cout,
                match l.part {
                    Part::Encoder => "enc",
                    Part::Decoder => "dec",
                },
                if l.upsample_before { ":up2" } else { "" },
                if l.relu { ":relu" } else { "" },
            )
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn architecture_fingerprint() -> [u8; 32] {
    Sha256::digest(architecture_descriptor().as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(spec: LayerSpec) -> Self {
        Self {
            spec,
            weights: vec![0.0; spec.weight_len()],
            bias: vec![0.0; spec.cout],
        }
    }

    fn view(&self) -> ConvWeights<'_> {
        ConvWeights {
            kernel: self.spec.kernel,
            stride: self.spec.stride,
            cin: self.spec.cin,
            cout: self.spec.cout,
            weights: &self.weights,
            bias: &self.bias,
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// All weights of the classifier. Gradients and momentum buffers share this
/// shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<ConvLayer>,
}

pub type Gradients = NetworkParams;

impl NetworkParams {
    pub fn zeros() -> Self {
        Self {
            layers: ARCHITECTURE.iter().map(|s| ConvLayer::zeros(*s)).collect(),
        }
    }

    /// Xavier-uniform weights for every layer, zero biases.
    pub fn xavier(seed: u64) -> Self {
        let mut p = Self::zeros();
        for (i, layer) in p.layers.iter_mut().enumerate() {
            layer.weights = xavier_init(&layer.spec, layer_seed(seed, i));
        }
        p
    }

    /// Re-draws the decoder weights with Xavier initialization, keeping the encoder.
    pub fn reinit_decoder(&mut self, seed: u64) {
        for (i, layer) in self.layers.iter_mut().enumerate().skip(DECODER_START) {
            layer.weights = xavier_init(&layer.spec, layer_seed(seed, i));
            layer.bias.fill(0.0);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn check_architecture(&self) -> Result<()> {
        if self.layers.len() != ARCHITECTURE.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} layers, found {}",
                ARCHITECTURE.len(),
                self.layers.len()
            )));
        }
        for (l, spec) in self.layers.iter().zip(ARCHITECTURE.iter()) {
            if l.spec != *spec || l.weights.len() != spec.weight_len() || l.bias.len() != spec.cout {
                return Err(Error::InvalidInput(format!("layer {} has wrong shape", spec.name)));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    /// SHA-256 over all parameter bits in layer order, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over encoder parameter bits only.
    pub fn encoder_digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers[..DECODER_START] {
            for v in l.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn add_assign(&mut self, other: &NetworkParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.values_mut().zip(b.values()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for x in l.values_mut() {
                *x *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.values())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(layer as u64 + 1)
}

/// Uniform draws in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(spec: &LayerSpec) -> f64 {
    (6.0 / (spec.fan_in() + spec.fan_out()) as f64).sqrt()
}

pub fn xavier_init(spec: &LayerSpec, seed: u64) -> Vec<f64> {
    let a = xavier_bound(spec);
    let dist = Uniform::new_inclusive(-a, a).expect("finite xavier bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.weight_len()).map(|_| dist.sample(&mut rng)).collect()
}

/// Which parameters receive gradients and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainScope {
    #[default]
    All,
    DecoderOnly,
}

impl TrainScope {
    pub fn first_trainable(self) -> usize {
        match self {
            TrainScope::All => 0,
            TrainScope::DecoderOnly => DECODER_START,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// `(w_free, w_obstacle)`; only used when `inverse_frequency` is off.
    pub class_weights: [f64; 2],
    /// Recompute class weights per mini-batch from the label histogram.
    pub inverse_frequency: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weights: [1.0, 1.0],
            inverse_frequency: true,
        }
    }
}

impl LossConfig {
    pub fn fixed(w_free: f64, w_obstacle: f64) -> Self {
        Self {
            class_weights: [w_free, w_obstacle],
            inverse_frequency: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.class_weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::Config("loss.class_weights must be > 0".into()));
        }
        Ok(())
    }

    /// Class weights for a batch with the given histogram.
    pub fn weights_for(&self, hist: &LabelHistogram) -> [f64; 2] {
        if self.inverse_frequency {
            inverse_frequency_weights(hist)
        } else {
            self.class_weights
        }
    }
}

/// Bounds applied to inverse-frequency weights.
pub const MIN_CLASS_WEIGHT: f64 = 0.1;
pub const MAX_CLASS_WEIGHT: f64 = 10.0;

/// `w_c = labeled / (2 * count_c)`, clamped; a balanced batch gets (1, 1).
pub fn inverse_frequency_weights(hist: &LabelHistogram) -> [f64; 2] {
    let labeled = hist.labeled() as f64;
    let w = |count: usize| {
        if count == 0 {
            1.0
        } else {
            (labeled / (2.0 * count as f64)).clamp(MIN_CLASS_WEIGHT, MAX_CLASS_WEIGHT)
        }
    };
    [w(hist.free), w(hist.obstacle)]
}

fn check_input(image: &FeatureMap) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 3 input channels, got {}",
            image.channels
        )));
    }
    if image.height == 0 || image.width == 0 || !image.height.is_multiple_of(4) || !image.width.is_multiple_of(4) {
        return Err(Error::InvalidInput(format!(
            "input {}x{} must be non-empty with sides divisible by 4",
            image.width, image.height
        )));
    }
    Ok(())
}

/// Intermediate tensors of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    first: usize,
    /// Conv input of each layer from `first` on (after any upsampling).
    inputs: Vec<FeatureMap>,
    /// Output of each layer from `first` on (after ReLU, where present).
    outputs: Vec<FeatureMap>,
}

impl Trace {
    pub fn logits(&self) -> &FeatureMap {
        self.outputs.last().expect("non-empty trace")
    }
}

fn run_layers(params: &NetworkParams, start: usize, end: usize, input: &FeatureMap) -> Trace {
    let mut inputs = Vec::with_capacity(end - start);
    let mut outputs: Vec<FeatureMap> = Vec::with_capacity(end - start);
    for i in start..end {
        let l = &params.layers[i];
        let prev = outputs.last().unwrap_or(input);
        let x = if l.spec.upsample_before {
            upsample2x(prev)
        } else {
            prev.clone()
        };
        let mut y = conv_forward(&x, &l.view());
        if l.spec.relu {
            relu_in_place(&mut y);
        }
        inputs.push(x);
        outputs.push(y);
    }
    Trace {
        first: start,
        inputs,
        outputs,
    }
}

/// Encoder output (E3 activations) for a normalized RGB image.
pub fn encode(params: &NetworkParams, image: &FeatureMap) -> Result<FeatureMap> {
    check_input(image)?;
    let mut t = run_layers(params, 0, DECODER_START, image);
    Ok(t.outputs.pop().expect("encoder has layers"))
}

/// Logits at input resolution, two channels (free, obstacle).
pub fn forward(params: &NetworkParams, image: &FeatureMap) -> Result<FeatureMap> {
    check_input(image)?;
    let mut t = run_layers(params, 0, ARCHITECTURE.len(), image);
    Ok(t.outputs.pop().expect("network has layers"))
}

pub fn decode(params: &NetworkParams, encoded: &FeatureMap) -> FeatureMap {
    let mut t = run_layers(params, DECODER_START, ARCHITECTURE.len(), encoded);
    t.outputs.pop().expect("decoder has layers")
}

pub fn forward_trace(params: &NetworkParams, image: &FeatureMap) -> Result<Trace> {
    check_input(image)?;
    Ok(run_layers(params, 0, ARCHITECTURE.len(), image))
}

pub fn decoder_trace(params: &NetworkParams, encoded: &FeatureMap) -> Trace {
    run_layers(params, DECODER_START, ARCHITECTURE.len(), encoded)
}

/// Smallest `|pre-activation|` over every ReLU unit for this input. Finite
/// differences with a step well below this margin never cross a ReLU kink.
pub fn relu_margin(params: &NetworkParams, image: &FeatureMap) -> Result<f64> {
    check_input(image)?;
    let mut x = image.clone();
    let mut margin = f64::INFINITY;
    for l in &params.layers {
        if l.spec.upsample_before {
            x = upsample2x(&x);
        }
        let mut y = conv_forward(&x, &l.view());
        if l.spec.relu {
            margin = y.data.iter().fold(margin, |m, v| m.min(v.abs()));
            relu_in_place(&mut y);
        }
        x = y;
    }
    Ok(margin)
}

/// Numerically stable two-class softmax.
#[inline]
pub fn softmax2(l0: f64, l1: f64) -> [f64; 2] {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `ln(1 + e^d)` without overflow or cancellation.
#[inline]
fn softplus(d: f64) -> f64 {
    d.max(0.0) + (-d.abs()).exp().ln_1p()
}

fn check_labels(logits: &FeatureMap, labels: &LabelMap) -> Result<()> {
    if logits.channels != NUM_CLASSES || logits.height != labels.height || logits.width != labels.width {
        return Err(Error::InvalidInput(format!(
            "logits {}x{}x{} do not match labels {}x{}",
            logits.width, logits.height, logits.channels, labels.width, labels.height
        )));
    }
    Ok(())
}

/// Sum over labeled pixels of `w_y * CE`, optionally writing
/// `d(sum)/d(logits) * grad_scale` into `grad`.
fn weighted_ce(
    logits: &FeatureMap,
    labels: &LabelMap,
    weights: [f64; 2],
    mut grad: Option<(&mut FeatureMap, f64)>,
) -> f64 {
    let mut total = 0.0;
    for (i, label) in labels.labels.iter().enumerate() {
        let Some(y) = label.class_index() else {
            continue;
        };
        let l0 = logits.data[2 * i];
        let l1 = logits.data[2 * i + 1];
        let w = weights[y];
        // CE = -ln softmax_y = softplus(l_other - l_y)
        let margin = if y == 0 { l1 - l0 } else { l0 - l1 };
        total += w * softplus(margin);
        if let Some((g, scale)) = grad.as_mut() {
            let p = softmax2(l0, l1);
            g.data[2 * i] = w * (p[0] - (y == 0) as u8 as f64) * *scale;
            g.data[2 * i + 1] = w * (p[1] - (y == 1) as u8 as f64) * *scale;
        }
    }
    total
}

/// Weighted softmax cross-entropy averaged over non-Unknown pixels; 0 when
/// every pixel is Unknown.
pub fn loss(logits: &FeatureMap, labels: &LabelMap, cfg: &LossConfig) -> Result<f64> {
    check_labels(logits, labels)?;
    let hist = crate::labels::label_histogram(labels);
    if hist.labeled() == 0 {
        return Ok(0.0);
    }
    let weights = cfg.weights_for(&hist);
    Ok(weighted_ce(logits, labels, weights, None) / hist.labeled() as f64)
}

/// Backpropagates `d(loss)/d(logits)` through the layers recorded in
/// `trace`, accumulating into `grads` for layers `>= first_trainable`.
fn backprop(
    params: &NetworkParams,
    trace: &Trace,
    grad_logits: FeatureMap,
    first_trainable: usize,
    grads: &mut Gradients,
) {
    let mut g = grad_logits;
    let last = trace.first + trace.inputs.len();
    for i in (trace.first.max(first_trainable)..last).rev() {
        let t = i - trace.first;
        let l = &params.layers[i];
        if l.spec.relu {
            relu_backward_in_place(&trace.outputs[t], &mut g);
        }
        let want_input = i > first_trainable.max(trace.first);
        let gl = &mut grads.layers[i];
        let gin = conv_backward(
            &trace.inputs[t],
            &l.view(),
            &g,
            &mut gl.weights,
            &mut gl.bias,
            want_input,
        );
        let Some(gin) = gin else { break };
        g = if l.spec.upsample_before {
            upsample2x_backward(&gin, gin.height / 2, gin.width / 2)
        } else {
            gin
        };
    }
}

/// A training example: an image (or its cached encoding) and its labels.
pub enum Example<'a> {
    Image(&'a FeatureMap),
    Encoded(&'a FeatureMap),
}

/// Weighted CE sum of one example and its gradient scaled by `grad_scale`.
pub fn example_gradient(
    params: &NetworkParams,
    example: Example<'_>,
    labels: &LabelMap,
    weights: [f64; 2],
    grad_scale: f64,
    scope: TrainScope,
) -> Result<(f64, Gradients)> {
    let trace = match example {
        Example::Image(img) => {
            if scope == TrainScope::DecoderOnly {
                let enc = encode(params, img)?;
                decoder_trace(params, &enc)
            } else {
                forward_trace(params, img)?
            }
        }
        Example::Encoded(enc) => {
            if scope == TrainScope::All {
                return Err(Error::InvalidInput(
                    "cached encodings can only train the decoder".into(),
                ));
            }
            decoder_trace(params, enc)
        }
    };
    let logits = trace.logits();
    check_labels(logits, labels)?;
    let mut grad_logits = FeatureMap::zeros(logits.height, logits.width, NUM_CLASSES);
    let total = weighted_ce(logits, labels, weights, Some((&mut grad_logits, grad_scale)));
    let mut grads = Gradients::zeros();
    backprop(params, &trace, grad_logits, scope.first_trainable(), &mut grads);
    Ok((total, grads))
}

/// Mini-batch loss and gradient. Class weights come from the pooled batch
/// histogram and the loss is normalized by the pooled labeled-pixel count.
/// Per-example gradients are computed in parallel and summed in batch order.
pub fn batch_gradient(
    params: &NetworkParams,
    batch: &[(Example<'_>, &LabelMap)],
    cfg: &LossConfig,
    scope: TrainScope,
) -> Result<(f64, Gradients)> {
    let mut hist = LabelHistogram::default();
    for (_, labels) in batch {
        hist.merge(&crate::labels::label_histogram(labels));
    }
    if hist.labeled() == 0 {
        return Ok((0.0, Gradients::zeros()));
    }
    let weights = cfg.weights_for(&hist);
    let norm = 1.0 / hist.labeled() as f64;
    let parts: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|(ex, labels)| {
            let ex = match ex {
                Example::Image(i) => Example::Image(i),
                Example::Encoded(e) => Example::Encoded(e),
            };
            example_gradient(params, ex, labels, weights, norm, scope)
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros();
    for part in parts {
        let (t, g) = part?;
        total += t;
        grads.add_assign(&g);
    }
    Ok((total * norm, grads))
}

/// Exact gradient of [`loss`] with respect to every parameter.
pub fn backward(params: &NetworkParams, image: &FeatureMap, labels: &LabelMap, cfg: &LossConfig) -> Result<Gradients> {
    backward_scoped(params, image, labels, cfg, TrainScope::All)
}

pub fn backward_scoped(
    params: &NetworkParams,
    image: &FeatureMap,
    labels: &LabelMap,
    cfg: &LossConfig,
    scope: TrainScope,
) -> Result<Gradients> {
    check_input(image)?;
    let hist = crate::labels::label_histogram(labels);
    if hist.labeled() == 0 {
        if labels.width != image.width || labels.height != image.height {
            return Err(Error::InvalidInput("label map does not match image".into()));
        }
        return Ok(Gradients::zeros());
    }
    let weights = cfg.weights_for(&hist);
    let norm = 1.0 / hist.labeled() as f64;
    example_gradient(params, Example::Image(image), labels, weights, norm, scope).map(|(_, g)| g)
}

/// SGD with momentum: `v <- momentum * v + g; p <- p - lr * v`, restricted
/// to the layers in `scope`. Layers outside the scope keep both their
/// parameters and velocity untouched.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    velocity: &mut NetworkParams,
    scope: TrainScope,
) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidInput(format!(
            "need lr > 0 and 0 <= momentum < 1 (lr={lr}, momentum={momentum})"
        )));
    }
    let first = scope.first_trainable();
    for i in first..params.layers.len() {
        let (p, g, v) = (&mut params.layers[i], &grads.layers[i], &mut velocity.layers[i]);
        for ((pv, gv), vv) in p.values_mut().zip(g.values()).zip(v.values_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Per-pixel softmax probability of the obstacle class.
pub fn obstacle_probabilities(logits: &FeatureMap) -> Vec<f64> {
    logits
        .data
        .chunks_exact(NUM_CLASSES)
        .map(|l| softmax2(l[0], l[1])[1])
        .collect()
}

/// Maps 8-bit RGB to `[-0.5, 0.5]` per channel.
pub fn normalize_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<FeatureMap> {
    FeatureMap::from_vec(height, width, 3, rgb.iter().map(|&v| v as f64 / 255.0 - 0.5).collect())
}
