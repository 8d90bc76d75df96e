//! Dense layer primitives on HWC feature maps.

use crate::error::{Error, Result};

/// Height x width x channels tensor, channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput("feature map dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "feature map buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution weights in HWIO layout: `weights[((ky * k + kx) * cin + ci) * cout + co]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<'a> {
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (input + 2 * pad - kernel) / stride + 1
}

/// Zero-padded convolution (pad = kernel / 2), returning pre-activations.
pub fn conv_forward(input: &FeatureMap, w: &ConvWeights<'_>) -> FeatureMap {
    debug_assert_eq!(input.channels, w.cin);
    let (k, s, cin, cout) = (w.kernel, w.stride, w.cin, w.cout);
    let pad = k / 2;
    let oh = conv_output_size(input.height, k, s);
    let ow = conv_output_size(input.width, k, s);
    let mut out = FeatureMap::zeros(oh, ow, cout);
    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * cout;
            let acc = &mut out.data[o_base..o_base + cout];
            acc.copy_from_slice(w.bias);
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - pad as isize;
                if iy < 0 || iy >= input.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - pad as isize;
                    if ix < 0 || ix >= input.width as isize {
                        continue;
                    }
                    let i_base = (iy as usize * input.width + ix as usize) * cin;
                    let px = &input.data[i_base..i_base + cin];
                    let w_base = (ky * k + kx) * cin * cout;
                    for (ci, &a) in px.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let row = &w.weights[w_base + ci * cout..w_base + (ci + 1) * cout];
                        for (o, &wv) in acc.iter_mut().zip(row) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients of a convolution and, if requested,
/// returns the gradient with respect to its input.
pub fn conv_backward(
    input: &FeatureMap,
    w: &ConvWeights<'_>,
    grad_out: &FeatureMap,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<FeatureMap> {
    let (k, s, cin, cout) = (w.kernel, w.stride, w.cin, w.cout);
    let pad = k / 2;
    let (oh, ow) = (grad_out.height, grad_out.width);
    let mut grad_in = want_input_grad.then(|| FeatureMap::zeros(input.height, input.width, cin));
    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * cout;
            let g = &grad_out.data[o_base..o_base + cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (gb, &gv) in grad_bias.iter_mut().zip(g) {
                *gb += gv;
            }
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - pad as isize;
                if iy < 0 || iy >= input.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - pad as isize;
                    if ix < 0 || ix >= input.width as isize {
                        continue;
                    }
                    let i_base = (iy as usize * input.width + ix as usize) * cin;
                    let w_base = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = input.data[i_base + ci];
                        let r = w_base + ci * cout..w_base + (ci + 1) * cout;
                        if a != 0.0 {
                            for (gw, &gv) in grad_weights[r.clone()].iter_mut().zip(g) {
                                *gw += a * gv;
                            }
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            let dot: f64 = w.weights[r].iter().zip(g).map(|(wv, gv)| wv * gv).sum();
                            gi.data[i_base + ci] += dot;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub fn relu_in_place(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_in_place(output: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Source taps of one output coordinate of a 2x bilinear upsample using
/// half-pixel centers (`src = (dst + 0.5) / 2 - 0.5`), clamped at the border.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

pub fn upsample_taps(n: usize) -> Vec<Tap> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let clamp = |i: f64| i.max(0.0).min((n - 1) as f64) as usize;
            Tap {
                lo: clamp(floor),
                hi: clamp(floor + 1.0),
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

pub fn upsample2x(input: &FeatureMap) -> FeatureMap {
    let c = input.channels;
    let ty = upsample_taps(input.height);
    let tx = upsample_taps(input.width);
    let mut out = FeatureMap::zeros(2 * input.height, 2 * input.width, c);
    for (oy, y) in ty.iter().enumerate() {
        for (ox, x) in tx.iter().enumerate() {
            let o_base = (oy * out.width + ox) * c;
            for (sy, wy) in [(y.lo, y.w_lo), (y.hi, y.w_hi)] {
                for (sx, wx) in [(x.lo, x.w_lo), (x.hi, x.w_hi)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let i_base = (sy * input.width + sx) * c;
                    for ch in 0..c {
                        out.data[o_base + ch] += wgt * input.data[i_base + ch];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_backward(grad_out: &FeatureMap, in_height: usize, in_width: usize) -> FeatureMap {
    let c = grad_out.channels;
    let ty = upsample_taps(in_height);
    let tx = upsample_taps(in_width);
    let mut grad_in = FeatureMap::zeros(in_height, in_width, c);
    for (oy, y) in ty.iter().enumerate() {
        for (ox, x) in tx.iter().enumerate() {
            let o_base = (oy * grad_out.width + ox) * c;
            for (sy, wy) in [(y.lo, y.w_lo), (y.hi, y.w_hi)] {
                for (sx, wx) in [(x.lo, x.w_lo), (x.hi, x.w_hi)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let i_base = (sy * in_width + sx) * c;
                    for ch in 0..c {
                        grad_in.data[i_base + ch] += wgt * grad_out.data[o_base + ch];
                    }
                }
            }
        }
    }
    grad_in
}
