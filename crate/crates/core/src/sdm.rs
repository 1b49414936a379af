//! Scene-specific degradation mapping.
//!
//! A small fully convolutional network maps an `(s·H)×(s·W)` render to `H×W`.
//! Each stage is a stride-2 pixel-adaptive convolution whose spatial kernel is
//! modulated per site by a Gaussian of the difference in Sobel gradient
//! magnitude between the window center and each tap. A 1×1 head maps features
//! to RGB and, in residual mode, adds the box-downsampled input.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{softplus_backward, softplus_image, strided_len, PointwiseLinear};
use crate::error::{config_err, shape_err, Result};
use crate::image::{Image, LUMA};
use crate::optim::{ParamGroup, ParamSet, TensorMut, TensorRef};
use crate::rng::seeded;

const SOBEL_U: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_V: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Per-pixel Sobel gradient magnitude of an image's luminance.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientView {
    pub magnitude: Image,
}

struct SobelParts {
    du: Image,
    dv: Image,
}

fn sobel(lum: &Image) -> SobelParts {
    let mut du = Image::new(lum.width, lum.height, 1);
    let mut dv = Image::new(lum.width, lum.height, 1);
    for y in 0..lum.height {
        for x in 0..lum.width {
            let mut v = [[0.0; 3]; 3];
            for (ky, row) in v.iter_mut().enumerate() {
                for (kx, e) in row.iter_mut().enumerate() {
                    *e = lum.at_clamped(y as isize + ky as isize - 1, x as isize + kx as isize - 1, 0);
                }
            }
            // Both kernels are antisymmetric, so pair opposite taps before weighting;
            // flat neighborhoods then give exactly zero.
            let (mut a, mut b) = (0.0, 0.0);
            for k in 0..3 {
                a += SOBEL_U[k][2] * (v[k][2] - v[k][0]);
                b += SOBEL_V[2][k] * (v[2][k] - v[0][k]);
            }
            *du.at_mut(y, x, 0) = a;
            *dv.at_mut(y, x, 0) = b;
        }
    }
    SobelParts { du, dv }
}

/// Luminance Sobel magnitude `√(D_u² + D_v²)` with replicate padding.
pub fn gradient_view(img: &Image) -> Result<GradientView> {
    if img.width < 3 || img.height < 3 {
        return Err(shape_err!("gradient view needs at least 3x3 pixels, got {}x{}", img.width, img.height));
    }
    if img.channels != 3 {
        return Err(shape_err!("gradient view expects RGB input, got {} channels", img.channels));
    }
    let SobelParts { du, dv } = sobel(&img.luminance());
    let magnitude = Image::from_fn(img.width, img.height, 1, |y, x, _| {
        let (a, b) = (du.at(y, x, 0), dv.at(y, x, 0));
        libm::sqrt(a * a + b * b)
    });
    Ok(GradientView { magnitude })
}

/// `∂L/∂img` for `∂L/∂magnitude`. The magnitude is not differentiable where it is
/// zero; those pixels pass no gradient.
pub fn gradient_view_backward(img: &Image, d_mag: &Image) -> Image {
    let SobelParts { du, dv } = sobel(&img.luminance());
    let mut d_lum = Image::new(img.width, img.height, 1);
    for y in 0..img.height {
        for x in 0..img.width {
            let (a, b) = (du.at(y, x, 0), dv.at(y, x, 0));
            let m = libm::sqrt(a * a + b * b);
            if m == 0.0 {
                continue;
            }
            let (ga, gb) = (d_mag.at(y, x, 0) * a / m, d_mag.at(y, x, 0) * b / m);
            for ky in 0..3 {
                let yy = (y as isize + ky as isize - 1).clamp(0, img.height as isize - 1) as usize;
                for kx in 0..3 {
                    let xx = (x as isize + kx as isize - 1).clamp(0, img.width as isize - 1) as usize;
                    *d_lum.at_mut(yy, xx, 0) += ga * SOBEL_U[ky][kx] + gb * SOBEL_V[ky][kx];
                }
            }
        }
    }
    Image::from_fn(img.width, img.height, 3, |y, x, c| d_lum.at(y, x, 0) * LUMA[c])
}

/// One stride-2 pixel-adaptive convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacStage {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `out_ch × in_ch × k × k`, indexed by the tap offset from the window center.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Bandwidth of the Gaussian guidance kernel.
    pub beta: f64,
}

impl PacStage {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        PacStage {
            in_ch,
            out_ch,
            kernel,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
            beta: 1.0,
        }
    }

    fn uniform<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let mut st = Self::zeros(in_ch, out_ch, kernel);
        let bound = 1.0 / libm::sqrt((in_ch * kernel * kernel) as f64);
        st.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        st.bias.iter_mut().for_each(|b| *b = rng.gen_range(-bound..bound));
        st
    }

    #[inline]
    fn widx(&self, o: usize, c: usize, dy: usize, dx: usize) -> usize {
        ((o * self.in_ch + c) * self.kernel + dy) * self.kernel + dx
    }
}

fn check_pac(input: &Image, guidance: &Image, stage: &PacStage) -> Result<()> {
    if input.width != guidance.width || input.height != guidance.height {
        return Err(shape_err!(
            "guidance {}x{} is not aligned with input {}x{}",
            guidance.width,
            guidance.height,
            input.width,
            input.height
        ));
    }
    if input.channels != stage.in_ch {
        return Err(shape_err!("stage expects {} channels, got {}", stage.in_ch, input.channels));
    }
    Ok(())
}

#[inline]
fn guidance_dist2(guidance: &Image, cy: usize, cx: usize, yy: usize, xx: usize) -> f64 {
    (0..guidance.channels)
        .map(|g| {
            let d = guidance.at(cy, cx, g) - guidance.at(yy, xx, g);
            d * d
        })
        .sum()
}

/// Stride-2 pixel-adaptive convolution:
/// `out_i = Σ_{j∈Ω(i)} exp(−β‖f_i − f_j‖²/2) · W[j − i] · v_j + b`,
/// where `Ω(i)` is the `k×k` window centered on input pixel `2·i`, with
/// replicate padding for both the input and the guidance.
pub fn pac_apply(input: &Image, guidance: &Image, stage: &PacStage) -> Result<Image> {
    check_pac(input, guidance, stage)?;
    let (ow, oh) = (strided_len(input.width, 2), strided_len(input.height, 2));
    let r = (stage.kernel / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = Image::new(ow, oh, stage.out_ch);
    let k = stage.kernel;
    let mut adapt = vec![0.0; k * k];
    let mut taps = vec![(0usize, 0usize); k * k];
    for y in 0..oh {
        for x in 0..ow {
            let (cy, cx) = (2 * y, 2 * x);
            for dy in 0..k {
                let yy = clamp(cy as isize + dy as isize - r, input.height);
                for dx in 0..k {
                    let xx = clamp(cx as isize + dx as isize - r, input.width);
                    taps[dy * k + dx] = (yy, xx);
                    adapt[dy * k + dx] = libm::exp(-0.5 * stage.beta * guidance_dist2(guidance, cy, cx, yy, xx));
                }
            }
            for o in 0..stage.out_ch {
                let mut acc = stage.bias[o];
                for c in 0..stage.in_ch {
                    for t in 0..k * k {
                        let (yy, xx) = taps[t];
                        acc += adapt[t] * stage.weight[stage.widx(o, c, t / k, t % k)] * input.at(yy, xx, c);
                    }
                }
                *out.at_mut(y, x, o) = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`pac_apply`]: returns `(∂L/∂input, ∂L/∂guidance)` and accumulates
/// weight, bias and bandwidth gradients into `grads` when given.
pub fn pac_backward(
    input: &Image,
    guidance: &Image,
    stage: &PacStage,
    d_out: &Image,
    mut grads: Option<&mut PacStage>,
) -> (Image, Image) {
    let mut d_in = Image::new(input.width, input.height, input.channels);
    let mut d_g = Image::new(guidance.width, guidance.height, guidance.channels);
    let r = (stage.kernel / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let k = stage.kernel;
    for y in 0..d_out.height {
        for x in 0..d_out.width {
            let (cy, cx) = (2 * y, 2 * x);
            for dy in 0..k {
                let yy = clamp(cy as isize + dy as isize - r, input.height);
                for dx in 0..k {
                    let xx = clamp(cx as isize + dx as isize - r, input.width);
                    let dist2 = guidance_dist2(guidance, cy, cx, yy, xx);
                    let a = libm::exp(-0.5 * stage.beta * dist2);
                    // ∂L/∂a for this tap, summed over output and input channels.
                    let mut d_a = 0.0;
                    for o in 0..stage.out_ch {
                        let g = d_out.at(y, x, o);
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..stage.in_ch {
                            let wi = stage.widx(o, c, dy, dx);
                            let v = input.at(yy, xx, c);
                            d_a += g * stage.weight[wi] * v;
                            *d_in.at_mut(yy, xx, c) += g * a * stage.weight[wi];
                            if let Some(gr) = grads.as_deref_mut() {
                                gr.weight[wi] += g * a * v;
                            }
                        }
                    }
                    if d_a == 0.0 {
                        continue;
                    }
                    if let Some(gr) = grads.as_deref_mut() {
                        gr.beta += d_a * a * (-0.5 * dist2);
                    }
                    // a = exp(−β/2 Σ (f_c − f_t)²)
                    for gch in 0..guidance.channels {
                        let diff = guidance.at(cy, cx, gch) - guidance.at(yy, xx, gch);
                        let dd = d_a * a * (-stage.beta * diff);
                        *d_g.at_mut(cy, cx, gch) += dd;
                        *d_g.at_mut(yy, xx, gch) -= dd;
                    }
                }
            }
            if let Some(gr) = grads.as_deref_mut() {
                for o in 0..stage.out_ch {
                    gr.bias[o] += d_out.at(y, x, o);
                }
            }
        }
    }
    (d_in, d_g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdmConfig {
    /// Downsampling factor (a power of two).
    pub scale: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    pub residual: bool,
    pub initial_beta: f64,
}

impl Default for SdmConfig {
    fn default() -> Self {
        SdmConfig { scale: 2, hidden_channels: 16, kernel: 5, residual: true, initial_beta: 1.0 }
    }
}

impl SdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4) {
            return Err(config_err!("degradation network scale must be 2 or 4, got {}", self.scale));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(config_err!("kernel size must be odd, got {}", self.kernel));
        }
        if self.hidden_channels == 0 {
            return Err(config_err!("hidden channels must be positive"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }
}

/// The degradation network: `log₂ s` adaptive stages and a 1×1 RGB head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdmNetwork {
    pub config: SdmConfig,
    pub stages: Vec<PacStage>,
    pub head: PointwiseLinear,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct SdmTrace {
    input: Image,
    /// Guidance at the input of each stage.
    guidance: Vec<Image>,
    /// Input of each stage (post-activation of the previous one).
    stage_inputs: Vec<Image>,
    /// Pre-activation output of each stage.
    pre: Vec<Image>,
    features: Image,
    pub output: Image,
}

impl SdmNetwork {
    pub fn init(config: SdmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut stages = Vec::new();
        let mut ch = 3;
        for _ in 0..config.num_stages() {
            stages.push(PacStage::uniform(ch, config.hidden_channels, config.kernel, &mut rng));
            ch = config.hidden_channels;
        }
        for st in &mut stages {
            st.beta = config.initial_beta;
        }
        let bound = 1.0 / libm::sqrt(ch as f64);
        let mut head = PointwiseLinear::zeros(ch, 3);
        head.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        head.bias.iter_mut().for_each(|b| *b = rng.gen_range(-bound..bound));
        Ok(SdmNetwork { config, stages, head })
    }

    /// Same architecture with every parameter zero (β kept at its initial value).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        let s = self.config.scale;
        if img.width % s != 0 || img.height % s != 0 {
            return Err(shape_err!("input {}x{} is not divisible by scale {s}", img.width, img.height));
        }
        if img.channels != 3 {
            return Err(shape_err!("degradation network expects RGB input"));
        }
        Ok(())
    }

    /// Training-mode forward pass (output not clamped).
    pub fn forward_trace(&self, img: &Image) -> Result<SdmTrace> {
        self.check_input(img)?;
        let mut guidance = vec![gradient_view(img)?.magnitude];
        let mut stage_inputs = vec![img.clone()];
        let mut pre = Vec::new();
        for (t, stage) in self.stages.iter().enumerate() {
            let z = pac_apply(&stage_inputs[t], &guidance[t], stage)?;
            let h = softplus_image(&z);
            pre.push(z);
            if t + 1 < self.stages.len() {
                guidance.push(guidance[t].box_downsample(2)?);
            }
            stage_inputs.push(h);
        }
        let features = stage_inputs.pop().expect("at least one stage");
        let mut output = self.head.forward(&features);
        if self.config.residual {
            let base = img.box_downsample(self.config.scale)?;
            output.data.iter_mut().zip(&base.data).for_each(|(o, b)| *o += b);
        }
        Ok(SdmTrace { input: img.clone(), guidance, stage_inputs, pre, features, output })
    }

    pub fn forward(&self, img: &Image) -> Result<Image> {
        Ok(self.forward_trace(img)?.output)
    }

    /// Evaluation-mode forward pass, clamped to `[0, 1]`.
    pub fn forward_eval(&self, img: &Image) -> Result<Image> {
        Ok(self.forward(img)?.clamped01())
    }

    /// Backpropagate `∂L/∂output`. Returns `∂L/∂input`; parameter gradients are
    /// accumulated into `grads` when given (pass `None` for a frozen network).
    pub fn backward(&self, trace: &SdmTrace, d_out: &Image, mut grads: Option<&mut SdmNetwork>) -> Image {
        let s = self.config.scale;
        let mut d_input = if self.config.residual {
            Image::box_downsample_backward(d_out, s)
        } else {
            Image::new(trace.input.width, trace.input.height, 3)
        };
        let mut d_h = self.head.backward(&trace.features, d_out, grads.as_deref_mut().map(|g| &mut g.head));
        let mut d_guid_next: Option<Image> = None;
        for t in (0..self.stages.len()).rev() {
            let d_z = softplus_backward(&trace.pre[t], &d_h);
            let (d_v, mut d_g) = pac_backward(
                &trace.stage_inputs[t],
                &trace.guidance[t],
                &self.stages[t],
                &d_z,
                grads.as_deref_mut().map(|g| &mut g.stages[t]),
            );
            if let Some(next) = d_guid_next.take() {
                let spread = Image::box_downsample_backward(&next, 2);
                d_g.data.iter_mut().zip(&spread.data).for_each(|(a, b)| *a += b);
            }
            d_guid_next = Some(d_g);
            d_h = d_v;
        }
        d_input.data.iter_mut().zip(&d_h.data).for_each(|(a, b)| *a += b);
        if let Some(d_g0) = d_guid_next {
            let d_img = gradient_view_backward(&trace.input, &d_g0);
            d_input.data.iter_mut().zip(&d_img.data).for_each(|(a, b)| *a += b);
        }
        d_input
    }

    /// Keep every guidance bandwidth non-negative.
    pub fn project(&mut self) {
        for st in &mut self.stages {
            st.beta = st.beta.max(0.0);
        }
    }
}

impl ParamSet for SdmNetwork {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (t, st) in self.stages.iter().enumerate() {
            let k = st.kernel;
            out.push(TensorRef {
                name: alloc::format!("stage{t}.weight"),
                group: ParamGroup::Network,
                shape: vec![st.out_ch, st.in_ch, k, k],
                data: &st.weight,
            });
            out.push(TensorRef {
                name: alloc::format!("stage{t}.bias"),
                group: ParamGroup::Network,
                shape: vec![st.out_ch],
                data: &st.bias,
            });
            out.push(TensorRef {
                name: alloc::format!("stage{t}.beta"),
                group: ParamGroup::Network,
                shape: vec![1],
                data: core::slice::from_ref(&st.beta),
            });
        }
        out.push(TensorRef {
            name: "head.weight".into(),
            group: ParamGroup::Network,
            shape: vec![self.head.out_ch, self.head.in_ch],
            data: &self.head.weight,
        });
        out.push(TensorRef { name: "head.bias".into(), group: ParamGroup::Network, shape: vec![3], data: &self.head.bias });
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (t, st) in self.stages.iter_mut().enumerate() {
            let PacStage { weight, bias, beta, .. } = st;
            out.push(TensorMut { name: alloc::format!("stage{t}.weight"), group: ParamGroup::Network, data: weight });
            out.push(TensorMut { name: alloc::format!("stage{t}.bias"), group: ParamGroup::Network, data: bias });
            out.push(TensorMut {
                name: alloc::format!("stage{t}.beta"),
                group: ParamGroup::Network,
                data: core::slice::from_mut(beta),
            });
        }
        let PointwiseLinear { weight, bias, .. } = &mut self.head;
        out.push(TensorMut { name: "head.weight".into(), group: ParamGroup::Network, data: weight });
        out.push(TensorMut { name: "head.bias".into(), group: ParamGroup::Network, data: bias });
        out
    }
}
