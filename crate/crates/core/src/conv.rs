//! Plain strided 2D convolution with replicate padding.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::image::Image;
use crate::math::{sigmoid, softplus};

/// Output side length for a stride-`stride` convolution with `(k−1)/2` padding.
#[inline]
pub fn strided_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Cross-correlation `out[o,y,x] = b[o] + Σ W[o,c,dy,dx] · in[c, y·stride+dy−r, x·stride+dx−r]`
/// with `r = (k−1)/2` and coordinates clamped to the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out_ch × in_ch × k × k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    /// He-normal weights and zero bias.
    pub fn he_normal<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let mut c = Self::zeros(in_ch, out_ch, kernel, stride);
        let std = libm::sqrt(2.0 / (in_ch * kernel * kernel) as f64);
        c.weight.iter_mut().for_each(|w| *w = std * crate::rng::normal(rng));
        c
    }

    #[inline]
    pub fn w(&self, o: usize, c: usize, dy: usize, dx: usize) -> f64 {
        self.weight[((o * self.in_ch + c) * self.kernel + dy) * self.kernel + dx]
    }

    fn check(&self, input: &Image) -> Result<()> {
        if input.channels != self.in_ch {
            return Err(shape_err!("convolution expects {} channels, got {}", self.in_ch, input.channels));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Image) -> Result<Image> {
        self.check(input)?;
        let (ow, oh) = (strided_len(input.width, self.stride), strided_len(input.height, self.stride));
        let r = (self.kernel / 2) as isize;
        let mut out = Image::new(ow, oh, self.out_ch);
        for y in 0..oh {
            for x in 0..ow {
                let (cy, cx) = ((y * self.stride) as isize, (x * self.stride) as isize);
                for o in 0..self.out_ch {
                    let mut acc = self.bias[o];
                    for c in 0..self.in_ch {
                        for dy in 0..self.kernel {
                            for dx in 0..self.kernel {
                                acc += self.w(o, c, dy, dx)
                                    * input.at_clamped(cy + dy as isize - r, cx + dx as isize - r, c);
                            }
                        }
                    }
                    *out.at_mut(y, x, o) = acc;
                }
            }
        }
        Ok(out)
    }

    /// Returns `∂L/∂input`; accumulates parameter gradients into `grads` if given.
    pub fn backward(&self, input: &Image, d_out: &Image, mut grads: Option<&mut Conv2d>) -> Image {
        let mut d_in = Image::new(input.width, input.height, input.channels);
        let r = (self.kernel / 2) as isize;
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for y in 0..d_out.height {
            for x in 0..d_out.width {
                let (cy, cx) = ((y * self.stride) as isize, (x * self.stride) as isize);
                for o in 0..self.out_ch {
                    let g = d_out.at(y, x, o);
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(gr) = grads.as_deref_mut() {
                        gr.bias[o] += g;
                    }
                    for c in 0..self.in_ch {
                        for dy in 0..self.kernel {
                            let yy = clamp(cy + dy as isize - r, input.height);
                            for dx in 0..self.kernel {
                                let xx = clamp(cx + dx as isize - r, input.width);
                                let wi = ((o * self.in_ch + c) * self.kernel + dy) * self.kernel + dx;
                                *d_in.at_mut(yy, xx, c) += g * self.weight[wi];
                                if let Some(gr) = grads.as_deref_mut() {
                                    gr.weight[wi] += g * input.at(yy, xx, c);
                                }
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

pub fn softplus_image(x: &Image) -> Image {
    x.map(softplus)
}

/// `d_out ⊙ softplus'(pre)`.
pub fn softplus_backward(pre: &Image, d_out: &Image) -> Image {
    let mut out = d_out.clone();
    for (g, p) in out.data.iter_mut().zip(&pre.data) {
        *g *= sigmoid(*p);
    }
    out
}

/// Per-pixel linear map across channels (a 1×1 convolution).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseLinear {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `out_ch × in_ch`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PointwiseLinear {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        PointwiseLinear { in_ch, out_ch, weight: vec![0.0; in_ch * out_ch], bias: vec![0.0; out_ch] }
    }

    pub fn forward(&self, input: &Image) -> Image {
        Image::from_fn(input.width, input.height, self.out_ch, |y, x, o| {
            let px = input.pixel(y, x);
            self.bias[o] + (0..self.in_ch).map(|c| self.weight[o * self.in_ch + c] * px[c]).sum::<f64>()
        })
    }

    pub fn backward(&self, input: &Image, d_out: &Image, mut grads: Option<&mut PointwiseLinear>) -> Image {
        let mut d_in = Image::new(input.width, input.height, self.in_ch);
        for y in 0..input.height {
            for x in 0..input.width {
                for o in 0..self.out_ch {
                    let g = d_out.at(y, x, o);
                    if let Some(gr) = grads.as_deref_mut() {
                        gr.bias[o] += g;
                    }
                    for c in 0..self.in_ch {
                        *d_in.at_mut(y, x, c) += g * self.weight[o * self.in_ch + c];
                        if let Some(gr) = grads.as_deref_mut() {
                            gr.weight[o * self.in_ch + c] += g * input.at(y, x, c);
                        }
                    }
                }
            }
        }
        d_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn output_sizes() {
        let c = Conv2d::zeros(3, 4, 3, 2);
        let out = c.forward(&Image::new(32, 30, 3)).unwrap();
        assert_eq!((out.width, out.height, out.channels), (16, 15, 4));
        assert_eq!(strided_len(5, 2), 3);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let mut rng = seeded(4);
        let conv = Conv2d::he_normal(2, 3, 3, 2, &mut rng);
        let zero_bias = Conv2d { bias: vec![0.0; 3], ..conv.clone() };
        let x = Image::from_fn(7, 6, 2, |_, _, _| rng.gen::<f64>());
        let y = zero_bias.forward(&x).unwrap();
        let g = Image::from_fn(y.width, y.height, 3, |_, _, _| rng.gen::<f64>() - 0.5);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = zero_bias.backward(&x, &g, None);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
