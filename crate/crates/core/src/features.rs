//! Frozen feature extractors for the patch perceptual loss.

use alloc::vec::Vec;

use crate::conv::{softplus_backward, softplus_image, Conv2d};
use crate::error::{shape_err, Result};
use crate::image::Image;
use crate::rng::seeded;

/// A fixed map from an image patch to feature maps at one or more depths.
pub trait FeatureExtractor {
    fn features(&self, img: &Image) -> Result<Vec<Image>>;

    /// `∂L/∂img` given `∂L/∂features` for every depth.
    fn backward(&self, img: &Image, d_features: &[Image]) -> Result<Image>;
}

/// Stack of stride-2 convolutions with softplus activations; each stage's output
/// is one feature depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFeatureExtractor {
    stages: Vec<Conv2d>,
}

/// Channel widths of the default extractor.
pub const DEFAULT_CHANNELS: [usize; 4] = [3, 8, 16, 32];

impl ConvFeatureExtractor {
    /// Wrap externally supplied weights (e.g. from a pretrained network).
    pub fn from_stages(stages: Vec<Conv2d>) -> Result<Self> {
        if stages.is_empty() {
            return Err(shape_err!("feature extractor needs at least one stage"));
        }
        for pair in stages.windows(2) {
            if pair[0].out_ch != pair[1].in_ch {
                return Err(shape_err!("stage channel counts do not chain"));
            }
        }
        Ok(ConvFeatureExtractor { stages })
    }

    pub fn stages(&self) -> &[Conv2d] {
        &self.stages
    }

    fn activations(&self, img: &Image) -> Result<(Vec<Image>, Vec<Image>)> {
        let mut pre = Vec::with_capacity(self.stages.len());
        let mut post = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let z = st.forward(if i == 0 { img } else { &post[i - 1] })?;
            post.push(softplus_image(&z));
            pre.push(z);
        }
        Ok((pre, post))
    }
}

/// Three frozen stages, 3→8→16→32 channels, 3×3 kernels, stride 2, He-normal
/// weights drawn from `seed`.
pub fn default_extractor(seed: u64) -> ConvFeatureExtractor {
    let mut rng = seeded(seed);
    let stages = DEFAULT_CHANNELS
        .windows(2)
        .map(|w| Conv2d::he_normal(w[0], w[1], 3, 2, &mut rng))
        .collect();
    ConvFeatureExtractor { stages }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn features(&self, img: &Image) -> Result<Vec<Image>> {
        Ok(self.activations(img)?.1)
    }

    fn backward(&self, img: &Image, d_features: &[Image]) -> Result<Image> {
        if d_features.len() != self.stages.len() {
            return Err(shape_err!("expected {} feature gradients, got {}", self.stages.len(), d_features.len()));
        }
        let (pre, post) = self.activations(img)?;
        let mut carry: Option<Image> = None;
        for i in (0..self.stages.len()).rev() {
            let mut d_post = d_features[i].clone();
            if let Some(c) = carry.take() {
                d_post.data.iter_mut().zip(&c.data).for_each(|(a, b)| *a += b);
            }
            let d_pre = softplus_backward(&pre[i], &d_post);
            let input = if i == 0 { img } else { &post[i - 1] };
            carry = Some(self.stages[i].backward(input, &d_pre, None));
        }
        Ok(carry.expect("non-empty stages"))
    }
}

/// Mean over depths of the per-depth mean squared feature difference.
pub fn perceptual_loss<E: FeatureExtractor + ?Sized>(extractor: &E, a: &Image, b: &Image) -> Result<f64> {
    Ok(perceptual_terms(extractor, a, b)?.0)
}

/// Loss value and `∂loss/∂a` (the second image is treated as a constant target).
pub fn perceptual_terms<E: FeatureExtractor + ?Sized>(extractor: &E, a: &Image, b: &Image) -> Result<(f64, Vec<Image>)> {
    a.check_same_shape(b)?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    let depths = fa.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(fa.len());
    for (x, y) in fa.iter().zip(&fb) {
        let n = x.data.len() as f64;
        let mut g = x.clone();
        let mut acc = 0.0;
        for (gi, (xi, yi)) in g.data.iter_mut().zip(x.data.iter().zip(&y.data)) {
            let d = xi - yi;
            acc += d * d;
            *gi = 2.0 * d / (n * depths);
        }
        loss += acc / n / depths;
        grads.push(g);
    }
    Ok((loss, grads))
}
