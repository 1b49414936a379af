//! Vector-matrix factorized radiance fields.
//!
//! Density and appearance are each a sum of rank-one products between a 2D plane
//! factor and a 1D line factor, for the three axis pairings (XY·Z, XZ·Y, YZ·X).
//! Appearance features are stacked, projected by a global dictionary matrix and
//! decoded together with an encoded view direction by a small MLP.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::math::{sigmoid, softplus, Vec3};
use crate::optim::{ParamGroup, ParamSet, TensorMut, TensorRef};
use crate::rng::{normal, seeded};

/// (plane axis a, plane axis b, line axis) for each of the three pairings.
pub const PAIRINGS: [(usize, usize, usize); 3] = [(0, 1, 2), (0, 2, 1), (1, 2, 0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Grid resolution per axis.
    pub grid_res: usize,
    pub density_rank: usize,
    pub appearance_rank: usize,
    /// Width of the appearance code produced by the dictionary matrix.
    pub appearance_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Frequency octaves of the view-direction encoding.
    pub dir_freqs: usize,
    /// Constant added to the raw density before softplus.
    pub density_shift: f64,
    /// Standard deviation of the initial plane/line values.
    pub init_scale: f64,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            grid_res: 128,
            density_rank: 8,
            appearance_rank: 24,
            appearance_dim: 27,
            hidden_width: 128,
            hidden_layers: 2,
            dir_freqs: 2,
            density_shift: -5.0,
            init_scale: 0.1,
            bounds_min: Vec3::splat(-1.5),
            bounds_max: Vec3::splat(1.5),
            near: 2.0,
            far: 6.0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_res < 16 {
            return Err(config_err!("grid resolution {} is below 16", self.grid_res));
        }
        if self.density_rank == 0 || self.appearance_rank == 0 {
            return Err(config_err!(
                "ranks must be at least 1 (density {}, appearance {})",
                self.density_rank,
                self.appearance_rank
            ));
        }
        if self.appearance_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(config_err!("decoder dimensions must be positive"));
        }
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(config_err!("need 0 <= near < far, got {} / {}", self.near, self.far));
        }
        for a in 0..3 {
            if !(self.bounds_min[a] < self.bounds_max[a]) {
                return Err(config_err!("empty scene bounds on axis {a}"));
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(config_err!("init_scale must be finite and non-negative"));
        }
        Ok(())
    }

    /// Decoder input width: appearance code, raw direction and its encoding.
    pub fn decoder_input_dim(&self) -> usize {
        self.appearance_dim + 3 + 6 * self.dir_freqs
    }

    #[inline]
    pub fn contains(&self, x: Vec3) -> bool {
        (0..3).all(|a| x[a] >= self.bounds_min[a] && x[a] <= self.bounds_max[a])
    }
}

/// Rank-`rank` VM decomposition: three plane factors `rank×res×res` and three
/// line factors `rank×res`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmGrid {
    pub rank: usize,
    pub res: usize,
    pub planes: [Vec<f64>; 3],
    pub lines: [Vec<f64>; 3],
}

impl VmGrid {
    fn zeros(rank: usize, res: usize) -> Self {
        VmGrid {
            rank,
            res,
            planes: [vec![0.0; rank * res * res], vec![0.0; rank * res * res], vec![0.0; rank * res * res]],
            lines: [vec![0.0; rank * res], vec![0.0; rank * res], vec![0.0; rank * res]],
        }
    }

    fn random<R: Rng>(rank: usize, res: usize, scale: f64, rng: &mut R) -> Self {
        let mut g = Self::zeros(rank, res);
        for m in 0..3 {
            g.planes[m].iter_mut().for_each(|v| *v = scale * normal(rng));
            g.lines[m].iter_mut().for_each(|v| *v = scale * normal(rng));
        }
        g
    }
}

impl VmGrid {
    /// Squared neighbour differences, averaged per factor and summed over the
    /// three planes and lines. Adds `weight·∂/∂v` into `grads` when given.
    pub fn total_variation(&self, weight: f64, mut grads: Option<&mut VmGrid>) -> f64 {
        let (rank, res) = (self.rank, self.res);
        let mut total = 0.0;
        for m in 0..3 {
            let plane = &self.planes[m];
            let inv = 1.0 / (2 * rank * res * (res - 1)) as f64;
            for r in 0..rank {
                let base = r * res * res;
                for i in 0..res {
                    for j in 0..res {
                        let k = base + i * res + j;
                        for n in [(i + 1 < res).then(|| k + res), (j + 1 < res).then(|| k + 1)].into_iter().flatten() {
                            let d = plane[n] - plane[k];
                            total += d * d * inv;
                            if let Some(g) = grads.as_deref_mut() {
                                let gd = 2.0 * weight * d * inv;
                                g.planes[m][n] += gd;
                                g.planes[m][k] -= gd;
                            }
                        }
                    }
                }
            }
            let line = &self.lines[m];
            let inv = 1.0 / (rank * (res - 1)) as f64;
            for r in 0..rank {
                for i in r * res..(r + 1) * res - 1 {
                    let d = line[i + 1] - line[i];
                    total += d * d * inv;
                    if let Some(g) = grads.as_deref_mut() {
                        let gd = 2.0 * weight * d * inv;
                        g.lines[m][i + 1] += gd;
                        g.lines[m][i] -= gd;
                    }
                }
            }
        }
        weight * total
    }

    /// Mean absolute value per factor, summed over the six factors.
    pub fn l1(&self, weight: f64, mut grads: Option<&mut VmGrid>) -> f64 {
        let mut total = 0.0;
        for m in 0..3 {
            for (src, dst) in [(&self.planes[m], 0usize), (&self.lines[m], 1)] {
                let inv = 1.0 / src.len() as f64;
                total += src.iter().map(|v| v.abs()).sum::<f64>() * inv;
                if let Some(g) = grads.as_deref_mut() {
                    let gt = if dst == 0 { &mut g.planes[m] } else { &mut g.lines[m] };
                    for (o, v) in gt.iter_mut().zip(src) {
                        *o += weight * inv * if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
        }
        weight * total
    }
}

/// Smoothness and sparsity penalties on the grid factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridRegularizer {
    pub tv_density: f64,
    pub tv_appearance: f64,
    pub l1_density: f64,
}

impl GridRegularizer {
    /// Penalty value, with its gradient added into `grads` when given.
    pub fn apply(&self, params: &FieldParams, mut grads: Option<&mut FieldParams>) -> f64 {
        let mut total = 0.0;
        if self.tv_density > 0.0 {
            total += params.density.total_variation(self.tv_density, grads.as_deref_mut().map(|g| &mut g.density));
        }
        if self.tv_appearance > 0.0 {
            total += params.appearance.total_variation(self.tv_appearance, grads.as_deref_mut().map(|g| &mut g.appearance));
        }
        if self.l1_density > 0.0 {
            total += params.density.l1(self.l1_density, grads.map(|g| &mut g.density));
        }
        total
    }
}

#[derive(Clone, Copy, Debug)]
struct AxisInterp {
    i0: usize,
    f: f64,
}

/// Lattice coordinates of a query point along each axis.
#[derive(Clone, Copy, Debug)]
struct Interp {
    axes: [AxisInterp; 3],
}

impl Interp {
    fn new(cfg: &FieldConfig, x: Vec3) -> Self {
        let top = (cfg.grid_res - 1) as f64;
        let axis = |a: usize| {
            let g = (x[a] - cfg.bounds_min[a]) / (cfg.bounds_max[a] - cfg.bounds_min[a]) * top;
            let g = g.clamp(0.0, top);
            let i0 = (libm::floor(g) as usize).min(cfg.grid_res - 2);
            AxisInterp { i0, f: g - i0 as f64 }
        };
        Interp { axes: [axis(0), axis(1), axis(2)] }
    }

    /// Plane corner offsets (within one rank slice) and bilinear weights for pairing `m`.
    #[inline]
    fn plane_taps(&self, m: usize, res: usize) -> ([usize; 4], [f64; 4]) {
        let (a, b, _) = PAIRINGS[m];
        let (ia, fa) = (self.axes[a].i0, self.axes[a].f);
        let (ib, fb) = (self.axes[b].i0, self.axes[b].f);
        let base = ia * res + ib;
        (
            [base, base + 1, base + res, base + res + 1],
            [(1.0 - fa) * (1.0 - fb), (1.0 - fa) * fb, fa * (1.0 - fb), fa * fb],
        )
    }

    #[inline]
    fn line_taps(&self, m: usize) -> (usize, [f64; 2]) {
        let c = PAIRINGS[m].2;
        (self.axes[c].i0, [1.0 - self.axes[c].f, self.axes[c].f])
    }
}

/// Evaluate all rank-one components `plane·line` of `grid` at `interp`, calling
/// `sink(m, r, plane_value, line_value)`.
#[inline]
fn for_each_component(grid: &VmGrid, interp: &Interp, mut sink: impl FnMut(usize, usize, f64, f64)) {
    let res = grid.res;
    for m in 0..3 {
        let (po, pw) = interp.plane_taps(m, res);
        let (lo, lw) = interp.line_taps(m);
        let plane = &grid.planes[m];
        let line = &grid.lines[m];
        for r in 0..grid.rank {
            let pb = r * res * res;
            let p = pw[0] * plane[pb + po[0]]
                + pw[1] * plane[pb + po[1]]
                + pw[2] * plane[pb + po[2]]
                + pw[3] * plane[pb + po[3]];
            let lb = r * res + lo;
            let l = lw[0] * line[lb] + lw[1] * line[lb + 1];
            sink(m, r, p, l);
        }
    }
}

/// Scatter `d(component)` for component `(m, r)` into the factor gradients.
#[inline]
fn scatter_component(grads: &mut VmGrid, interp: &Interp, m: usize, r: usize, d_plane: f64, d_line: f64) {
    let res = grads.res;
    let (po, pw) = interp.plane_taps(m, res);
    let (lo, lw) = interp.line_taps(m);
    let pb = r * res * res;
    let plane = &mut grads.planes[m];
    for k in 0..4 {
        plane[pb + po[k]] += pw[k] * d_plane;
    }
    let lb = r * res + lo;
    grads.lines[m][lb] += lw[0] * d_line;
    grads.lines[m][lb + 1] += lw[1] * d_line;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrt(in_dim as f64);
        Dense {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense { weight: vec![0.0; self.weight.len()], bias: vec![0.0; self.bias.len()], ..*self }
    }

    #[inline]
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            out[o] = self.bias[o] + crate::math::dot(row, x);
        }
    }

    /// Accumulate parameter gradients and write `dx` (overwritten).
    #[inline]
    fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Dense, dx: &mut [f64]) {
        dx.fill(0.0);
        for o in 0..self.out_dim {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
    }
}

/// All trainable tensors of a field. Also used as the gradient accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    pub density: VmGrid,
    pub appearance: VmGrid,
    /// Appearance dictionary, row-major `appearance_dim × 3·appearance_rank`.
    pub basis: Vec<f64>,
    /// Hidden layers followed by the RGB output layer.
    pub decoder: Vec<Dense>,
}

impl FieldParams {
    pub fn zeros_like(&self) -> Self {
        FieldParams {
            density: VmGrid::zeros(self.density.rank, self.density.res),
            appearance: VmGrid::zeros(self.appearance.rank, self.appearance.res),
            basis: vec![0.0; self.basis.len()],
            decoder: self.decoder.iter().map(Dense::zeros_like).collect(),
        }
    }

    /// Group names in visiting order, for gradient-coverage checks.
    pub fn group_norms(&self) -> Vec<(alloc::string::String, f64)> {
        self.tensors()
            .into_iter()
            .map(|t| (t.name, libm::sqrt(t.data.iter().map(|v| v * v).sum::<f64>())))
            .collect()
    }
}

impl ParamSet for FieldParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (tag, grid) in [("density", &self.density), ("appearance", &self.appearance)] {
            for m in 0..3 {
                out.push(TensorRef {
                    name: format!("{tag}.plane{m}"),
                    group: ParamGroup::Grid,
                    shape: vec![grid.rank, grid.res, grid.res],
                    data: &grid.planes[m],
                });
            }
            for m in 0..3 {
                out.push(TensorRef {
                    name: format!("{tag}.line{m}"),
                    group: ParamGroup::Grid,
                    shape: vec![grid.rank, grid.res],
                    data: &grid.lines[m],
                });
            }
        }
        let feat = 3 * self.appearance.rank;
        out.push(TensorRef {
            name: "basis".into(),
            group: ParamGroup::Network,
            shape: vec![self.basis.len() / feat.max(1), feat],
            data: &self.basis,
        });
        for (i, layer) in self.decoder.iter().enumerate() {
            out.push(TensorRef {
                name: format!("decoder.{i}.weight"),
                group: ParamGroup::Network,
                shape: vec![layer.out_dim, layer.in_dim],
                data: &layer.weight,
            });
            out.push(TensorRef {
                name: format!("decoder.{i}.bias"),
                group: ParamGroup::Network,
                shape: vec![layer.out_dim],
                data: &layer.bias,
            });
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (tag, grid) in [("density", &mut self.density), ("appearance", &mut self.appearance)] {
            let VmGrid { planes, lines, .. } = grid;
            for (m, p) in planes.iter_mut().enumerate() {
                out.push(TensorMut { name: format!("{tag}.plane{m}"), group: ParamGroup::Grid, data: p });
            }
            for (m, l) in lines.iter_mut().enumerate() {
                out.push(TensorMut { name: format!("{tag}.line{m}"), group: ParamGroup::Grid, data: l });
            }
        }
        out.push(TensorMut { name: "basis".into(), group: ParamGroup::Network, data: &mut self.basis });
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            let Dense { weight, bias, .. } = layer;
            out.push(TensorMut { name: format!("decoder.{i}.weight"), group: ParamGroup::Network, data: weight });
            out.push(TensorMut { name: format!("decoder.{i}.bias"), group: ParamGroup::Network, data: bias });
        }
        out
    }
}

/// Reusable buffers for decoder evaluation.
#[derive(Clone, Debug, Default)]
pub struct FieldScratch {
    feat: Vec<f64>,
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
    grad_code: Vec<f64>,
}

impl FieldScratch {
    fn prepare(&mut self, cfg: &FieldConfig) {
        let feat = 3 * cfg.appearance_rank;
        if self.feat.len() != feat {
            self.feat = vec![0.0; feat];
        }
        let din = cfg.decoder_input_dim();
        if self.input.len() != din {
            self.input = vec![0.0; din];
        }
        let layers = cfg.hidden_layers + 1;
        if self.acts.len() != layers {
            self.acts = (0..layers)
                .map(|l| vec![0.0; if l + 1 == layers { 3 } else { cfg.hidden_width }])
                .collect();
        }
        let widest = din.max(cfg.hidden_width).max(3 * cfg.appearance_rank);
        if self.grad_a.len() != widest {
            self.grad_a = vec![0.0; widest];
            self.grad_b = vec![0.0; widest];
        }
        if self.grad_code.len() != cfg.appearance_dim {
            self.grad_code = vec![0.0; cfg.appearance_dim];
        }
    }
}

/// Anything that can be queried for density and color at a point.
pub trait RadianceField {
    fn config(&self) -> &FieldConfig;

    /// Density at `x`; zero outside the scene bounds.
    fn density(&self, x: Vec3) -> f64;

    /// Color at `x` seen along unit direction `d`; black outside the scene bounds.
    fn color(&self, x: Vec3, d: Vec3, scratch: &mut FieldScratch) -> [f64; 3];

    fn query(&self, x: Vec3, d: Vec3) -> (f64, [f64; 3]) {
        let mut scratch = FieldScratch::default();
        (self.density(x), self.color(x, d, &mut scratch))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorialField {
    pub config: FieldConfig,
    pub params: FieldParams,
}

impl TensorialField {
    /// Randomly initialized field, deterministic in `seed`.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let density = VmGrid::random(config.density_rank, config.grid_res, config.init_scale, &mut rng);
        let appearance = VmGrid::random(config.appearance_rank, config.grid_res, config.init_scale, &mut rng);
        let feat = 3 * config.appearance_rank;
        let bound = 1.0 / libm::sqrt(feat as f64);
        let basis = (0..config.appearance_dim * feat).map(|_| rng.gen_range(-bound..bound)).collect();
        let mut decoder = Vec::with_capacity(config.hidden_layers + 1);
        let mut din = config.decoder_input_dim();
        for _ in 0..config.hidden_layers {
            decoder.push(Dense::uniform(din, config.hidden_width, &mut rng));
            din = config.hidden_width;
        }
        let mut head = Dense::uniform(din, 3, &mut rng);
        head.bias.fill(0.0);
        decoder.push(head);
        Ok(TensorialField { config, params: FieldParams { density, appearance, basis, decoder } })
    }

    /// Rebuild a field from parameters, checking that shapes match the config.
    pub fn from_parts(config: FieldConfig, params: FieldParams) -> Result<Self> {
        config.validate()?;
        let reference = TensorialField::init(FieldConfig { init_scale: 0.0, ..config.clone() }, 0)?;
        let want = reference.params.tensors();
        let got = params.tensors();
        if want.len() != got.len()
            || want.iter().zip(&got).any(|(a, b)| a.name != b.name || a.data.len() != b.data.len())
        {
            return Err(Error::Shape("field parameters do not match configuration".into()));
        }
        Ok(TensorialField { config, params })
    }

    pub fn zero_grads(&self) -> FieldParams {
        self.params.zeros_like()
    }

    #[inline]
    fn raw_density(&self, interp: &Interp) -> f64 {
        let mut acc = 0.0;
        for_each_component(&self.params.density, interp, |_, _, p, l| acc += p * l);
        acc + self.config.density_shift
    }

    fn encode_direction(&self, d: Vec3, out: &mut [f64]) {
        out[..3].copy_from_slice(&d.0);
        let mut k = 3;
        for f in 0..self.config.dir_freqs {
            let scale = (1u64 << f) as f64;
            for a in 0..3 {
                out[k] = libm::sin(scale * d[a]);
                out[k + 1] = libm::cos(scale * d[a]);
                k += 2;
            }
        }
    }

    /// Appearance features, decoder input and activations into `scratch`.
    fn color_forward(&self, interp: &Interp, d: Vec3, scratch: &mut FieldScratch) -> [f64; 3] {
        scratch.prepare(&self.config);
        let rank = self.config.appearance_rank;
        let feat = &mut scratch.feat;
        for_each_component(&self.params.appearance, interp, |m, r, p, l| feat[m * rank + r] = p * l);
        let dim = self.config.appearance_dim;
        let nf = feat.len();
        for i in 0..dim {
            let row = &self.params.basis[i * nf..(i + 1) * nf];
            scratch.input[i] = crate::math::dot(row, feat);
        }
        self.encode_direction(d, &mut scratch.input[dim..]);
        let n = self.params.decoder.len();
        for (l, layer) in self.params.decoder.iter().enumerate() {
            let (prev, rest) = scratch.acts.split_at_mut(l);
            let x: &[f64] = if l == 0 { &scratch.input } else { &prev[l - 1] };
            let out = &mut rest[0];
            layer.forward(x, out);
            if l + 1 < n {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            } else {
                out.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
        }
        let c = &scratch.acts[n - 1];
        [c[0], c[1], c[2]]
    }

    /// Accumulate `∂L/∂params` for one sample given `∂L/∂σ` and `∂L/∂c` at that
    /// sample. Samples outside the bounds contribute nothing.
    pub fn backward_sample(
        &self,
        x: Vec3,
        d: Vec3,
        d_sigma: f64,
        d_color: Option<[f64; 3]>,
        grads: &mut FieldParams,
        scratch: &mut FieldScratch,
    ) {
        if !self.config.contains(x) {
            return;
        }
        let interp = Interp::new(&self.config, x);
        if d_sigma != 0.0 {
            let draw = d_sigma * sigmoid(self.raw_density(&interp));
            for_each_component(&self.params.density, &interp, |m, r, p, l| {
                scatter_component(&mut grads.density, &interp, m, r, draw * l, draw * p);
            });
        }
        let Some(dc) = d_color else { return };
        if dc == [0.0; 3] {
            return;
        }
        let c = self.color_forward(&interp, d, scratch);
        let n = self.params.decoder.len();
        // Output sigmoid.
        let mut dy: Vec<f64> = (0..3).map(|k| dc[k] * c[k] * (1.0 - c[k])).collect();
        let FieldScratch { input, acts, grad_a, grad_b, grad_code, feat } = scratch;
        for l in (0..n).rev() {
            let layer = &self.params.decoder[l];
            let x: &[f64] = if l == 0 { input } else { &acts[l - 1] };
            let dx = &mut grad_a[..layer.in_dim];
            layer.backward(x, &dy, &mut grads.decoder[l], dx);
            if l > 0 {
                // ReLU of the previous layer.
                let prev = &acts[l - 1];
                let buf = &mut grad_b[..layer.in_dim];
                for i in 0..layer.in_dim {
                    buf[i] = if prev[i] > 0.0 { dx[i] } else { 0.0 };
                }
                dy.clear();
                dy.extend_from_slice(buf);
            } else {
                grad_code.copy_from_slice(&dx[..self.config.appearance_dim]);
            }
        }
        let nf = feat.len();
        let dim = self.config.appearance_dim;
        // d feat = Bᵀ d code, d B = d code ⊗ feat.
        let dfeat = &mut grad_b[..nf];
        dfeat.fill(0.0);
        for i in 0..dim {
            let g = grad_code[i];
            if g == 0.0 {
                continue;
            }
            let row = &self.params.basis[i * nf..(i + 1) * nf];
            let grow = &mut grads.basis[i * nf..(i + 1) * nf];
            for j in 0..nf {
                grow[j] += g * feat[j];
                dfeat[j] += g * row[j];
            }
        }
        let rank = self.config.appearance_rank;
        for_each_component(&self.params.appearance, &interp, |m, r, p, l| {
            let g = dfeat[m * rank + r];
            if g != 0.0 {
                scatter_component(&mut grads.appearance, &interp, m, r, g * l, g * p);
            }
        });
    }

    pub fn snapshot(&self, step: usize) -> FieldSnapshot {
        FieldSnapshot { step, field: self.clone() }
    }
}

impl RadianceField for TensorialField {
    fn config(&self) -> &FieldConfig {
        &self.config
    }

    #[inline]
    fn density(&self, x: Vec3) -> f64 {
        if !self.config.contains(x) {
            return 0.0;
        }
        softplus(self.raw_density(&Interp::new(&self.config, x)))
    }

    fn color(&self, x: Vec3, d: Vec3, scratch: &mut FieldScratch) -> [f64; 3] {
        if !self.config.contains(x) {
            return [0.0; 3];
        }
        self.color_forward(&Interp::new(&self.config, x), d, scratch)
    }
}

/// Immutable copy of a field captured at a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSnapshot {
    step: usize,
    field: TensorialField,
}

impl FieldSnapshot {
    pub fn new(step: usize, field: TensorialField) -> Self {
        FieldSnapshot { step, field }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn field(&self) -> &TensorialField {
        &self.field
    }
}

impl RadianceField for FieldSnapshot {
    fn config(&self) -> &FieldConfig {
        &self.field.config
    }
    fn density(&self, x: Vec3) -> f64 {
        self.field.density(x)
    }
    fn color(&self, x: Vec3, d: Vec3, scratch: &mut FieldScratch) -> [f64; 3] {
        self.field.color(x, d, scratch)
    }
}

/// Field whose density and color are the per-query means over snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleField {
    snapshots: Vec<FieldSnapshot>,
}

impl EnsembleField {
    pub fn new(snapshots: Vec<FieldSnapshot>) -> Result<Self> {
        let Some(first) = snapshots.first() else {
            return Err(config_err!("an ensemble needs at least one snapshot"));
        };
        for pair in snapshots.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(config_err!(
                    "snapshot steps must be strictly increasing ({} then {})",
                    pair[0].step,
                    pair[1].step
                ));
            }
        }
        if snapshots.iter().any(|s| s.field.config != first.field.config) {
            return Err(config_err!("ensemble snapshots must share one configuration"));
        }
        Ok(EnsembleField { snapshots })
    }

    pub fn snapshots(&self) -> &[FieldSnapshot] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// Running mean, exact when every term is equal.
#[inline]
fn running_mean(mean: f64, value: f64, count: usize) -> f64 {
    mean + (value - mean) / count as f64
}

impl RadianceField for EnsembleField {
    fn config(&self) -> &FieldConfig {
        &self.snapshots[0].field.config
    }

    fn density(&self, x: Vec3) -> f64 {
        let mut mean = 0.0;
        for (i, s) in self.snapshots.iter().enumerate() {
            mean = running_mean(mean, s.field.density(x), i + 1);
        }
        mean
    }

    fn color(&self, x: Vec3, d: Vec3, scratch: &mut FieldScratch) -> [f64; 3] {
        let mut mean = [0.0; 3];
        for (i, s) in self.snapshots.iter().enumerate() {
            let c = s.field.color(x, d, scratch);
            for k in 0..3 {
                mean[k] = running_mean(mean[k], c[k], i + 1);
            }
        }
        mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_config() -> FieldConfig {
        FieldConfig {
            grid_res: 16,
            density_rank: 2,
            appearance_rank: 3,
            appearance_dim: 5,
            hidden_width: 8,
            hidden_layers: 2,
            init_scale: 0.5,
            ..FieldConfig::default()
        }
    }

    fn random_point<R: Rng>(rng: &mut R) -> Vec3 {
        Vec3::new(rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4))
    }

    fn random_dir<R: Rng>(rng: &mut R) -> Vec3 {
        Vec3::new(normal(rng), normal(rng), normal(rng)).normalized()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = FieldConfig { grid_res: 64, density_rank: 4, appearance_rank: 12, ..FieldConfig::default() };
        let a = TensorialField::init(cfg.clone(), 1).unwrap();
        let b = TensorialField::init(cfg, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rank_is_rejected() {
        let cfg = FieldConfig { density_rank: 0, ..small_config() };
        assert!(matches!(TensorialField::init(cfg, 1), Err(Error::Config(_))));
        let cfg = FieldConfig { grid_res: 8, ..small_config() };
        assert!(matches!(TensorialField::init(cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn outside_bounds_is_culled() {
        let f = TensorialField::init(small_config(), 2).unwrap();
        let (s, c) = f.query(Vec3::new(0.0, 0.0, 1.6), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(s, 0.0);
        assert_eq!(c, [0.0; 3]);
    }

    #[test]
    fn zero_density_grids_are_nearly_transparent() {
        let mut f = TensorialField::init(small_config(), 2).unwrap();
        f.params.density = VmGrid::zeros(2, 16);
        let s = f.density(Vec3::new(0.1, 0.2, 0.3));
        assert_eq!(s, softplus(-5.0));
        assert!(s < 0.01);
    }

    #[test]
    fn lattice_points_match_direct_factor_products() {
        let f = TensorialField::init(small_config(), 4).unwrap();
        let cfg = &f.config;
        let mut rng = seeded(5);
        let res = cfg.grid_res;
        for _ in 0..20 {
            let idx = [rng.gen_range(0..res), rng.gen_range(0..res), rng.gen_range(0..res)];
            let x = Vec3::new(
                cfg.bounds_min[0] + idx[0] as f64 * (cfg.bounds_max[0] - cfg.bounds_min[0]) / (res - 1) as f64,
                cfg.bounds_min[1] + idx[1] as f64 * (cfg.bounds_max[1] - cfg.bounds_min[1]) / (res - 1) as f64,
                cfg.bounds_min[2] + idx[2] as f64 * (cfg.bounds_max[2] - cfg.bounds_min[2]) / (res - 1) as f64,
            );
            let mut raw = cfg.density_shift;
            let g = &f.params.density;
            for (m, &(a, b, c)) in PAIRINGS.iter().enumerate() {
                for r in 0..g.rank {
                    raw += g.planes[m][r * res * res + idx[a] * res + idx[b]] * g.lines[m][r * res + idx[c]];
                }
            }
            assert!((f.density(x) - softplus(raw)).abs() <= 1e-6);
        }
    }

    #[test]
    fn continuous_across_cell_boundaries() {
        let f = TensorialField::init(small_config(), 6).unwrap();
        let cell = 3.0 / 15.0;
        let d = Vec3::new(0.0, 0.6, 0.8);
        for k in 1..14 {
            let x = Vec3::new(-1.5 + k as f64 * cell, 0.137, -0.42);
            let y = x + Vec3::new(1e-6 * cell, 0.0, 0.0);
            let (sa, ca) = f.query(x, d);
            let (sb, cb) = f.query(y, d);
            assert!((sa - sb).abs() <= 1e-4);
            assert!((0..3).all(|i| (ca[i] - cb[i]).abs() <= 1e-4));
        }
    }

    #[test]
    fn colors_are_bounded() {
        let f = TensorialField::init(small_config(), 8).unwrap();
        let mut rng = seeded(9);
        for _ in 0..200 {
            let (s, c) = f.query(random_point(&mut rng), random_dir(&mut rng));
            assert!(s >= 0.0);
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    /// Central finite differences of `a·σ + b·c` against the analytic backward pass,
    /// for a few entries of every parameter tensor.
    #[test]
    fn gradients_match_finite_differences() {
        let mut f = TensorialField::init(small_config(), 10).unwrap();
        let mut rng = seeded(11);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let x = random_point(&mut rng);
            let d = random_dir(&mut rng);
            let a = normal(&mut rng);
            let b = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
            let objective = |f: &TensorialField| {
                let (s, c) = f.query(x, d);
                a * s + b[0] * c[0] + b[1] * c[1] + b[2] * c[2]
            };
            let mut grads = f.zero_grads();
            let mut scratch = FieldScratch::default();
            f.backward_sample(x, d, a, Some(b), &mut grads, &mut scratch);
            let gt = grads.tensors();
            let n_tensors = gt.len();
            for k in 0..n_tensors {
                // The entries with the largest gradient plus one random entry.
                let g = gt[k].data;
                let mut best = 0;
                for (i, v) in g.iter().enumerate() {
                    if v.abs() > g[best].abs() {
                        best = i;
                    }
                }
                for &i in &[best, rng.gen_range(0..g.len())] {
                    let analytic = g[i];
                    let orig = f.params.tensors()[k].data[i];
                    f.params.tensors_mut()[k].data[i] = orig + h;
                    let up = objective(&f);
                    f.params.tensors_mut()[k].data[i] = orig - h;
                    let down = objective(&f);
                    f.params.tensors_mut()[k].data[i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4);
                    worst = worst.max(err);
                }
            }
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn ensemble_identities() {
        let f = TensorialField::init(small_config(), 12).unwrap();
        let mut g = f.clone();
        g.params.density.lines[0].iter_mut().for_each(|v| *v *= 1.7);
        g.params.decoder[0].bias.iter_mut().for_each(|v| *v += 0.3);
        let mut rng = seeded(13);
        let single = EnsembleField::new(vec![f.snapshot(1)]).unwrap();
        let triple = EnsembleField::new(vec![f.snapshot(1), f.snapshot(2), f.snapshot(3)]).unwrap();
        let mixed = EnsembleField::new(vec![f.snapshot(1), f.snapshot(2), g.snapshot(3)]).unwrap();
        for _ in 0..50 {
            let x = random_point(&mut rng);
            let d = random_dir(&mut rng);
            let base = f.query(x, d);
            assert_eq!(single.query(x, d), base);
            assert_eq!(triple.query(x, d), base);
            let other = g.query(x, d);
            let (ms, mc) = mixed.query(x, d);
            assert!((ms - (2.0 * base.0 + other.0) / 3.0).abs() <= 1e-7);
            for k in 0..3 {
                assert!((mc[k] - (2.0 * base.1[k] + other.1[k]) / 3.0).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn empty_or_unordered_ensembles_are_rejected() {
        assert!(EnsembleField::new(Vec::new()).is_err());
        let f = TensorialField::init(small_config(), 1).unwrap();
        assert!(EnsembleField::new(vec![f.snapshot(5), f.snapshot(5)]).is_err());
    }

    #[test]
    fn permuting_rank_components_leaves_queries_unchanged() {
        let f = TensorialField::init(small_config(), 14).unwrap();
        let mut p = f.clone();
        let res = p.config.grid_res;
        for m in 0..3 {
            let plane = &mut p.params.density.planes[m];
            let (a, b) = plane.split_at_mut(res * res);
            a.swap_with_slice(&mut b[..res * res]);
            let line = &mut p.params.density.lines[m];
            let (a, b) = line.split_at_mut(res);
            a.swap_with_slice(&mut b[..res]);
        }
        let x = Vec3::new(0.3, -0.2, 0.9);
        assert!((f.density(x) - p.density(x)).abs() < 1e-12);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let f = TensorialField::init(small_config(), 14).unwrap();
        let reg = GridRegularizer { tv_density: 0.7, tv_appearance: 0.3, l1_density: 0.05 };
        let mut grads = f.zero_grads();
        let value = reg.apply(&f.params, Some(&mut grads));
        assert!(value > 0.0);
        let mut p = f.params.clone();
        let mut rng = seeded(15);
        let h = 1e-6;
        for t in 0..12 {
            for _ in 0..5 {
                let i = rng.gen_range(0..p.tensors()[t].data.len());
                let orig = p.tensors()[t].data[i];
                p.tensors_mut()[t].data[i] = orig + h;
                let up = reg.apply(&p, None);
                p.tensors_mut()[t].data[i] = orig - h;
                let dn = reg.apply(&p, None);
                p.tensors_mut()[t].data[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads.tensors()[t].data[i];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs(), "{t}/{i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn total_variation_matches_direct_sum() {
        let mut g = VmGrid::zeros(1, 3);
        g.planes[0] = vec![0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        g.lines[1] = vec![1.0, 0.0, 0.0];
        // Squared vertical steps (0, 1, 9, 4, 0, 0) and horizontal steps (1, 4, 0, 0, 4, 0) over 12 pairs.
        let plane = 23.0 / 12.0;
        let line = 1.0 / 2.0;
        assert!((g.total_variation(2.0, None) - 2.0 * (plane + line)).abs() < 1e-12);
        let flat = VmGrid { planes: [vec![0.4; 9], vec![0.4; 9], vec![0.4; 9]], lines: [vec![0.4; 3], vec![0.4; 3], vec![0.4; 3]], ..g };
        assert_eq!(flat.total_variation(1.0, None), 0.0);
        assert!((flat.l1(1.0, None) - 6.0 * 0.4).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn queries_respect_output_ranges(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0, seed in 0u64..20) {
            let f = TensorialField::init(small_config(), seed).unwrap();
            let (s, c) = f.query(Vec3::new(x, y, z), Vec3::new(0.0, 0.6, 0.8));
            proptest::prop_assert!(s >= 0.0 && s.is_finite());
            proptest::prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
