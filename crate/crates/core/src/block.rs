//! The weight-tied transformation `f(z, x)` iterated to equilibrium.
//!
//! ```text
//! h0      = W_in z + W_inj x + b_in                 (1x1 projections, 2 -> C)
//! h_{i+1} = relu(norm_i(conv_i(h_i)))               (i = 0..n_sub_blocks)
//! f(z, x) = W_out h_n + b_out                       (1x1 readout, C -> 2)
//! ```
//!
//! `z` and `x` are `[2, S, T]` real/imag planes; the block is fully
//! convolutional so any grid size works. Two normalizations are available:
//! weight scaling (per-output-channel weight normalization, `w = g v / |v|`)
//! and group normalization over (channel group x grid).
//!
//! Besides the forward map the block provides exact vector-Jacobian products
//! with respect to `z` and to the parameters. A [`Linearization`] holds the
//! activations of one application and answers any number of products at that
//! point, which is all the implicit backward pass needs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{self, PaddedStack};
use crate::seed;

/// Floor for every normalization denominator.
pub const NORM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    GroupNorm,
    WeightScaled,
}

impl Norm {
    pub fn code(self) -> u32 {
        match self {
            Norm::GroupNorm => 0,
            Norm::WeightScaled => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Norm::GroupNorm),
            1 => Some(Norm::WeightScaled),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    AdditiveProjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IebConfig {
    pub hidden_width: usize,
    pub n_sub_blocks: usize,
    pub kernel_sizes: Vec<usize>,
    pub norm: Norm,
    pub injection: Injection,
    pub seed: u64,
}

impl Default for IebConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            n_sub_blocks: 4,
            kernel_sizes: vec![3, 3, 3, 5],
            norm: Norm::WeightScaled,
            injection: Injection::AdditiveProjection,
            seed: 0,
        }
    }
}

impl IebConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be >= 1".into()));
        }
        if self.n_sub_blocks == 0 {
            return Err(Error::Config("n_sub_blocks must be >= 1".into()));
        }
        if self.kernel_sizes.len() != self.n_sub_blocks {
            return Err(Error::Config(format!(
                "n_sub_blocks = {} but {} kernel sizes given",
                self.n_sub_blocks,
                self.kernel_sizes.len()
            )));
        }
        if self.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        let last = *self.kernel_sizes.last().unwrap();
        if self.kernel_sizes.iter().any(|&k| k > last) {
            return Err(Error::Config("the last kernel must be the largest".into()));
        }
        Ok(())
    }

    /// Border width needed by the largest kernel.
    pub fn pad(&self) -> usize {
        self.kernel_sizes.iter().max().copied().unwrap_or(1) / 2
    }

    pub fn groups(&self) -> usize {
        [4, 2, 1].into_iter().find(|g| self.hidden_width % g == 0).unwrap()
    }
}

/// Offsets of each tensor inside the flat parameter vector. The canonical
/// order is: `in_w, in_b, inj_w`, then per stage `conv_w, conv_b, norm_a,
/// [norm_b]`, then `out_w, out_b`. `norm_a` is the weight-norm gain or the
/// group-norm scale; `norm_b` (group norm only) is the group-norm shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub in_w: std::ops::Range<usize>,
    pub in_b: std::ops::Range<usize>,
    pub inj_w: std::ops::Range<usize>,
    pub stages: Vec<StageLayout>,
    pub out_w: std::ops::Range<usize>,
    pub out_b: std::ops::Range<usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageLayout {
    pub kernel: usize,
    pub conv_w: std::ops::Range<usize>,
    pub conv_b: std::ops::Range<usize>,
    pub norm_a: std::ops::Range<usize>,
    pub norm_b: Option<std::ops::Range<usize>>,
}

impl ParamLayout {
    pub fn new(cfg: &IebConfig) -> Self {
        let c = cfg.hidden_width;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let in_w = take(c * 2);
        let in_b = take(c);
        let inj_w = take(c * 2);
        let mut stages = Vec::with_capacity(cfg.n_sub_blocks);
        for &k in &cfg.kernel_sizes {
            let conv_w = take(c * c * k * k);
            let conv_b = take(c);
            let norm_a = take(c);
            let norm_b = match cfg.norm {
                Norm::GroupNorm => Some(take(c)),
                Norm::WeightScaled => None,
            };
            stages.push(StageLayout {
                kernel: k,
                conv_w,
                conv_b,
                norm_a,
                norm_b,
            });
        }
        let out_w = take(2 * c);
        let out_b = take(2);
        Self {
            in_w,
            in_b,
            inj_w,
            stages,
            out_w,
            out_b,
            total: at,
        }
    }
}

/// All trainable values of one block, flat in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct IebParams {
    pub config: IebConfig,
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl IebParams {
    pub fn zeros(cfg: &IebConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        Ok(Self {
            config: cfg.clone(),
            values: vec![0.0; layout.total],
            layout,
        })
    }

    pub fn from_values(cfg: &IebConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        if values.len() != p.layout.total {
            return Err(Error::Shape(format!(
                "{} parameter values given, configuration needs {}",
                values.len(),
                p.layout.total
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("parameters contain non-finite values".into()));
        }
        p.values = values;
        Ok(p)
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn slice(&self, r: &std::ops::Range<usize>) -> &[f64] {
        &self.values[r.clone()]
    }

    pub fn slice_mut(&mut self, r: &std::ops::Range<usize>) -> &mut [f64] {
        &mut self.values[r.clone()]
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    /// Zeroes the 1x1 readout, making `f` the zero map.
    pub fn zero_readout(&mut self) {
        let (w, b) = (self.layout.out_w.clone(), self.layout.out_b.clone());
        self.values[w].fill(0.0);
        self.values[b].fill(0.0);
    }
}

/// Trainable scalar count for a configuration.
pub fn param_count_for(cfg: &IebConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(ParamLayout::new(cfg).total)
}

pub fn param_count(params: &IebParams) -> usize {
    params.count()
}

/// Seeded initialization: fan-in scaled Gaussian weights, zero biases, the
/// last stage scaled by 0.1 so the map starts close to a contraction.
pub fn init_params(cfg: &IebConfig) -> Result<IebParams> {
    let mut p = IebParams::zeros(cfg)?;
    let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::STREAM_INIT]));
    let c = cfg.hidden_width;
    let mut gauss = |n: usize, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                g * std
            })
            .collect()
    };
    let layout = p.layout.clone();
    let in_w = gauss(2 * c, (1.0f64 / 2.0).sqrt());
    p.slice_mut(&layout.in_w).copy_from_slice(&in_w);
    let inj_w = gauss(2 * c, (1.0f64 / 2.0).sqrt());
    p.slice_mut(&layout.inj_w).copy_from_slice(&inj_w);
    let n_stages = layout.stages.len();
    for (s, st) in layout.stages.iter().enumerate() {
        let fan_in = c * st.kernel * st.kernel;
        let w = gauss(c * fan_in, (2.0 / fan_in as f64).sqrt());
        let last_scale = if s + 1 == n_stages { 0.1 } else { 1.0 };
        match cfg.norm {
            Norm::WeightScaled => {
                // Gains start at the row norms so the effective weight equals
                // the draw, then the final stage is damped.
                let gains: Vec<f64> = w.chunks(fan_in).map(|row| row_norm(row) * last_scale).collect();
                p.slice_mut(&st.conv_w).copy_from_slice(&w);
                p.slice_mut(&st.norm_a).copy_from_slice(&gains);
            }
            Norm::GroupNorm => {
                // The normalization cancels any weight scale, so damping goes
                // on the group-norm scale instead.
                p.slice_mut(&st.conv_w).copy_from_slice(&w);
                p.slice_mut(&st.norm_a).fill(last_scale);
            }
        }
    }
    let out_w = gauss(2 * c, (1.0 / c as f64).sqrt());
    p.slice_mut(&layout.out_w).copy_from_slice(&out_w);
    Ok(p)
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Real/imag planes `[2, rows, cols]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form [2, {rows}, {cols}] planes",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; 2 * rows * cols],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [2, self.rows, self.cols]
    }

    pub fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

/// Parameters in the form the kernels consume. Weight normalization is
/// resolved once here so repeated applications share it.
#[derive(Debug, Clone)]
pub struct PreparedBlock<'a> {
    pub params: &'a IebParams,
    /// Effective convolution weights per stage.
    eff_w: Vec<Vec<f64>>,
    /// Floored row norms of the raw weights (weight scaling only).
    row_norms: Vec<Vec<f64>>,
}

impl<'a> PreparedBlock<'a> {
    pub fn new(params: &'a IebParams) -> Self {
        let c = params.config.hidden_width;
        let mut eff_w = Vec::new();
        let mut row_norms = Vec::new();
        for st in &params.layout.stages {
            let v = params.slice(&st.conv_w);
            match params.config.norm {
                Norm::WeightScaled => {
                    let fan_in = c * st.kernel * st.kernel;
                    let g = params.slice(&st.norm_a);
                    let norms: Vec<f64> = v.chunks(fan_in).map(|r| row_norm(r).max(NORM_FLOOR)).collect();
                    let mut w = v.to_vec();
                    for (o, row) in w.chunks_mut(fan_in).enumerate() {
                        let s = g[o] / norms[o];
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    eff_w.push(w);
                    row_norms.push(norms);
                }
                Norm::GroupNorm => {
                    eff_w.push(v.to_vec());
                    row_norms.push(Vec::new());
                }
            }
        }
        Self { params, eff_w, row_norms }
    }

    fn pad(&self) -> usize {
        self.params.config.pad()
    }

    /// One application, keeping every intermediate needed for products.
    pub fn linearize(&self, z: &Planes, x: &Planes) -> Result<Linearization<'_, 'a>> {
        check_pair(z, x)?;
        if z.data.iter().chain(&x.data).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("block input contains non-finite values".into()));
        }
        let p = self.params;
        let cfg = &p.config;
        let c = cfg.hidden_width;
        let pad = self.pad();
        let (rows, cols) = (z.rows, z.cols);
        let zs = PaddedStack::from_dense(2, rows, cols, pad, &z.data);
        let xs = PaddedStack::from_dense(2, rows, cols, pad, &x.data);
        let mut h0 = PaddedStack::zeros(c, rows, cols, pad);
        grid::pointwise_forward(&zs, p.slice(&p.layout.in_w), Some(p.slice(&p.layout.in_b)), &mut h0);
        grid::pointwise_accumulate(&xs, p.slice(&p.layout.inj_w), &mut h0);

        let mut stages = Vec::with_capacity(cfg.n_sub_blocks);
        for (s, st) in p.layout.stages.iter().enumerate() {
            let input = if s == 0 {
                &h0
            } else {
                &stages.last().map(|t: &StageTape| &t.act).unwrap()
            };
            let mut pre = PaddedStack::zeros(c, rows, cols, pad);
            grid::conv_forward(input, &self.eff_w[s], p.slice(&st.conv_b), st.kernel, &mut pre);
            let (normed, stats) = match cfg.norm {
                Norm::WeightScaled => (None, None),
                Norm::GroupNorm => {
                    let (xhat, stats) = group_norm_forward(&pre, cfg.groups());
                    (Some(xhat), Some(stats))
                }
            };
            let mut act = match (&normed, cfg.norm) {
                (Some(xhat), Norm::GroupNorm) => {
                    let gamma = p.slice(&st.norm_a);
                    let beta = p.slice(st.norm_b.as_ref().unwrap());
                    affine_channels(xhat, gamma, beta)
                }
                _ => pre.clone(),
            };
            act.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            act.clear_all_borders();
            stages.push(StageTape { normed, stats, act });
        }
        let mut out = PaddedStack::zeros(2, rows, cols, pad);
        let last = stages.last().map(|t| &t.act).unwrap();
        grid::pointwise_forward(last, p.slice(&p.layout.out_w), Some(p.slice(&p.layout.out_b)), &mut out);
        let output = Planes {
            rows,
            cols,
            data: out.to_dense(),
        };
        if output.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("block output contains non-finite values".into()));
        }
        Ok(Linearization {
            block: self,
            zs,
            xs,
            h0,
            stages,
            output,
        })
    }

    pub fn apply(&self, z: &Planes, x: &Planes) -> Result<Planes> {
        Ok(self.linearize(z, x)?.output)
    }
}

fn check_pair(z: &Planes, x: &Planes) -> Result<()> {
    if z.rows != x.rows || z.cols != x.cols {
        return Err(Error::Shape(format!("z is {:?} but x is {:?}", z.shape(), x.shape())));
    }
    if z.data.len() != 2 * z.rows * z.cols || x.data.len() != 2 * x.rows * x.cols {
        return Err(Error::Shape("plane data length does not match its shape".into()));
    }
    if z.rows == 0 || z.cols == 0 {
        return Err(Error::Shape("empty grid".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct GroupStats {
    rstd: Vec<f64>,
}

fn group_norm_forward(pre: &PaddedStack, groups: usize) -> (PaddedStack, GroupStats) {
    let c = pre.channels();
    let per = c / groups;
    let n = (per * pre.rows() * pre.cols()) as f64;
    let range = pre.sweep();
    let mut out = pre.clone();
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let chans = g * per..(g + 1) * per;
        let (mut s1, mut s2) = (0.0, 0.0);
        for ch in chans.clone() {
            for &v in &pre.plane(ch)[range.clone()] {
                s1 += v;
                s2 += v * v;
            }
        }
        let mu = s1 / n;
        let var = (s2 / n - mu * mu).max(0.0);
        let r = 1.0 / (var + NORM_FLOOR).sqrt();
        for ch in chans {
            out.plane_mut(ch)[range.clone()].iter_mut().for_each(|v| *v = (*v - mu) * r);
            out.clear_border(ch);
        }
        rstd.push(r);
    }
    (out, GroupStats { rstd })
}

fn affine_channels(xhat: &PaddedStack, gamma: &[f64], beta: &[f64]) -> PaddedStack {
    let mut out = xhat.clone();
    let range = xhat.sweep();
    for ch in 0..xhat.channels() {
        out.plane_mut(ch)[range.clone()]
            .iter_mut()
            .for_each(|v| *v = gamma[ch] * *v + beta[ch]);
        out.clear_border(ch);
    }
    out
}

#[derive(Debug, Clone)]
struct StageTape {
    normed: Option<PaddedStack>,
    stats: Option<GroupStats>,
    act: PaddedStack,
}

/// Activations of one application of the block at `(z, x)`.
#[derive(Debug, Clone)]
pub struct Linearization<'b, 'a> {
    block: &'b PreparedBlock<'a>,
    zs: PaddedStack,
    xs: PaddedStack,
    h0: PaddedStack,
    stages: Vec<StageTape>,
    pub output: Planes,
}

impl<'b, 'a> Linearization<'b, 'a> {
    /// Number of grid tensors this workspace keeps alive.
    pub fn retained_tensors(&self) -> usize {
        3 + self.stages.iter().map(|s| 1 + s.normed.is_some() as usize).sum::<usize>() + 1
    }

    /// `u^T df/dz`.
    pub fn vjp_z(&self, u: &Planes) -> Result<Planes> {
        Ok(self.backward(u, None)?.0)
    }

    /// `u^T df/dtheta`, laid out like the parameter vector.
    pub fn vjp_theta(&self, u: &Planes) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.block.params.count()];
        self.backward(u, Some(&mut g))?;
        Ok(g)
    }

    /// Both products in one sweep; the parameter gradient is accumulated
    /// into `grad`.
    pub fn vjp_both(&self, u: &Planes, grad: &mut [f64]) -> Result<Planes> {
        Ok(self.backward(u, Some(grad))?.0)
    }

    fn backward(&self, u: &Planes, mut grad: Option<&mut [f64]>) -> Result<(Planes,)> {
        if u.rows != self.output.rows || u.cols != self.output.cols || u.data.len() != self.output.data.len() {
            return Err(Error::Shape(format!(
                "cotangent is {:?}, output is {:?}",
                u.shape(),
                self.output.shape()
            )));
        }
        let blk = self.block;
        let p = blk.params;
        let cfg = &p.config;
        let lay = &p.layout;
        let c = cfg.hidden_width;
        let (rows, cols, pad) = (u.rows, u.cols, blk.pad());
        if let Some(g) = grad.as_deref() {
            if g.len() != p.count() {
                return Err(Error::Shape("gradient buffer has the wrong length".into()));
            }
        }
        let us = PaddedStack::from_dense(2, rows, cols, pad, &u.data);

        let last_act = &self.stages.last().unwrap().act;
        if let Some(g) = grad.as_deref_mut() {
            let (w_r, b_r) = (lay.out_w.clone(), lay.out_b.clone());
            let (gw, rest) = g.split_at_mut(b_r.start);
            grid::pointwise_backward_params(last_act, &us, &mut gw[w_r], Some(&mut rest[..2]));
        }
        let mut d_act = PaddedStack::zeros(c, rows, cols, pad);
        grid::pointwise_backward_input(&us, p.slice(&lay.out_w), &mut d_act);

        for s in (0..self.stages.len()).rev() {
            let st = &lay.stages[s];
            let tape = &self.stages[s];
            // ReLU mask.
            for (d, &a) in d_act.data_mut().iter_mut().zip(tape.act.data()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let d_pre = match cfg.norm {
                Norm::WeightScaled => d_act,
                Norm::GroupNorm => {
                    let xhat = tape.normed.as_ref().unwrap();
                    let stats = tape.stats.as_ref().unwrap();
                    let gamma = p.slice(&st.norm_a);
                    if let Some(g) = grad.as_deref_mut() {
                        let range = xhat.sweep();
                        for ch in 0..c {
                            let dy = &d_act.plane(ch)[range.clone()];
                            g[st.norm_a.start + ch] += grid::dot(dy, &xhat.plane(ch)[range.clone()]);
                            g[st.norm_b.as_ref().unwrap().start + ch] += dy.iter().sum::<f64>();
                        }
                    }
                    group_norm_backward(&d_act, xhat, stats, gamma, cfg.groups())
                }
            };
            let input = if s == 0 { &self.h0 } else { &self.stages[s - 1].act };
            if let Some(g) = grad.as_deref_mut() {
                let mut gw_eff = vec![0.0; st.conv_w.len()];
                {
                    let gb = &mut g[st.conv_b.clone()];
                    grid::conv_backward_params(input, &d_pre, st.kernel, &mut gw_eff, gb);
                }
                match cfg.norm {
                    Norm::GroupNorm => {
                        g[st.conv_w.clone()].iter_mut().zip(&gw_eff).for_each(|(a, b)| *a += b);
                    }
                    Norm::WeightScaled => {
                        let fan_in = c * st.kernel * st.kernel;
                        let v = p.slice(&st.conv_w);
                        let gains = p.slice(&st.norm_a);
                        let norms = &blk.row_norms[s];
                        for o in 0..c {
                            let vr = &v[o * fan_in..(o + 1) * fan_in];
                            let gr = &gw_eff[o * fan_in..(o + 1) * fan_in];
                            let n = norms[o];
                            let vhat_dot = grid::dot(gr, vr) / n;
                            g[st.norm_a.start + o] += vhat_dot;
                            // Below the floor the norm is a constant.
                            let floored = row_norm(vr) < NORM_FLOOR;
                            let scale = gains[o] / n;
                            let gv = &mut g[st.conv_w.start + o * fan_in..st.conv_w.start + (o + 1) * fan_in];
                            for j in 0..fan_in {
                                let radial = if floored { 0.0 } else { vhat_dot * vr[j] / n };
                                gv[j] += scale * (gr[j] - radial);
                            }
                        }
                    }
                }
            }
            let mut d_in = PaddedStack::zeros(c, rows, cols, pad);
            grid::conv_backward_input(&d_pre, &blk.eff_w[s], st.kernel, &mut d_in);
            d_act = d_in;
        }
        // d_act now holds dL/dh0.
        let d_h0 = d_act;
        if let Some(g) = grad.as_deref_mut() {
            {
                let (lo, hi) = g.split_at_mut(lay.in_b.start);
                grid::pointwise_backward_params(&self.zs, &d_h0, &mut lo[lay.in_w.clone()], Some(&mut hi[..c]));
            }
            grid::pointwise_backward_params(&self.xs, &d_h0, &mut g[lay.inj_w.clone()], None);
        }
        let mut dz = PaddedStack::zeros(2, rows, cols, pad);
        grid::pointwise_backward_input(&d_h0, p.slice(&lay.in_w), &mut dz);
        Ok((Planes {
            rows,
            cols,
            data: dz.to_dense(),
        },))
    }
}

fn group_norm_backward(dy: &PaddedStack, xhat: &PaddedStack, stats: &GroupStats, gamma: &[f64], groups: usize) -> PaddedStack {
    let c = dy.channels();
    let per = c / groups;
    let n = (per * dy.rows() * dy.cols()) as f64;
    let range = dy.sweep();
    let mut out = dy.zeros_like();
    for g in 0..groups {
        let chans = g * per..(g + 1) * per;
        let (mut m1, mut m2) = (0.0, 0.0);
        for ch in chans.clone() {
            let d = &dy.plane(ch)[range.clone()];
            let xh = &xhat.plane(ch)[range.clone()];
            m1 += gamma[ch] * d.iter().sum::<f64>();
            m2 += gamma[ch] * grid::dot(d, xh);
        }
        m1 /= n;
        m2 /= n;
        let r = stats.rstd[g];
        for ch in chans {
            let gm = gamma[ch];
            let range_c = range.clone();
            let d: Vec<f64> = dy.plane(ch)[range_c.clone()].to_vec();
            let xh: Vec<f64> = xhat.plane(ch)[range_c.clone()].to_vec();
            let dst = &mut out.plane_mut(ch)[range_c];
            for j in 0..dst.len() {
                dst[j] = r * (gm * d[j] - m1 - xh[j] * m2);
            }
            out.clear_border(ch);
        }
    }
    out
}

/// `f(z, x)`.
pub fn forward(z: &Planes, x: &Planes, params: &IebParams) -> Result<Planes> {
    PreparedBlock::new(params).apply(z, x)
}

/// `u^T df/dz` at `(z, x)`.
pub fn vjp_z(z: &Planes, x: &Planes, params: &IebParams, u: &Planes) -> Result<Planes> {
    let prep = PreparedBlock::new(params);
    let lin = prep.linearize(z, x)?;
    lin.vjp_z(u)
}

/// `u^T df/dtheta` at `(z, x)`, one entry per parameter.
pub fn vjp_theta(z: &Planes, x: &Planes, params: &IebParams, u: &Planes) -> Result<Vec<f64>> {
    let prep = PreparedBlock::new(params);
    let lin = prep.linearize(z, x)?;
    lin.vjp_theta(u)
}
