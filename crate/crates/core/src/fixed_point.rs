//! Fixed-point solvers (plain iteration and Anderson acceleration) and the
//! equilibrium forward/backward passes built on them.
//!
//! Both solvers evaluate `f` once per iteration and stop at the first iterate
//! `z` with
//!
//! ```text
//! |f(z) - z| / (|f(z)| + denom_floor) <= eps
//! ```
//!
//! or after `max_iters` evaluations. The returned `z_star` is the iterate the
//! stopping test was evaluated at, so the certificate can be recomputed.

use std::collections::VecDeque;

use crate::block::{IebParams, Planes, PreparedBlock};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    /// Relative residual tolerance.
    pub eps: f64,
    /// Iteration cap.
    pub max_iters: usize,
    pub history_m: usize,
    pub tikhonov_lambda: f64,
    pub mixing_beta: f64,
    pub denom_floor: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            eps: 1e-2,
            max_iters: 10,
            history_m: 5,
            tikhonov_lambda: 1e-4,
            mixing_beta: 1.0,
            denom_floor: 1e-8,
        }
    }
}

impl SolveConfig {
    pub fn new(eps: f64, max_iters: usize) -> Self {
        Self {
            eps,
            max_iters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if self.history_m < 1 {
            return Err(Error::Config("history_m must be >= 1".into()));
        }
        if !(self.tikhonov_lambda > 0.0) {
            return Err(Error::Config("tikhonov_lambda must be > 0".into()));
        }
        if !(self.mixing_beta > 0.0 && self.mixing_beta <= 1.0) {
            return Err(Error::Config("mixing_beta must be in (0, 1]".into()));
        }
        if !(self.denom_floor > 0.0) {
            return Err(Error::Config("denom_floor must be > 0".into()));
        }
        Ok(())
    }

    /// Adjoint solve settings: same tolerance, twice the iteration cap.
    pub fn backward(&self) -> Self {
        Self {
            max_iters: 2 * self.max_iters,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub z_star: Vec<f64>,
    pub iters_used: usize,
    pub residual_trace: Vec<f64>,
    pub converged: bool,
    /// Most iterate-sized vectors held at once by the solver.
    pub peak_retained: usize,
}

impl SolveResult {
    pub fn final_residual(&self) -> Option<f64> {
        self.residual_trace.last().copied()
    }
}

/// A solve that produced a non-finite iterate.
#[derive(Debug, Clone)]
pub struct Diverged {
    pub trace: Vec<f64>,
    /// Last iterate whose image was finite, if any.
    pub last_finite: Option<Vec<f64>>,
}

impl From<Diverged> for Error {
    fn from(d: Diverged) -> Self {
        Error::Divergence { trace: d.trace }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative residual of `z` given `fz = f(z)`.
pub fn relative_residual(z: &[f64], fz: &[f64], denom_floor: f64) -> f64 {
    let diff = z.iter().zip(fz).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
    diff / (norm(fz) + denom_floor)
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn evaluate<F>(f: &mut F, z: &[f64], trace: &[f64], last_finite: &Option<Vec<f64>>) -> std::result::Result<Vec<f64>, Diverged>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    match f(z) {
        Ok(fz) if fz.len() == z.len() && all_finite(&fz) => Ok(fz),
        _ => Err(Diverged {
            trace: trace.to_vec(),
            last_finite: last_finite.clone(),
        }),
    }
}

/// Plain iteration `z <- f(z)`.
pub fn picard_solve<F>(mut f: F, z0: &[f64], cfg: &SolveConfig) -> Result<SolveResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut z = z0.to_vec();
    let mut trace = Vec::new();
    let mut last_finite = None;
    for k in 1..=cfg.max_iters {
        if !all_finite(&z) {
            return Err(Diverged { trace, last_finite }.into());
        }
        let fz = evaluate(&mut f, &z, &trace, &last_finite)?;
        let rel = relative_residual(&z, &fz, cfg.denom_floor);
        trace.push(rel);
        if rel <= cfg.eps || k == cfg.max_iters {
            return Ok(SolveResult {
                z_star: z,
                iters_used: k,
                converged: rel <= cfg.eps,
                residual_trace: trace,
                peak_retained: 2,
            });
        }
        last_finite = Some(z);
        z = fz;
    }
    unreachable!("max_iters >= 1")
}

/// Solves `A y = b` for a small dense system by Gaussian elimination with
/// partial pivoting. `None` when singular.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[piv][col].abs() > 0.0) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= factor * a[col][c];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut y = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * y[c]).sum();
        y[row] = (b[row] - s) / a[row][row];
    }
    y.iter().all(|v| v.is_finite()).then_some(y)
}

/// Mixing weights minimizing `|sum_i a_i g_i|^2 + lambda' |a|^2` subject to
/// `sum_i a_i = 1`, where `lambda'` is `lambda` times the mean squared
/// residual norm in the history.
fn anderson_weights(residuals: &[&[f64]], lambda: f64) -> Vec<f64> {
    let n = residuals.len();
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let d = crate::grid::dot(residuals[i], residuals[j]);
            gram[i][j] = d;
            gram[j][i] = d;
        }
    }
    let scale = (0..n).map(|i| gram[i][i]).sum::<f64>() / n as f64;
    let reg = lambda * if scale > 0.0 { scale } else { 1.0 };
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += reg;
    }
    match solve_small(gram, vec![1.0; n]) {
        Some(y) => {
            let s: f64 = y.iter().sum();
            if s.abs() > 0.0 && s.is_finite() {
                y.into_iter().map(|v| v / s).collect()
            } else {
                latest_only(n)
            }
        }
        None => latest_only(n),
    }
}

fn latest_only(n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n];
    a[n - 1] = 1.0;
    a
}

pub(crate) fn anderson_core<F>(mut f: F, z0: &[f64], cfg: &SolveConfig) -> std::result::Result<SolveResult, Diverged>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let m = cfg.history_m;
    let beta = cfg.mixing_beta;
    let mut z = z0.to_vec();
    let mut trace = Vec::new();
    let mut last_finite: Option<Vec<f64>> = None;
    // (z_i, g_i = f(z_i) - z_i) pairs, oldest first.
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(m + 1);
    let mut peak = 0usize;
    for k in 1..=cfg.max_iters {
        if !all_finite(&z) {
            return Err(Diverged { trace, last_finite });
        }
        let mut fz = evaluate(&mut f, &z, &trace, &last_finite)?;
        // z, f(z) and the history pairs are alive here.
        peak = peak.max(2 + 2 * hist.len());
        let rel = relative_residual(&z, &fz, cfg.denom_floor);
        trace.push(rel);
        if rel <= cfg.eps || k == cfg.max_iters {
            return Ok(SolveResult {
                z_star: z,
                iters_used: k,
                converged: rel <= cfg.eps,
                residual_trace: trace,
                peak_retained: peak,
            });
        }
        last_finite = Some(z.clone());
        fz.iter_mut().zip(&z).for_each(|(f, zi)| *f -= zi);
        hist.push_back((z, fz));
        if hist.len() > m {
            hist.pop_front();
        }
        let residuals: Vec<&[f64]> = hist.iter().map(|(_, g)| g.as_slice()).collect();
        let alpha = anderson_weights(&residuals, cfg.tikhonov_lambda);
        let n = z0.len();
        let mut next = vec![0.0; n];
        // History pairs, the copy kept as `last_finite`, and `next`.
        peak = peak.max(2 * hist.len() + 2);
        for (a, (zi, gi)) in alpha.iter().zip(&hist) {
            for j in 0..n {
                next[j] += a * (zi[j] + beta * gi[j]);
            }
        }
        z = next;
    }
    unreachable!("max_iters >= 1")
}

/// Anderson-accelerated fixed-point iteration with history `history_m`.
pub fn anderson_solve<F>(f: F, z0: &[f64], cfg: &SolveConfig) -> Result<SolveResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    Ok(anderson_core(f, z0, cfg)?)
}

/// Equilibrium estimate `z* = f(z*, x)` with warm start `z0 = x`.
#[derive(Debug, Clone)]
pub struct DeqSolve {
    pub estimate: Planes,
    pub result: SolveResult,
    /// Set when the solve diverged and the last finite iterate was used.
    pub flagged: bool,
}

fn block_map<'p>(prep: &'p PreparedBlock<'p>, x: &'p Planes) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + 'p {
    move |z: &[f64]| {
        let zp = x.with_data(z.to_vec());
        Ok(prep.apply(&zp, x)?.data)
    }
}

pub fn deq_forward(x: &Planes, params: &IebParams, cfg: &SolveConfig) -> Result<DeqSolve> {
    cfg.validate()?;
    let prep = PreparedBlock::new(params);
    let result = anderson_core(block_map(&prep, x), &x.data, cfg)?;
    Ok(DeqSolve {
        estimate: x.with_data(result.z_star.clone()),
        result,
        flagged: false,
    })
}

/// As [`deq_forward`], but a divergent solve falls back to the last finite
/// iterate (or the input) and is flagged instead of failing.
pub fn deq_forward_tolerant(x: &Planes, prep: &PreparedBlock<'_>, cfg: &SolveConfig) -> Result<DeqSolve> {
    cfg.validate()?;
    match anderson_core(block_map(prep, x), &x.data, cfg) {
        Ok(result) => Ok(DeqSolve {
            estimate: x.with_data(result.z_star.clone()),
            result,
            flagged: false,
        }),
        Err(d) => {
            let z = d.last_finite.unwrap_or_else(|| x.data.clone());
            let iters = d.trace.len();
            Ok(DeqSolve {
                estimate: x.with_data(z.clone()),
                result: SolveResult {
                    z_star: z,
                    iters_used: iters.max(1),
                    residual_trace: d.trace,
                    converged: false,
                    peak_retained: 0,
                },
                flagged: true,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeqGradient {
    pub grad: Vec<f64>,
    pub adjoint: SolveResult,
    /// Grid tensors kept between the forward and backward passes.
    pub retained_tensors: usize,
}

/// Implicit backward pass. Solves `u = (df/dz)^T u + grad_out` at the
/// equilibrium and returns `u^T df/dtheta`. Only `z*`, `x` and one
/// application's activations are needed.
pub fn deq_backward(z_star: &Planes, x: &Planes, params: &IebParams, grad_out: &Planes, cfg_bw: &SolveConfig) -> Result<DeqGradient> {
    let prep = PreparedBlock::new(params);
    deq_backward_prepared(z_star, x, &prep, grad_out, cfg_bw)
}

pub fn deq_backward_prepared(
    z_star: &Planes,
    x: &Planes,
    prep: &PreparedBlock<'_>,
    grad_out: &Planes,
    cfg_bw: &SolveConfig,
) -> Result<DeqGradient> {
    cfg_bw.validate()?;
    if grad_out.shape() != z_star.shape() {
        return Err(Error::Shape(format!(
            "output gradient is {:?}, equilibrium is {:?}",
            grad_out.shape(),
            z_star.shape()
        )));
    }
    let lin = prep.linearize(z_star, x)?;
    let adjoint_map = |u: &[f64]| -> Result<Vec<f64>> {
        let mut v = lin.vjp_z(&grad_out.with_data(u.to_vec()))?.data;
        for (a, b) in v.iter_mut().zip(&grad_out.data) {
            *a += b;
        }
        Ok(v)
    };
    let adjoint = anderson_core(adjoint_map, &grad_out.data, cfg_bw)?;
    let grad = lin.vjp_theta(&grad_out.with_data(adjoint.z_star.clone()))?;
    Ok(DeqGradient {
        grad,
        retained_tensors: lin.retained_tensors() + 2,
        adjoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_converges_immediately() {
        let z0 = vec![1.0, -2.0, 3.0];
        for r in [
            picard_solve(|z: &[f64]| Ok(z.to_vec()), &z0, &SolveConfig::new(1e-6, 10)).unwrap(),
            anderson_solve(|z: &[f64]| Ok(z.to_vec()), &z0, &SolveConfig::new(1e-6, 10)).unwrap(),
        ] {
            assert_eq!(r.iters_used, 1);
            assert_eq!(r.residual_trace, vec![0.0]);
            assert!(r.converged);
            assert_eq!(r.z_star, z0);
        }
    }

    #[test]
    fn scalar_affine_picard() {
        let r = picard_solve(|z: &[f64]| Ok(vec![0.5 * z[0] + 1.0]), &[0.0], &SolveConfig::new(1e-6, 50)).unwrap();
        assert!(r.converged);
        assert!(r.iters_used <= 25, "{}", r.iters_used);
        // error of z is twice the residual for a 1/2 contraction
        assert!((r.z_star[0] - 2.0).abs() <= 1e-5);
    }

    #[test]
    fn scalar_affine_anderson_is_exact() {
        let r = anderson_solve(|z: &[f64]| Ok(vec![0.5 * z[0] + 1.0]), &[0.0], &SolveConfig::new(1e-10, 50)).unwrap();
        assert!(r.converged);
        assert!((r.z_star[0] - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn non_finite_image_is_divergence() {
        let mut calls = 0;
        let blow_up = |z: &[f64]| {
            calls += 1;
            Ok(vec![if calls >= 3 { f64::NAN } else { 0.9 * z[0] + 1.0 }])
        };
        let err = anderson_solve(blow_up, &[1.0], &SolveConfig::new(1e-12, 20)).unwrap_err();
        match err {
            Error::Divergence { trace } => assert_eq!(trace.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cap_without_convergence() {
        let r = anderson_solve(
            |z: &[f64]| Ok(vec![-z[0] + 1.0 + 0.1 * z[0].sin()]),
            &[5.0],
            &SolveConfig::new(1e-300, 3),
        )
        .unwrap();
        assert_eq!(r.iters_used, 3);
        assert_eq!(r.residual_trace.len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(SolveConfig::new(0.0, 10).validate().is_err());
        assert!(SolveConfig::new(1e-3, 0).validate().is_err());
        let mut c = SolveConfig::default();
        c.history_m = 0;
        assert!(c.validate().is_err());
        assert_eq!(SolveConfig::new(1e-3, 30).backward().max_iters, 60);
    }

    #[test]
    fn small_system_solver() {
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let y = solve_small(a, vec![3.0, 5.0]).unwrap();
        assert!((y[0] - 0.8).abs() < 1e-12 && (y[1] - 1.4).abs() < 1e-12);
        assert!(solve_small(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![1.0, 1.0]).is_none());
    }
}
