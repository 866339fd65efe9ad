//! Evaluation surfaces: NMSE against SNR for every method, the tolerance
//! sweep of one trained equilibrium model, its iteration histogram, and the
//! parameter/NMSE comparison against stacked models.
//!
//! Every method is scored on the same samples, so noise realizations are
//! shared, and every NMSE goes through [`crate::classical::nmse`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::block::Planes;
use crate::channel_model::ChannelFrame;
use crate::classical::{calibrate_lmmse, default_ft_window, estimate_ft, estimate_lmmse, estimate_ls_li, mean_nmse, nmse, nmse_planes};
use crate::error::{Error, Result};
use crate::fixed_point::{SolveConfig, SolveResult};
use crate::model::{Model, ModelKind};
use crate::ofdm_frame::{build_samples_at, FrameSample, PilotPattern};

/// Default SNR grid in dB.
pub const SNR_GRID_DB: [f64; 6] = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0];

/// Tolerance settings of the accuracy sweep, `(eps, tau)`.
pub const TABLE1_SETTINGS: [(f64, usize); 4] = [(0.5, 10), (0.1, 10), (0.01, 20), (0.001, 30)];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sample_id: usize,
    pub method: String,
    pub snr_db: f64,
    pub nmse: f64,
    /// Implicit model only.
    pub iters_used: Option<usize>,
    pub converged: Option<bool>,
}

/// Per-sample solve details kept for certificate checks and trace export.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub records: Vec<EvalRecord>,
    pub solves: Vec<Option<SolveResult>>,
    pub flagged: usize,
}

fn sample_input(s: &FrameSample) -> Planes {
    Planes {
        rows: s.n_subcarriers,
        cols: s.n_symbols,
        data: s.x_f64(),
    }
}

/// Runs a trained model over samples.
pub fn evaluate_model(model: &Model, samples: &[FrameSample], solve: &SolveConfig) -> Result<ModelRun> {
    solve.validate()?;
    let label = model.label();
    let mut run = ModelRun {
        records: Vec::with_capacity(samples.len()),
        solves: Vec::with_capacity(samples.len()),
        flagged: 0,
    };
    for (i, s) in samples.iter().enumerate() {
        let est = model.estimate(&sample_input(s), solve)?;
        run.flagged += est.flagged as usize;
        run.records.push(EvalRecord {
            sample_id: i,
            method: label.clone(),
            snr_db: s.snr_db as f64,
            nmse: nmse_planes(&est.planes.data, s)?,
            iters_used: est.solve.as_ref().map(|r| r.iters_used),
            converged: est.solve.as_ref().map(|r| r.converged),
        });
        run.solves.push(est.solve);
    }
    Ok(run)
}

/// The classical methods, plus the exact-truth row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Oracle,
    LsLi,
    Ft,
    Lmmse,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::Oracle => "oracle",
            Baseline::LsLi => "ls_li",
            Baseline::Ft => "ft",
            Baseline::Lmmse => "lmmse",
        }
    }
}

/// Scores a classical method on samples that all share one SNR.
/// `calibration` is required for LMMSE and must be observed at that SNR.
pub fn evaluate_baseline(
    method: Baseline,
    samples: &[FrameSample],
    pattern: &PilotPattern,
    snr_db: f64,
    calibration: Option<&[FrameSample]>,
) -> Result<Vec<EvalRecord>> {
    let lmmse = match method {
        Baseline::Lmmse => {
            let calib = calibration.ok_or_else(|| Error::Argument("LMMSE needs calibration samples".into()))?;
            Some(calibrate_lmmse(calib, pattern, snr_db)?)
        }
        _ => None,
    };
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let truth = s.y_complex();
            let est = match method {
                Baseline::Oracle => truth.clone(),
                Baseline::LsLi => estimate_ls_li(s),
                Baseline::Ft => estimate_ft(s, pattern, default_ft_window(pattern, s.n_subcarriers))?,
                Baseline::Lmmse => estimate_lmmse(s, lmmse.as_ref().unwrap())?,
            };
            Ok(EvalRecord {
                sample_id: i,
                method: method.label().into(),
                snr_db: s.snr_db as f64,
                nmse: nmse(&est, &truth)?,
                iters_used: None,
                converged: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub snr_db: f64,
    pub mean_nmse: f64,
    pub mean_iters: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepInputs<'a> {
    pub test_frames: &'a [ChannelFrame],
    /// Frames for the LMMSE statistics, disjoint from the test frames.
    pub calibration_frames: &'a [ChannelFrame],
    pub pattern: PilotPattern,
    pub snr_grid: Vec<f64>,
    pub models: &'a [Model],
    pub solve: SolveConfig,
    /// Noise seed shared by every method at every SNR.
    pub noise_seed: u64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub records: Vec<EvalRecord>,
}

fn mean_iters(records: &[EvalRecord]) -> Option<f64> {
    let its: Vec<usize> = records.iter().filter_map(|r| r.iters_used).collect();
    (!its.is_empty()).then(|| its.iter().sum::<usize>() as f64 / its.len() as f64)
}

/// NMSE of every method at every SNR. Rows are ordered by method (oracle,
/// ls_li, ft, lmmse, then the models as given) and SNR.
pub fn run_snr_sweep(inputs: &SweepInputs<'_>) -> Result<SweepResult> {
    if inputs.snr_grid.iter().any(|s| !(-10.0..=15.0).contains(s)) {
        return Err(Error::Config("SNR grid must lie within [-10, 15] dB".into()));
    }
    if inputs.test_frames.is_empty() {
        return Err(Error::Argument("no test frames".into()));
    }
    let mut per_method: Vec<(String, Vec<SweepRow>)> = Vec::new();
    let mut records = Vec::new();
    let mut push = |label: String, snr: f64, recs: Vec<EvalRecord>| {
        let row = SweepRow {
            method: label.clone(),
            snr_db: snr,
            mean_nmse: mean_nmse(&recs.iter().map(|r| r.nmse).collect::<Vec<_>>()),
            mean_iters: mean_iters(&recs),
        };
        match per_method.iter_mut().find(|(l, _)| *l == label) {
            Some((_, rows)) => rows.push(row),
            None => per_method.push((label, vec![row])),
        }
        records.extend(recs);
    };
    for &snr in &inputs.snr_grid {
        let samples = build_samples_at(inputs.test_frames, &inputs.pattern, snr, inputs.noise_seed)?;
        let calib = if inputs.calibration_frames.is_empty() {
            None
        } else {
            Some(build_samples_at(
                inputs.calibration_frames,
                &inputs.pattern,
                snr,
                inputs.noise_seed ^ 0x5eed,
            )?)
        };
        for b in [Baseline::Oracle, Baseline::LsLi, Baseline::Ft, Baseline::Lmmse] {
            if b == Baseline::Lmmse && calib.is_none() {
                continue;
            }
            let recs = evaluate_baseline(b, &samples, &inputs.pattern, snr, calib.as_deref())?;
            push(b.label().into(), snr, recs);
        }
        for m in inputs.models {
            let run = evaluate_model(m, &samples, &inputs.solve)?;
            push(m.label(), snr, run.records);
        }
    }
    Ok(SweepResult {
        rows: per_method.into_iter().flat_map(|(_, r)| r).collect(),
        records,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("method,snr,mean_nmse,mean_iters\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.method, r.snr_db, r.mean_nmse, opt(r.mean_iters)).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub eps: f64,
    pub tau: usize,
    pub iterf_mean: f64,
    pub param_count: usize,
    pub test_nmse: f64,
}

/// Re-evaluates one implicit model under each `(eps, tau)` setting. The
/// per-setting runs are returned for certificate checks.
pub fn run_table1(model: &Model, samples: &[FrameSample], settings: &[(f64, usize)]) -> Result<(Vec<Table1Row>, Vec<ModelRun>)> {
    if model.kind() != ModelKind::Icenet {
        return Err(Error::Argument("the tolerance sweep needs an icenet checkpoint".into()));
    }
    let mut rows = Vec::with_capacity(settings.len());
    let mut runs = Vec::with_capacity(settings.len());
    for &(eps, tau) in settings {
        let run = evaluate_model(model, samples, &SolveConfig::new(eps, tau))?;
        rows.push(Table1Row {
            eps,
            tau,
            iterf_mean: mean_iters(&run.records).unwrap_or(0.0),
            param_count: model.param_count(),
            test_nmse: mean_nmse(&run.records.iter().map(|r| r.nmse).collect::<Vec<_>>()),
        });
        runs.push(run);
    }
    Ok((rows, runs))
}

pub fn table1_csv(rows: &[Table1Row]) -> String {
    let mut s = String::from("eps,tau,iterf_mean,param_count,test_nmse\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.eps, r.tau, r.iterf_mean, r.param_count, r.test_nmse).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationHistogram {
    /// Sample count for every iteration count `1..=tau`.
    pub counts: BTreeMap<usize, usize>,
    pub n_samples: usize,
    pub mean: f64,
    pub converged: usize,
}

impl IterationHistogram {
    pub fn mode(&self) -> usize {
        // first maximum in ascending order
        let best = self.counts.values().copied().max().unwrap_or(0);
        self.counts.iter().find(|(_, &c)| c == best).map(|(&k, _)| k).unwrap_or(0)
    }
}

pub fn run_iteration_histogram(model: &Model, samples: &[FrameSample], solve: &SolveConfig) -> Result<(IterationHistogram, ModelRun)> {
    if model.kind() != ModelKind::Icenet {
        return Err(Error::Argument("the iteration histogram needs an icenet checkpoint".into()));
    }
    let run = evaluate_model(model, samples, solve)?;
    let mut counts: BTreeMap<usize, usize> = (1..=solve.max_iters).map(|k| (k, 0)).collect();
    for r in &run.records {
        *counts.entry(r.iters_used.unwrap()).or_insert(0) += 1;
    }
    let hist = IterationHistogram {
        counts,
        n_samples: samples.len(),
        mean: mean_iters(&run.records).unwrap_or(0.0),
        converged: run.records.iter().filter(|r| r.converged == Some(true)).count(),
    };
    Ok((hist, run))
}

pub fn histogram_csv(h: &IterationHistogram) -> String {
    let mut s = String::from("iters_used,sample_count\n");
    for (k, c) in &h.counts {
        writeln!(s, "{k},{c}").unwrap();
    }
    s
}

/// `sample_id, iter, residual` for every solve.
pub fn residual_trace_csv(run: &ModelRun) -> String {
    let mut s = String::from("sample_id,iter,residual\n");
    for (i, solve) in run.solves.iter().enumerate() {
        if let Some(r) = solve {
            for (k, v) in r.residual_trace.iter().enumerate() {
                writeln!(s, "{i},{},{v}", k + 1).unwrap();
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthRow {
    pub model_label: String,
    pub param_count: usize,
    pub mean_nmse: f64,
    /// Sub-block applications per estimate: mean iterations times the stage
    /// count for the implicit model, blocks times stages otherwise.
    pub effective_depth: f64,
}

pub fn run_depth_comparison(models: &[Model], samples: &[FrameSample], solve: &SolveConfig) -> Result<Vec<DepthRow>> {
    models
        .iter()
        .map(|m| {
            let run = evaluate_model(m, samples, solve)?;
            let stages = m.block_config().n_sub_blocks as f64;
            let depth = match m {
                Model::Icenet(_) => mean_iters(&run.records).unwrap_or(0.0) * stages,
                Model::Ecenet(e) => e.config.n_blocks as f64 * stages,
            };
            Ok(DepthRow {
                model_label: m.label(),
                param_count: m.param_count(),
                mean_nmse: mean_nmse(&run.records.iter().map(|r| r.nmse).collect::<Vec<_>>()),
                effective_depth: depth,
            })
        })
        .collect()
}

pub fn depth_csv(rows: &[DepthRow]) -> String {
    let mut s = String::from("model_label,param_count,mean_nmse\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.model_label, r.param_count, r.mean_nmse).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{init_params, IebConfig};
    use crate::channel_model::{generate_dataset, ChannelConfig};

    fn tiny_frames(n: usize, seed: u64) -> Vec<ChannelFrame> {
        let cfg = ChannelConfig {
            n_subcarriers: 32,
            n_rx: 2,
            ..ChannelConfig::default()
        };
        generate_dataset(&cfg, n, seed).unwrap()
    }

    fn tiny_model() -> Model {
        Model::Icenet(
            init_params(&IebConfig {
                hidden_width: 4,
                ..IebConfig::default()
            })
            .unwrap(),
        )
    }

    #[test]
    fn oracle_rows_are_zero_and_rows_cover_the_grid() {
        let frames = tiny_frames(3, 0);
        let calib = tiny_frames(4, 1000);
        let models = [tiny_model()];
        let r = run_snr_sweep(&SweepInputs {
            test_frames: &frames,
            calibration_frames: &calib,
            pattern: PilotPattern::default(),
            snr_grid: vec![-10.0, 15.0],
            models: &models,
            solve: SolveConfig::default(),
            noise_seed: 5,
        })
        .unwrap();
        assert_eq!(r.rows.len(), 5 * 2);
        for row in r.rows.iter().filter(|r| r.method == "oracle") {
            assert_eq!(row.mean_nmse, 0.0);
        }
        assert!(r.rows.iter().filter(|r| r.method == "icenet").all(|r| r.mean_iters.is_some()));
        assert!(sweep_csv(&r.rows).starts_with("method,snr,mean_nmse,mean_iters\n"));
    }

    #[test]
    fn out_of_range_grid_is_a_config_error() {
        let frames = tiny_frames(1, 0);
        let r = run_snr_sweep(&SweepInputs {
            test_frames: &frames,
            calibration_frames: &[],
            pattern: PilotPattern::default(),
            snr_grid: vec![20.0],
            models: &[],
            solve: SolveConfig::default(),
            noise_seed: 0,
        });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn histogram_mass_is_the_sample_count() {
        let samples = build_samples_at(&tiny_frames(3, 0), &PilotPattern::default(), 10.0, 1).unwrap();
        let (h, run) = run_iteration_histogram(&tiny_model(), &samples, &SolveConfig::default()).unwrap();
        assert_eq!(h.counts.values().sum::<usize>(), samples.len());
        assert_eq!(h.counts.len(), 10);
        let traces = residual_trace_csv(&run);
        let rows = traces.lines().count() - 1;
        assert_eq!(rows, run.records.iter().map(|r| r.iters_used.unwrap()).sum::<usize>());
    }

    #[test]
    fn table1_param_count_is_constant() {
        let samples = build_samples_at(&tiny_frames(2, 0), &PilotPattern::default(), 10.0, 1).unwrap();
        let (rows, _) = run_table1(&tiny_model(), &samples, &TABLE1_SETTINGS).unwrap();
        assert!(rows.iter().all(|r| r.param_count == rows[0].param_count));
        assert_eq!(table1_csv(&rows).lines().next(), Some("eps,tau,iterf_mean,param_count,test_nmse"));
    }
}
