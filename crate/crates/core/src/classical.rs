//! Non-learned baselines (LS with linear interpolation, delay-domain
//! denoising, sample-statistics LMMSE) and the NMSE metric every report uses.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::ofdm_frame::{complete_in_time, noise_variance, FrameSample, PilotPattern};

/// `||est - truth||^2 / ||truth||^2` over a real vector (planes or flattened
/// complex values).
pub fn nmse_real(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Shape(format!("estimate has {} entries, truth {}", est.len(), truth.len())));
    }
    let (mut err, mut pow) = (0.0, 0.0);
    for (&e, &t) in est.iter().zip(truth) {
        err += (e - t) * (e - t);
        pow += t * t;
    }
    if !(pow > 0.0) {
        return Err(Error::Degenerate("truth has zero power".into()));
    }
    Ok(err / pow)
}

/// Per-sample NMSE of a complex estimate.
pub fn nmse(est: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Shape(format!("estimate has {} entries, truth {}", est.len(), truth.len())));
    }
    let (mut err, mut pow) = (0.0, 0.0);
    for (e, t) in est.iter().zip(truth) {
        err += (e - t).norm_sqr();
        pow += t.norm_sqr();
    }
    if !(pow > 0.0) {
        return Err(Error::Degenerate("truth has zero power".into()));
    }
    Ok(err / pow)
}

/// NMSE of a `[2, S, T]` plane estimate against a sample's target.
pub fn nmse_planes(est: &[f64], sample: &FrameSample) -> Result<f64> {
    nmse_real(est, &sample.y_f64())
}

/// Dataset-level NMSE: the mean of per-sample values.
pub fn mean_nmse(per_sample: &[f64]) -> f64 {
    per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64
}

/// LS at the pilots completed by linear interpolation. This is exactly the
/// network input of the sample.
pub fn estimate_ls_li(sample: &FrameSample) -> Vec<Complex64> {
    sample.x_complex()
}

/// Default delay window: a quarter of the pilot subcarriers.
pub fn default_ft_window(pattern: &PilotPattern, n_subcarriers: usize) -> usize {
    (pattern.n_pilot_subcarriers(n_subcarriers) / 4).max(1)
}

/// Delay-domain denoising. Per pilot symbol: IDFT of the pilot LS values,
/// noise floor from the taps past `window_len`, keep in-window taps above
/// three times that floor, then evaluate the truncated tap set on every
/// subcarrier (zero-padded transform). Time completion as in LS+LI.
pub fn estimate_ft(sample: &FrameSample, pattern: &PilotPattern, window_len: usize) -> Result<Vec<Complex64>> {
    let (n_sc, n_sym) = (sample.n_subcarriers, sample.n_symbols);
    let m = pattern.n_pilot_subcarriers(n_sc);
    if window_len == 0 || window_len > m {
        return Err(Error::Argument(format!("window_len {window_len} must be in 1..={m}")));
    }
    let pilots = sample.pilot_values(pattern)?;
    let n_psym = pattern.symbols.len();
    let stride = pattern.subcarrier_stride as f64;
    let offset = pattern.subcarrier_offset as f64;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(m);

    // Phase steps exp(-j 2 pi n (k - off) / (stride m)) for the kept taps.
    let mut at_pilot_symbols = vec![Complex64::new(0.0, 0.0); n_sc * n_psym];
    let mut taps = vec![Complex64::new(0.0, 0.0); m];
    for j in 0..n_psym {
        for (i, t) in taps.iter_mut().enumerate() {
            *t = pilots[i * n_psym + j];
        }
        ifft.process(&mut taps);
        for t in taps.iter_mut() {
            *t /= m as f64;
        }
        let outside = m - window_len;
        let noise_per_tap = if outside > 0 {
            taps[window_len..].iter().map(|t| t.norm_sqr()).sum::<f64>() / outside as f64
        } else {
            0.0
        };
        let kept: Vec<(usize, Complex64)> = taps[..window_len]
            .iter()
            .enumerate()
            .filter(|(_, t)| t.norm_sqr() > 3.0 * noise_per_tap)
            .map(|(n, &t)| (n, t))
            .collect();
        for k in 0..n_sc {
            let phase = -2.0 * PI * (k as f64 - offset) / (stride * m as f64);
            let v: Complex64 = kept.iter().map(|&(n, t)| t * Complex64::from_polar(1.0, phase * n as f64)).sum();
            at_pilot_symbols[k * n_psym + j] = v;
        }
    }
    Ok(complete_in_time(&at_pilot_symbols, &pattern.symbols, n_sc, n_sym))
}

/// Wiener filter from pilot-grid LS estimates to the full grid, built from
/// sample statistics.
#[derive(Debug, Clone)]
pub struct LmmseCalibration {
    /// `[n_full_cells, n_pilot_cells]`
    pub w: DMatrix<Complex64>,
    pub noise_var: f64,
    pub n_calib_frames: usize,
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub pattern: PilotPattern,
}

/// Builds `W = R_fp (R_pp + s^2 I)^-1`, where `R_pp` is the autocorrelation of
/// the pilot LS vectors and `R_fp` the cross-correlation between the
/// LI-completed grids and the pilot LS vectors, both averaged over the
/// calibration samples.
pub fn calibrate_lmmse(calib: &[FrameSample], pattern: &PilotPattern, snr_db: f64) -> Result<LmmseCalibration> {
    if calib.len() < 2 {
        return Err(Error::Argument("LMMSE calibration needs at least 2 samples".into()));
    }
    let (n_sc, n_sym) = (calib[0].n_subcarriers, calib[0].n_symbols);
    let np = pattern.n_cells(n_sc);
    let nf = n_sc * n_sym;
    let mut r_pp = DMatrix::<Complex64>::zeros(np, np);
    let mut r_fp = DMatrix::<Complex64>::zeros(nf, np);
    for s in calib {
        if (s.n_subcarriers, s.n_symbols) != (n_sc, n_sym) {
            return Err(Error::Shape("calibration samples have mixed grid sizes".into()));
        }
        let p = DVector::from_vec(s.pilot_values(pattern)?);
        let f = DVector::from_vec(s.x_complex());
        let ph = p.adjoint();
        r_pp.ger(Complex64::new(1.0, 0.0), &p, &p.conjugate(), Complex64::new(1.0, 0.0));
        r_fp += &f * &ph;
    }
    let inv_n = Complex64::new(1.0 / calib.len() as f64, 0.0);
    r_pp *= inv_n;
    r_fp *= inv_n;
    let noise_var = noise_variance(snr_db);
    let mut a = r_pp;
    for i in 0..np {
        a[(i, i)] += Complex64::new(noise_var, 0.0);
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numeric("R_pp + noise loading is not positive definite".into()))?;
    // A is Hermitian, so W^H = A^-1 R_fp^H.
    let w_h = chol.solve(&r_fp.adjoint());
    let w = w_h.adjoint();
    if w.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::Numeric("LMMSE filter has non-finite entries".into()));
    }
    Ok(LmmseCalibration {
        w,
        noise_var,
        n_calib_frames: calib.len(),
        n_subcarriers: n_sc,
        n_symbols: n_sym,
        pattern: pattern.clone(),
    })
}

pub fn estimate_lmmse(sample: &FrameSample, calib: &LmmseCalibration) -> Result<Vec<Complex64>> {
    if (sample.n_subcarriers, sample.n_symbols) != (calib.n_subcarriers, calib.n_symbols) {
        return Err(Error::Shape(format!(
            "sample grid {}x{} does not match calibration {}x{}",
            sample.n_subcarriers, sample.n_symbols, calib.n_subcarriers, calib.n_symbols
        )));
    }
    let p = DVector::from_vec(sample.pilot_values(&calib.pattern)?);
    if p.len() != calib.w.ncols() {
        return Err(Error::Shape("pilot vector length does not match calibration".into()));
    }
    Ok((&calib.w * p).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{synthesize, ChannelConfig, PathSpec};
    use crate::ofdm_frame::{build_samples, SnrPolicy};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn nmse_identities() {
        let truth = vec![c(1.0, 2.0), c(-0.5, 0.3), c(0.0, -1.0)];
        assert_eq!(nmse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(nmse(&vec![c(0.0, 0.0); 3], &truth).unwrap(), 1.0);
        for k in [-1.5, 0.0, 0.5, 2.0] {
            let scaled: Vec<_> = truth.iter().map(|t| t * k).collect();
            assert!((nmse(&scaled, &truth).unwrap() - (k - 1.0f64).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn nmse_of_a_one_percent_error() {
        let truth = vec![c(3.0, 0.0), c(0.0, 4.0)];
        // ||truth||^2 = 25; error with energy 0.25
        let est = vec![c(3.3, 0.0), c(0.0, 4.4)];
        assert!((nmse(&est, &truth).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn nmse_rejects_zero_truth_and_shape_mismatch() {
        assert!(matches!(nmse(&[c(1.0, 0.0)], &[c(0.0, 0.0)]), Err(Error::Degenerate(_))));
        assert!(matches!(nmse(&[c(1.0, 0.0)], &[]), Err(Error::Shape(_))));
    }

    fn flat_sample(snr: SnrPolicy) -> FrameSample {
        let cfg = ChannelConfig {
            n_rx: 1,
            n_paths: 1,
            ..ChannelConfig::default()
        };
        let p = PathSpec {
            delay_s: 0.0,
            doppler_hz: 0.0,
            gains: vec![c(0.8, 0.6)],
        };
        let frame = synthesize(&cfg, &[p], 0, true).unwrap();
        build_samples(&[frame], &PilotPattern::default(), snr, 1).unwrap().remove(0)
    }

    #[test]
    fn noiseless_flat_channel_is_exact_for_ls_and_ft() {
        let s = flat_sample(SnrPolicy::Noiseless);
        let pattern = PilotPattern::default();
        assert_eq!(nmse(&estimate_ls_li(&s), &s.y_complex()).unwrap(), 0.0);
        let ft = estimate_ft(&s, &pattern, default_ft_window(&pattern, 128)).unwrap();
        assert!(nmse(&ft, &s.y_complex()).unwrap() < 1e-12);
    }

    #[test]
    fn ft_window_bounds() {
        let s = flat_sample(SnrPolicy::Noiseless);
        let pattern = PilotPattern::default();
        assert!(matches!(estimate_ft(&s, &pattern, 0), Err(Error::Argument(_))));
        assert!(matches!(estimate_ft(&s, &pattern, 65), Err(Error::Argument(_))));
        assert!(estimate_ft(&s, &pattern, 64).is_ok());
    }

    #[test]
    fn lmmse_on_flat_channel_reproduces_the_grid() {
        let pattern = PilotPattern::default();
        let calib: Vec<_> = (0..3).map(|_| flat_sample(SnrPolicy::Noiseless)).collect();
        let cal = calibrate_lmmse(&calib, &pattern, 80.0).unwrap();
        assert_eq!((cal.w.nrows(), cal.w.ncols()), (128 * 14, 128));
        let est = estimate_lmmse(&calib[0], &cal).unwrap();
        assert_eq!(est.len(), 128 * 14);
        assert!(nmse(&est, &calib[0].y_complex()).unwrap() < 1e-6);
    }

    #[test]
    fn lmmse_is_linear_in_its_input() {
        let pattern = PilotPattern::default();
        let calib: Vec<_> = (0..2).map(|_| flat_sample(SnrPolicy::Fixed(10.0))).collect();
        let cal = calibrate_lmmse(&calib, &pattern, 10.0).unwrap();
        let mut zero = calib[0].clone();
        zero.x.iter_mut().for_each(|v| *v = 0.0);
        assert!(estimate_lmmse(&zero, &cal).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn lmmse_needs_two_samples_and_matching_grid() {
        let pattern = PilotPattern::default();
        let s = flat_sample(SnrPolicy::Fixed(10.0));
        assert!(calibrate_lmmse(&[s.clone()], &pattern, 10.0).is_err());
        let cal = calibrate_lmmse(&[s.clone(), s.clone()], &pattern, 10.0).unwrap();
        let mut other = s;
        other.n_subcarriers = 64;
        assert!(matches!(estimate_lmmse(&other, &cal), Err(Error::Shape(_))));
    }
}
