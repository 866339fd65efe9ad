//! Pilot pattern, noisy LS observation at pilot cells, grid interpolation and
//! per-antenna sample construction.

use num_complex::{Complex32, Complex64};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel_model::ChannelFrame;
use crate::error::{Error, Result};
use crate::seed;

/// Pilot placement on the subcarrier x symbol grid (0-based indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotPattern {
    pub symbols: Vec<usize>,
    pub subcarrier_stride: usize,
    pub subcarrier_offset: usize,
}

impl Default for PilotPattern {
    /// Pilots on the 2nd and 11th symbols, every second subcarrier.
    fn default() -> Self {
        Self {
            symbols: vec![1, 10],
            subcarrier_stride: 2,
            subcarrier_offset: 0,
        }
    }
}

impl PilotPattern {
    pub fn validate(&self, n_subcarriers: usize, n_symbols: usize) -> Result<()> {
        if self.symbols.is_empty() {
            return Err(Error::Shape("pilot pattern has no pilot symbols".into()));
        }
        if self.subcarrier_stride == 0 {
            return Err(Error::Shape("pilot subcarrier stride must be >= 1".into()));
        }
        if self.subcarrier_offset >= self.subcarrier_stride {
            return Err(Error::Shape("pilot subcarrier offset must be < stride".into()));
        }
        if self.subcarrier_offset >= n_subcarriers {
            return Err(Error::Shape("pilot subcarrier offset outside the band".into()));
        }
        if self.symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape("pilot symbols must be strictly increasing".into()));
        }
        if let Some(&s) = self.symbols.iter().find(|&&s| s >= n_symbols) {
            return Err(Error::Shape(format!("pilot symbol {s} outside frame of {n_symbols} symbols")));
        }
        Ok(())
    }

    pub fn subcarriers(&self, n_subcarriers: usize) -> Vec<usize> {
        (self.subcarrier_offset..n_subcarriers).step_by(self.subcarrier_stride).collect()
    }

    pub fn n_pilot_subcarriers(&self, n_subcarriers: usize) -> usize {
        self.subcarriers(n_subcarriers).len()
    }

    /// Number of pilot cells on one antenna grid.
    pub fn n_cells(&self, n_subcarriers: usize) -> usize {
        self.n_pilot_subcarriers(n_subcarriers) * self.symbols.len()
    }
}

/// LS estimates at pilot cells, `[rx, pilot subcarrier, pilot symbol]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotObservation {
    pub n_rx: usize,
    pub n_pilot_subcarriers: usize,
    pub n_pilot_symbols: usize,
    pub data: Vec<Complex64>,
}

impl PilotObservation {
    pub fn shape(&self) -> [usize; 3] {
        [self.n_rx, self.n_pilot_subcarriers, self.n_pilot_symbols]
    }

    pub fn antenna(&self, rx: usize) -> &[Complex64] {
        let n = self.n_pilot_subcarriers * self.n_pilot_symbols;
        &self.data[rx * n..(rx + 1) * n]
    }
}

/// Noise variance for unit-power pilots and unit-power channel.
/// `+inf` dB disables noise.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// LS estimates of one antenna at the pilot cells:
/// `H_p + n`, `n ~ CN(0, 10^(-snr/10))`.
pub fn observe_antenna(frame: &ChannelFrame, rx: usize, pattern: &PilotPattern, snr_db: f64, noise_seed: u64) -> Result<Vec<Complex64>> {
    let cfg = &frame.config;
    pattern.validate(cfg.n_subcarriers, cfg.n_symbols)?;
    if rx >= cfg.n_rx {
        return Err(Error::Shape(format!("antenna {rx} outside {} antennas", cfg.n_rx)));
    }
    if snr_db.is_nan() {
        return Err(Error::Argument("snr_db is NaN".into()));
    }
    let sigma = (noise_variance(snr_db) / 2.0).sqrt();
    let mut rng = seed::rng(noise_seed);
    let pilots_sc = pattern.subcarriers(cfg.n_subcarriers);
    let mut out = Vec::with_capacity(pilots_sc.len() * pattern.symbols.len());
    for &k in &pilots_sc {
        for &t in &pattern.symbols {
            let h = frame.at(rx, k, t);
            let mut v = Complex64::new(h.re as f64, h.im as f64);
            if sigma > 0.0 {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                v += Complex64::new(sigma * re, sigma * im);
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// LS estimates for every antenna; antenna `r` draws its noise from a stream
/// derived from `(noise_seed, r)`.
pub fn observe_pilots(frame: &ChannelFrame, pattern: &PilotPattern, snr_db: f64, noise_seed: u64) -> Result<PilotObservation> {
    let cfg = &frame.config;
    pattern.validate(cfg.n_subcarriers, cfg.n_symbols)?;
    let mut data = Vec::new();
    for rx in 0..cfg.n_rx {
        data.extend(observe_antenna(frame, rx, pattern, snr_db, seed::derive(noise_seed, &[rx as u64]))?);
    }
    Ok(PilotObservation {
        n_rx: cfg.n_rx,
        n_pilot_subcarriers: pattern.n_pilot_subcarriers(cfg.n_subcarriers),
        n_pilot_symbols: pattern.symbols.len(),
        data,
    })
}

/// Piecewise-linear interpolation of `(xs, ys)` at `q`; linear extrapolation
/// beyond the end points. `xs` strictly increasing with at least two points.
fn lerp_extrapolate(xs: &[usize], ys: &[Complex64], q: usize) -> Complex64 {
    let n = xs.len();
    let seg = match xs.iter().position(|&x| x > q) {
        Some(0) => 0,
        Some(i) => i - 1,
        None => n - 2,
    }
    .min(n - 2);
    let (x0, x1) = (xs[seg] as f64, xs[seg + 1] as f64);
    let w = (q as f64 - x0) / (x1 - x0);
    ys[seg] * (1.0 - w) + ys[seg + 1] * w
}

/// Linear interpolation between points with nearest-value hold outside
/// `[xs[0], xs[last]]`.
fn lerp_hold(xs: &[usize], ys: &[Complex64], q: usize) -> Complex64 {
    let n = xs.len();
    if q <= xs[0] {
        return ys[0];
    }
    if q >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.iter().position(|&x| x > q).expect("inside span") - 1;
    let w = (q - xs[i]) as f64 / (xs[i + 1] - xs[i]) as f64;
    ys[i] * (1.0 - w) + ys[i + 1] * w
}

/// Completes a `[pilot subcarrier, pilot symbol]` grid to the full
/// `[n_subcarriers, n_symbols]` grid: linear in frequency with edge
/// extrapolation, then linear in time with hold beyond the outer pilot symbols.
pub fn interpolate_to_grid(
    pilot_est: &[Complex64],
    pattern: &PilotPattern,
    n_subcarriers: usize,
    n_symbols: usize,
) -> Result<Vec<Complex64>> {
    pattern.validate(n_subcarriers, n_symbols)?;
    let sc = pattern.subcarriers(n_subcarriers);
    let n_psym = pattern.symbols.len();
    if sc.len() < 2 {
        return Err(Error::Interpolation(format!(
            "need at least 2 pilot subcarriers, pattern yields {}",
            sc.len()
        )));
    }
    if pilot_est.len() != sc.len() * n_psym {
        return Err(Error::Shape(format!(
            "pilot estimate has {} cells, pattern expects {}",
            pilot_est.len(),
            sc.len() * n_psym
        )));
    }
    // Frequency completion on each pilot symbol: [n_subcarriers, n_psym].
    let mut freq_done = vec![Complex64::new(0.0, 0.0); n_subcarriers * n_psym];
    let mut column = vec![Complex64::new(0.0, 0.0); sc.len()];
    for j in 0..n_psym {
        for (i, c) in column.iter_mut().enumerate() {
            *c = pilot_est[i * n_psym + j];
        }
        for k in 0..n_subcarriers {
            freq_done[k * n_psym + j] = lerp_extrapolate(&sc, &column, k);
        }
    }
    Ok(complete_in_time(&freq_done, &pattern.symbols, n_subcarriers, n_symbols))
}

/// Fills every symbol of a `[n_subcarriers, pilot symbol]` grid: linear
/// between pilot symbols, hold outside them.
pub(crate) fn complete_in_time(
    at_pilot_symbols: &[Complex64],
    symbols: &[usize],
    n_subcarriers: usize,
    n_symbols: usize,
) -> Vec<Complex64> {
    let n_psym = symbols.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n_subcarriers * n_symbols];
    for k in 0..n_subcarriers {
        let row = &at_pilot_symbols[k * n_psym..(k + 1) * n_psym];
        for t in 0..n_symbols {
            out[k * n_symbols + t] = lerp_hold(symbols, row, t);
        }
    }
    out
}

/// How each sample's SNR is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrPolicy {
    Fixed(f64),
    /// Uniform draw from `[lo, hi]` dB per sample.
    Uniform {
        lo: f64,
        hi: f64,
    },
    Noiseless,
}

impl SnrPolicy {
    /// Training mix over -10..15 dB.
    pub fn training_mix() -> Self {
        SnrPolicy::Uniform { lo: -10.0, hi: 15.0 }
    }

    fn draw(&self, sample_seed: u64) -> f64 {
        match *self {
            SnrPolicy::Fixed(db) => db,
            SnrPolicy::Noiseless => f64::INFINITY,
            SnrPolicy::Uniform { lo, hi } => {
                let mut rng = seed::rng(seed::derive(sample_seed, &[seed::STREAM_SNR]));
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }
        }
    }
}

/// One antenna's network input (interpolated LS estimate) and target, as
/// real/imag planes `[2, n_subcarriers, n_symbols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub snr_db: f32,
    pub rx_index: u32,
    pub frame_id: u32,
}

impl FrameSample {
    pub fn plane_len(&self) -> usize {
        self.n_subcarriers * self.n_symbols
    }

    pub fn x_complex(&self) -> Vec<Complex64> {
        planes_to_complex(&self.x)
    }

    pub fn y_complex(&self) -> Vec<Complex64> {
        planes_to_complex(&self.y)
    }

    pub fn x_f64(&self) -> Vec<f64> {
        self.x.iter().map(|&v| v as f64).collect()
    }

    pub fn y_f64(&self) -> Vec<f64> {
        self.y.iter().map(|&v| v as f64).collect()
    }

    /// LS estimates at the pilot cells, recovered from `x` (interpolation
    /// passes through the pilots), ordered `[pilot subcarrier, pilot symbol]`.
    pub fn pilot_values(&self, pattern: &PilotPattern) -> Result<Vec<Complex64>> {
        pattern.validate(self.n_subcarriers, self.n_symbols)?;
        let n = self.plane_len();
        let mut out = Vec::with_capacity(pattern.n_cells(self.n_subcarriers));
        for k in pattern.subcarriers(self.n_subcarriers) {
            for &t in &pattern.symbols {
                let i = k * self.n_symbols + t;
                out.push(Complex64::new(self.x[i] as f64, self.x[n + i] as f64));
            }
        }
        Ok(out)
    }
}

/// Splits a complex grid into `[re plane, im plane]`.
pub fn complex_to_planes(grid: &[Complex64]) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * grid.len());
    out.extend(grid.iter().map(|c| c.re as f32));
    out.extend(grid.iter().map(|c| c.im as f32));
    out
}

pub fn planes_to_complex<T: Copy + Into<f64>>(planes: &[T]) -> Vec<Complex64> {
    let n = planes.len() / 2;
    (0..n).map(|i| Complex64::new(planes[i].into(), planes[n + i].into())).collect()
}

fn antenna_truth(frame: &ChannelFrame, rx: usize) -> Vec<f32> {
    let grid = frame.antenna(rx);
    let mut out = Vec::with_capacity(2 * grid.len());
    out.extend(grid.iter().map(|c: &Complex32| c.re));
    out.extend(grid.iter().map(|c: &Complex32| c.im));
    out
}

/// Builds one sample from a given antenna at a given SNR.
pub fn build_sample(frame: &ChannelFrame, rx: usize, pattern: &PilotPattern, snr_db: f64, noise_seed: u64) -> Result<FrameSample> {
    let cfg = &frame.config;
    let pilots = observe_antenna(frame, rx, pattern, snr_db, noise_seed)?;
    let grid = interpolate_to_grid(&pilots, pattern, cfg.n_subcarriers, cfg.n_symbols)?;
    Ok(FrameSample {
        n_subcarriers: cfg.n_subcarriers,
        n_symbols: cfg.n_symbols,
        x: complex_to_planes(&grid),
        y: antenna_truth(frame, rx),
        snr_db: snr_db as f32,
        rx_index: rx as u32,
        frame_id: frame.frame_seed as u32,
    })
}

/// Every `(frame, antenna)` pair becomes one sample. SNR draws and noise are
/// keyed by `(seed, frame_seed, antenna)`.
pub fn build_samples(frames: &[ChannelFrame], pattern: &PilotPattern, policy: SnrPolicy, seed: u64) -> Result<Vec<FrameSample>> {
    if frames.is_empty() {
        return Err(Error::Argument("no frames to build samples from".into()));
    }
    let mut out = Vec::with_capacity(frames.len() * frames[0].config.n_rx);
    for frame in frames {
        for rx in 0..frame.config.n_rx {
            let sample_seed = seed::derive(seed, &[frame.frame_seed, rx as u64]);
            let snr = policy.draw(sample_seed);
            let noise_seed = seed::derive(sample_seed, &[seed::STREAM_NOISE]);
            out.push(build_sample(frame, rx, pattern, snr, noise_seed)?);
        }
    }
    Ok(out)
}

/// Re-observes a set of samples' frames at another SNR with the same seed
/// layout as [`build_samples`].
pub fn build_samples_at(frames: &[ChannelFrame], pattern: &PilotPattern, snr_db: f64, seed: u64) -> Result<Vec<FrameSample>> {
    build_samples(frames, pattern, SnrPolicy::Fixed(snr_db), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{generate_frame, synthesize, ChannelConfig, PathSpec};

    fn flat_static(n_rx: usize) -> ChannelFrame {
        let cfg = ChannelConfig {
            n_rx,
            n_paths: 1,
            ..ChannelConfig::default()
        };
        let p = PathSpec {
            delay_s: 0.0,
            doppler_hz: 0.0,
            gains: vec![Complex64::new(0.6, -0.8); n_rx],
        };
        synthesize(&cfg, &[p], 0, true).unwrap()
    }

    #[test]
    fn default_pattern_shape() {
        let frame = generate_frame(&ChannelConfig::default(), 1).unwrap();
        let obs = observe_pilots(&frame, &PilotPattern::default(), 10.0, 3).unwrap();
        assert_eq!(obs.shape(), [8, 64, 2]);
    }

    #[test]
    fn noiseless_pilots_are_exact() {
        let frame = generate_frame(&ChannelConfig::default(), 2).unwrap();
        let pattern = PilotPattern::default();
        let obs = observe_pilots(&frame, &pattern, f64::INFINITY, 3).unwrap();
        let sc = pattern.subcarriers(128);
        for r in 0..8 {
            let a = obs.antenna(r);
            for (i, &k) in sc.iter().enumerate() {
                for (j, &t) in pattern.symbols.iter().enumerate() {
                    let h = frame.at(r, k, t);
                    assert_eq!(a[i * 2 + j], Complex64::new(h.re as f64, h.im as f64));
                }
            }
        }
    }

    #[test]
    fn pattern_mismatch_is_a_shape_error() {
        let frame = generate_frame(&ChannelConfig::default(), 2).unwrap();
        let bad = PilotPattern {
            symbols: vec![1, 14],
            ..PilotPattern::default()
        };
        assert!(matches!(observe_pilots(&frame, &bad, 0.0, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_in_frequency_is_reproduced() {
        let pattern = PilotPattern::default();
        let sc = pattern.subcarriers(16);
        let f = |k: usize| Complex64::new(0.3 + 0.1 * k as f64, -0.2 * k as f64);
        let pilots: Vec<Complex64> = sc.iter().flat_map(|&k| [f(k), f(k)]).collect();
        let grid = interpolate_to_grid(&pilots, &pattern, 16, 14).unwrap();
        for k in 0..16 {
            for t in 0..14 {
                assert!((grid[k * 14 + t] - f(k)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn hold_beyond_last_pilot_symbol() {
        let pattern = PilotPattern::default();
        let (v1, v2) = (Complex64::new(1.0, 0.0), Complex64::new(-2.0, 0.5));
        let pilots: Vec<Complex64> = (0..8).flat_map(|_| [v1, v2]).collect();
        let grid = interpolate_to_grid(&pilots, &pattern, 16, 14).unwrap();
        assert_eq!(grid[13], v2);
        assert_eq!(grid[0], v1);
        // symbol 4 lies 3/9 of the way from symbol 1 to symbol 10
        assert!((grid[4] - (v1 * (6.0 / 9.0) + v2 * (3.0 / 9.0))).norm() < 1e-12);
    }

    #[test]
    fn too_few_pilot_subcarriers() {
        let pattern = PilotPattern {
            subcarrier_stride: 4,
            ..PilotPattern::default()
        };
        let pilots = vec![Complex64::new(1.0, 0.0); 2];
        assert!(matches!(
            interpolate_to_grid(&pilots, &pattern, 3, 14),
            Err(Error::Interpolation(_))
        ));
    }

    #[test]
    fn samples_per_antenna_and_fixed_snr() {
        let frame = generate_frame(&ChannelConfig::default(), 4).unwrap();
        let s = build_samples(&[frame], &PilotPattern::default(), SnrPolicy::Fixed(10.0), 1).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|s| s.snr_db == 10.0));
        assert!(s.iter().enumerate().all(|(i, s)| s.rx_index == i as u32));
        assert_eq!(s[0].x.len(), 2 * 128 * 14);
    }

    #[test]
    fn uniform_policy_stays_in_range() {
        let frames: Vec<_> = (0..3).map(|i| generate_frame(&ChannelConfig::default(), i).unwrap()).collect();
        let s = build_samples(&frames, &PilotPattern::default(), SnrPolicy::training_mix(), 9).unwrap();
        assert!(s.iter().all(|s| (-10.0..=15.0).contains(&s.snr_db)));
        let distinct: std::collections::BTreeSet<u32> = s.iter().map(|s| s.snr_db.to_bits()).collect();
        assert!(distinct.len() > 10);
    }

    #[test]
    fn noiseless_flat_static_input_is_exact() {
        let frame = flat_static(2);
        let s = build_samples(&[frame], &PilotPattern::default(), SnrPolicy::Noiseless, 0).unwrap();
        for smp in &s {
            assert_eq!(smp.x, smp.y);
        }
    }
}
