//! Synthetic time-varying multipath channel.
//!
//! A tapped-delay-line model: each path has an exponentially distributed
//! delay, a Doppler shift `f_d cos(theta)` with uniform arrival angle, and an
//! independent uniform phase per receive antenna. Path powers decay
//! exponentially with delay. The frequency response on the OFDM grid is
//!
//! ```text
//! H[r, k, t] = sum_p a[p, r] * exp(j 2 pi (f_p t T_sym - k df tau_p))
//! ```
//!
//! evaluated in `f64`, normalized to unit mean power over the frame, and
//! stored as `Complex<f32>`.

use std::f64::consts::PI;

use num_complex::{Complex, Complex32, Complex64};
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::seed;

pub const SPEED_OF_LIGHT_MPS: f64 = 299_792_458.0;

/// Converts km/h to m/s.
pub fn kmh_to_mps(kmh: f64) -> f64 {
    kmh / 3.6
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub carrier_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub n_rx: usize,
    pub n_paths: usize,
    pub rms_delay_spread_s: f64,
    pub ue_speed_mps: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            carrier_freq_hz: 3.5e9,
            subcarrier_spacing_hz: 15e3,
            n_subcarriers: 128,
            n_symbols: 14,
            n_rx: 8,
            n_paths: 12,
            rms_delay_spread_s: 300e-9,
            ue_speed_mps: kmh_to_mps(100.0),
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_subcarriers < 2 {
            return fail("n_subcarriers must be >= 2");
        }
        if self.n_symbols < 2 {
            return fail("n_symbols must be >= 2");
        }
        if self.n_rx < 1 {
            return fail("n_rx must be >= 1");
        }
        if self.n_paths < 1 {
            return fail("n_paths must be >= 1");
        }
        if !(self.subcarrier_spacing_hz > 0.0) || !self.subcarrier_spacing_hz.is_finite() {
            return fail("subcarrier_spacing_hz must be positive");
        }
        if !(self.carrier_freq_hz > 0.0) || !self.carrier_freq_hz.is_finite() {
            return fail("carrier_freq_hz must be positive");
        }
        if !(self.rms_delay_spread_s >= 0.0) {
            return fail("rms_delay_spread_s must be >= 0");
        }
        if self.rms_delay_spread_s >= self.symbol_duration_s() {
            return fail("rms_delay_spread_s must be < 1/subcarrier_spacing_hz");
        }
        if !(self.ue_speed_mps >= 0.0) || !self.ue_speed_mps.is_finite() {
            return fail("ue_speed_mps must be finite and >= 0");
        }
        Ok(())
    }

    /// Useful OFDM symbol duration, `1 / df`.
    pub fn symbol_duration_s(&self) -> f64 {
        1.0 / self.subcarrier_spacing_hz
    }

    /// Maximum Doppler shift `v f_c / c`.
    pub fn max_doppler_hz(&self) -> f64 {
        self.ue_speed_mps * self.carrier_freq_hz / SPEED_OF_LIGHT_MPS
    }

    pub fn n_cells(&self) -> usize {
        self.n_rx * self.n_subcarriers * self.n_symbols
    }
}

/// One propagation path. `gains` holds one complex amplitude per antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub gains: Vec<Complex64>,
}

/// Ground-truth channel over `[rx, subcarrier, symbol]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFrame {
    pub h: Vec<Complex32>,
    pub config: ChannelConfig,
    pub frame_seed: u64,
}

impl ChannelFrame {
    #[inline]
    pub fn index(&self, rx: usize, k: usize, t: usize) -> usize {
        (rx * self.config.n_subcarriers + k) * self.config.n_symbols + t
    }

    pub fn at(&self, rx: usize, k: usize, t: usize) -> Complex32 {
        self.h[self.index(rx, k, t)]
    }

    /// The `[subcarrier, symbol]` grid of one antenna.
    pub fn antenna(&self, rx: usize) -> &[Complex32] {
        let n = self.config.n_subcarriers * self.config.n_symbols;
        &self.h[rx * n..(rx + 1) * n]
    }

    pub fn mean_power(&self) -> f64 {
        self.h.iter().map(|c| c.norm_sqr() as f64).sum::<f64>() / self.h.len() as f64
    }
}

/// Evaluates the sum-of-paths response on the grid. With `normalize`, the
/// frame is scaled to unit mean power.
pub fn synthesize(cfg: &ChannelConfig, paths: &[PathSpec], frame_seed: u64, normalize: bool) -> Result<ChannelFrame> {
    cfg.validate()?;
    for p in paths {
        if p.gains.len() != cfg.n_rx {
            return Err(Error::Shape(format!(
                "path has {} antenna gains, config has {} antennas",
                p.gains.len(),
                cfg.n_rx
            )));
        }
    }
    let (n_sc, n_sym) = (cfg.n_subcarriers, cfg.n_symbols);
    let t_sym = cfg.symbol_duration_s();
    let df = cfg.subcarrier_spacing_hz;
    let mut h = vec![Complex64::new(0.0, 0.0); cfg.n_cells()];
    for p in paths {
        // Per-path phase ramps, shared by all antennas.
        let freq: Vec<Complex64> = (0..n_sc)
            .map(|k| Complex::from_polar(1.0, -2.0 * PI * k as f64 * df * p.delay_s))
            .collect();
        let time: Vec<Complex64> = (0..n_sym)
            .map(|t| Complex::from_polar(1.0, 2.0 * PI * p.doppler_hz * t as f64 * t_sym))
            .collect();
        for (r, &a) in p.gains.iter().enumerate() {
            for (k, &fk) in freq.iter().enumerate() {
                let base = (r * n_sc + k) * n_sym;
                let af = a * fk;
                for (t, &tt) in time.iter().enumerate() {
                    h[base + t] += af * tt;
                }
            }
        }
    }
    let scale = if normalize {
        let p = h.iter().map(|c| c.norm_sqr()).sum::<f64>() / h.len() as f64;
        if !(p > 0.0) {
            return Err(Error::Degenerate("channel frame has zero power".into()));
        }
        1.0 / p.sqrt()
    } else {
        1.0
    };
    let h: Vec<Complex32> = h
        .into_iter()
        .map(|c| Complex32::new((c.re * scale) as f32, (c.im * scale) as f32))
        .collect();
    if h.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::Numeric("channel frame has non-finite entries".into()));
    }
    Ok(ChannelFrame {
        h,
        config: cfg.clone(),
        frame_seed,
    })
}

/// Draws the random path set of one frame.
pub fn draw_paths(cfg: &ChannelConfig, frame_seed: u64) -> Result<Vec<PathSpec>> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::STREAM_PATHS, frame_seed]));
    let fd = cfg.max_doppler_hz();
    let mut paths = Vec::with_capacity(cfg.n_paths);
    for _ in 0..cfg.n_paths {
        let delay_s = if cfg.rms_delay_spread_s > 0.0 {
            let exp = Exp::new(1.0 / cfg.rms_delay_spread_s).expect("positive rate");
            exp.sample(&mut rng)
        } else {
            0.0
        };
        let theta: f64 = rng.random_range(0.0..2.0 * PI);
        let power = if cfg.rms_delay_spread_s > 0.0 {
            (-delay_s / cfg.rms_delay_spread_s).exp()
        } else {
            1.0
        };
        let amp = power.sqrt();
        let gains = (0..cfg.n_rx)
            .map(|_| Complex::from_polar(amp, rng.random_range(0.0..2.0 * PI)))
            .collect();
        paths.push(PathSpec {
            delay_s,
            doppler_hz: fd * theta.cos(),
            gains,
        });
    }
    Ok(paths)
}

pub fn generate_frame(cfg: &ChannelConfig, frame_seed: u64) -> Result<ChannelFrame> {
    let paths = draw_paths(cfg, frame_seed)?;
    synthesize(cfg, &paths, frame_seed, true)
}

/// `n_frames` frames with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(cfg: &ChannelConfig, n_frames: usize, base_seed: u64) -> Result<Vec<ChannelFrame>> {
    if n_frames == 0 {
        return Err(Error::Argument("n_frames must be >= 1".into()));
    }
    (0..n_frames as u64)
        .map(|i| generate_frame(cfg, base_seed.wrapping_add(i)))
        .collect()
}

fn correlation_coefficient(pairs: impl Iterator<Item = (Complex32, Complex32)>) -> f64 {
    let (mut cross, mut pa, mut pb) = (Complex64::new(0.0, 0.0), 0.0, 0.0);
    for (a, b) in pairs {
        let (a, b) = (Complex64::new(a.re as f64, a.im as f64), Complex64::new(b.re as f64, b.im as f64));
        cross += a * b.conj();
        pa += a.norm_sqr();
        pb += b.norm_sqr();
    }
    if pa == 0.0 || pb == 0.0 {
        return 0.0;
    }
    (cross.norm() / (pa * pb).sqrt()).min(1.0)
}

/// Magnitude of the empirical correlation between symbols `t` and `t + lag`,
/// averaged over all valid `t`.
pub fn time_correlation(frame: &ChannelFrame, lag: usize) -> Result<f64> {
    let cfg = &frame.config;
    if lag >= cfg.n_symbols {
        return Err(Error::Argument(format!("lag {lag} must be < n_symbols {}", cfg.n_symbols)));
    }
    let n_t = cfg.n_symbols - lag;
    let total: f64 = (0..n_t)
        .map(|t| {
            let pairs = (0..cfg.n_rx)
                .flat_map(|r| (0..cfg.n_subcarriers).map(move |k| (r, k)))
                .map(|(r, k)| (frame.at(r, k, t), frame.at(r, k, t + lag)));
            correlation_coefficient(pairs)
        })
        .sum();
    Ok(total / n_t as f64)
}

/// As [`time_correlation`] but across subcarriers `k` and `k + spacing`.
pub fn frequency_correlation(frame: &ChannelFrame, spacing: usize) -> Result<f64> {
    let cfg = &frame.config;
    if spacing >= cfg.n_subcarriers {
        return Err(Error::Argument(format!(
            "spacing {spacing} must be < n_subcarriers {}",
            cfg.n_subcarriers
        )));
    }
    let n_k = cfg.n_subcarriers - spacing;
    let total: f64 = (0..n_k)
        .map(|k| {
            let pairs = (0..cfg.n_rx)
                .flat_map(|r| (0..cfg.n_symbols).map(move |t| (r, t)))
                .map(|(r, t)| (frame.at(r, k, t), frame.at(r, k + spacing, t)));
            correlation_coefficient(pairs)
        })
        .sum();
    Ok(total / n_k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ChannelConfig {
        ChannelConfig {
            n_subcarriers: 32,
            n_rx: 2,
            seed: 3,
            ..ChannelConfig::default()
        }
    }

    #[test]
    fn max_doppler_at_100_kmh() {
        let cfg = ChannelConfig::default();
        // 27.778 m/s * 3.5e9 Hz / 2.998e8 m/s = 324.3 Hz
        assert!((cfg.max_doppler_hz() - 324.3).abs() < 0.5, "{}", cfg.max_doppler_hz());
    }

    #[test]
    fn static_ue_gives_identical_symbols() {
        let cfg = ChannelConfig {
            ue_speed_mps: 0.0,
            ..small()
        };
        let f = generate_frame(&cfg, 11).unwrap();
        for r in 0..cfg.n_rx {
            for k in 0..cfg.n_subcarriers {
                for t in 1..cfg.n_symbols {
                    assert_eq!(f.at(r, k, t), f.at(r, k, 0));
                }
            }
        }
        for lag in [0, 3, 13] {
            assert!((time_correlation(&f, lag).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_flat_path_has_constant_magnitude() {
        let cfg = ChannelConfig {
            n_paths: 1,
            n_rx: 2,
            ..ChannelConfig::default()
        };
        let path = PathSpec {
            delay_s: 0.0,
            doppler_hz: 0.0,
            gains: vec![Complex64::new(1.0, 0.0); 2],
        };
        let f = synthesize(&cfg, &[path], 0, true).unwrap();
        for c in &f.h {
            assert!((c.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn frames_have_unit_power_and_are_deterministic() {
        let cfg = small();
        let a = generate_frame(&cfg, 5).unwrap();
        let b = generate_frame(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert!((a.mean_power() - 1.0).abs() < 1e-6);
        assert!(a.h.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
        let c = generate_frame(&cfg, 6).unwrap();
        assert_ne!(a.h, c.h);
    }

    #[test]
    fn dataset_delegates_to_frame_generation() {
        let cfg = small();
        let ds = generate_dataset(&cfg, 1, 40).unwrap();
        assert_eq!(ds, vec![generate_frame(&cfg, 40).unwrap()]);
        assert_eq!(generate_dataset(&cfg, 3, 9).unwrap(), generate_dataset(&cfg, 3, 9).unwrap());
        assert!(generate_dataset(&cfg, 0, 9).is_err());
    }

    #[test]
    fn invalid_configs_name_the_bound() {
        let bad = [
            (
                ChannelConfig {
                    n_subcarriers: 1,
                    ..small()
                },
                "n_subcarriers",
            ),
            (ChannelConfig { n_symbols: 1, ..small() }, "n_symbols"),
            (ChannelConfig { n_rx: 0, ..small() }, "n_rx"),
            (ChannelConfig { n_paths: 0, ..small() }, "n_paths"),
            (
                ChannelConfig {
                    rms_delay_spread_s: 1e-3,
                    ..small()
                },
                "rms_delay_spread_s",
            ),
        ];
        for (cfg, name) in bad {
            match generate_frame(&cfg, 0) {
                Err(Error::Config(m)) => assert!(m.contains(name), "{m}"),
                other => panic!("expected config error for {name}, got {other:?}"),
            }
        }
    }

    #[test]
    fn lag_out_of_range_is_rejected() {
        let f = generate_frame(&small(), 0).unwrap();
        assert!(matches!(time_correlation(&f, 14), Err(Error::Argument(_))));
        assert!((time_correlation(&f, 0).unwrap() - 1.0).abs() < 1e-9);
    }
}
