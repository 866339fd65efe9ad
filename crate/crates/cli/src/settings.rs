//! Run settings from a plain `key = value` file, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use icenet::block::{IebConfig, Norm};
use icenet::channel_model::{kmh_to_mps, ChannelConfig};
use icenet::evaluation::SNR_GRID_DB;
use icenet::model::ModelKind;
use icenet::ofdm_frame::PilotPattern;
use icenet::training::TrainConfig;
use icenet::{Error, Result};

#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Where `gen-data` writes and `train` reads the split files.
    pub data_dir: Option<PathBuf>,
    /// Speeds cycled over the frames of generated splits.
    pub speeds_kmh: Vec<f64>,
    /// Evaluation speed; each subcommand has its own default.
    pub speed_kmh: Option<f64>,
    /// Evaluation SNR; `None` draws per sample from the training range.
    pub snr_db: Option<f64>,
    pub snr_grid: Vec<f64>,
    pub eps: f64,
    pub tau: usize,
    pub model: ModelKind,
    pub n_blocks: usize,
    pub checkpoint: Option<PathBuf>,
    pub ecenet_checkpoints: Vec<PathBuf>,
    pub test_frames: usize,
    pub calib_frames: usize,
    pub channel: ChannelConfig,
    pub pattern: PilotPattern,
    pub block: IebConfig,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data_dir: None,
            speeds_kmh: vec![10.0, 100.0],
            speed_kmh: None,
            snr_db: None,
            snr_grid: SNR_GRID_DB.to_vec(),
            eps: 1e-2,
            tau: 10,
            model: ModelKind::Icenet,
            n_blocks: 1,
            checkpoint: None,
            ecenet_checkpoints: Vec::new(),
            test_frames: 25,
            calib_frames: 64,
            channel: ChannelConfig::default(),
            pattern: PilotPattern::default(),
            block: IebConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl Settings {
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.clone())
    }

    pub fn solve(&self) -> icenet::fixed_point::SolveConfig {
        icenet::fixed_point::SolveConfig::new(self.eps, self.tau)
    }

    pub fn channel_at(&self, kmh: f64) -> ChannelConfig {
        ChannelConfig {
            ue_speed_mps: kmh_to_mps(kmh),
            ..self.channel.clone()
        }
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
                self.block.seed = self.seed;
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "speeds_kmh" => self.speeds_kmh = parse_list(key, v)?,
            "speed_kmh" => self.speed_kmh = Some(parse(key, v)?),
            "snr_db" => self.snr_db = Some(parse(key, v)?),
            "snr_grid" => self.snr_grid = parse_list(key, v)?,
            "snr_lo" => self.train.snr_range_db.0 = parse(key, v)?,
            "snr_hi" => self.train.snr_range_db.1 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "model" => self.model = ModelKind::parse(v)?,
            "n_blocks" => self.n_blocks = parse(key, v)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "ecenet_checkpoints" => {
                self.ecenet_checkpoints = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
            }
            "test_frames" => self.test_frames = parse(key, v)?,
            "calib_frames" => self.calib_frames = parse(key, v)?,
            "carrier_freq_hz" => self.channel.carrier_freq_hz = parse(key, v)?,
            "subcarrier_spacing_hz" => self.channel.subcarrier_spacing_hz = parse(key, v)?,
            "n_subcarriers" => self.channel.n_subcarriers = parse(key, v)?,
            "n_symbols" => self.channel.n_symbols = parse(key, v)?,
            "n_rx" => self.channel.n_rx = parse(key, v)?,
            "n_paths" => self.channel.n_paths = parse(key, v)?,
            "rms_delay_spread_ns" => self.channel.rms_delay_spread_s = parse::<f64>(key, v)? * 1e-9,
            "pilot_symbols" => self.pattern.symbols = parse_list(key, v)?,
            "pilot_stride" => self.pattern.subcarrier_stride = parse(key, v)?,
            "pilot_offset" => self.pattern.subcarrier_offset = parse(key, v)?,
            "hidden_width" => self.block.hidden_width = parse(key, v)?,
            "kernel_sizes" => {
                self.block.kernel_sizes = parse_list(key, v)?;
                self.block.n_sub_blocks = self.block.kernel_sizes.len();
            }
            "norm" => {
                self.block.norm = match v {
                    "weight_scaled" => Norm::WeightScaled,
                    "group_norm" => Norm::GroupNorm,
                    _ => return Err(Error::Config(format!("norm: expected weight_scaled or group_norm, got {v:?}"))),
                }
            }
            "epochs" => self.train.epochs = parse(key, v)?,
            "cosine_period_epochs" => self.train.cosine_period_epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr_init" => self.train.lr_init = parse(key, v)?,
            "lr_final" => self.train.lr_final = parse(key, v)?,
            "grad_clip" => self.train.grad_clip = parse(key, v)?,
            "n_train" => self.train.split_sizes[0] = parse(key, v)?,
            "n_val" => self.train.split_sizes[1] = parse(key, v)?,
            "n_test" => self.train.split_sizes[2] = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.pattern.validate(self.channel.n_subcarriers, self.channel.n_symbols)?;
        self.block.validate()?;
        self.train.validate()?;
        self.solve().validate()?;
        if self.speeds_kmh.is_empty() || self.speeds_kmh.iter().chain(&self.speed_kmh).any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("speeds must be non-negative".into()));
        }
        if self.snr_grid.is_empty() || self.snr_grid.iter().chain(&self.snr_db).any(|s| !(-10.0..=15.0).contains(s)) {
            return Err(Error::Config("SNR values must lie within [-10, 15] dB".into()));
        }
        if self.n_blocks == 0 || self.test_frames == 0 {
            return Err(Error::Config("n_blocks and test_frames must be >= 1".into()));
        }
        Ok(())
    }
}
