use std::fs;
use std::path::{Path, PathBuf};

use icenet::block::init_params;
use icenet::channel_model::{generate_frame, ChannelFrame};
use icenet::dataset_file::{load_dataset, save_dataset, DatasetMeta};
use icenet::evaluation::{
    depth_csv, histogram_csv, residual_trace_csv, run_depth_comparison, run_iteration_histogram, run_snr_sweep, run_table1, sweep_csv,
    table1_csv, SweepInputs, TABLE1_SETTINGS,
};
use icenet::explicit_net::{init_ecenet, EcenetConfig};
use icenet::model::{load_checkpoint, save_checkpoint, Model, ModelKind};
use icenet::ofdm_frame::{build_samples, FrameSample, SnrPolicy};
use icenet::seed;
use icenet::training::train;
use icenet::{Error, Result};

use crate::settings::Settings;

const STREAM_SPLIT_FRAMES: u64 = 0x5f_5f;
const STREAM_SPLIT_NOISE: u64 = 0x5f_6e;
const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
const SPLIT_CALIBRATION: u64 = 3;

/// Frames of one split; speeds are cycled over the frames.
fn split_frames(s: &Settings, split: u64, n_frames: usize, speeds: &[f64]) -> Result<Vec<ChannelFrame>> {
    let base = seed::derive(s.seed, &[STREAM_SPLIT_FRAMES, split]);
    (0..n_frames)
        .map(|i| generate_frame(&s.channel_at(speeds[i % speeds.len()]), base.wrapping_add(i as u64)))
        .collect()
}

fn split_noise_seed(s: &Settings, split: u64) -> u64 {
    seed::derive(s.seed, &[STREAM_SPLIT_NOISE, split])
}

fn training_policy(s: &Settings) -> SnrPolicy {
    let (lo, hi) = s.train.snr_range_db;
    SnrPolicy::Uniform { lo, hi }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn gen_data(s: &Settings) -> Result<()> {
    let dir = s.data_dir();
    fs::create_dir_all(&dir)?;
    let speeds = match s.speed_kmh {
        Some(v) => vec![v],
        None => s.speeds_kmh.clone(),
    };
    for (split, name) in SPLIT_NAMES.iter().enumerate() {
        let n = s.train.split_sizes[split];
        let frames = split_frames(s, split as u64, n.div_ceil(s.channel.n_rx), &speeds)?;
        let mut samples = build_samples(&frames, &s.pattern, training_policy(s), split_noise_seed(s, split as u64))?;
        samples.truncate(n);
        let meta = DatasetMeta {
            channel: s.channel_at(speeds[0]),
            pattern: s.pattern.clone(),
            snr_policy: training_policy(s),
            seed: s.seed,
        };
        let path = dir.join(format!("{name}.iced"));
        save_dataset(&path, &meta, &samples)?;
        println!("wrote {} ({} samples from {} frames)", path.display(), samples.len(), frames.len());
    }
    Ok(())
}

fn load_split(s: &Settings, name: &str) -> Result<Vec<FrameSample>> {
    let (_, samples) = load_dataset(&s.data_dir().join(format!("{name}.iced")))?;
    Ok(samples)
}

pub fn train_cmd(s: &Settings) -> Result<()> {
    let train_set = load_split(s, "train")?;
    let val_set = load_split(s, "val")?;
    let model = match s.model {
        ModelKind::Icenet => Model::Icenet(init_params(&s.block)?),
        ModelKind::Ecenet => Model::Ecenet(init_ecenet(&EcenetConfig {
            n_blocks: s.n_blocks,
            block: s.block.clone(),
            seed: s.seed,
        })?),
    };
    let label = model.label();
    println!(
        "training {label} ({} parameters) on {} samples, validating on {}",
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    let (best, report) = train(model, &train_set, &val_set, &s.train, &s.solve())?;
    for r in &report.epochs {
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.5}  val_nmse {:.5}  iters {:.2}  flagged {}",
            r.epoch, r.lr, r.train_loss, r.val_nmse, r.mean_iters, r.flagged
        );
    }
    let ckpt = s.checkpoint.clone().unwrap_or_else(|| s.out_dir.join(format!("{label}.iebp")));
    save_checkpoint(&ckpt, &best)?;
    println!(
        "best epoch {} (val_nmse {:.5}), checkpoint {}",
        report.best_epoch,
        report.best_val_nmse,
        ckpt.display()
    );
    write(&s.out_dir.join(format!("{label}_train.csv")), &report.to_csv())
}

fn require_checkpoint(s: &Settings) -> Result<PathBuf> {
    s.checkpoint.clone().ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn load_icenet(s: &Settings) -> Result<Model> {
    let m = load_checkpoint(&require_checkpoint(s)?)?;
    if m.kind() != ModelKind::Icenet {
        return Err(Error::Config("--checkpoint must point at an icenet checkpoint".into()));
    }
    Ok(m)
}

/// The evaluation set: test-split frames at one speed, observed at a fixed
/// SNR or with per-sample SNR draws.
fn test_samples(s: &Settings, speed_kmh: f64, snr_db: Option<f64>) -> Result<Vec<FrameSample>> {
    let frames = split_frames(s, 2, s.test_frames, &[speed_kmh])?;
    let policy = snr_db.map(SnrPolicy::Fixed).unwrap_or_else(|| training_policy(s));
    build_samples(&frames, &s.pattern, policy, split_noise_seed(s, 2))
}

pub fn eval_sweep(s: &Settings) -> Result<()> {
    let mut models = Vec::new();
    if s.checkpoint.is_some() {
        models.push(load_checkpoint(&require_checkpoint(s)?)?);
    }
    for p in &s.ecenet_checkpoints {
        models.push(load_checkpoint(p)?);
    }
    let speed = s.speed_kmh.unwrap_or(100.0);
    let test = split_frames(s, 2, s.test_frames, &[speed])?;
    let calib = split_frames(s, SPLIT_CALIBRATION, s.calib_frames, &[speed])?;
    let snr_grid = match s.snr_db {
        Some(v) => vec![v],
        None => s.snr_grid.clone(),
    };
    let r = run_snr_sweep(&SweepInputs {
        test_frames: &test,
        calibration_frames: &calib,
        pattern: s.pattern.clone(),
        snr_grid,
        models: &models,
        solve: s.solve(),
        noise_seed: split_noise_seed(s, 2),
    })?;
    for row in &r.rows {
        let it = row.mean_iters.map(|v| format!("  iters {v:.2}")).unwrap_or_default();
        println!("{:<10} {:>6} dB  nmse {:.5}{it}", row.method, row.snr_db, row.mean_nmse);
    }
    write(&s.out_dir.join("snr_sweep.csv"), &sweep_csv(&r.rows))
}

pub fn table1(s: &Settings) -> Result<()> {
    let model = load_icenet(s)?;
    let samples = test_samples(s, s.speed_kmh.unwrap_or(10.0), Some(s.snr_db.unwrap_or(10.0)))?;
    let (rows, _) = run_table1(&model, &samples, &TABLE1_SETTINGS)?;
    for r in &rows {
        println!(
            "eps {:<6} tau {:<3} iterf_mean {:.3}  params {}  nmse {:.5}",
            r.eps, r.tau, r.iterf_mean, r.param_count, r.test_nmse
        );
    }
    write(&s.out_dir.join("table1.csv"), &table1_csv(&rows))
}

pub fn iter_hist(s: &Settings) -> Result<()> {
    let model = load_icenet(s)?;
    let samples = test_samples(s, s.speed_kmh.unwrap_or(100.0), s.snr_db)?;
    let (h, run) = run_iteration_histogram(&model, &samples, &s.solve())?;
    println!(
        "{} samples, mean iterations {:.3}, mode {}, converged {}",
        h.n_samples,
        h.mean,
        h.mode(),
        h.converged
    );
    write(&s.out_dir.join("iter_hist.csv"), &histogram_csv(&h))?;
    write(&s.out_dir.join("residual_traces.csv"), &residual_trace_csv(&run))
}

pub fn depth_compare(s: &Settings) -> Result<()> {
    let mut models = vec![load_icenet(s)?];
    if s.ecenet_checkpoints.is_empty() {
        return Err(Error::Config("ecenet_checkpoints is required".into()));
    }
    for p in &s.ecenet_checkpoints {
        models.push(load_checkpoint(p)?);
    }
    let samples = test_samples(s, s.speed_kmh.unwrap_or(100.0), s.snr_db)?;
    let rows = run_depth_comparison(&models, &samples, &s.solve())?;
    for r in &rows {
        println!(
            "{:<10} params {:>8}  depth {:>6.2}  nmse {:.5}",
            r.model_label, r.param_count, r.effective_depth, r.mean_nmse
        );
    }
    write(&s.out_dir.join("depth_compare.csv"), &depth_csv(&rows))
}
