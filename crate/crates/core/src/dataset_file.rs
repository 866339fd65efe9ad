//! Binary sample files.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ICED"
//!      4     4  version (u32 = 1)
//!      8    20  n_samples, channels (= 2), n_subcarriers, n_symbols, n_rx  (u32 x 5)
//!     28    12  SNR block: policy code, a, b  (f32 x 3)
//!               code 0 = fixed (a = dB), 1 = uniform [a, b] dB, 2 = noiseless
//!     40    64  reserved, carrying the generation echo:
//!                 +0  u64 seed
//!                 +8  f32 carrier_freq_hz, f32 subcarrier_spacing_hz,
//!                     f32 ue_speed_mps, f32 rms_delay_spread_s
//!                +24  u32 n_paths, u32 pilot stride, u32 pilot offset,
//!                     u32 n_pilot_symbols (<= 4), u32 x 4 pilot symbols
//!                +56  8 zero bytes
//!    104     .  samples
//! ```
//!
//! Each sample is the `x` planes then the `y` planes, row-major
//! `[channel, subcarrier, symbol]` `f32`, followed by `f32 snr_db`,
//! `u32 rx_index`, `u32 frame_id`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::channel_model::ChannelConfig;
use crate::error::{Error, Result};
use crate::ofdm_frame::{FrameSample, PilotPattern, SnrPolicy};

pub const MAGIC: &[u8; 4] = b"ICED";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 104;
const MAX_PILOT_SYMBOLS: usize = 4;

/// Everything the header records besides the sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub channel: ChannelConfig,
    pub pattern: PilotPattern,
    pub snr_policy: SnrPolicy,
    pub seed: u64,
}

fn sample_bytes(n_subcarriers: usize, n_symbols: usize) -> usize {
    2 * 2 * n_subcarriers * n_symbols * 4 + 12
}

pub fn encode(meta: &DatasetMeta, samples: &[FrameSample]) -> Result<Vec<u8>> {
    let ch = &meta.channel;
    if meta.pattern.symbols.len() > MAX_PILOT_SYMBOLS {
        return Err(Error::Argument(format!(
            "at most {MAX_PILOT_SYMBOLS} pilot symbols can be recorded"
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.n_subcarriers != ch.n_subcarriers || s.n_symbols != ch.n_symbols {
            return Err(Error::Shape(format!("sample {i} grid differs from the dataset header")));
        }
        let n = 2 * s.plane_len();
        if s.x.len() != n || s.y.len() != n {
            return Err(Error::Shape(format!("sample {i} planes have the wrong length")));
        }
    }
    let per = sample_bytes(ch.n_subcarriers, ch.n_symbols);
    let mut buf = Vec::with_capacity(HEADER_LEN + per * samples.len());
    buf.extend_from_slice(MAGIC);
    let u32s = [
        VERSION,
        samples.len() as u32,
        2,
        ch.n_subcarriers as u32,
        ch.n_symbols as u32,
        ch.n_rx as u32,
    ];
    for v in u32s {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let (code, a, b) = match meta.snr_policy {
        SnrPolicy::Fixed(db) => (0.0, db as f32, db as f32),
        SnrPolicy::Uniform { lo, hi } => (1.0, lo as f32, hi as f32),
        SnrPolicy::Noiseless => (2.0, f32::INFINITY, f32::INFINITY),
    };
    for v in [code, a, b] {
        buf.extend_from_slice(&f32::to_le_bytes(v));
    }
    let reserved_start = buf.len();
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    for v in [ch.carrier_freq_hz, ch.subcarrier_spacing_hz, ch.ue_speed_mps, ch.rms_delay_spread_s] {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let p = &meta.pattern;
    for v in [
        ch.n_paths as u32,
        p.subcarrier_stride as u32,
        p.subcarrier_offset as u32,
        p.symbols.len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..MAX_PILOT_SYMBOLS {
        let s = p.symbols.get(i).copied().unwrap_or(0) as u32;
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.resize(reserved_start + 64, 0);
    debug_assert_eq!(buf.len(), HEADER_LEN);
    for s in samples {
        for v in s.x.iter().chain(&s.y) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.snr_db.to_le_bytes());
        buf.extend_from_slice(&s.rx_index.to_le_bytes());
        buf.extend_from_slice(&s.frame_id.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.buf.len() as u64,
                format!("truncated: needed {n} bytes at {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<(DatasetMeta, Vec<FrameSample>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"ICED\""));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n_samples = r.u32()? as usize;
    let channels = r.u32()?;
    if channels != 2 {
        return Err(Error::format(16, format!("channel count {channels}, expected 2")));
    }
    let n_subcarriers = r.u32()? as usize;
    let n_symbols = r.u32()? as usize;
    let n_rx = r.u32()? as usize;
    let (code, a, b) = (r.f32()?, r.f32()?, r.f32()?);
    let snr_policy = match code as u32 {
        0 => SnrPolicy::Fixed(a as f64),
        1 => SnrPolicy::Uniform {
            lo: a as f64,
            hi: b as f64,
        },
        2 => SnrPolicy::Noiseless,
        _ => return Err(Error::format(28, format!("unknown SNR policy code {code}"))),
    };
    let seed = r.u64()?;
    let carrier = r.f32()? as f64;
    let scs = r.f32()? as f64;
    let speed = r.f32()? as f64;
    let rms = r.f32()? as f64;
    let n_paths = r.u32()? as usize;
    let stride = r.u32()? as usize;
    let offset = r.u32()? as usize;
    let n_psym = r.u32()? as usize;
    if n_psym > MAX_PILOT_SYMBOLS {
        return Err(Error::format(76, format!("{n_psym} pilot symbols exceeds {MAX_PILOT_SYMBOLS}")));
    }
    let mut symbols = Vec::with_capacity(n_psym);
    for i in 0..MAX_PILOT_SYMBOLS {
        let s = r.u32()? as usize;
        if i < n_psym {
            symbols.push(s);
        }
    }
    r.take(8)?;
    debug_assert_eq!(r.pos, HEADER_LEN);

    let per = sample_bytes(n_subcarriers, n_symbols);
    let expected = n_samples
        .checked_mul(per)
        .ok_or_else(|| Error::format(8, "sample count overflows"))?;
    let payload = buf.len() - HEADER_LEN;
    if payload != expected {
        return Err(Error::format(
            (HEADER_LEN + payload.min(expected)) as u64,
            format!("payload is {payload} bytes, header shape implies {expected}"),
        ));
    }
    let plane = 2 * n_subcarriers * n_symbols;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let read_planes = |r: &mut Reader| -> Result<Vec<f32>> {
            let bytes = r.take(plane * 4)?;
            Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let x = read_planes(&mut r)?;
        let y = read_planes(&mut r)?;
        let snr_db = r.f32()?;
        let rx_index = r.u32()?;
        let frame_id = r.u32()?;
        samples.push(FrameSample {
            n_subcarriers,
            n_symbols,
            x,
            y,
            snr_db,
            rx_index,
            frame_id,
        });
    }
    let meta = DatasetMeta {
        channel: ChannelConfig {
            carrier_freq_hz: carrier,
            subcarrier_spacing_hz: scs,
            n_subcarriers,
            n_symbols,
            n_rx,
            n_paths,
            rms_delay_spread_s: rms,
            ue_speed_mps: speed,
            seed,
        },
        pattern: PilotPattern {
            symbols,
            subcarrier_stride: stride,
            subcarrier_offset: offset,
        },
        snr_policy,
        seed,
    };
    Ok((meta, samples))
}

/// Writes the file in one piece; a failed encode leaves no file behind.
pub fn save_dataset(path: &Path, meta: &DatasetMeta, samples: &[FrameSample]) -> Result<()> {
    let bytes = encode(meta, samples)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(DatasetMeta, Vec<FrameSample>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::generate_dataset;
    use crate::ofdm_frame::build_samples;

    fn fixture() -> (DatasetMeta, Vec<FrameSample>) {
        let channel = ChannelConfig {
            n_subcarriers: 16,
            n_rx: 2,
            seed: 5,
            ..ChannelConfig::default()
        };
        let frames = generate_dataset(&channel, 2, 0).unwrap();
        let meta = DatasetMeta {
            channel,
            pattern: PilotPattern::default(),
            snr_policy: SnrPolicy::training_mix(),
            seed: 5,
        };
        let samples = build_samples(&frames, &meta.pattern, meta.snr_policy, 5).unwrap();
        (meta, samples)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (meta, samples) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.iced");
        save_dataset(&path, &meta, &samples).unwrap();
        let (meta2, back) = load_dataset(&path).unwrap();
        assert_eq!(back, samples);
        assert_eq!(meta2.pattern, meta.pattern);
        assert_eq!(meta2.snr_policy, meta.snr_policy);
        assert_eq!(meta2.seed, 5);
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, HEADER_LEN + 4 * sample_bytes(16, 14));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let (meta, samples) = fixture();
        let bytes = encode(&meta, &samples).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize >= HEADER_LEN),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(decode(&bytes[..50]), Err(Error::Format { .. })));
    }

    #[test]
    fn header_shape_mismatch_is_rejected() {
        let (meta, samples) = fixture();
        let mut bytes = encode(&meta, &samples).unwrap();
        // claim one more sample than the payload holds
        bytes[8..12].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let (meta, samples) = fixture();
        let mut bytes = encode(&meta, &samples).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode(&meta, &samples).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_dataset(Path::new("/nonexistent/data.iced")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
