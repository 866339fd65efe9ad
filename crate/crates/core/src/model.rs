//! Trained models and their checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "IEBP" | u32 version = 1 | u32 kind (0 icenet, 1 ecenet)
//! block config: u32 hidden_width, u32 n_sub_blocks, u32 norm code,
//!               u32 injection code, u64 seed, u32 kernel size x n_sub_blocks
//! u32 n_blocks
//! per block: u64 count, f32 x count   (canonical parameter order)
//! ```
//!
//! An ICENet checkpoint has one block. Parameters are held at `f32`
//! precision during training, so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use crate::block::{IebConfig, IebParams, Injection, Norm, Planes, PreparedBlock};
use crate::error::{Error, Result};
use crate::explicit_net::{ecenet_forward, EcenetConfig, EcenetParams};
use crate::fixed_point::{deq_forward_tolerant, SolveConfig, SolveResult};

pub const MAGIC: &[u8; 4] = b"IEBP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Icenet,
    Ecenet,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "icenet" => Ok(ModelKind::Icenet),
            "ecenet" => Ok(ModelKind::Ecenet),
            _ => Err(Error::Config(format!("unknown model {s:?}, expected icenet or ecenet"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Icenet => "icenet",
            ModelKind::Ecenet => "ecenet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Icenet(IebParams),
    Ecenet(EcenetParams),
}

/// One estimate plus the solve that produced it (implicit model only).
#[derive(Debug, Clone)]
pub struct Estimate {
    pub planes: Planes,
    pub solve: Option<SolveResult>,
    pub flagged: bool,
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Icenet(_) => ModelKind::Icenet,
            Model::Ecenet(_) => ModelKind::Ecenet,
        }
    }

    pub fn blocks(&self) -> &[IebParams] {
        match self {
            Model::Icenet(p) => std::slice::from_ref(p),
            Model::Ecenet(e) => &e.blocks,
        }
    }

    pub fn blocks_mut(&mut self) -> &mut [IebParams] {
        match self {
            Model::Icenet(p) => std::slice::from_mut(p),
            Model::Ecenet(e) => &mut e.blocks,
        }
    }

    pub fn block_config(&self) -> &IebConfig {
        &self.blocks()[0].config
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.count()).sum()
    }

    /// Label used in reports: `icenet` or `ecenet_<n>`.
    pub fn label(&self) -> String {
        match self {
            Model::Icenet(_) => "icenet".into(),
            Model::Ecenet(e) => format!("ecenet_{}", e.config.n_blocks),
        }
    }

    /// Runs the model on one input. A divergent equilibrium solve falls back
    /// to its last finite iterate and is flagged.
    pub fn estimate(&self, x: &Planes, solve: &SolveConfig) -> Result<Estimate> {
        match self {
            Model::Icenet(p) => {
                let prep = PreparedBlock::new(p);
                let r = deq_forward_tolerant(x, &prep, solve)?;
                Ok(Estimate {
                    planes: r.estimate,
                    solve: Some(r.result),
                    flagged: r.flagged,
                })
            }
            Model::Ecenet(e) => Ok(Estimate {
                planes: ecenet_forward(x, &e.blocks)?,
                solve: None,
                flagged: false,
            }),
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(model: &Model) -> Vec<u8> {
    let cfg = model.block_config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, model.kind() as u32);
    put_u32(&mut buf, cfg.hidden_width as u32);
    put_u32(&mut buf, cfg.n_sub_blocks as u32);
    put_u32(&mut buf, cfg.norm.code());
    put_u32(&mut buf, 0);
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    for &k in &cfg.kernel_sizes {
        put_u32(&mut buf, k as u32);
    }
    let blocks = model.blocks();
    put_u32(&mut buf, blocks.len() as u32);
    for b in blocks {
        buf.extend_from_slice(&(b.count() as u64).to_le_bytes());
        for &v in &b.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated: needed {n} more bytes")));
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
}

pub fn decode(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"IEBP\""));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let kind = match r.u32()? {
        0 => ModelKind::Icenet,
        1 => ModelKind::Ecenet,
        k => return Err(Error::format(8, format!("unknown model kind {k}"))),
    };
    let hidden_width = r.u32()? as usize;
    let n_sub_blocks = r.u32()? as usize;
    if n_sub_blocks > 64 {
        return Err(Error::format(16, format!("{n_sub_blocks} sub-blocks is implausible")));
    }
    let norm_at = r.pos;
    let norm = Norm::from_code(r.u32()?).ok_or_else(|| Error::format(norm_at as u64, "unknown norm code"))?;
    let inj_at = r.pos;
    if r.u32()? != 0 {
        return Err(Error::format(inj_at as u64, "unknown injection code"));
    }
    let seed = r.u64()?;
    let kernel_sizes = (0..n_sub_blocks).map(|_| r.u32().map(|k| k as usize)).collect::<Result<Vec<_>>>()?;
    let cfg = IebConfig {
        hidden_width,
        n_sub_blocks,
        kernel_sizes,
        norm,
        injection: Injection::AdditiveProjection,
        seed,
    };
    cfg.validate().map_err(|e| Error::format(12, format!("config echo: {e}")))?;
    let n_blocks = r.u32()? as usize;
    if n_blocks == 0 || (kind == ModelKind::Icenet && n_blocks != 1) {
        return Err(Error::format(
            (r.pos - 4) as u64,
            format!("{n_blocks} blocks for a {} checkpoint", kind.name()),
        ));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let at = r.pos;
        let count = r.u64()? as usize;
        let bytes = r.take(count.checked_mul(4).ok_or_else(|| Error::format(at as u64, "count overflows"))?)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let p = IebParams::from_values(&cfg, values).map_err(|e| Error::format(at as u64, e.to_string()))?;
        blocks.push(p);
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after the last block"));
    }
    Ok(match kind {
        ModelKind::Icenet => Model::Icenet(blocks.pop().unwrap()),
        ModelKind::Ecenet => {
            let config = EcenetConfig {
                n_blocks,
                block: cfg.clone(),
                seed: cfg.seed,
            };
            Model::Ecenet(EcenetParams::from_blocks(config, blocks)?)
        }
    })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    match fs::read(path) {
        Ok(buf) => decode(&buf),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::init_params;
    use crate::explicit_net::init_ecenet;

    fn small() -> IebConfig {
        IebConfig {
            hidden_width: 4,
            kernel_sizes: vec![1, 3, 3, 5],
            norm: Norm::GroupNorm,
            seed: 17,
            ..IebConfig::default()
        }
    }

    fn quantized(mut p: IebParams) -> IebParams {
        p.quantize_f32();
        p
    }

    #[test]
    fn icenet_round_trip_is_exact() {
        let m = Model::Icenet(quantized(init_params(&small()).unwrap()));
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn ecenet_round_trip_is_exact() {
        let mut e = init_ecenet(&EcenetConfig {
            n_blocks: 3,
            block: small(),
            seed: 17,
        })
        .unwrap();
        e.blocks.iter_mut().for_each(|b| b.quantize_f32());
        let m = Model::Ecenet(e);
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.label(), "ecenet_3");
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = Model::Icenet(quantized(init_params(&small()).unwrap()));
        let buf = encode(&m);
        assert!(matches!(decode(&buf[..buf.len() - 1]), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn missing_file_is_a_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.iebp");
        assert!(matches!(load_checkpoint(&p), Err(Error::MissingArtifact(q)) if q == p));
    }
}
