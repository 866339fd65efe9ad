//! The explicit stacked counterpart: `n` blocks with their own parameters
//! applied in sequence, each fed the same `x`.
//!
//! ```text
//! z_0 = x,   z_{i+1} = block_i(z_i, x),   estimate = z_n
//! ```
//!
//! With every block holding the same parameters this is exactly `n` plain
//! fixed-point iterations of the weight-tied block started from `x`.

use crate::block::{init_params, param_count_for, IebConfig, IebParams, Planes, PreparedBlock};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EcenetConfig {
    pub n_blocks: usize,
    pub block: IebConfig,
    pub seed: u64,
}

impl EcenetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        self.block.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcenetParams {
    pub config: EcenetConfig,
    pub blocks: Vec<IebParams>,
}

impl EcenetParams {
    /// Wraps existing per-block parameters; all must share one block layout.
    pub fn from_blocks(config: EcenetConfig, blocks: Vec<IebParams>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.n_blocks {
            return Err(Error::Shape(format!(
                "{} blocks given, configuration has {}",
                blocks.len(),
                config.n_blocks
            )));
        }
        let want = param_count_for(&config.block)?;
        if blocks.iter().any(|b| b.count() != want) {
            return Err(Error::Shape("blocks do not share the configured layout".into()));
        }
        Ok(Self { config, blocks })
    }

    /// `n` copies of one block's parameters.
    pub fn tied(params: &IebParams, n_blocks: usize) -> Result<Self> {
        let config = EcenetConfig {
            n_blocks,
            block: params.config.clone(),
            seed: params.config.seed,
        };
        Self::from_blocks(config, vec![params.clone(); n_blocks])
    }

    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.count()).sum()
    }
}

/// Block `i` is initialized from the seed stream `(seed, i)`. Every block
/// records the network seed in its config.
pub fn init_ecenet(cfg: &EcenetConfig) -> Result<EcenetParams> {
    cfg.validate()?;
    let shared = IebConfig {
        seed: cfg.seed,
        ..cfg.block.clone()
    };
    let blocks = (0..cfg.n_blocks)
        .map(|i| {
            let draw = IebConfig {
                seed: seed::derive(cfg.seed, &[i as u64]),
                ..shared.clone()
            };
            let mut p = init_params(&draw)?;
            p.config = shared.clone();
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EcenetParams {
        config: EcenetConfig {
            block: shared,
            ..cfg.clone()
        },
        blocks,
    })
}

pub fn ecenet_param_count(cfg: &EcenetConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(cfg.n_blocks * param_count_for(&cfg.block)?)
}

pub fn ecenet_forward(x: &Planes, params: &[IebParams]) -> Result<Planes> {
    if params.is_empty() {
        return Err(Error::Argument("at least one block is required".into()));
    }
    let mut z = x.clone();
    for p in params {
        z = PreparedBlock::new(p).apply(&z, x)?;
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct EcenetGradient {
    pub output: Planes,
    /// One gradient per block, laid out like that block's parameters.
    pub grads: Vec<Vec<f64>>,
    /// Grid tensors held by the stacked graph at the end of the forward pass.
    pub retained_tensors: usize,
}

/// Forward through the stack keeping every block's activations, then
/// reverse accumulation of `grad_of(output)` through all of them.
pub fn ecenet_backprop<F>(x: &Planes, params: &[IebParams], grad_of: F) -> Result<EcenetGradient>
where
    F: FnOnce(&Planes) -> Result<Planes>,
{
    if params.is_empty() {
        return Err(Error::Argument("at least one block is required".into()));
    }
    let prepared: Vec<PreparedBlock<'_>> = params.iter().map(PreparedBlock::new).collect();
    let mut lins = Vec::with_capacity(prepared.len());
    let mut z = x.clone();
    for prep in &prepared {
        let lin = prep.linearize(&z, x)?;
        z = lin.output.clone();
        lins.push(lin);
    }
    let retained_tensors = lins.iter().map(|l| l.retained_tensors()).sum();
    let mut u = grad_of(&z)?;
    let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.count()]).collect();
    for (lin, g) in lins.iter().zip(grads.iter_mut()).rev() {
        u = lin.vjp_both(&u, g)?;
    }
    Ok(EcenetGradient {
        output: z,
        grads,
        retained_tensors,
    })
}
