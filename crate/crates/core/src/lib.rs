//! Channel estimation with an implicit equilibrium network, plus the
//! synthetic channels, classical baselines and evaluation harness around it.

pub mod block;
pub mod channel_model;
pub mod classical;
pub mod dataset_file;
pub mod error;
pub mod evaluation;
pub mod explicit_net;
pub mod fixed_point;
pub mod grid;
pub mod model;
pub mod ofdm_frame;
pub mod seed;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/channels.md")]
    mod channels {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/equilibrium.md")]
    mod equilibrium {}
    #[doc = include_str!("../../../book/src/explicit.md")]
    mod explicit {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
