//! Statistical arbitrage research pipeline: factor-based and graphical-lasso
//! portfolio selection, Johansen cointegration screening, threshold
//! backtests and a statistical-arbitrage hypothesis test.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod cluster;
pub mod error;
pub mod factor;
pub mod glasso;
pub mod johansen;
pub mod jttw;
pub mod market_data;
pub mod optim;
pub mod pipeline;
pub mod portfolio;
pub mod rng;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
