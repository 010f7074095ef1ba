//! Arbitrage detection and defensive rebalancing for networks of
//! constant-function market makers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arbitrage;
pub mod cli;
pub mod decimal;
pub mod model;
pub mod planner;
pub mod scenario;
pub mod scenario_gen;
pub mod solver;
pub mod trade_only;

pub use model::{
    apply_rebalancing, build_edges, Basket, Cfmm, Configuration, Edge, EdgeSet, Mode,
    ModelError, PoolRef, PoolSide, Rebalancing, TokenId, TradeOutcome, TradingFunction,
};
