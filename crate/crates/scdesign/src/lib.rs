//! Synthetic control designs for experiments on aggregate units.
//!
//! This crate selects treated and control units (and their weights) for
//! experiments where only a few large units can receive an intervention,
//! estimates treatment effects from the resulting design, and tests the
//! no-effect null with a combination-based placebo procedure over blank
//! pre-intervention periods.
//!
//! Pipeline: [`panel`] loads and validates panel data and assembles
//! predictor vectors; [`designs`] solves the design programs by exact
//! enumeration over treated supports with the [`simplex_ls`] kernel inside;
//! [`estimators`] computes per-period effect estimates; [`inference`] runs
//! the combination test; [`simulate`] provides a factor-model data generator
//! and a replication harness; [`cli`] ties the stages together behind a
//! command-line front end.

pub mod cli;
pub mod designs;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod panel;
pub mod simplex_ls;
pub mod simulate;

pub use error::{Error, Result};
