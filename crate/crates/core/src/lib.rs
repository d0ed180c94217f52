// SPDX-License-Identifier: Apache-2.0

pub mod baselines;
pub mod combiner;
pub mod config;
pub mod decoders;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod grids;
pub mod io;
pub mod model;
pub mod numerics;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};
