//! Ricci-DeTurck flow on flat tori.

pub mod analysis;
pub mod config;
pub mod curvature;
pub mod distance;
pub mod error;
pub mod field;
pub mod flow;
pub mod generators;
pub mod grid;
pub mod harness;
pub mod heat;
pub mod io;
pub mod linalg;
pub mod metric;
pub mod report;
pub mod stencil;
pub mod store;

pub use error::{LabError, Result};
