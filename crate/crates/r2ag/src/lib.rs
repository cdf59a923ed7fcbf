//! IO, experiment harness and command-line support around `r2ag-core`.

pub mod attention;
pub mod checkpoint;
pub mod experiment;
pub mod formats;
pub mod templates;
