pub mod anchor;
pub mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod history;
pub mod infer;
pub mod kvfile;
pub mod model;
pub mod losses;
pub mod numerics;
pub mod postproc;
pub mod prediction;
pub mod synthdata;
pub mod train;

pub use error::{HatError, Result};
