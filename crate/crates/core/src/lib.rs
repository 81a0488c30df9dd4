pub mod ais;
pub mod atm;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod geodesy;
mod io_util;
pub mod loss;
pub mod network;
pub mod nn;
pub mod plot;
pub mod preprocess;
pub mod synthetic;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
