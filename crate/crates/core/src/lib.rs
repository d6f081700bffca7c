//! Multi-branch fashion-retrieval network with joint attribute recognition,
//! its training loop, and retrieval evaluation tools.

pub mod backbone;
pub mod branches;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod jarn;
pub mod losses;
pub mod model;
pub mod nn;
pub mod settings;
pub mod sffp;
pub mod train;

pub use error::{MmflError, Result};
pub use model::{MmflNet, ModelOutput};
