//! TempRetinex: unsupervised low-light video enhancement with a Retinex
//! decomposition that is carried across frames.

pub mod config;
pub mod data_io;
pub mod error;
pub mod flow;
pub mod frame;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod pipeline;
pub mod preprocessing;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use frame::{Frame, FrameSequence, Plane};
pub use networks::{Networks, RetinexPair};
pub use pipeline::TemporalState;
