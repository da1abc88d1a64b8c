//! Per-flow buffer sizing with learned controllers.
//!
//! A deterministic single-flow network simulator (TCP New Reno and BIC over a
//! per-flow queue), a streaming feature extractor, a small fully connected
//! network, offline fork A/B and online actor-critic training loops, and
//! evaluation drivers.

pub mod error;
pub mod eval;
pub mod features;
pub mod mlp;
pub mod qdisc;
pub mod sim;
pub mod time;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
pub use features::{EwmaBank, FeatureVector, WarmupRule};
pub use mlp::{Loss, Mlp, TrainStep};
pub use qdisc::{QdiscKind, QueueState};
pub use sim::{CapPolicy, FlowConfig, NoPolicy, SimOptions, SimState};
pub use time::SimTime;
pub use transport::{Cca, SenderState};
