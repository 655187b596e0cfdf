//! Edge node for a school site: reader link, durable local log, sync with central.

pub mod config;
pub mod link;
pub mod node;
pub mod runtime;
pub mod seed;
pub mod store;
pub mod sync;

pub use config::EdgeConfig;
pub use node::{EdgeHandle, EdgeNode, NodeError};
pub use runtime::{EdgeError, EdgeRuntime};
pub use store::{EdgeStore, StoreError};
