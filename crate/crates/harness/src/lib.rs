//! Model-facing side of the engine: chat transport, caching, the streaming
//! session driver, the judge client and the trajectory synthesis pipeline.

pub mod cache;
pub mod chat;
pub mod evo;
pub mod judge;
pub mod pool;
pub mod session;
pub mod template;
