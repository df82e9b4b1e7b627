mod core;
mod log;
pub mod runtime;

pub use self::core::*;
pub use self::log::{read_log, LogError, ServerLog};
pub use self::runtime::Server;
