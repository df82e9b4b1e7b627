mod core;
pub mod runtime;

pub use self::core::*;
pub use self::runtime::{Client, ClientError, RetryPolicy};
