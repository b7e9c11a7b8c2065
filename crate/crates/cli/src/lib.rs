//! Command-line tools and the HTTP refinement service for `touchprint`.

pub mod render;
pub mod server;
pub mod session;
