//! HTTP relighting service. Loads a scan and optionally a trained model
//! once, then renders requested light directions as PNG frames.

pub mod context;
pub mod server;

pub use context::{Method, RelightContext, RenderRequest, RequestError, Resolved, Softness};
pub use server::{router, serve, AppState};
