//! Standalone server. The port comes from `DENERD_PORT`; an annotation
//! workspace is attached when `DENERD_WORKSPACE` names one.

use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;

use denerd_service::{port_from_env, serve, AppState, ServiceError};

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = start().await {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

async fn start() -> Result<(), ServiceError> {
    let port = port_from_env()?;
    let state = match std::env::var_os("DENERD_WORKSPACE") {
        Some(dir) => AppState::with_workspace(&PathBuf::from(dir))?,
        None => AppState::new(),
    };
    serve(SocketAddr::from((Ipv4Addr::LOCALHOST, port)), state).await
}
