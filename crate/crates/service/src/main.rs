use anyhow::Context;
use clap::Parser;
use closet_service::{router, AppState, Cli, ServiceConfig};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    let cfg = ServiceConfig::from_cli(&cli).context("invalid configuration")?;
    // Everything is loaded before binding, so a bad file never serves.
    let state = tokio::task::spawn_blocking(move || AppState::load(&cfg).map(|s| (s, cfg)))
        .await?
        .context("startup failed")?;
    let (state, cfg) = state;
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .with_context(|| format!("cannot bind {}", cfg.listen))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
