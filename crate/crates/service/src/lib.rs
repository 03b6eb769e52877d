//! HTTP session service and command-line entry points.

pub mod cli;
pub mod config;
pub mod error;
pub mod routes;
pub mod state;

use std::sync::Arc;
use std::time::Duration;

pub use config::ServiceConfig;
pub use error::{ApiError, ConfigError, StartupError};
pub use routes::router;
pub use state::AppState;

/// Serves until ctrl-c, sweeping idle sessions in the background.
pub async fn serve(state: Arc<AppState>) -> Result<(), StartupError> {
    let listener = tokio::net::TcpListener::bind(state.config.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let sweeper = Arc::clone(&state);
    let period = Duration::from_secs((state.config.session_ttl_secs / 2).clamp(1, 60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.expire();
            if n > 0 {
                tracing::info!(expired = n, "dropped idle sessions");
            }
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
