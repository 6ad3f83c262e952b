use std::net::SocketAddr;

use clap::Parser;
use tracing_subscriber::EnvFilter;

/// HTTP/JSON server for training, evaluating and running gesture classifiers.
#[derive(Parser)]
#[command(name = "gesture-server", version)]
struct Args {
    /// Address to listen on.
    #[arg(long, env = "GESTURE_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Log filter, e.g. `info` or `artgesture_service=debug`.
    #[arg(long, env = "GESTURE_LOG", default_value = "info")]
    log_level: String,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    tracing_subscriber::fmt().with_env_filter(EnvFilter::try_new(&args.log_level)?).with_writer(std::io::stderr).init();
    let listener = tokio::net::TcpListener::bind(args.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    artgesture_service::serve(listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
