use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use selseg_core::nets::Checkpoint;
use selseg_service::{router, AppState, ServiceConfig};

/// Serves interactive segmentation over HTTP.
#[derive(Parser, Debug)]
#[command(name = "selseg-serve", version)]
struct Args {
    /// Port to listen on.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Largest accepted image side in pixels.
    #[arg(long, default_value_t = 512)]
    max_dim: usize,
    /// Sessions kept before the least recently used is evicted.
    #[arg(long, default_value_t = 32)]
    max_sessions: usize,
    /// Time budget for one segmentation, in seconds.
    #[arg(long, default_value_t = 30.0)]
    time_budget: f64,
    /// Checkpoint from `selseg train`; repeat for several methods.
    #[arg(long)]
    weights: Vec<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = ServiceConfig {
        max_dim: args.max_dim,
        max_sessions: args.max_sessions,
        time_budget: Duration::from_secs_f64(args.time_budget),
        ..Default::default()
    };
    for path in &args.weights {
        let ck = match std::fs::read(path).map_err(|e| e.to_string()).and_then(|b| Checkpoint::from_bytes(&b).map_err(|e| e.to_string())) {
            Ok(ck) => ck,
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(2);
            }
        };
        eprintln!("loaded {} weights from {}", ck.method, path.display());
        cfg = cfg.with_weights(ck);
    }
    let addr = SocketAddr::new(args.host, args.port);
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {addr}: {e}");
            return ExitCode::from(2);
        }
    };
    eprintln!("listening on http://{addr}");
    if let Err(e) = axum::serve(listener, router(AppState::new(cfg))).await {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
