//! Library side of the `liprcp` binary: configuration loading and the
//! subcommand implementations, exposed so tests can drive them in-process.

pub mod commands;
pub mod config;

/// Size the global rayon pool from `LIPRCP_THREADS`, if set.
pub fn init_threads() -> anyhow::Result<()> {
    use anyhow::Context;
    if let Ok(v) = std::env::var("LIPRCP_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("LIPRCP_THREADS must be a positive integer, got {v:?}"))?;
        anyhow::ensure!(n >= 1, "LIPRCP_THREADS must be >= 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}
