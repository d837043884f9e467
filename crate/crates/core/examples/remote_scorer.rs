//! Drive an external scorer over the line-delimited JSON protocol. The
//! reference server is the `evocomp serve-scorer` subcommand; pass another
//! command line as the first argument to talk to your own scorer.
//!
//!     cargo run --example remote_scorer -- "target/debug/evocomp serve-scorer --adapter pooled"

use std::sync::Arc;
use std::time::Duration;

use evocomp::container::write_dataset;
use evocomp::evolution::{search, EvoConfig};
use evocomp::grouping::partition;
use evocomp::scorer::remote::Endpoint;
use evocomp::scorer::{Concurrency, PooledScorer, RemoteClient, RemoteScorer};
use evocomp::synth::{generate, Family, GenConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cmd = match std::env::args().nth(1) {
        Some(cmd) => cmd,
        None => {
            // examples live in target/<profile>/examples, the binary one level up
            let exe = std::env::current_exe()?;
            let bin = exe.parent().and_then(|p| p.parent()).ok_or("no target dir")?.join("evocomp");
            format!("{} serve-scorer --adapter pooled", bin.display())
        }
    };
    let cfg = GenConfig { family: Family::Pooled, n_samples: 3, tokens: 12, groups: 4, dim: 16, ..Default::default() };
    let data = generate(&cfg, 0)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("samples.evc");
    write_dataset(&path, &data.samples)?;

    let client = Arc::new(RemoteClient::open(&Endpoint::Command(cmd), &path, Duration::from_secs(10))?);
    let remote = RemoteScorer::new(Arc::clone(&client), Concurrency::Safe);
    let local = PooledScorer::new(0);
    for s in &data.samples {
        let p = partition(s, &data.anchors)?;
        let a = search(s, &p, &remote, &EvoConfig::default())?;
        let b = search(s, &p, &local, &EvoConfig::default())?;
        println!("{}: remote {:.6} local {:.6} same mask {}", s.id, a.loss, b.loss, a.mask == b.mask);
    }
    client.shutdown()?;
    Ok(())
}
