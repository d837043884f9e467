//! Search throughput against a scorer with 1 ms of artificial latency.

use std::time::Duration;

use evocomp::bench::{bench, LatencyScorer};
use evocomp::evolution::EvoConfig;
use evocomp::grouping::partition;
use evocomp::scorer::PlantedScorer;
use evocomp::synth::{generate, GenConfig};

fn main() -> evocomp::Result<()> {
    let data = generate(&GenConfig { n_samples: 2, tokens: 24, groups: 6, dim: 16, ..Default::default() }, 0)?;
    let parts = data.samples.iter().map(|s| partition(s, &data.anchors)).collect::<evocomp::Result<Vec<_>>>()?;
    let scorer = LatencyScorer { inner: PlantedScorer::new(0), latency: Duration::from_millis(1) };
    let evo = EvoConfig { iterations: 4, ..Default::default() };
    print!("{}", bench(&data.samples, &parts, &scorer, &evo, &[1, 2, 4, 8])?.table());
    Ok(())
}
