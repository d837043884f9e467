//! Label one sample with the evolutionary search and check it against
//! exhaustive search.

use evocomp::evolution::{search_traced, EvoConfig};
use evocomp::grouping::partition;
use evocomp::scorer::{brute_force_best, PlantedScorer, DEFAULT_SPACE_CAP};
use evocomp::synth::{generate, GenConfig};

fn main() -> evocomp::Result<()> {
    let data = generate(&GenConfig { n_samples: 1, tokens: 15, groups: 5, dim: 16, ..Default::default() }, 7)?;
    let sample = &data.samples[0];
    let part = partition(sample, &data.anchors)?;
    let scorer = PlantedScorer::new(7);

    let out = search_traced(sample, &part, &scorer, &EvoConfig::default())?;
    for it in &out.trace {
        println!("iteration {:>2}: best loss {:.4} ({} evaluations)", it.iteration, it.best_loss, it.evaluations);
    }
    let best = brute_force_best(sample, &part, &scorer, DEFAULT_SPACE_CAP)?;
    println!("search mask  {:?}", out.record.mask.bits());
    println!("optimum mask {:?} over {} masks", best.mask.bits(), best.evaluations);
    println!("planted mask {:?}", data.planted[0].mask.bits());
    Ok(())
}
