//! Partition a synthetic sample by nearest anchor and keep the largest groups.

use evocomp::grouping::{partition, restrict_top_groups, GroupingConfig, Restriction};
use evocomp::synth::{generate, GenConfig};

fn main() -> evocomp::Result<()> {
    let data = generate(&GenConfig { n_samples: 1, tokens: 16, groups: 5, dim: 16, ..Default::default() }, 0)?;
    let sample = &data.samples[0];
    let full = partition(sample, &data.anchors)?;
    println!("{} tokens in {} groups, {} valid masks", sample.n_visual(), full.groups().len(), full.space_size());
    for g in full.groups() {
        println!("  anchor {:>2}: tokens {:?}", g.anchor_id, g.members);
    }
    assert_eq!(&full, &data.partitions[0]);

    let cfg = GroupingConfig { restriction: Restriction::TopK(2) };
    let top = restrict_top_groups(&full, &cfg)?;
    println!("top 2 groups stay searchable: {} valid masks", top.space_size());
    Ok(())
}
