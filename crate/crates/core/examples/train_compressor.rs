//! Train a small compressor on planted labels and print the loss curve.

use evocomp::compressor::{train, CompressorConfig, TrainItem};
use evocomp::synth::{generate, GenConfig};

fn main() -> evocomp::Result<()> {
    let data = generate(&GenConfig { n_samples: 96, tokens: 12, groups: 4, dim: 16, ..Default::default() }, 0)?;
    let items = data
        .samples
        .iter()
        .zip(&data.planted)
        .map(|(s, l)| TrainItem::new(s, l))
        .collect::<evocomp::Result<Vec<_>>>()?;
    let cfg = CompressorConfig { d_model: 16, heads: 2, epochs: 10, ..Default::default() };
    let out = train(&items, &cfg, None)?;
    for r in &out.history {
        println!(
            "epoch {:>2}  lr {:.5}  ghm {:.5}  cs {:+.4}  total {:+.4}  val {:?}",
            r.epoch, r.lr, r.class, r.cs, r.total, r.val_total
        );
    }
    println!("best epoch {} ({} train / {} val)", out.best_epoch, out.train_count, out.val_count);
    Ok(())
}
