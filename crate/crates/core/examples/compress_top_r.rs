//! Keep the top-r tokens of a sample with a trained compressor, adapting
//! wider embeddings to the model width first.

use evocomp::compressor::{adapt_dim, forward, ratio_to_r, select_top_r, train, CompressorConfig, TrainItem};
use evocomp::eval::Retention;
use evocomp::synth::{generate, GenConfig};
use evocomp::{apply_mask, Sample};

fn main() -> evocomp::Result<()> {
    let data = generate(&GenConfig { n_samples: 128, tokens: 24, groups: 6, dim: 32, ..Default::default() }, 0)?;
    let narrow = |s: &Sample| Sample::new(s.id.clone(), adapt_dim(s.visual.view(), 16)?, adapt_dim(s.text.view(), 16)?);
    let samples = data.samples.iter().map(narrow).collect::<evocomp::Result<Vec<_>>>()?;
    let items = samples
        .iter()
        .zip(&data.planted)
        .map(|(s, l)| TrainItem::new(s, l))
        .collect::<evocomp::Result<Vec<_>>>()?;
    let cfg = CompressorConfig { d_model: 16, heads: 2, epochs: 15, ..Default::default() };
    let params = train(&items, &cfg, None)?.params;

    let sample = &samples[0];
    let r = ratio_to_r(1.0 / 4.0, sample.n_visual());
    let probs = forward(sample, &params, &cfg)?.probs;
    let mask = select_top_r(&probs, r)?;
    let (kept, indices) = apply_mask(&data.samples[0], &mask)?;
    println!("kept {r} of {} tokens: {indices:?} ({} x {})", sample.n_visual(), kept.nrows(), kept.ncols());
    println!("versus planted label: {:?}", Retention::compare(&mask, &data.planted[0].mask));
    Ok(())
}
