//! On text-keyed data the salient token is only identifiable through the text
//! stream, so a compressor that reads text must beat one that does not.

use evocomp::compressor::{forward, select_top_r, train, CompressorConfig, TrainItem};
use evocomp::eval::Retention;
use evocomp::synth::{generate, GenConfig};

fn f1(text: bool) -> f64 {
    let gen = GenConfig { n_samples: 320, tokens: 12, groups: 3, dim: 16, extra_anchors: 1, text_keyed: true, keys: 4, seed: 2, ..Default::default() };
    let data = generate(&gen, 2).unwrap();
    let pairs: Vec<_> = data.samples.iter().zip(&data.planted).collect();
    let (fit, held_out) = pairs.split_at(256);
    let items: Vec<TrainItem> = fit.iter().map(|(s, l)| TrainItem::new(s, l).unwrap()).collect();
    let cfg = CompressorConfig { d_model: 16, heads: 2, no_text: !text, epochs: 30, seed: 2, ..Default::default() };
    let trained = train(&items, &cfg, None).unwrap().params;
    let mut total = 0.0;
    for (s, l) in held_out {
        let probs = forward(s, &trained, &cfg).unwrap().probs;
        let pred = select_top_r(&probs, l.mask.retained()).unwrap();
        total += Retention::compare(&pred, &l.mask).f1;
    }
    total / held_out.len() as f64
}

#[test]
fn text_stream_matters() {
    let with_text = f1(true);
    let without = f1(false);
    println!("held-out F1 with text {with_text:.3}, without {without:.3}");
    assert!(with_text > without + 0.1, "with text {with_text:.3}, without {without:.3}");
}
