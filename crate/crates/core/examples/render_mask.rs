//! Draw a label mask as a text grid and a PPM image.

use evocomp::render::{render_ppm, render_text};
use evocomp::synth::{generate, GenConfig};

fn main() -> evocomp::Result<()> {
    let data = generate(&GenConfig { n_samples: 1, tokens: 36, groups: 6, dim: 16, ..Default::default() }, 0)?;
    let mask = &data.planted[0].mask;
    print!("{}", render_text(mask, 6)?);
    let out = std::env::temp_dir().join("evocomp-mask.ppm");
    std::fs::write(&out, render_ppm(mask, 6, 24)?)?;
    println!("wrote {}", out.display());
    Ok(())
}
