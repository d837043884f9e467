//! GHM weights, the cosine term and the ablation losses on a toy batch.

use evocomp::losses::{
    ce_loss, cs_loss, focal_loss, ghm_c_loss, ghm_weights_unit_region, gradient_norms, total_loss, GhmConfig, LossBatch,
};
use ndarray::array;

fn main() -> evocomp::Result<()> {
    let probs = [0.05, 0.05, 0.05, 0.05];
    let labels = [false, false, false, true];
    let g = gradient_norms(&probs, &labels);
    println!("gradient norms {g:?}");
    println!("beta (10 bins) {:?}", ghm_weights_unit_region(&g, 10));

    let reps = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.6, 0.8]];
    let batch = LossBatch::new(&probs, &labels, Some(reps))?;
    let cfg = GhmConfig::unit_region(10);
    println!("ghm   {:.6}", ghm_c_loss(&batch, &cfg));
    println!("cs    {:.6}", cs_loss(&batch)?);
    println!("total {:.6}", total_loss(&batch, &cfg, 1.0)?);
    println!("ce    {:.6}", ce_loss(&batch));
    println!("focal {:.6} (gamma 2)", focal_loss(&batch, 2.0, 1.0));
    Ok(())
}
