//! Compare analytic compressor gradients with central differences.

use evocomp::compressor::grad_check_suite;

fn main() -> evocomp::Result<()> {
    for (i, draw) in grad_check_suite(0, 10, 1e-5)?.iter().enumerate() {
        let r = &draw.report;
        println!(
            "draw {i}: heads {} rotary {} loss {} -> max rel error {:.2e} over {} coords (worst {}[{}])",
            draw.config.heads, draw.config.use_positions, draw.config.loss, r.max_rel_error, r.coords, r.worst_tensor, r.worst_index
        );
    }
    Ok(())
}
