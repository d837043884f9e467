use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ndarray::Array2;
use rand::Rng;

use super::params::init_params;
use super::train::{evaluate, Beta, TrainItem};
use super::{CompressorConfig, CompressorParams, DensityScope, TENSOR_NAMES};
use crate::error::Result;
use crate::losses::{ClassLoss, GhmConfig, GhmState, LossArm};
use crate::sample::Sample;

/// Coordinates probed per check (fewer if the model is smaller).
const TARGET_COORDS: usize = 256;
/// Coordinates always probed in every tensor.
const PER_TENSOR: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: usize,
    pub tensors: usize,
    pub worst_tensor: &'static str,
    pub worst_index: usize,
}

/// `(tensor, flat index)` pairs: a few per tensor, topped up at random
/// across the rest.
fn probe_coords(params: &CompressorParams, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let lens: Vec<usize> = params.slices().iter().map(|(_, s)| s.len()).collect();
    let mut picked = Vec::new();
    let mut rest = Vec::new();
    for (t, &len) in lens.iter().enumerate() {
        let take = len.min(PER_TENSOR);
        let chosen = sample_indices(rng, len, take).into_vec();
        let mut mark = vec![false; len];
        for &i in &chosen {
            mark[i] = true;
            picked.push((t, i));
        }
        rest.extend((0..len).filter(|&i| !mark[i]).map(|i| (t, i)));
    }
    let extra = TARGET_COORDS.saturating_sub(picked.len()).min(rest.len());
    for i in sample_indices(rng, rest.len(), extra) {
        picked.push(rest[i]);
    }
    picked.sort_unstable();
    picked
}

fn coord_mut(params: &mut CompressorParams, t: usize, i: usize) -> &mut f64 {
    let mut slices = params.slices_mut();
    let (_, s) = slices.swap_remove(t);
    &mut s[i]
}

/// Max relative error between the analytic objective gradient and central
/// differences with step `h`. Density weights are frozen at the unperturbed
/// parameters.
pub fn grad_check(params: &CompressorParams, item: &TrainItem, cfg: &CompressorConfig, h: f64) -> Result<GradCheckReport> {
    let beta = frozen_beta(params, item, cfg)?;
    grad_check_with(params, item, cfg, h, |p| {
        Ok(evaluate(p, cfg, &[item], Beta::Fixed(&beta), true)?.grad.expect("gradient requested"))
    })
}

fn frozen_beta(params: &CompressorParams, item: &TrainItem, cfg: &CompressorConfig) -> Result<Vec<f64>> {
    let mut state = GhmState::default();
    Ok(evaluate(params, cfg, &[item], Beta::Running(&mut state), false)?.beta)
}

/// As [`grad_check`], with the analytic gradient supplied by `analytic`.
pub fn grad_check_with<F>(
    params: &CompressorParams,
    item: &TrainItem,
    cfg: &CompressorConfig,
    h: f64,
    analytic: F,
) -> Result<GradCheckReport>
where
    F: Fn(&CompressorParams) -> Result<CompressorParams>,
{
    let beta = frozen_beta(params, item, cfg)?;
    let loss = |p: &CompressorParams| -> Result<f64> {
        Ok(evaluate(p, cfg, &[item], Beta::Fixed(&beta), false)?.objective.total)
    };
    let grad = analytic(params)?;
    let grad_slices = grad.slices();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let coords = probe_coords(params, &mut rng);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords: coords.len(),
        tensors: 0,
        worst_tensor: TENSOR_NAMES[0],
        worst_index: 0,
    };
    let mut seen = [false; TENSOR_NAMES.len()];
    for &(t, i) in &coords {
        seen[t] = true;
        let orig = *coord_mut(&mut work, t, i);
        *coord_mut(&mut work, t, i) = orig + h;
        let up = loss(&work)?;
        *coord_mut(&mut work, t, i) = orig - h;
        let down = loss(&work)?;
        *coord_mut(&mut work, t, i) = orig;
        let gn = (up - down) / (2.0 * h);
        let ga = grad_slices[t].1[i];
        let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-8);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_tensor = TENSOR_NAMES[t];
            report.worst_index = i;
        }
    }
    report.tensors = seen.iter().filter(|&&s| s).count();
    Ok(report)
}

/// One randomly drawn configuration and its check.
#[derive(Debug, Clone)]
pub struct GradCheckDraw {
    pub config: CompressorConfig,
    pub n_visual: usize,
    pub n_text: usize,
    pub report: GradCheckReport,
}

/// Small random model, data and objective for draw `index` of a suite.
pub fn random_case(seed: u64, index: u64) -> (CompressorConfig, CompressorParams, TrainItem) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(index));
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let class = match rng.random_range(0..3) {
        0 => ClassLoss::Ghm,
        1 => ClassLoss::Ce,
        _ => ClassLoss::Focal { gamma: 2.0, alpha: 1.0 },
    };
    let ghm = if rng.random_bool(0.5) {
        GhmConfig::unit_region([10, 30, 100][rng.random_range(0..3)])
    } else {
        GhmConfig::exact(rng.random_range(0.05..0.5))
    };
    let cfg = CompressorConfig {
        d_model: 8,
        heads,
        mlp_ratio: rng.random_range(1..=4),
        use_positions: rng.random_bool(0.5),
        no_text: rng.random_bool(0.2),
        init_std: rng.random_range(0.15..0.3),
        alpha: rng.random_range(0.0..2.0),
        ghm,
        loss: LossArm { class, cosine: rng.random_bool(0.7) },
        density_scope: if rng.random_bool(0.5) { DensityScope::Batch } else { DensityScope::Sample },
        seed: rng.random(),
        ..CompressorConfig::default()
    };
    let params = init_params(&cfg, None, &mut rng).expect("drawn config is valid");
    let n = rng.random_range(4..=8);
    let m = rng.random_range(0..=3);
    let d = cfg.d_model;
    let visual = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0));
    let text = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0f32..1.0));
    let labels = (0..n).map(|_| rng.random_bool(0.4)).collect();
    let sample = Sample::new(format!("case-{index}"), visual, text).expect("finite draw");
    (cfg, params, TrainItem::from_parts(&sample, labels))
}

/// Runs [`grad_check`] on `draws` random small configurations.
pub fn grad_check_suite(seed: u64, draws: usize, h: f64) -> Result<Vec<GradCheckDraw>> {
    (0..draws as u64)
        .map(|i| {
            let (config, params, item) = random_case(seed, i);
            let report = grad_check(&params, &item, &config, h)?;
            Ok(GradCheckDraw { n_visual: item.labels.len(), n_text: item.text.nrows(), config, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::init_params;
    use crate::losses::{gradient_norms, ghm_weights};

    fn tiny(seed: u64) -> CompressorConfig {
        CompressorConfig { d_model: 8, heads: 2, init_std: 0.3, seed, ..Default::default() }
    }

    fn item(seed: u64, n: usize, m: usize) -> TrainItem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = Array2::from_shape_fn((n, 8), |_| rng.random_range(-1.0f32..1.0));
        let text = Array2::from_shape_fn((m, 8), |_| rng.random_range(-1.0f32..1.0));
        let sample = Sample::new("g", visual, text).unwrap();
        let labels = (0..n).map(|i| i % 3 == 0).collect();
        TrainItem::from_parts(&sample, labels)
    }

    #[test]
    fn tiny_config_passes() {
        let cfg = tiny(1);
        let params = init_params(&cfg, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let report = grad_check(&params, &item(1, 4, 2), &cfg, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.tensors, TENSOR_NAMES.len());
        assert!(report.coords >= 200);
    }

    #[test]
    fn rotary_config_passes() {
        let cfg = CompressorConfig { use_positions: true, ..tiny(2) };
        let params = init_params(&cfg, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let report = grad_check(&params, &item(2, 5, 3), &cfg, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn corrupted_attention_gradient_is_caught() {
        let cfg = tiny(3);
        let params = init_params(&cfg, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let it = item(3, 4, 2);
        let beta = frozen_beta(&params, &it, &cfg).unwrap();
        let report = grad_check_with(&params, &it, &cfg, 1e-5, |p| {
            let mut g = evaluate(p, &cfg, &[&it], Beta::Fixed(&beta), true)?.grad.unwrap();
            g.wq *= 1.5;
            Ok(g)
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
        assert_eq!(report.worst_tensor, "attn.wq");
    }

    #[test]
    fn random_suite() {
        // at h = 1e-5 a coordinate whose true gradient is below ~1e-7 can sit
        // under the difference quotient's rounding noise; 3e-5 clears it
        for draw in grad_check_suite(11, 200, 3e-5).unwrap() {
            assert!(draw.report.max_rel_error < 1e-4, "{draw:?}");
        }
    }

    #[test]
    fn classifier_bias_gradient_closed_form() {
        let cfg = CompressorConfig {
            alpha: 0.0,
            loss: LossArm { class: ClassLoss::Ghm, cosine: true },
            ..tiny(4)
        };
        let mut params = init_params(&cfg, None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        params.cls_w.fill(0.0);
        params.cls_b.fill(0.0);
        let mut it = item(4, 6, 2);
        it.labels = vec![false; 6];
        let mut state = GhmState::default();
        let e = evaluate(&params, &cfg, &[&it], Beta::Running(&mut state), true).unwrap();
        let probs = vec![0.5; 6];
        let beta = ghm_weights(&gradient_norms(&probs, &it.labels), &cfg.ghm);
        let expected: f64 = beta.iter().map(|b| b * (0.5 - 0.0)).sum::<f64>() / 6.0;
        let got = e.grad.unwrap().cls_b[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!(got > 0.0);
    }
}
