use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{backward, forward_cached};
use super::params::init_params;
use super::{CompressorConfig, CompressorParams, DensityScope};
use crate::error::{Error, Result};
use crate::hash::{fnv1a, splitmix64, unit_interval};
use crate::label::LabelRecord;
use crate::losses::{
    ce_loss_grad, cs_loss_grad, focal_loss_grad, gradient_norms, weighted_bce, ClassLoss, GhmState,
};
use crate::sample::Sample;

/// A sample paired with its per-token retention labels, widened to 64-bit.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub visual: Array2<f64>,
    pub text: Array2<f64>,
    pub labels: Vec<bool>,
}

impl TrainItem {
    pub fn new(sample: &Sample, label: &LabelRecord) -> Result<Self> {
        if sample.id != label.sample_id {
            return Err(Error::LabelMismatch(format!(
                "label for {:?} paired with sample {:?}",
                label.sample_id, sample.id
            )));
        }
        if label.mask.len() != sample.n_visual() {
            return Err(Error::LabelMismatch(format!(
                "sample {:?} has {} visual tokens but its mask has {}",
                sample.id,
                sample.n_visual(),
                label.mask.len()
            )));
        }
        let labels = (0..label.mask.len()).map(|i| label.mask.get(i)).collect();
        Ok(Self::from_parts(sample, labels))
    }

    pub fn from_parts(sample: &Sample, labels: Vec<bool>) -> Self {
        TrainItem {
            id: sample.id.clone(),
            visual: sample.visual.mapv(f64::from),
            text: sample.text.mapv(f64::from),
            labels,
        }
    }
}

/// Objective terms for one batch. `class` is the GHM (or CE / focal) term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Objective {
    pub class: f64,
    pub cs: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub class: f64,
    pub cs: f64,
    pub total: f64,
    pub lr: f64,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation total (training total when no
    /// sample falls in the validation split).
    pub params: CompressorParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub train_count: usize,
    pub val_count: usize,
}

pub(crate) enum Beta<'a> {
    Fixed(&'a [f64]),
    Running(&'a mut GhmState),
}

pub(crate) struct Evaluated {
    pub objective: Objective,
    pub beta: Vec<f64>,
    pub grad: Option<CompressorParams>,
}

fn ghm_beta(cfg: &CompressorConfig, probs: &[f64], labels: &[bool], lens: &[usize], state: &mut GhmState) -> Vec<f64> {
    let g = gradient_norms(probs, labels);
    match cfg.density_scope {
        DensityScope::Batch => state.weights(&g, &cfg.ghm),
        DensityScope::Sample => {
            let mut beta = Vec::with_capacity(g.len());
            let mut start = 0;
            for &len in lens {
                let mut local = GhmState::default();
                beta.extend(local.weights(&g[start..start + len], &cfg.ghm));
                start += len;
            }
            beta
        }
    }
}

pub(crate) fn evaluate(
    params: &CompressorParams,
    cfg: &CompressorConfig,
    items: &[&TrainItem],
    beta: Beta<'_>,
    with_grad: bool,
) -> Result<Evaluated> {
    let mut outs = Vec::with_capacity(items.len());
    for item in items {
        outs.push(forward_cached(params, cfg, item.visual.view(), item.text.view())?);
    }
    let probs: Vec<f64> = outs.iter().flat_map(|(o, _)| o.probs.iter().copied()).collect();
    let labels: Vec<bool> = items.iter().flat_map(|it| it.labels.iter().copied()).collect();
    let lens: Vec<usize> = items.iter().map(|it| it.labels.len()).collect();

    let (beta, (class, d_probs)) = match cfg.loss.class {
        ClassLoss::Ghm => {
            let beta = match beta {
                Beta::Fixed(b) => b.to_vec(),
                Beta::Running(state) => ghm_beta(cfg, &probs, &labels, &lens, state),
            };
            let lg = weighted_bce(&probs, &labels, &beta);
            (beta, lg)
        }
        ClassLoss::Ce => (Vec::new(), ce_loss_grad(&probs, &labels)),
        ClassLoss::Focal { gamma, alpha } => (Vec::new(), focal_loss_grad(&probs, &labels, gamma, alpha)),
    };

    let b = items.len().max(1) as f64;
    let cs_weight = if cfg.loss.cosine { cfg.alpha } else { 0.0 };
    let mut cs = 0.0;
    let mut grad = with_grad.then(|| params.zeros_like());
    let mut start = 0;
    for (item, (out, cache)) in items.iter().zip(&outs) {
        let n = item.labels.len();
        let (cs_i, mut d_visual) = cs_loss_grad(out.visual.view(), &item.labels);
        cs += cs_i / b;
        if let Some(acc) = grad.as_mut() {
            d_visual *= cs_weight / b;
            let g = backward(params, cfg, cache, &d_probs[start..start + n], d_visual.slice(s![.., ..]));
            acc.add_scaled(&g, 1.0);
        }
        start += n;
    }
    let objective = Objective { class, cs, total: class + cs_weight * cs };
    Ok(Evaluated { objective, beta, grad })
}

/// Objective and parameter gradient for one batch. Density weights come from
/// `state` and are held constant in the gradient.
pub fn batch_objective(
    params: &CompressorParams,
    cfg: &CompressorConfig,
    items: &[&TrainItem],
    state: &mut GhmState,
) -> Result<(Objective, CompressorParams)> {
    let e = evaluate(params, cfg, items, Beta::Running(state), true)?;
    Ok((e.objective, e.grad.expect("gradient requested")))
}

/// Marks the samples held out for validation: those whose id hashes below
/// `fraction`.
pub fn validation_split(ids: &[&str], fraction: f64) -> Vec<bool> {
    ids.iter().map(|id| unit_interval(splitmix64(fnv1a(id.as_bytes()))) < fraction).collect()
}

struct Adam {
    m: CompressorParams,
    v: CompressorParams,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &CompressorParams) -> Self {
        Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    fn step(&mut self, params: &mut CompressorParams, grad: &CompressorParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let slots = params.slices_mut().into_iter().zip(grad.slices()).zip(self.m.slices_mut()).zip(self.v.slices_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in slots {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn mean_objective(
    params: &CompressorParams,
    cfg: &CompressorConfig,
    items: &[&TrainItem],
) -> Result<Objective> {
    let mut acc = Objective::default();
    let chunks = items.chunks(cfg.batch_size);
    let count = chunks.len().max(1) as f64;
    for chunk in chunks {
        let mut state = GhmState::default();
        let o = evaluate(params, cfg, chunk, Beta::Running(&mut state), false)?.objective;
        acc.class += o.class / count;
        acc.cs += o.cs / count;
        acc.total += o.total / count;
    }
    Ok(acc)
}

/// Trains from seeded (or donor) initialization with Adam and a cosine
/// learning-rate decay, one shuffled pass over the training split per epoch.
pub fn train(items: &[TrainItem], cfg: &CompressorConfig, donor: Option<&CompressorParams>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(cfg, donor, &mut rng)?;
    let ids: Vec<&str> = items.iter().map(|it| it.id.as_str()).collect();
    let is_val = validation_split(&ids, cfg.val_fraction);
    let mut train_set: Vec<&TrainItem> = Vec::new();
    let mut val_set: Vec<&TrainItem> = Vec::new();
    for (item, &v) in items.iter().zip(&is_val) {
        if v { val_set.push(item) } else { train_set.push(item) }
    }
    if train_set.is_empty() {
        // too few samples for a split
        train_set = items.iter().collect();
        val_set.clear();
    }

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = Adam::new(&params);
    let mut state = GhmState::default();
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, CompressorParams)> = None;

    for epoch in 1..=cfg.epochs {
        train_set.shuffle(&mut rng);
        let mut sum = Objective::default();
        let mut lr = cfg.lr0;
        for batch in train_set.chunks(cfg.batch_size) {
            let (obj, grad) = batch_objective(&params, cfg, batch, &mut state)?;
            if !obj.total.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, ghm: obj.class, cs: obj.cs });
            }
            lr = cfg.learning_rate(step, total_steps);
            adam.step(&mut params, &grad, lr);
            step += 1;
            sum.class += obj.class;
            sum.cs += obj.cs;
            sum.total += obj.total;
        }
        let k = steps_per_epoch as f64;
        let val_total = if val_set.is_empty() {
            None
        } else {
            Some(mean_objective(&params, cfg, &val_set)?.total)
        };
        let record = EpochRecord {
            epoch,
            step,
            class: sum.class / k,
            cs: sum.cs / k,
            total: sum.total / k,
            lr,
            val_total,
        };
        log::info!(
            "epoch {epoch}: total {:.6} (class {:.6}, cs {:.6}) val {:?}",
            record.total,
            record.class,
            record.cs,
            record.val_total
        );
        let score = val_total.unwrap_or(record.total);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, params.clone()));
        }
        history.push(record);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        history,
        train_count: train_set.len(),
        val_count: val_set.len(),
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,step,ghm,cs,total,lr,val_total")?;
    for r in history {
        let val = r.val_total.map(|v| v.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{},{},{},{}", r.epoch, r.step, r.class, r.cs, r.total, r.lr, val)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn toy_items(count: usize, seed: u64) -> Vec<TrainItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let visual = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0f32..1.0));
                let text = Array2::from_shape_fn((2, 8), |_| rng.random_range(-1.0f32..1.0));
                let sample = Sample::new(format!("s{i}"), visual, text).unwrap();
                // keep the tokens whose first coordinate is largest
                let labels = (0..6).map(|r| sample.visual[[r, 0]] > 0.5).collect();
                TrainItem::from_parts(&sample, labels)
            })
            .collect()
    }

    fn tiny() -> CompressorConfig {
        CompressorConfig { d_model: 8, heads: 2, epochs: 6, batch_size: 4, ..Default::default() }
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let items = toy_items(40, 1);
        let a = train(&items, &tiny(), None).unwrap();
        let b = train(&items, &tiny(), None).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_eq!(a.history, b.history);
        assert!(a.history.last().unwrap().total < a.history[0].total);
        assert_eq!(a.train_count + a.val_count, 40);
    }

    #[test]
    fn label_mismatch_is_rejected() {
        let items = toy_items(1, 2);
        let sample = Sample::new("s0", items[0].visual.mapv(|v| v as f32), Array2::zeros((0, 8))).unwrap();
        let record = LabelRecord {
            sample_id: "s0".into(),
            mask: crate::mask::Mask::zeros(5),
            loss: 0.0,
            partition_digest: String::new(),
            scorer_id: "x".into(),
            seed: 0,
        };
        assert!(matches!(TrainItem::new(&sample, &record), Err(Error::LabelMismatch(_))));
    }

    #[test]
    fn history_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let rec = EpochRecord { epoch: 1, step: 3, class: 0.5, cs: 0.25, total: 0.75, lr: 0.003, val_total: None };
        write_history_csv(&path, &[rec]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,step,ghm,cs,total,lr,val_total\n1,3,0.5,0.25,0.75,0.003,\n");
    }

    #[test]
    fn split_is_stable() {
        let ids: Vec<String> = (0..1000).map(|i| format!("sample-{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let split = validation_split(&refs, 0.1);
        let held = split.iter().filter(|&&v| v).count();
        assert!((60..140).contains(&held), "{held}");
        assert_eq!(split, validation_split(&refs, 0.1));
    }
}
