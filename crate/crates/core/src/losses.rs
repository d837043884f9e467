//! Imbalance-aware token classification objectives.
//!
//! Gradient-harmonized BCE (exact and binned gradient density), the
//! retained/pruned cosine-similarity penalty, their weighted sum, and the CE
//! and focal comparators. Every loss has a companion that also returns the
//! gradient with respect to the probabilities or representations; density
//! weights are held constant in those gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GhmMode {
    /// Sliding-window density with window width `epsilon`.
    Exact { epsilon: f64 },
    /// Histogram density over `bins` equal regions of `[0, 1]`.
    UnitRegion { bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhmConfig {
    #[serde(flatten)]
    pub mode: GhmMode,
    /// Running-average factor for bin counts; 0 disables the running average.
    #[serde(default)]
    pub momentum: f64,
}

impl Default for GhmConfig {
    fn default() -> Self {
        GhmConfig {
            mode: GhmMode::UnitRegion { bins: 100 },
            momentum: 0.0,
        }
    }
}

impl GhmConfig {
    pub fn unit_region(bins: usize) -> Self {
        GhmConfig { mode: GhmMode::UnitRegion { bins }, momentum: 0.0 }
    }

    pub fn exact(epsilon: f64) -> Self {
        GhmConfig { mode: GhmMode::Exact { epsilon }, momentum: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            GhmMode::Exact { epsilon } if !(epsilon > 0.0 && epsilon <= 1.0) => {
                return Err(Error::InvalidConfig(format!("GHM epsilon {epsilon} outside (0, 1]")))
            }
            GhmMode::UnitRegion { bins: 0 } => {
                return Err(Error::InvalidConfig("GHM bin count must be positive".into()))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("GHM momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Probabilities, binary labels and (optionally) token representations.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    probs: Vec<f64>,
    labels: Vec<bool>,
    reps: Option<Array2<f64>>,
}

impl LossBatch {
    /// Clamps probabilities and checks lengths.
    pub fn new(probs: &[f64], labels: &[bool], reps: Option<Array2<f64>>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: probs.len(),
                found: labels.len(),
            });
        }
        if let Some(r) = &reps {
            if r.nrows() != probs.len() {
                return Err(Error::DimensionMismatch {
                    what: "representations",
                    expected: probs.len(),
                    found: r.nrows(),
                });
            }
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { what: "probabilities", row: i, col: 0 });
        }
        Ok(LossBatch {
            probs: probs.iter().map(|&p| clamp_prob(p)).collect(),
            labels: labels.to_vec(),
            reps,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn reps(&self) -> Option<&Array2<f64>> {
        self.reps.as_ref()
    }
}

/// `g_i = |p_i - y_i|` on clamped probabilities.
pub fn gradient_norms(probs: &[f64], labels: &[bool]) -> Vec<f64> {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (clamp_prob(p) - y as u8 as f64).abs())
        .collect()
}

/// Window density `count(g_k in [g_i - eps/2, g_i + eps/2)) / l_eps(g_i)`
/// with the window length clipped to `[0, 1]`.
pub fn gradient_density_exact(g: &[f64], epsilon: f64) -> Vec<f64> {
    let mut sorted = g.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = epsilon / 2.0;
    g.iter()
        .map(|&gi| {
            let lo = gi - half;
            let hi = gi + half;
            let first = sorted.partition_point(|&x| x < lo);
            let end = sorted.partition_point(|&x| x < hi);
            let count = (end - first) as f64;
            let width = hi.min(1.0) - lo.max(0.0);
            count / width
        })
        .collect()
}

pub fn region_index(g: f64, bins: usize) -> usize {
    ((g * bins as f64).floor() as usize).min(bins - 1)
}

/// Occupancy of each unit region.
pub fn region_counts(g: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    for &x in g {
        counts[region_index(x, bins)] += 1.0;
    }
    counts
}

/// `beta_i = n / GD(g_i)` with `GD = count_in_region * bins`.
pub fn ghm_weights_unit_region(g: &[f64], bins: usize) -> Vec<f64> {
    let counts = region_counts(g, bins);
    let n = g.len() as f64;
    g.iter()
        .map(|&x| n / (counts[region_index(x, bins)] * bins as f64))
        .collect()
}

pub fn ghm_weights(g: &[f64], cfg: &GhmConfig) -> Vec<f64> {
    match cfg.mode {
        GhmMode::UnitRegion { bins } => ghm_weights_unit_region(g, bins),
        GhmMode::Exact { epsilon } => {
            let n = g.len() as f64;
            gradient_density_exact(g, epsilon).into_iter().map(|gd| n / gd).collect()
        }
    }
}

/// Running bin counts for GHM with momentum (unit-region mode only; exact
/// mode ignores momentum).
#[derive(Debug, Clone, Default)]
pub struct GhmState {
    acc: Option<Vec<f64>>,
}

impl GhmState {
    pub fn weights(&mut self, g: &[f64], cfg: &GhmConfig) -> Vec<f64> {
        let GhmMode::UnitRegion { bins } = cfg.mode else {
            return ghm_weights(g, cfg);
        };
        if cfg.momentum == 0.0 {
            return ghm_weights_unit_region(g, bins);
        }
        let counts = region_counts(g, bins);
        let acc = self.acc.get_or_insert_with(|| counts.clone());
        for (a, c) in acc.iter_mut().zip(&counts) {
            *a = cfg.momentum * *a + (1.0 - cfg.momentum) * c;
        }
        let n = g.len() as f64;
        g.iter()
            .map(|&x| {
                let b = region_index(x, bins);
                n / (acc[b].max(f64::MIN_POSITIVE) * bins as f64)
            })
            .collect()
    }
}

/// Binary cross-entropy on a clamped probability.
pub fn bce(p: f64, y: bool) -> f64 {
    let p = clamp_prob(p);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn bce_grad(p: f64, y: bool) -> f64 {
    let p = clamp_prob(p);
    if y {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// `(1/n) sum_i beta_i * bce(p_i, y_i)` and its gradient in `p`.
pub fn weighted_bce(probs: &[f64], labels: &[bool], beta: &[f64]) -> (f64, Vec<f64>) {
    let n = probs.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = probs
        .iter()
        .zip(labels)
        .zip(beta)
        .map(|((&p, &y), &b)| {
            loss += b * bce(p, y);
            b * bce_grad(p, y) / n
        })
        .collect();
    (loss / n, grad)
}

pub fn ghm_c_loss(batch: &LossBatch, cfg: &GhmConfig) -> f64 {
    let g = gradient_norms(&batch.probs, &batch.labels);
    let beta = ghm_weights(&g, cfg);
    weighted_bce(&batch.probs, &batch.labels, &beta).0
}

pub fn ce_loss(batch: &LossBatch) -> f64 {
    ce_loss_grad(&batch.probs, &batch.labels).0
}

pub fn ce_loss_grad(probs: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    weighted_bce(probs, labels, &vec![1.0; probs.len()])
}

pub fn focal_loss(batch: &LossBatch, gamma: f64, alpha: f64) -> f64 {
    focal_loss_grad(&batch.probs, &batch.labels, gamma, alpha).0
}

/// Mean `alpha (1 - p_t)^gamma (-ln p_t)` and its gradient in `p`.
pub fn focal_loss_grad(probs: &[f64], labels: &[bool], gamma: f64, alpha: f64) -> (f64, Vec<f64>) {
    let n = probs.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            let pt = if y { p } else { 1.0 - p };
            let q = 1.0 - pt;
            let log_pt = pt.ln();
            loss += alpha * q.powf(gamma) * -log_pt;
            // d/dpt of -alpha q^gamma ln pt
            let d_pt = if gamma == 0.0 {
                -alpha / pt
            } else {
                alpha * (gamma * q.powf(gamma - 1.0) * log_pt - q.powf(gamma) / pt)
            };
            let d_p = if y { d_pt } else { -d_pt };
            d_p / n
        })
        .collect();
    (loss / n, grad)
}

fn unit_rows(reps: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = reps.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut units = reps.to_owned();
    for (mut row, &n) in units.rows_mut().into_iter().zip(&norms) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (units, norms)
}

/// Mean cosine over all (negative, positive) pairs and its gradient with
/// respect to the representations. Zero when either class is empty.
pub fn cs_loss_grad(reps: ArrayView2<'_, f64>, labels: &[bool]) -> (f64, Array2<f64>) {
    let d = reps.ncols();
    let n1 = labels.iter().filter(|&&y| y).count();
    let n0 = labels.len() - n1;
    let mut grad = Array2::zeros(reps.raw_dim());
    if n0 == 0 || n1 == 0 {
        return (0.0, grad);
    }
    let (units, norms) = unit_rows(reps);
    let mut sum0 = Array1::<f64>::zeros(d);
    let mut sum1 = Array1::<f64>::zeros(d);
    for (row, &y) in units.rows().into_iter().zip(labels) {
        if y {
            sum1 += &row;
        } else {
            sum0 += &row;
        }
    }
    let scale = 1.0 / (n0 as f64 * n1 as f64);
    let loss = sum0.dot(&sum1) * scale;
    for (i, &y) in labels.iter().enumerate() {
        if norms[i] == 0.0 {
            continue;
        }
        let du = if y { &sum0 * scale } else { &sum1 * scale };
        let u = units.row(i);
        let proj = u.dot(&du);
        let mut g = grad.row_mut(i);
        g.assign(&((&du - &(&u * proj)) / norms[i]));
    }
    (loss, grad)
}

/// Mean cosine between negative and positive representations.
pub fn cs_loss(batch: &LossBatch) -> Result<f64> {
    let reps = batch
        .reps
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("cosine loss needs representations".into()))?;
    Ok(cs_loss_grad(reps.view(), &batch.labels).0)
}

/// `ghm_c_loss + alpha * cs_loss`.
pub fn total_loss(batch: &LossBatch, cfg: &GhmConfig, alpha: f64) -> Result<f64> {
    Ok(ghm_c_loss(batch, cfg) + alpha * cs_loss(batch)?)
}

/// Classification term of a training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassLoss {
    Ghm,
    Ce,
    Focal { gamma: f64, alpha: f64 },
}

/// A training objective: a classification term plus an optional cosine term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossArm {
    pub class: ClassLoss,
    pub cosine: bool,
}

impl Default for LossArm {
    fn default() -> Self {
        LossArm { class: ClassLoss::Ghm, cosine: true }
    }
}

impl std::fmt::Display for LossArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let class = match self.class {
            ClassLoss::Ghm => "ghm",
            ClassLoss::Ce => "ce",
            ClassLoss::Focal { .. } => "focal",
        };
        if self.cosine {
            write!(f, "{class}+cs")
        } else {
            f.write_str(class)
        }
    }
}

impl std::str::FromStr for LossArm {
    type Err = Error;

    /// `ghm+cs | ghm | ce+cs | ce | focal+cs | focal`; focal uses gamma 2, alpha 1.
    fn from_str(s: &str) -> Result<Self> {
        let (class, cosine) = match s.strip_suffix("+cs") {
            Some(c) => (c, true),
            None => (s, false),
        };
        let class = match class {
            "ghm" => ClassLoss::Ghm,
            "ce" => ClassLoss::Ce,
            "focal" => ClassLoss::Focal { gamma: 2.0, alpha: 1.0 },
            _ => return Err(Error::InvalidConfig(format!("unknown loss arm {s:?}"))),
        };
        Ok(LossArm { class, cosine })
    }
}
