//! Semantic grouping of visual tokens by their nearest vocabulary anchor.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Group, GroupPartition};
use crate::sample::{AnchorSet, Sample};

/// Which groups stay searchable after partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Restriction {
    #[default]
    None,
    TopK(usize),
    TopFraction(f64),
}

impl Restriction {
    /// Number of groups kept active out of `s`.
    pub fn kept(&self, s: usize) -> Result<usize> {
        match *self {
            Restriction::None => Ok(s),
            Restriction::TopK(0) => Err(Error::InvalidConfig("top_k must be positive".into())),
            Restriction::TopK(k) => Ok(k.min(s)),
            Restriction::TopFraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::InvalidConfig(
                format!("top fraction {f} outside (0, 1]"),
            )),
            Restriction::TopFraction(f) => Ok(((f * s as f64).round() as usize).clamp(1, s.max(1))),
        }
    }
}

impl std::str::FromStr for Restriction {
    type Err = Error;

    /// Parses `none`, `top_k=K` or `fraction=f`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("cannot parse restriction {s:?}"));
        match s.split_once('=') {
            None if s == "none" => Ok(Restriction::None),
            Some(("top_k", k)) => {
                let k: usize = k.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(Error::InvalidConfig("top_k must be positive".into()));
                }
                Ok(Restriction::TopK(k))
            }
            Some(("fraction", f)) => {
                let f: f64 = f.parse().map_err(|_| bad())?;
                Restriction::TopFraction(f).kept(1)?;
                Ok(Restriction::TopFraction(f))
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct GroupingConfig {
    pub restriction: Restriction,
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "cosine operands",
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Anchors widened to f64 with cached norms.
struct PreparedAnchors {
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl PreparedAnchors {
    fn new(anchors: &AnchorSet) -> Self {
        let rows: Vec<Vec<f64>> = (0..anchors.len())
            .map(|j| anchors.row(j).iter().map(|&v| v as f64).collect())
            .collect();
        let norms = rows
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        PreparedAnchors { rows, norms }
    }

    fn nearest(&self, v: &[f64]) -> usize {
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, (row, &an)) in self.rows.iter().zip(&self.norms).enumerate() {
            let sim = if vn == 0.0 {
                0.0
            } else {
                let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                (dot / (vn * an)).clamp(-1.0, 1.0)
            };
            // strict comparison keeps the lowest index on ties
            if sim > best_sim {
                best_sim = sim;
                best = j;
            }
        }
        best
    }
}

/// Index of the anchor with the highest cosine similarity to `v`.
pub fn nearest_anchor(v: &[f64], anchors: &AnchorSet) -> Result<usize> {
    if anchors.is_empty() {
        return Err(Error::EmptyAnchors);
    }
    if v.len() != anchors.width() {
        return Err(Error::DimensionMismatch {
            what: "token width vs anchor width",
            expected: anchors.width(),
            found: v.len(),
        });
    }
    Ok(PreparedAnchors::new(anchors).nearest(v))
}

/// Groups visual tokens that share a nearest anchor. All groups are active.
pub fn partition(sample: &Sample, anchors: &AnchorSet) -> Result<GroupPartition> {
    if anchors.is_empty() {
        return Err(Error::EmptyAnchors);
    }
    if sample.width() != anchors.width() {
        return Err(Error::DimensionMismatch {
            what: "sample width vs anchor width",
            expected: anchors.width(),
            found: sample.width(),
        });
    }
    let prepared = PreparedAnchors::new(anchors);
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    let mut row = vec![0.0; sample.width()];
    for (i, token) in sample.visual.rows().into_iter().enumerate() {
        for (dst, &src) in row.iter_mut().zip(token.iter()) {
            *dst = src as f64;
        }
        let anchor = prepared.nearest(&row);
        let g = *slot.entry(anchor).or_insert_with(|| {
            groups.push(Group {
                anchor_id: anchor,
                members: Vec::new(),
                active: true,
            });
            groups.len() - 1
        });
        groups[g].members.push(i);
    }
    GroupPartition::new(sample.n_visual(), groups)
}

/// Marks the K largest groups active (size ties go to the earlier group).
pub fn restrict_top_groups(partition: &GroupPartition, cfg: &GroupingConfig) -> Result<GroupPartition> {
    let s = partition.groups().len();
    let k = cfg.restriction.kept(s)?;
    let mut order: Vec<usize> = (0..s).collect();
    // groups are already in smallest-member order, so a stable sort by size
    // resolves ties by earliest member
    order.sort_by_key(|&g| std::cmp::Reverse(partition.groups()[g].len()));
    let mut active = vec![false; s];
    for &g in order.iter().take(k) {
        active[g] = true;
    }
    partition.with_active(&active)
}
