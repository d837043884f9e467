use ndarray::{s, concatenate, Array1, Array2, ArrayView2, Axis};

use super::{CompressorConfig, CompressorParams};
use crate::error::{Error, Result};
use crate::losses::PROB_EPS;
use crate::sample::Sample;

const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Visual representations, `n x d_model`.
    pub visual: Array2<f64>,
    /// Text representations, `m x d_model` (empty when text is disabled).
    pub text: Array2<f64>,
    /// Clamped retention probabilities, one per visual token.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

/// Intermediate activations kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    norm1: NormCache,
    a1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    norm2: NormCache,
    a2: Array2<f64>,
    z1: Array2<f64>,
    g: Array2<f64>,
    h: Array2<f64>,
    raw_probs: Vec<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.dot(&row) / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * gamma + beta;
    (y, NormCache { xhat, rstd })
}

/// Returns the input gradient; accumulates gamma/beta gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gamma;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean = row.sum() / d;
        let mean_x = row.dot(&xh) / d;
        row.zip_mut_with(&xh, |g, &x| *g = r * (*g - mean - x * mean_x));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Rotates consecutive pairs inside every head by a position-dependent
/// angle; `sign = -1` applies the inverse (transpose) rotation.
fn rotate(x: &mut Array2<f64>, heads: usize, sign: f64) {
    let dh = x.ncols() / heads;
    for (t, mut row) in x.rows_mut().into_iter().enumerate() {
        for h in 0..heads {
            for i in 0..dh / 2 {
                let theta = t as f64 * ROPE_BASE.powf(-2.0 * i as f64 / dh as f64);
                let (sin, cos) = (sign * theta).sin_cos();
                let a = h * dh + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn check_width(cfg: &CompressorConfig, params: &CompressorParams, width: usize) -> Result<()> {
    if params.d_model() != cfg.d_model {
        return Err(Error::DimensionMismatch {
            what: "parameter width",
            expected: cfg.d_model,
            found: params.d_model(),
        });
    }
    if width != cfg.d_model {
        return Err(Error::DimensionMismatch { what: "token width", expected: cfg.d_model, found: width });
    }
    Ok(())
}

/// Forward pass on 64-bit inputs. `text` is ignored when `cfg.no_text`.
pub fn forward_cached(
    params: &CompressorParams,
    cfg: &CompressorConfig,
    visual: ArrayView2<'_, f64>,
    text: ArrayView2<'_, f64>,
) -> Result<(ForwardOutput, ForwardCache)> {
    let n = visual.nrows();
    if n == 0 {
        return Err(Error::EmptyVisual);
    }
    check_width(cfg, params, visual.ncols())?;
    let x = if cfg.no_text || text.nrows() == 0 {
        visual.to_owned()
    } else {
        check_width(cfg, params, text.ncols())?;
        concatenate![Axis(0), visual, text]
    };
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (a1, norm1) = layer_norm(&x, &params.norm1_gamma, &params.norm1_beta);
    let mut q = a1.dot(&params.wq);
    let mut k = a1.dot(&params.wk);
    let v = a1.dot(&params.wv);
    if cfg.use_positions {
        rotate(&mut q, heads, 1.0);
        rotate(&mut k, heads, 1.0);
    }
    let mut o = Array2::zeros(x.raw_dim());
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut p);
        o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        attn.push(p);
    }
    let u = &x + &o.dot(&params.wo);
    let (a2, norm2) = layer_norm(&u, &params.norm2_gamma, &params.norm2_beta);
    let z1 = a2.dot(&params.w1) + &params.b1;
    let g = z1.mapv(gelu);
    let h = &u + &(g.dot(&params.w2) + &params.b2);

    let hv = h.slice(s![..n, ..]);
    let logits = hv.dot(&params.cls_w) + params.cls_b[0];
    let raw_probs: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
    let probs = raw_probs.iter().map(|&p| p.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();
    let out = ForwardOutput { visual: hv.to_owned(), text: h.slice(s![n.., ..]).to_owned(), probs };
    let cache = ForwardCache { n, norm1, a1, q, k, v, attn, o, norm2, a2, z1, g, h, raw_probs };
    Ok((out, cache))
}

/// Forward pass on a sample (embeddings widened to 64-bit).
pub fn forward(sample: &Sample, params: &CompressorParams, cfg: &CompressorConfig) -> Result<ForwardOutput> {
    let visual = sample.visual.mapv(f64::from);
    let text = sample.text.mapv(f64::from);
    Ok(forward_cached(params, cfg, visual.view(), text.view())?.0)
}

/// Parameter gradients given the loss gradient with respect to the clamped
/// probabilities and the visual representations. A clamped probability
/// passes no gradient.
pub fn backward(
    params: &CompressorParams,
    cfg: &CompressorConfig,
    cache: &ForwardCache,
    d_probs: &[f64],
    d_visual: ArrayView2<'_, f64>,
) -> CompressorParams {
    let n = cache.n;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grad = params.zeros_like();

    let dz: Array1<f64> = cache
        .raw_probs
        .iter()
        .zip(d_probs)
        .map(|(&p, &dp)| if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) { dp * p * (1.0 - p) } else { 0.0 })
        .collect();
    let hv = cache.h.slice(s![..n, ..]);
    grad.cls_w = hv.t().dot(&dz);
    grad.cls_b[0] = dz.sum();
    let mut dh_all = Array2::zeros(cache.h.raw_dim());
    {
        let mut top = dh_all.slice_mut(s![..n, ..]);
        top.assign(&d_visual);
        for (mut row, &d) in top.rows_mut().into_iter().zip(&dz) {
            row.scaled_add(d, &params.cls_w);
        }
    }

    // feed-forward branch
    grad.w2 = cache.g.t().dot(&dh_all);
    grad.b2 = dh_all.sum_axis(Axis(0));
    let mut dz1 = dh_all.dot(&params.w2.t());
    dz1.zip_mut_with(&cache.z1, |d, &z| *d *= gelu_grad(z));
    grad.w1 = cache.a2.t().dot(&dz1);
    grad.b1 = dz1.sum_axis(Axis(0));
    let da2 = dz1.dot(&params.w1.t());
    let du = dh_all
        + layer_norm_backward(&da2, &cache.norm2, &params.norm2_gamma, &mut grad.norm2_gamma, &mut grad.norm2_beta);

    // attention branch
    grad.wo = cache.o.t().dot(&du);
    let d_o = du.dot(&params.wo.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, p) in cache.attn.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = d_o.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let mut ds = doh.dot(&cache.v.slice(cols).t());
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = drow.dot(&prow);
            drow.zip_mut_with(&prow, |d, &pv| *d = pv * (*d - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    if cfg.use_positions {
        rotate(&mut dq, heads, -1.0);
        rotate(&mut dk, heads, -1.0);
    }
    grad.wq = cache.a1.t().dot(&dq);
    grad.wk = cache.a1.t().dot(&dk);
    grad.wv = cache.a1.t().dot(&dv);
    let da1 = dq.dot(&params.wq.t()) + dk.dot(&params.wk.t()) + dv.dot(&params.wv.t());
    layer_norm_backward(&da1, &cache.norm1, &params.norm1_gamma, &mut grad.norm1_gamma, &mut grad.norm1_beta);
    grad
}
