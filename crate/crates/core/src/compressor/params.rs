use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CompressorConfig;
use crate::error::{Error, Result};
use crate::hash::sha256_hex;

pub const PARAM_MAGIC: &[u8; 4] = b"EVP1";

/// Tensor names in file and iteration order.
pub const TENSOR_NAMES: [&str; 14] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "norm1.gamma",
    "norm1.beta",
    "norm2.gamma",
    "norm2.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "cls.w",
    "cls.b",
];

/// Trainable parameters. Matrices act on row vectors (`x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub norm1_gamma: Array1<f64>,
    pub norm1_beta: Array1<f64>,
    pub norm2_gamma: Array1<f64>,
    pub norm2_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub cls_w: Array1<f64>,
    pub cls_b: Array1<f64>,
}

impl CompressorParams {
    pub fn zeros(cfg: &CompressorConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.hidden();
        CompressorParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            norm1_gamma: Array1::zeros(d),
            norm1_beta: Array1::zeros(d),
            norm2_gamma: Array1::zeros(d),
            norm2_beta: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
            cls_w: Array1::zeros(d),
            cls_b: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.slices_mut().into_iter().for_each(|(_, s)| s.fill(0.0));
        z
    }

    pub fn d_model(&self) -> usize {
        self.wq.nrows()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        vec![
            self.wq.shape().to_vec(),
            self.wk.shape().to_vec(),
            self.wv.shape().to_vec(),
            self.wo.shape().to_vec(),
            self.norm1_gamma.shape().to_vec(),
            self.norm1_beta.shape().to_vec(),
            self.norm2_gamma.shape().to_vec(),
            self.norm2_beta.shape().to_vec(),
            self.w1.shape().to_vec(),
            self.b1.shape().to_vec(),
            self.w2.shape().to_vec(),
            self.b2.shape().to_vec(),
            self.cls_w.shape().to_vec(),
            self.cls_b.shape().to_vec(),
        ]
    }

    /// Flat views in [`TENSOR_NAMES`] order.
    pub fn slices(&self) -> Vec<(&'static str, &[f64])> {
        let all: [&[f64]; 14] = [
            self.wq.as_slice().expect("standard layout"),
            self.wk.as_slice().expect("standard layout"),
            self.wv.as_slice().expect("standard layout"),
            self.wo.as_slice().expect("standard layout"),
            self.norm1_gamma.as_slice().expect("standard layout"),
            self.norm1_beta.as_slice().expect("standard layout"),
            self.norm2_gamma.as_slice().expect("standard layout"),
            self.norm2_beta.as_slice().expect("standard layout"),
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.cls_w.as_slice().expect("standard layout"),
            self.cls_b.as_slice().expect("standard layout"),
        ];
        TENSOR_NAMES.iter().copied().zip(all).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let all: [&mut [f64]; 14] = [
            self.wq.as_slice_mut().expect("standard layout"),
            self.wk.as_slice_mut().expect("standard layout"),
            self.wv.as_slice_mut().expect("standard layout"),
            self.wo.as_slice_mut().expect("standard layout"),
            self.norm1_gamma.as_slice_mut().expect("standard layout"),
            self.norm1_beta.as_slice_mut().expect("standard layout"),
            self.norm2_gamma.as_slice_mut().expect("standard layout"),
            self.norm2_beta.as_slice_mut().expect("standard layout"),
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.cls_w.as_slice_mut().expect("standard layout"),
            self.cls_b.as_slice_mut().expect("standard layout"),
        ];
        TENSOR_NAMES.iter().copied().zip(all).collect()
    }

    pub fn is_classifier(name: &str) -> bool {
        name.starts_with("cls.")
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    /// Zeroes every block weight, leaving the classifier untouched.
    pub fn zero_block(&mut self) {
        for (name, s) in self.slices_mut() {
            if !Self::is_classifier(name) {
                s.fill(0.0);
            }
        }
    }

    /// Hex SHA-256 over all values as little-endian `f64`.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (_, s) in self.slices() {
            for v in s {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &CompressorParams, scale: f64) {
        for ((_, a), (_, b)) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn check_shapes(&self, expected: &CompressorParams) -> Result<()> {
        for ((name, found), exp) in TENSOR_NAMES.iter().zip(self.shapes()).zip(expected.shapes()) {
            if found != exp {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: exp,
                    found,
                });
            }
        }
        Ok(())
    }
}

fn fill_normal<R: Rng + ?Sized>(s: &mut [f64], std: f64, rng: &mut R) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for v in s {
        *v = normal.sample(rng);
    }
}

/// Seeded small-variance initialization, or a copy of the donor's block
/// weights. The classifier is always freshly drawn.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &CompressorConfig,
    donor: Option<&CompressorParams>,
    rng: &mut R,
) -> Result<CompressorParams> {
    cfg.validate()?;
    let mut params = CompressorParams::zeros(cfg);
    match donor {
        Some(d) => {
            d.check_shapes(&params)?;
            params = d.clone();
        }
        None => {
            for (name, s) in params.slices_mut() {
                match name {
                    "norm1.gamma" | "norm2.gamma" => s.fill(1.0),
                    "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" | "ffn.w1" | "ffn.w2" => {
                        fill_normal(s, cfg.init_std, rng)
                    }
                    _ => {}
                }
            }
        }
    }
    fill_normal(params.cls_w.as_slice_mut().expect("standard layout"), cfg.init_std, rng);
    params.cls_b.fill(0.0);
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    config: CompressorConfig,
    tensors: Vec<TensorHeader>,
}

/// `EVP1`, little-endian `u32` header length, JSON header, then each
/// tensor as little-endian `f32` in header order.
pub fn encode_params(params: &CompressorParams, cfg: &CompressorConfig) -> Vec<u8> {
    let header = ParamHeader {
        config: cfg.clone(),
        tensors: TENSOR_NAMES
            .iter()
            .zip(params.shapes())
            .map(|(n, shape)| TensorHeader { name: n.to_string(), shape })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, s) in params.slices() {
        for &v in s {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<(CompressorParams, CompressorConfig)> {
    if bytes.len() < 8 || &bytes[..4] != PARAM_MAGIC {
        return Err(Error::Format("missing EVP1 magic".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Format("truncated parameter header".into()))?;
    let header: ParamHeader = serde_json::from_slice(body)?;
    let mut params = CompressorParams::zeros(&header.config);
    let expected = params.shapes();
    if header.tensors.len() != TENSOR_NAMES.len() {
        return Err(Error::Format(format!("{} tensors, expected {}", header.tensors.len(), TENSOR_NAMES.len())));
    }
    for ((t, name), shape) in header.tensors.iter().zip(TENSOR_NAMES).zip(&expected) {
        if t.name != name {
            return Err(Error::Format(format!("tensor {} found where {name} expected", t.name)));
        }
        if &t.shape != shape {
            return Err(Error::ShapeMismatch { name: t.name.clone(), expected: shape.clone(), found: t.shape.clone() });
        }
    }
    let mut cursor = &bytes[8 + len..];
    for (_, s) in params.slices_mut() {
        let need = s.len() * 4;
        if cursor.len() < need {
            return Err(Error::Format("truncated tensor data".into()));
        }
        for (v, c) in s.iter_mut().zip(cursor[..need].chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
        cursor = &cursor[need..];
    }
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensors", cursor.len())));
    }
    Ok((params, header.config))
}

pub fn write_params(path: &Path, params: &CompressorParams, cfg: &CompressorConfig) -> Result<String> {
    let bytes = encode_params(params, cfg);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_params(path: &Path) -> Result<(CompressorParams, CompressorConfig)> {
    decode_params(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> CompressorConfig {
        CompressorConfig { d_model: 8, heads: 2, ..Default::default() }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = init_params(&tiny(), None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_params(&tiny(), None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.norm1_gamma, Array1::<f64>::ones(8));
    }

    #[test]
    fn donor_copy_except_classifier() {
        let donor = init_params(&tiny(), None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = init_params(&tiny(), Some(&donor), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for ((name, a), (_, b)) in p.slices().into_iter().zip(donor.slices()) {
            if CompressorParams::is_classifier(name) {
                continue;
            }
            assert_eq!(a, b, "{name}");
        }
        assert_ne!(p.cls_w, donor.cls_w);
    }

    #[test]
    fn donor_width_mismatch() {
        let donor = init_params(&tiny(), None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = CompressorConfig { d_model: 16, heads: 2, ..Default::default() };
        let err = init_params(&cfg, Some(&donor), &mut ChaCha8Rng::seed_from_u64(2)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn file_roundtrip_is_f32_exact() {
        let p = init_params(&tiny(), None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bytes = encode_params(&p, &tiny());
        assert_eq!(&bytes[..4], b"EVP1");
        let (back, cfg) = decode_params(&bytes).unwrap();
        assert_eq!(cfg, tiny());
        for ((_, a), (_, b)) in p.slices().into_iter().zip(back.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // a second pass is exact
        assert_eq!(decode_params(&encode_params(&back, &cfg)).unwrap().0, back);
        assert!(decode_params(&bytes[..bytes.len() - 2]).is_err());
    }
}
