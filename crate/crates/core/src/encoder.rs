//! Toy differentiable text encoder with low-rank adapters.
//!
//! Architecture: hashed token embeddings, mean pooling, then a two-layer MLP
//! `y = W2·tanh(W1·p + b1) + b2`. Weight matrices are stored `out × in` so that an
//! adapter on a layer contributes `W = W0 + B·A` directly, with `A: r × in` and
//! `B: out × r`. The base weights stay frozen; only adapter factors are trained.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::linalg::{self, dot, EmbeddingMatrix};
use crate::prototype::{expand_templates, EmbeddingSource, TemplateSet};

pub const CHECKPOINT_FORMAT: &str = "proto-forge-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_RANK: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercases, splits on anything that is not alphanumeric, and hashes each token
/// into `[0, vocab_size)`.
pub fn tokenize(text: &str, vocab_size: usize) -> Result<TokenSequence> {
    if vocab_size == 0 {
        return Err(Error::InvalidConfig("vocab_size must be positive".into()));
    }
    let lower = text.trim().to_lowercase();
    let ids: Vec<usize> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (fnv1a64(t.as_bytes()) % vocab_size as u64) as usize)
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(TokenSequence { ids })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self { vocab_size: 4096, embed_dim: 64, hidden_dim: 128, out_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    /// vocab_size × embed_dim
    pub token_table: EmbeddingMatrix,
    /// hidden_dim × embed_dim
    pub w1: EmbeddingMatrix,
    pub b1: Vec<f64>,
    /// out_dim × hidden_dim
    pub w2: EmbeddingMatrix,
    pub b2: Vec<f64>,
    pub frozen: bool,
    pub seed: u64,
}

impl EncoderParams {
    /// Random base encoder: N(0,1) token table, layers scaled by 1/√fan_in, zero biases.
    pub fn random(dims: EncoderDims, seed: u64) -> Result<Self> {
        let EncoderDims { vocab_size, embed_dim, hidden_dim, out_dim } = dims;
        if vocab_size == 0 || embed_dim == 0 || hidden_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(format!("encoder dimensions must be >= 1: {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect()
        };
        let token_table = EmbeddingMatrix::new(vocab_size, embed_dim, gauss(vocab_size * embed_dim, 1.0))?;
        let w1 = EmbeddingMatrix::new(
            hidden_dim,
            embed_dim,
            gauss(hidden_dim * embed_dim, 1.0 / (embed_dim as f64).sqrt()),
        )?;
        let w2 = EmbeddingMatrix::new(
            out_dim,
            hidden_dim,
            gauss(out_dim * hidden_dim, 1.0 / (hidden_dim as f64).sqrt()),
        )?;
        Ok(Self {
            dims,
            token_table,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; out_dim],
            frozen: true,
            seed,
        })
    }

    pub fn base_parameter_count(&self) -> usize {
        let d = self.dims;
        d.vocab_size * d.embed_dim + d.hidden_dim * d.embed_dim + d.hidden_dim + d.out_dim * d.hidden_dim + d.out_dim
    }

    fn layer_shape(&self, target: LoraTarget) -> (usize, usize) {
        match target {
            LoraTarget::W1 => (self.dims.embed_dim, self.dims.hidden_dim),
            LoraTarget::W2 => (self.dims.hidden_dim, self.dims.out_dim),
        }
    }

    /// Replaces the output layer so that template-averaged outputs for `names`
    /// reproduce `targets` exactly (minimum-norm solution, zero output bias).
    ///
    /// This calibrates the toy encoder to an externally supplied prototype matrix,
    /// so that adapter training starts from those prototypes.
    pub fn fit_readout(
        mut self,
        names: &[String],
        templates: &TemplateSet,
        targets: &EmbeddingMatrix,
    ) -> Result<Self> {
        let k = names.len();
        if targets.rows() != k || targets.cols() != self.dims.out_dim {
            return Err(Error::shape(
                format!("{k}x{}", self.dims.out_dim),
                format!("{}x{}", targets.rows(), targets.cols()),
            ));
        }
        let seqs = tokenize_expanded(names, templates, self.dims.vocab_size)?;
        let t = templates.len();
        let h = self.dims.hidden_dim;
        let mut hbar = vec![0.0; k * h];
        for (idx, seq) in seqs.iter().enumerate() {
            let fwd = forward(&self, &[], seq)?;
            let row = &mut hbar[(idx / t) * h..(idx / t + 1) * h];
            row.iter_mut().zip(&fwd.hidden).for_each(|(o, x)| *o += x / t as f64);
        }
        let hbar = EmbeddingMatrix::new(k, h, hbar)?;
        // W2ᵀ = H̄ᵀ (H̄H̄ᵀ)⁻¹ P
        let coeffs = linalg::solve(&hbar.gram(), targets)?;
        let w2t = hbar.transpose().matmul(&coeffs)?;
        self.w2 = w2t.transpose();
        self.b2 = vec![0.0; self.dims.out_dim];
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    W1,
    W2,
}

/// Low-rank update `B·A` for one base weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    /// rank × d_in
    pub a: EmbeddingMatrix,
    /// d_out × rank
    pub b: EmbeddingMatrix,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    pub fn delta(&self) -> EmbeddingMatrix {
        self.b.matmul(&self.a).expect("adapter factors agree by construction")
    }

    /// `base + B·A`.
    pub fn effective_weight(&self, base: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        base.add(&self.delta())
    }
}

/// A seeded, zero-delta adapter: `A ~ N(0, 1/rank)`, `B = 0`.
pub fn lora_init(
    target: LoraTarget,
    shape_in: usize,
    shape_out: usize,
    rank: usize,
    seed: u64,
) -> Result<LoraAdapter> {
    let limit = shape_in.min(shape_out);
    if rank == 0 || rank >= limit {
        return Err(Error::RankTooLarge { rank, limit });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rank as f64).sqrt();
    let a: Vec<f64> = (0..rank * shape_in)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    Ok(LoraAdapter {
        target,
        a: EmbeddingMatrix::new(rank, shape_in, a)?,
        b: EmbeddingMatrix::zeros(shape_out, rank),
        rank,
    })
}

/// Adapters on both MLP layers at the given rank.
pub fn default_adapters(params: &EncoderParams, rank: usize, seed: u64) -> Result<Vec<LoraAdapter>> {
    [LoraTarget::W1, LoraTarget::W2]
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let (din, dout) = params.layer_shape(t);
            lora_init(t, din, dout, rank, seed.wrapping_add(1 + i as u64))
        })
        .collect()
}

fn check_adapters(params: &EncoderParams, adapters: &[LoraAdapter]) -> Result<()> {
    let mut seen = [false; 2];
    for ad in adapters {
        let slot = ad.target as usize;
        if seen[slot] {
            return Err(Error::DimensionMismatch(format!("two adapters target {:?}", ad.target)));
        }
        seen[slot] = true;
        let (din, dout) = params.layer_shape(ad.target);
        if ad.a.shape() != (ad.rank, din) || ad.b.shape() != (dout, ad.rank) {
            return Err(Error::DimensionMismatch(format!(
                "adapter on {:?}: A {:?}, B {:?}, expected A ({}, {din}), B ({dout}, {})",
                ad.target,
                ad.a.shape(),
                ad.b.shape(),
                ad.rank,
                ad.rank
            )));
        }
    }
    Ok(())
}

fn find(adapters: &[LoraAdapter], target: LoraTarget) -> Option<&LoraAdapter> {
    adapters.iter().find(|a| a.target == target)
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pooled: Vec<f64>,
    pub a1_pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub a2_hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// `out = W·x + B·(A·x)` for an `out × in` weight, without forming `B·A`.
fn apply_layer(w: &EmbeddingMatrix, bias: &[f64], ad: Option<&LoraAdapter>, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut out: Vec<f64> = w.row_iter().zip(bias).map(|(r, b)| dot(r, x) + b).collect();
    let ax: Vec<f64> = match ad {
        Some(ad) => ad.a.row_iter().map(|r| dot(r, x)).collect(),
        None => Vec::new(),
    };
    if let Some(ad) = ad {
        for (o, brow) in out.iter_mut().zip(ad.b.row_iter()) {
            *o += dot(brow, &ax);
        }
    }
    (out, ax)
}

pub fn forward(params: &EncoderParams, adapters: &[LoraAdapter], seq: &TokenSequence) -> Result<ForwardCache> {
    let dims = params.dims;
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= dims.vocab_size) {
        return Err(Error::DimensionMismatch(format!("token id {bad} >= vocab {}", dims.vocab_size)));
    }
    if seq.is_empty() {
        return Err(Error::EmptyText);
    }
    check_adapters(params, adapters)?;
    let mut pooled = vec![0.0; dims.embed_dim];
    for &id in &seq.ids {
        pooled.iter_mut().zip(params.token_table.row(id)).for_each(|(p, x)| *p += x);
    }
    let n = seq.len() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);

    let (mut hidden, a1_pooled) = apply_layer(&params.w1, &params.b1, find(adapters, LoraTarget::W1), &pooled);
    hidden.iter_mut().for_each(|h| *h = h.tanh());
    let (output, a2_hidden) = apply_layer(&params.w2, &params.b2, find(adapters, LoraTarget::W2), &hidden);
    Ok(ForwardCache { pooled, a1_pooled, hidden, a2_hidden, output })
}

/// Encodes one token sequence. The output is not normalized.
pub fn encode(params: &EncoderParams, adapters: &[LoraAdapter], seq: &TokenSequence) -> Result<Vec<f64>> {
    Ok(forward(params, adapters, seq)?.output)
}

/// Gradient buffers matching an adapter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub target: LoraTarget,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn zero_grads(adapters: &[LoraAdapter]) -> Vec<AdapterGrad> {
    adapters
        .iter()
        .map(|ad| AdapterGrad { target: ad.target, a: vec![0.0; ad.a.data().len()], b: vec![0.0; ad.b.data().len()] })
        .collect()
}

/// Accumulates dL/dA and dL/dB for every adapter given dL/d(output) of one sequence.
pub fn backward(
    params: &EncoderParams,
    adapters: &[LoraAdapter],
    cache: &ForwardCache,
    grad_out: &[f64],
    grads: &mut [AdapterGrad],
) {
    let dims = params.dims;
    debug_assert_eq!(grad_out.len(), dims.out_dim);

    // Layer 2: y = (W2 + B2 A2) h + b2
    let ad2 = find(adapters, LoraTarget::W2);
    let mut grad_hidden = vec![0.0; dims.hidden_dim];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_hidden.iter_mut().zip(params.w2.row(o)).for_each(|(gh, w)| *gh += g * w);
    }
    if let Some(ad) = ad2 {
        let r = ad.rank;
        // dB2 = gy ⊗ (A2 h); dA2 = (B2ᵀ gy) ⊗ h; dL/dh gains A2ᵀ (B2ᵀ gy)
        let mut bt_g = vec![0.0; r];
        for (o, &g) in grad_out.iter().enumerate() {
            bt_g.iter_mut().zip(ad.b.row(o)).for_each(|(acc, b)| *acc += b * g);
        }
        for (j, &bg) in bt_g.iter().enumerate() {
            grad_hidden.iter_mut().zip(ad.a.row(j)).for_each(|(gh, a)| *gh += bg * a);
        }
        if let Some(gr) = grads.iter_mut().find(|g| g.target == LoraTarget::W2) {
            for (o, &g) in grad_out.iter().enumerate() {
                for j in 0..r {
                    gr.b[o * r + j] += g * cache.a2_hidden[j];
                }
            }
            for (j, &bg) in bt_g.iter().enumerate() {
                let row = &mut gr.a[j * dims.hidden_dim..(j + 1) * dims.hidden_dim];
                row.iter_mut().zip(&cache.hidden).for_each(|(ga, h)| *ga += bg * h);
            }
        }
    }

    // tanh
    let grad_z1: Vec<f64> = grad_hidden.iter().zip(&cache.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();

    // Layer 1: z1 = (W1 + B1 A1) p + b1
    if let (Some(ad), Some(gr)) = (find(adapters, LoraTarget::W1), grads.iter_mut().find(|g| g.target == LoraTarget::W1)) {
        let r = ad.rank;
        let mut bt_g = vec![0.0; r];
        for (o, &g) in grad_z1.iter().enumerate() {
            let brow = ad.b.row(o);
            for j in 0..r {
                gr.b[o * r + j] += g * cache.a1_pooled[j];
                bt_g[j] += brow[j] * g;
            }
        }
        for j in 0..r {
            let row = &mut gr.a[j * dims.embed_dim..(j + 1) * dims.embed_dim];
            row.iter_mut().zip(&cache.pooled).for_each(|(ga, p)| *ga += bt_g[j] * p);
        }
    }
}

/// Fraction of parameters that are trainable (adapter factors).
pub fn trainable_fraction(params: &EncoderParams, adapters: &[LoraAdapter]) -> f64 {
    let adapter: usize = adapters.iter().map(LoraAdapter::parameter_count).sum();
    fraction_of(params.base_parameter_count(), adapter)
}

pub fn fraction_of(base: usize, adapter: usize) -> f64 {
    if adapter == 0 {
        return 0.0;
    }
    adapter as f64 / (base + adapter) as f64
}

/// Tokenizes the K×T expansion of `names` through `templates`.
pub fn tokenize_expanded(names: &[String], templates: &TemplateSet, vocab_size: usize) -> Result<Vec<TokenSequence>> {
    expand_templates(names, templates)?
        .iter()
        .map(|t| tokenize(t, vocab_size))
        .collect()
}

/// Encoder + adapters as an [`EmbeddingSource`].
pub struct ToyEncoder<'a> {
    pub params: &'a EncoderParams,
    pub adapters: &'a [LoraAdapter],
}

impl EmbeddingSource for ToyEncoder<'_> {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix> {
        let d = self.params.dims.out_dim;
        let mut data = Vec::with_capacity(texts.len() * d);
        for t in texts {
            let seq = tokenize(t, self.params.dims.vocab_size)?;
            data.extend(encode(self.params, self.adapters, &seq)?);
        }
        EmbeddingMatrix::new(texts.len(), d, data)
    }
}

/// Serialized encoder state: dimensions, base weights, adapters and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: EncoderParams,
    pub adapters: Vec<LoraAdapter>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(params: EncoderParams, adapters: Vec<LoraAdapter>) -> Self {
        let seed = params.seed;
        Self { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, params, adapters, seed }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        check_adapters(&ck.params, &ck.adapters)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
