//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use proto_forge::dd::Dd;
use proto_forge::encoder::{self, EncoderDims, EncoderParams, LoraAdapter, LoraTarget, TokenSequence};
use proto_forge::objective::XMode;
use proto_forge::prototype::TemplateSet;
use proto_forge::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn random_unit(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingMatrix {
    gaussian(rng, rows, cols).normalize_rows().unwrap()
}

/// Row-orthonormal Q by Gram-Schmidt on Gaussian rows.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, k: usize, d: usize) -> EmbeddingMatrix {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < k {
        let mut r: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for q in &rows {
                let c: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(r.into_iter().map(|a| a / n).collect());
        }
    }
    EmbeddingMatrix::from_rows(&rows).unwrap()
}

/// A small gradient-check problem: K class names, encoder with out_dim `d` whose
/// readout reproduces random unit targets, and adapters with non-zero B.
pub struct ChainFixture {
    pub params: EncoderParams,
    pub names: Vec<String>,
    pub templates: TemplateSet,
    pub v: EmbeddingMatrix,
    pub adapters: Vec<LoraAdapter>,
}

pub fn chain_fixture(seed: u64, k: usize, d: usize, rank: usize) -> ChainFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(1));
    let dims = EncoderDims { vocab_size: 512, embed_dim: 16, hidden_dim: 24, out_dim: d };
    let names = proto_forge::harness::synthetic_class_names(k, seed);
    let templates = TemplateSet::default_three();
    let v = random_unit(&mut rng, k, d);
    let params = EncoderParams::random(dims, seed).unwrap().fit_readout(&names, &templates, &v).unwrap();
    let mut adapters = encoder::default_adapters(&params, rank, seed).unwrap();
    for a in adapters.iter_mut() {
        let s = 0.5 / (a.rank as f64).sqrt();
        a.b.data_mut().iter_mut().for_each(|b| *b = s * rng.sample::<f64, _>(StandardNormal));
    }
    ChainFixture { params, names, templates, v, adapters }
}

fn layer_dd(w: &EmbeddingMatrix, bias: &[f64], ad: Option<&LoraAdapter>, x: &[Dd]) -> Vec<Dd> {
    let ax: Vec<Dd> = match ad {
        Some(ad) => ad.a.row_iter().map(|r| r.iter().zip(x).map(|(&a, &xi)| Dd::new(a) * xi).sum()).collect(),
        None => Vec::new(),
    };
    w.row_iter()
        .enumerate()
        .map(|(o, row)| {
            let mut acc: Dd = row.iter().zip(x).map(|(&wv, &xi)| Dd::new(wv) * xi).sum();
            acc = acc + Dd::new(bias[o]);
            if let Some(ad) = ad {
                acc = acc + ad.b.row(o).iter().zip(&ax).map(|(&b, &a)| Dd::new(b) * a).sum();
            }
            acc
        })
        .collect()
}

fn forward_dd(p: &EncoderParams, adapters: &[LoraAdapter], seq: &TokenSequence) -> Vec<Dd> {
    let find = |t: LoraTarget| adapters.iter().find(|a| a.target == t);
    let n = Dd::new(seq.len() as f64);
    let pooled: Vec<Dd> = (0..p.dims.embed_dim)
        .map(|j| seq.ids().iter().map(|&id| Dd::new(p.token_table.get(id, j))).sum::<Dd>() / n)
        .collect();
    let hidden: Vec<Dd> = layer_dd(&p.w1, &p.b1, find(LoraTarget::W1), &pooled).into_iter().map(Dd::tanh).collect();
    layer_dd(&p.w2, &p.b2, find(LoraTarget::W2), &hidden)
}

/// Loss through the encoder computed from scratch in double-double precision.
pub fn chain_loss_dd(
    f: &ChainFixture,
    adapters: &[LoraAdapter],
    x_mode: XMode,
    normalize: bool,
    lambda: f64,
) -> Dd {
    let vocab = f.params.dims.vocab_size;
    let d = f.params.dims.out_dim;
    let mut rows: Vec<Vec<Dd>> = Vec::new();
    for name in &f.names {
        let seqs: Vec<TokenSequence> = match x_mode {
            XMode::Bare => vec![encoder::tokenize(name, vocab).unwrap()],
            XMode::Averaged => f
                .templates
                .templates()
                .iter()
                .map(|t| encoder::tokenize(&t.replacen("{}", name, 1), vocab).unwrap())
                .collect(),
        };
        let mut row = vec![Dd::ZERO; d];
        for s in &seqs {
            for (r, y) in row.iter_mut().zip(forward_dd(&f.params, adapters, s)) {
                *r = *r + y;
            }
        }
        let t = Dd::new(seqs.len() as f64);
        row.iter_mut().for_each(|r| *r = *r / t);
        if normalize {
            let nrm = row.iter().map(|&r| r * r).sum::<Dd>().sqrt();
            row.iter_mut().for_each(|r| *r = *r / nrm);
        }
        rows.push(row);
    }
    let mut fid = Dd::ZERO;
    for (i, row) in rows.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            let e = x - Dd::new(f.v.get(i, j));
            fid = fid + e * e;
        }
    }
    let mut pen = Dd::ZERO;
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            let mut g: Dd = rows[i].iter().zip(&rows[j]).map(|(&a, &b)| a * b).sum();
            if i == j {
                g = g - Dd::ONE;
            }
            pen = pen + g * g;
        }
    }
    fid + Dd::new(lambda) * pen
}

/// Max relative error of the analytic adapter gradient against central differences of
/// the double-double loss (shifted by its value at the base point).
pub fn chain_grad_error(f: &ChainFixture, x_mode: XMode, normalize: bool, lambda: f64) -> f64 {
    use proto_forge::objective::{flatten_adapters, flatten_grads, grad_check, unflatten_adapters, EncoderObjective};
    let problem =
        EncoderObjective::new(&f.params, &f.names, &f.templates, x_mode, normalize, f.v.clone()).unwrap();
    let (_, grads) = problem.evaluate(&f.adapters, lambda).unwrap();
    let theta = flatten_adapters(&f.adapters);
    let base = chain_loss_dd(f, &f.adapters, x_mode, normalize, lambda);
    let mut work = f.adapters.clone();
    grad_check(
        |p| {
            unflatten_adapters(&mut work, p);
            (chain_loss_dd(f, &work, x_mode, normalize, lambda) - base).to_f64()
        },
        &flatten_grads(&grads),
        &theta,
        1e-5,
    )
    .unwrap()
}

/// ‖X − V‖² + λ‖XXᵀ − I‖² for a row-major K×d `x`, in double-double precision.
pub fn x_loss_dd(x: &[f64], v: &EmbeddingMatrix, lambda: f64) -> Dd {
    let (k, d) = v.shape();
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut fid = Dd::ZERO;
    for (a, b) in x.iter().zip(v.data()) {
        let e = Dd::new(*a) - Dd::new(*b);
        fid = fid + e * e;
    }
    let mut pen = Dd::ZERO;
    for i in 0..k {
        for j in 0..k {
            let mut g: Dd = row(i).iter().zip(row(j)).map(|(&a, &b)| Dd::new(a) * Dd::new(b)).sum();
            if i == j {
                g = g - Dd::ONE;
            }
            pen = pen + g * g;
        }
    }
    fid + Dd::new(lambda) * pen
}
