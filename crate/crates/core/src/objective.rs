//! Fidelity-plus-orthonormality objective and its gradients.
//!
//! `L(X) = ‖X − V‖²_F + λ·‖X·Xᵀ − I‖²_F`, with
//! `∂L/∂X = 2(X − V) + 4λ(X·Xᵀ − I)·X`. When X is produced by the toy encoder the
//! gradient is chained through the (optional) sphere projection and the encoder down to
//! the adapter factors.

use serde::{Deserialize, Serialize};

use crate::dd::{self, Dd};
use crate::encoder::{self, AdapterGrad, EncoderParams, LoraAdapter, TokenSequence};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, EmbeddingMatrix, ZERO_ROW_NORM};
use crate::prototype::TemplateSet;

/// How rows of X are produced from the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum XMode {
    /// Encode the bare class name.
    Bare,
    /// Average the encoder output over the prompt templates.
    #[default]
    Averaged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda0: f64,
    pub lambda_growth: f64,
    pub normalize_x: bool,
    pub x_mode: XMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { lambda0: 2.0, lambda_growth: 1.15, normalize_x: false, x_mode: XMode::Averaged }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda0 must be >= 0, got {}", self.lambda0)));
        }
        if !(self.lambda_growth >= 1.0 && self.lambda_growth.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_growth must be >= 1, got {}", self.lambda_growth)));
        }
        Ok(())
    }
}

/// Penalty weight for a given epoch: `lambda0 · growth^epoch`, held for all steps of
/// that epoch.
pub fn lambda_at(config: &ObjectiveConfig, epoch: usize) -> f64 {
    config.lambda0 * config.lambda_growth.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub fidelity: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_shapes(x: &EmbeddingMatrix, v: &EmbeddingMatrix) -> Result<()> {
    if x.shape() != v.shape() {
        return Err(Error::shape(
            format!("{}x{}", v.rows(), v.cols()),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    Ok(())
}

/// X·Xᵀ − I.
fn gram_residual(x: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut g = x.gram();
    let k = g.rows();
    for i in 0..k {
        let v = g.get(i, i) - 1.0;
        g.set(i, i, v);
    }
    g
}

pub fn loss(x: &EmbeddingMatrix, v: &EmbeddingMatrix, lambda: f64) -> Result<LossReport> {
    check_shapes(x, v)?;
    let fidelity = x.sub(v)?.frobenius_sq();
    let penalty = gram_residual(x).frobenius_sq();
    Ok(LossReport { fidelity, penalty, lambda, total: fidelity + lambda * penalty })
}

pub fn loss_grad_x(x: &EmbeddingMatrix, v: &EmbeddingMatrix, lambda: f64) -> Result<EmbeddingMatrix> {
    check_shapes(x, v)?;
    let fid = x.sub(v)?.scale(2.0);
    if lambda == 0.0 {
        return Ok(fid);
    }
    let pen = gram_residual(x).matmul(x)?.scale(4.0 * lambda);
    fid.add(&pen)
}

/// Value and gradient together, sharing the Gram residual.
pub fn loss_and_grad(x: &EmbeddingMatrix, v: &EmbeddingMatrix, lambda: f64) -> Result<(LossReport, EmbeddingMatrix)> {
    check_shapes(x, v)?;
    let diff = x.sub(v)?;
    let resid = gram_residual(x);
    let report = LossReport {
        fidelity: diff.frobenius_sq(),
        penalty: resid.frobenius_sq(),
        lambda,
        total: 0.0,
    };
    let report = LossReport { total: report.fidelity + lambda * report.penalty, ..report };
    let grad = diff.scale(2.0).add(&resid.matmul(x)?.scale(4.0 * lambda))?;
    Ok((report, grad))
}

/// Maximum element-wise relative error between `analytic` and central differences of
/// `f` at `point`, with denominator `max(|analytic|, |numeric|, 1e-10)`.
pub fn grad_check<F>(mut f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape(format!("{} gradient entries", point.len()), analytic.len().to_string()));
    }
    let mut p = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = f(&p);
        p[i] = orig - step;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { coord: i });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-10);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Total loss of a row-major K×d `x` evaluated in double-double precision.
pub fn loss_extended(x: &[f64], v: &EmbeddingMatrix, lambda: f64) -> Result<Dd> {
    let (k, d) = v.shape();
    if x.len() != k * d {
        return Err(Error::shape(format!("{} entries", k * d), x.len().to_string()));
    }
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut fid = Dd::ZERO;
    for (xe, ve) in x.iter().zip(v.data()) {
        let e = Dd::new(*xe) - Dd::new(*ve);
        fid = fid + e * e;
    }
    let mut pen = Dd::ZERO;
    for i in 0..k {
        for j in i..k {
            let mut g = dd::dot(row(i), row(j));
            if i == j {
                g = g - Dd::ONE;
                pen = pen + g * g;
            } else {
                pen = pen + Dd::new(2.0) * g * g;
            }
        }
    }
    Ok(fid + Dd::new(lambda) * pen)
}

/// Finite-difference check of [`loss_grad_x`] at `x`.
///
/// The probed function is the extended-precision loss minus its value at `x`, so the
/// central differences are not polluted by f64 rounding of an O(1..100) loss.
pub fn grad_check_x(x: &EmbeddingMatrix, v: &EmbeddingMatrix, lambda: f64, step: f64) -> Result<f64> {
    let analytic = loss_grad_x(x, v, lambda)?;
    let base = loss_extended(x.data(), v, lambda)?;
    grad_check(
        |p| loss_extended(p, v, lambda).map_or(f64::NAN, |l| (l - base).to_f64()),
        analytic.data(),
        x.data(),
        step,
    )
}

/// Objective evaluated through the toy encoder, differentiable in adapter factors.
///
/// Holds the tokenized prompts and the frozen target prototypes V; V is supplied once
/// and never recomputed.
#[derive(Debug, Clone)]
pub struct EncoderObjective<'a> {
    pub params: &'a EncoderParams,
    /// `groups[k]` holds the sequences averaged into row k of X.
    groups: Vec<Vec<TokenSequence>>,
    pub v: EmbeddingMatrix,
    pub normalize_x: bool,
}

impl<'a> EncoderObjective<'a> {
    pub fn new(
        params: &'a EncoderParams,
        names: &[String],
        templates: &TemplateSet,
        x_mode: XMode,
        normalize_x: bool,
        v: EmbeddingMatrix,
    ) -> Result<Self> {
        let vocab = params.dims.vocab_size;
        let groups: Vec<Vec<TokenSequence>> = match x_mode {
            XMode::Bare => names.iter().map(|n| Ok(vec![encoder::tokenize(n, vocab)?])).collect::<Result<_>>()?,
            XMode::Averaged => {
                let t = templates.len();
                let seqs = encoder::tokenize_expanded(names, templates, vocab)?;
                seqs.chunks(t).map(<[TokenSequence]>::to_vec).collect()
            }
        };
        if v.rows() != names.len() || v.cols() != params.dims.out_dim {
            return Err(Error::DimensionMismatch(format!(
                "V is {}x{}, encoder produces {}x{}",
                v.rows(),
                v.cols(),
                names.len(),
                params.dims.out_dim
            )));
        }
        Ok(Self { params, groups, v, normalize_x })
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    /// Current X(θ) (normalized rows when `normalize_x`).
    pub fn prototypes(&self, adapters: &[LoraAdapter]) -> Result<EmbeddingMatrix> {
        Ok(self.forward(adapters)?.0)
    }

    fn forward(&self, adapters: &[LoraAdapter]) -> Result<(EmbeddingMatrix, Vec<Vec<encoder::ForwardCache>>, Vec<f64>)> {
        let d = self.params.dims.out_dim;
        let mut data = Vec::with_capacity(self.k() * d);
        let mut caches = Vec::with_capacity(self.k());
        let mut norms = Vec::with_capacity(self.k());
        for group in &self.groups {
            let mut row = vec![0.0; d];
            let mut gc = Vec::with_capacity(group.len());
            for seq in group {
                let c = encoder::forward(self.params, adapters, seq)?;
                row.iter_mut().zip(&c.output).for_each(|(r, o)| *r += o);
                gc.push(c);
            }
            let t = group.len() as f64;
            row.iter_mut().for_each(|r| *r /= t);
            let n = norm(&row);
            if self.normalize_x {
                if n <= ZERO_ROW_NORM {
                    return Err(Error::ZeroRow { row: caches.len(), norm: n });
                }
                row.iter_mut().for_each(|r| *r /= n);
            }
            norms.push(n);
            data.extend(row);
            caches.push(gc);
        }
        let mut x = EmbeddingMatrix::new(self.k(), d, data)
            .map_err(|_| Error::DivergedLoss { epoch: 0, step: 0, total: f64::NAN })?;
        if self.normalize_x {
            x.mark_unit_rows()?;
        }
        Ok((x, caches, norms))
    }

    /// Loss and gradients w.r.t. every adapter factor.
    pub fn evaluate(&self, adapters: &[LoraAdapter], lambda: f64) -> Result<(LossReport, Vec<AdapterGrad>)> {
        let (x, caches, norms) = self.forward(adapters)?;
        let (report, gx) = loss_and_grad(&x, &self.v, lambda)?;
        let mut grads = encoder::zero_grads(adapters);
        for (k, group) in caches.iter().enumerate() {
            let mut g_row = gx.row(k).to_vec();
            if self.normalize_x {
                // d(y/‖y‖) = (I − x̂x̂ᵀ)/‖y‖
                let xr = x.row(k);
                let proj = dot(xr, &g_row);
                g_row.iter_mut().zip(xr).for_each(|(g, xi)| *g = (*g - proj * xi) / norms[k]);
            }
            let t = group.len() as f64;
            g_row.iter_mut().for_each(|g| *g /= t);
            for cache in group {
                encoder::backward(self.params, adapters, cache, &g_row, &mut grads);
            }
        }
        Ok((report, grads))
    }

    pub fn loss(&self, adapters: &[LoraAdapter], lambda: f64) -> Result<LossReport> {
        loss(&self.prototypes(adapters)?, &self.v, lambda)
    }
}

/// Concatenates every adapter's A then B into one vector.
pub fn flatten_adapters(adapters: &[LoraAdapter]) -> Vec<f64> {
    adapters.iter().flat_map(|a| a.a.data().iter().chain(a.b.data()).copied()).collect()
}

pub fn flatten_grads(grads: &[AdapterGrad]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.a.iter().chain(&g.b).copied()).collect()
}

/// Inverse of [`flatten_adapters`].
pub fn unflatten_adapters(adapters: &mut [LoraAdapter], flat: &[f64]) {
    let mut off = 0;
    for ad in adapters.iter_mut() {
        let na = ad.a.data().len();
        ad.a.data_mut().copy_from_slice(&flat[off..off + na]);
        off += na;
        let nb = ad.b.data().len();
        ad.b.data_mut().copy_from_slice(&flat[off..off + nb]);
        off += nb;
    }
    debug_assert_eq!(off, flat.len());
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let x = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(loss(&x, &x, 2.0).unwrap().total, 0.0);

        let x = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let r = loss(&x, &x, 1.0).unwrap();
        assert_eq!((r.fidelity, r.penalty, r.total), (0.0, 2.0, 2.0));

        let r = loss(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]]), 0.0).unwrap();
        assert_eq!(r.total, 2.0);

        assert!(matches!(loss(&m(&[&[1.0]]), &m(&[&[1.0, 0.0]]), 1.0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gradient_special_cases() {
        let x = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert!(loss_grad_x(&x, &x, 3.0).unwrap().data().iter().all(|&g| g == 0.0));
        let v = m(&[&[0.5, 0.1, 0.0], &[0.2, 0.9, 0.3]]);
        let g = loss_grad_x(&x, &v, 0.0).unwrap();
        assert_eq!(g.data(), x.sub(&v).unwrap().scale(2.0).data());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = EmbeddingMatrix::new(4, 6, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let v = EmbeddingMatrix::new(4, 6, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let g = loss_grad_x(&x, &v, 2.0).unwrap();
        let f = |p: &[f64]| loss(&EmbeddingMatrix::new(4, 6, p.to_vec()).unwrap(), &v, 2.0).unwrap().total;
        let err = grad_check(f, g.data(), x.data(), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn extended_check_on_near_stationary_point() {
        // Near-orthonormal X close to V: gradients are tiny, yet the check stays tight.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = EmbeddingMatrix::new(5, 12, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = crate::solvers::procrustes(&v).unwrap();
        let err = grad_check_x(&x, &v, 2.0, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let ext = loss_extended(x.data(), &v, 2.0).unwrap().to_f64();
        assert!((ext - loss(&x, &v, 2.0).unwrap().total).abs() < 1e-12 * ext.max(1.0));
    }

    #[test]
    fn lambda_schedule() {
        let c = ObjectiveConfig::default();
        assert_eq!(lambda_at(&c, 0), 2.0);
        assert!((lambda_at(&c, 1) - 2.3).abs() < 1e-12);
        assert!((lambda_at(&c, 2) - 2.645).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig { lambda0: -1.0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { lambda_growth: 0.9, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig::default().validate().is_ok());
    }

    #[test]
    fn grad_check_examples() {
        let p = [0.3, -1.2, 2.0];
        let analytic: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let e = grad_check(|q| q.iter().map(|x| x * x).sum(), &analytic, &p, 1e-5).unwrap();
        assert!(e < 1e-9);
        // constant function: zero analytic gradient passes, nonzero gives error ~1
        assert_eq!(grad_check(|_| 4.0, &[0.0; 3], &p, 1e-5).unwrap(), 0.0);
        assert!((grad_check(|_| 4.0, &[1.0, 0.0, 0.0], &p, 1e-5).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(grad_check(|_| f64::NAN, &[0.0], &[0.0], 1e-5), Err(Error::NonFinite { coord: 0 })));
        assert!(grad_check(|_| 0.0, &[0.0], &[0.0], 0.0).is_err());
    }
}
