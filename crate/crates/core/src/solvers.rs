//! Ways to turn initial prototypes V into refined prototypes X.
//!
//! * `mean`: the λ = 0 minimizer, X = V.
//! * `svd`: the hard-constraint minimizer over row-orthonormal X, X = U·Rᵀ.
//! * `soft_direct`: AdamW on the penalized loss, optimizing X itself.
//! * `soft_lora`: AdamW on the penalized loss, optimizing low-rank adapters of a frozen
//!   toy encoder whose template-averaged outputs form X.

use serde::{Deserialize, Serialize};

use crate::encoder::{self, AdapterGrad, EncoderParams, LoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::{self, EmbeddingMatrix};
use crate::objective::{self, lambda_at, EncoderObjective, LossReport, ObjectiveConfig};
use crate::prototype::{PrototypeSet, TemplateSet};

/// Learning rate used for a pretrained tower; far too small for the toy encoder.
pub const PRETRAINED_LEARNING_RATE: f64 = 5e-6;

/// Smallest singular value accepted by [`solve_procrustes`].
pub const RANK_TOL: f64 = 1e-10;

/// Absolute divergence threshold; see [`divergence_limit`].
pub const DIVERGENCE_ABS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    DirectX,
    LoraEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub lora_rank: usize,
    /// Echoed in logs only; every step uses all classes.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 50,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mode: TrainMode::DirectX,
            lora_rank: encoder::DEFAULT_RANK,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    /// Defaults with the pretrained-tower learning rate.
    pub fn pretrained() -> Self {
        Self { learning_rate: PRETRAINED_LEARNING_RATE, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mean,
    Svd,
    SoftDirect,
    SoftLora,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mean => "mean",
            Method::Svd => "svd",
            Method::SoftDirect => "soft_direct",
            Method::SoftLora => "soft_lora",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Method::Mean),
            "svd" => Ok(Method::Svd),
            "soft_direct" | "soft-direct" => Ok(Method::SoftDirect),
            "soft_lora" | "soft-lora" => Ok(Method::SoftLora),
            other => Err(Error::InvalidConfig(format!(
                "unknown method {other:?} (expected mean, svd, soft_direct, soft_lora)"
            ))),
        }
    }
}

/// One training-log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Debug, Clone)]
pub struct RefinementResult {
    pub x: EmbeddingMatrix,
    /// Loss at the start of every step, before the update.
    pub history: Vec<StepRecord>,
    pub method: Method,
}

impl RefinementResult {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.history {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss.total;
            out[r.epoch].1 += 1;
        }
        out.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
    }
}

pub fn solve_mean(v: &PrototypeSet) -> RefinementResult {
    RefinementResult { x: v.v.clone(), history: Vec::new(), method: Method::Mean }
}

/// Closest row-orthonormal matrix to V in Frobenius norm.
pub fn solve_procrustes(v: &PrototypeSet) -> Result<RefinementResult> {
    Ok(RefinementResult { x: procrustes(&v.v)?, history: Vec::new(), method: Method::Svd })
}

pub fn procrustes(v: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let f = linalg::svd(v)?;
    if f.sigma_min() <= RANK_TOL {
        return Err(Error::RankDeficient { sigma_min: f.sigma_min() });
    }
    f.u.matmul_t(&f.r)
}

/// Divergence is declared when the total exceeds this or is non-finite.
pub fn divergence_limit(initial_total: f64) -> f64 {
    DIVERGENCE_ABS.max(1e3 * initial_total)
}

/// AdamW with decoupled weight decay over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, eps, weight_decay, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn from_config(n: usize, tc: &TrainConfig, weight_decay: f64) -> Self {
        Self::new(n, tc.learning_rate, tc.beta1, tc.beta2, tc.eps, weight_decay)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            *p = *p * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Gradients this small are round-off; adaptive scaling would otherwise blow them up
/// into steps of size ~lr and walk away from an exact stationary point.
pub const STATIONARY_GRAD: f64 = 1e-12;

fn is_stationary(grad: &[f64]) -> bool {
    grad.iter().all(|g| g.abs() <= STATIONARY_GRAD)
}

fn check_divergence(report: &LossReport, limit: f64, epoch: usize, step: usize) -> Result<()> {
    if !report.total.is_finite() || report.total > limit {
        return Err(Error::DivergedLoss { epoch, step, total: report.total });
    }
    Ok(())
}

/// Soft-penalty refinement optimizing X directly, starting from V.
///
/// Weight decay is not applied here: decaying X toward the origin would move the
/// minimizer away from V even at λ = 0.
pub fn solve_soft_direct(v: &PrototypeSet, obj: &ObjectiveConfig, tc: &TrainConfig) -> Result<RefinementResult> {
    obj.validate()?;
    tc.validate()?;
    let (k, d) = v.v.shape();
    let mut x = v.v.data().to_vec();
    let mut opt = AdamW::from_config(x.len(), tc, 0.0);
    let mut history = Vec::with_capacity(tc.total_steps());
    let mut limit = f64::INFINITY;
    for epoch in 0..tc.epochs {
        let lambda = lambda_at(obj, epoch);
        for step in 0..tc.steps_per_epoch {
            if x.iter().any(|e| !e.is_finite()) {
                return Err(Error::DivergedLoss { epoch, step, total: f64::NAN });
            }
            let xm = EmbeddingMatrix::new(k, d, x.clone())?;
            let (report, grad) = objective::loss_and_grad(&xm, &v.v, lambda)?;
            if history.is_empty() {
                limit = divergence_limit(report.total);
            }
            check_divergence(&report, limit, epoch, step)?;
            history.push(StepRecord { epoch, step, loss: report });
            if !is_stationary(grad.data()) {
                opt.step(&mut x, grad.data());
            }
        }
    }
    let x = EmbeddingMatrix::new(k, d, x).map_err(|_| Error::DivergedLoss {
        epoch: tc.epochs,
        step: 0,
        total: f64::NAN,
    })?;
    Ok(RefinementResult { x, history, method: Method::SoftDirect })
}

/// Output of [`solve_soft_lora`].
#[derive(Debug, Clone)]
pub struct LoraRefinement {
    pub result: RefinementResult,
    pub adapters: Vec<LoraAdapter>,
    /// Frozen targets computed once from the initial encoder.
    pub v: EmbeddingMatrix,
}

/// Soft-penalty refinement through low-rank adapters on a frozen encoder.
///
/// V is the encoder's initial X (B = 0 makes the adapters an identity), computed once.
/// Only the adapter factors move.
pub fn solve_soft_lora(
    names: &[String],
    templates: &TemplateSet,
    params: &EncoderParams,
    obj: &ObjectiveConfig,
    tc: &TrainConfig,
) -> Result<LoraRefinement> {
    obj.validate()?;
    tc.validate()?;
    let mut adapters = encoder::default_adapters(params, tc.lora_rank, tc.seed)?;
    let v = EncoderObjective::new(
        params,
        names,
        templates,
        obj.x_mode,
        obj.normalize_x,
        EmbeddingMatrix::zeros(names.len(), params.dims.out_dim),
    )?
    .prototypes(&adapters)?;
    let problem = EncoderObjective::new(params, names, templates, obj.x_mode, obj.normalize_x, v.clone())?;

    let mut theta = objective::flatten_adapters(&adapters);
    let mut opt = AdamW::from_config(theta.len(), tc, tc.weight_decay);
    let mut history = Vec::with_capacity(tc.total_steps());
    let mut limit = f64::INFINITY;
    for epoch in 0..tc.epochs {
        let lambda = lambda_at(obj, epoch);
        for step in 0..tc.steps_per_epoch {
            let (report, grads) = problem.evaluate(&adapters, lambda).map_err(|e| match e {
                Error::DimensionMismatch(_) | Error::ZeroRow { .. } if theta.iter().any(|t| !t.is_finite()) => {
                    Error::DivergedLoss { epoch, step, total: f64::NAN }
                }
                Error::DivergedLoss { total, .. } => Error::DivergedLoss { epoch, step, total },
                other => other,
            })?;
            if history.is_empty() {
                limit = divergence_limit(report.total);
            }
            check_divergence(&report, limit, epoch, step)?;
            history.push(StepRecord { epoch, step, loss: report });
            let g = objective::flatten_grads(&grads);
            if !is_stationary(&g) {
                opt.step(&mut theta, &g);
                objective::unflatten_adapters(&mut adapters, &theta);
            }
        }
    }
    let x = problem.prototypes(&adapters).map_err(|_| Error::DivergedLoss {
        epoch: tc.epochs,
        step: 0,
        total: f64::NAN,
    })?;
    Ok(LoraRefinement { result: RefinementResult { x, history, method: Method::SoftLora }, adapters, v })
}

/// Gradient of the adapter loss as a flat vector, for external checking.
pub fn adapter_gradient(problem: &EncoderObjective<'_>, adapters: &[LoraAdapter], lambda: f64) -> Result<(f64, Vec<f64>)> {
    let (report, grads): (LossReport, Vec<AdapterGrad>) = problem.evaluate(adapters, lambda)?;
    Ok((report.total, objective::flatten_grads(&grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn pset(rows: &[&[f64]]) -> PrototypeSet {
        PrototypeSet::from_matrix(
            EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
        )
    }

    fn gaussian(rng: &mut ChaCha8Rng, k: usize, d: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::new(k, d, (0..k * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    /// Row-orthonormal Q via Gram-Schmidt on Gaussian rows.
    fn random_orthonormal(rng: &mut ChaCha8Rng, k: usize, d: usize) -> EmbeddingMatrix {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < k {
            let mut r: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for q in &rows {
                let c = linalg::dot(&r, q);
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
            let n = linalg::norm(&r);
            if n > 1e-6 {
                rows.push(r.into_iter().map(|a| a / n).collect());
            }
        }
        EmbeddingMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn mean_is_bit_exact() {
        let p = pset(&[&[0.3, 0.4], &[0.3, 0.4]]);
        let r = solve_mean(&p);
        assert_eq!(r.x.data(), p.v.data());
        assert!(r.history.is_empty());
        assert_eq!(loss(&r.x, &p.v, 1.0).unwrap().penalty, (0.25f64 - 1.0).powi(2) * 2.0 + 0.25f64.powi(2) * 2.0);
        let dup = pset(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(loss(&solve_mean(&dup).x, &dup.v, 1.0).unwrap().penalty, 2.0);
    }

    #[test]
    fn procrustes_examples() {
        let r = solve_procrustes(&pset(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]])).unwrap();
        let want = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert!(r.x.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthonormal(&mut rng, 4, 9);
        let r = solve_procrustes(&PrototypeSet::from_matrix(q.clone())).unwrap();
        assert!(r.x.sub(&q).unwrap().frobenius() < 1e-10);

        assert!(matches!(
            solve_procrustes(&pset(&[&[1.0, 0.0], &[1.0, 0.0]])),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn procrustes_beats_random_orthonormal_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = gaussian(&mut rng, 5, 12);
        let x = procrustes(&v).unwrap();
        let mut resid = x.gram();
        for i in 0..5 {
            resid.set(i, i, resid.get(i, i) - 1.0);
        }
        assert!(resid.frobenius() < 1e-8);
        let best = x.sub(&v).unwrap().frobenius();
        for _ in 0..1000 {
            let q = random_orthonormal(&mut rng, 5, 12);
            assert!(best <= q.sub(&v).unwrap().frobenius() + 1e-9);
        }
    }

    #[test]
    fn soft_direct_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = PrototypeSet::from_matrix(random_orthonormal(&mut rng, 3, 8));
        let r = solve_soft_direct(&q, &ObjectiveConfig::default(), &TrainConfig::default()).unwrap();
        let dev = r.x.sub(&q.v).unwrap().data().iter().fold(0.0f64, |m, e| m.max(e.abs()));
        assert!(dev < 1e-6, "{dev} {:?}", r.history[0]);

        let v = PrototypeSet::from_matrix(gaussian(&mut rng, 3, 8));
        let obj = ObjectiveConfig { lambda0: 0.0, ..Default::default() };
        let r = solve_soft_direct(&v, &obj, &TrainConfig::default()).unwrap();
        assert!(r.x.sub(&v.v).unwrap().data().iter().all(|e| e.abs() < 1e-9));
    }

    /// Two unit rows at 60°: the solver reduces the cosine, and the result agrees with
    /// a dense grid search over symmetric in-plane rotations of the pair.
    #[test]
    fn soft_direct_sixty_degrees_against_grid() {
        let h = 3f64.sqrt() / 2.0;
        let v = pset(&[&[1.0, 0.0, 0.0], &[0.5, h, 0.0]]);
        let obj = ObjectiveConfig { lambda0: 2.0, lambda_growth: 1.0, ..Default::default() };
        let tc = TrainConfig { learning_rate: 1e-2, ..Default::default() };
        let r = solve_soft_direct(&v, &obj, &tc).unwrap();
        let n = r.x.row_norms();
        let cos = linalg::dot(r.x.row(0), r.x.row(1)) / (n[0] * n[1]);
        assert!(cos.abs() < 0.5, "{cos}");

        // Grid over rows at angle ±a from the bisector with common scale s.
        let theta0 = std::f64::consts::FRAC_PI_6;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=2000 {
            let a = std::f64::consts::FRAC_PI_2 * i as f64 / 2000.0;
            for j in 0..=400 {
                let s = 0.8 + 0.4 * j as f64 / 400.0;
                let x = EmbeddingMatrix::from_rows(&[
                    vec![s * (theta0 - a).cos(), s * (theta0 - a).sin(), 0.0],
                    vec![s * (theta0 + a).cos(), s * (theta0 + a).sin(), 0.0],
                ])
                .unwrap();
                let t = loss(&x, &v.v, 2.0).unwrap().total;
                if t < best.0 {
                    best = (t, (2.0 * a).cos());
                }
            }
        }
        let final_total = loss(&r.x, &v.v, 2.0).unwrap().total;
        assert!(final_total <= best.0 + 1e-4, "{final_total} vs grid {}", best.0);
        assert!((cos - best.1).abs() < 1e-2, "{cos} vs grid {}", best.1);
    }

    #[test]
    fn soft_direct_large_lambda_orthogonalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = PrototypeSet::from_matrix(gaussian(&mut rng, 8, 32).normalize_rows().unwrap());
        let obj = ObjectiveConfig { lambda0: 50.0, lambda_growth: 1.15, ..Default::default() };
        let tc = TrainConfig { epochs: 40, steps_per_epoch: 50, learning_rate: 1e-2, ..Default::default() };
        let r = solve_soft_direct(&v, &obj, &tc).unwrap();
        assert!(r.x.gram().max_abs_offdiag() < 0.05);
    }

    #[test]
    fn soft_direct_epoch_means_descend() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = PrototypeSet::from_matrix(gaussian(&mut rng, 6, 16).normalize_rows().unwrap());

        // Constant λ: plain descent.
        let obj = ObjectiveConfig { lambda_growth: 1.0, ..Default::default() };
        let r = solve_soft_direct(&v, &obj, &TrainConfig::default()).unwrap();
        let means = r.epoch_means();
        assert_eq!(means.len(), 20);
        for w in means.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{means:?}");
        }

        // Growing λ: the optimal total itself grows with λ, so an epoch may exceed the
        // previous one by at most the λ ratio.
        let obj = ObjectiveConfig::default();
        let r = solve_soft_direct(&v, &obj, &TrainConfig::default()).unwrap();
        let means = r.epoch_means();
        for w in means.windows(2) {
            assert!(w[1] <= w[0] * obj.lambda_growth, "{means:?}");
        }
        assert!(means[1] < means[0]);
        let last = loss(&r.x, &v.v, lambda_at(&obj, 19)).unwrap().total;
        assert!(last <= r.history[0].loss.total);
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = PrototypeSet::from_matrix(gaussian(&mut rng, 4, 8));
        let obj = ObjectiveConfig { lambda0: 1e3, lambda_growth: 1.0, ..Default::default() };
        let tc = TrainConfig { learning_rate: 1e3, ..Default::default() };
        assert!(matches!(solve_soft_direct(&v, &obj, &tc), Err(Error::DivergedLoss { .. })));
    }

    #[test]
    fn adamw_matches_hand_computation() {
        let mut opt = AdamW::new(1, 0.1, 0.9, 0.999, 1e-8, 0.01);
        let mut p = [1.0];
        opt.step(&mut p, &[0.5]);
        // first step: mhat = g, vhat = g², update = lr·g/|g|
        let want = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::pretrained().learning_rate, 5e-6);
        assert_eq!(Method::parse("soft-lora").unwrap(), Method::SoftLora);
    }
}
