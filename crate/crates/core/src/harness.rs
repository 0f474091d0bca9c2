//! Synthetic confounded-class data, zero-shot evaluation and stream protocols.
//!
//! The synthetic generator places K class directions on the unit sphere with chosen
//! cosines for "confusion pairs", draws noisy unit features around them, and builds
//! misaligned initial prototypes: each is pulled toward its confusion partners and
//! toward a shared hub direction, the way text prototypes of related categories tend
//! to crowd together.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{argmax_lowest, cosine_assign};
use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{self, dot, norm, EmbeddingMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub i: usize,
    pub j: usize,
    pub rho: f64,
}

impl ConfusionPair {
    /// Parses `i:j:rho`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidConfig(format!("confusion pair {s:?} must look like i:j:rho"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(Self {
            i: parts[0].trim().parse().map_err(|_| bad())?,
            j: parts[1].trim().parse().map_err(|_| bad())?,
            rho: parts[2].trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub k: usize,
    pub d: usize,
    pub n_per_class: usize,
    pub confusion_pairs: Vec<ConfusionPair>,
    /// Per-coordinate standard deviation of feature noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Weight of confusion partners' directions mixed into each initial prototype.
    pub prototype_pull: f64,
    /// Scale of the shared hub direction in initial prototypes (per class × U(0,1)).
    pub text_bias: f64,
    /// Isotropic noise norm added to initial prototypes.
    pub text_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::benchmark(0)
    }
}

impl SyntheticSpec {
    /// The default confounded benchmark: K = 10, d = 64, three pairs at ρ = 0.9,
    /// σ = 0.25, 50 samples per class.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            k: 10,
            d: 64,
            n_per_class: 50,
            confusion_pairs: [(0, 1), (2, 3), (4, 5)]
                .into_iter()
                .map(|(i, j)| ConfusionPair { i, j, rho: 0.9 })
                .collect(),
            noise_sigma: 0.25,
            seed,
            prototype_pull: 0.3,
            text_bias: 1.5,
            text_noise: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k == 0 || self.d == 0 || self.n_per_class == 0 {
            return bad(format!("k, d and n_per_class must be >= 1 (got {}, {}, {})", self.k, self.d, self.n_per_class));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be >= 0, got {}", self.noise_sigma));
        }
        for (name, v) in [("prototype_pull", self.prototype_pull), ("text_bias", self.text_bias), ("text_noise", self.text_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        let mut seen = BTreeSet::new();
        for p in &self.confusion_pairs {
            if p.i == p.j || p.i >= self.k || p.j >= self.k {
                return bad(format!("confusion pair {}:{} must be two distinct classes below {}", p.i, p.j, self.k));
            }
            if !(0.0..1.0).contains(&p.rho) {
                return bad(format!("confusion cosine must be in [0, 1), got {}", p.rho));
            }
            if !seen.insert((p.i.min(p.j), p.i.max(p.j))) {
                return bad(format!("confusion pair {}:{} listed twice", p.i, p.j));
            }
        }
        Ok(())
    }

    fn partners(&self, c: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .confusion_pairs
            .iter()
            .filter_map(|p| match (p.i == c, p.j == c) {
                (true, _) => Some((p.j, p.rho)),
                (_, true) => Some((p.i, p.rho)),
                _ => None,
            })
            .collect();
        out.sort_by_key(|&(o, _)| o);
        out
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub features: EmbeddingMatrix,
    pub labels: Vec<usize>,
    pub directions: EmbeddingMatrix,
    pub initial_prototypes: EmbeddingMatrix,
    pub class_names: Vec<String>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Orthonormal basis of the span of `vs` (modified Gram-Schmidt, twice).
fn orthonormal_basis(vs: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let mut r = v.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&r, q);
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm(&r);
        if n > 1e-10 {
            basis.push(r.into_iter().map(|a| a / n).collect());
        }
    }
    basis
}

/// Class directions with exact cosines on the confusion pairs.
///
/// Classes are placed in index order. A class whose earlier partners are P gets
/// `Σ a_p dir_p + sqrt(1 − ‖·‖²)·w` with `G_P a = ρ` and w a random unit vector
/// orthogonal to span P; classes without earlier partners are uniform on the sphere.
fn place_directions(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<EmbeddingMatrix> {
    let d = spec.d;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.k);
    for c in 0..spec.k {
        let earlier: Vec<(usize, f64)> = spec.partners(c).into_iter().filter(|&(o, _)| o < c).collect();
        let raw = gaussian_vec(rng, d);
        if earlier.is_empty() {
            let n = norm(&raw);
            dirs.push(raw.into_iter().map(|x| x / n).collect());
            continue;
        }
        let pvecs: Vec<&[f64]> = earlier.iter().map(|&(o, _)| dirs[o].as_slice()).collect();
        let p = EmbeddingMatrix::from_rows(&pvecs.iter().map(|v| v.to_vec()).collect::<Vec<_>>())?;
        let rho = EmbeddingMatrix::new(earlier.len(), 1, earlier.iter().map(|&(_, r)| r).collect())?;
        let infeasible = |why: &str| {
            Error::InfeasibleConfusion(format!("class {c} cannot reach the requested cosines with {:?}: {why}", earlier))
        };
        let a = linalg::solve(&p.gram(), &rho).map_err(|_| infeasible("partner Gram matrix is singular"))?;
        let mut v = vec![0.0; d];
        for (coef, pv) in a.data().iter().zip(&pvecs) {
            v.iter_mut().zip(pv.iter()).for_each(|(x, y)| *x += coef * y);
        }
        let schur = 1.0 - dot(&v, &v);
        if schur < -1e-12 {
            return Err(infeasible("partner Gram with the new class is not positive semidefinite"));
        }
        let schur = schur.max(0.0);
        if schur > 1e-12 {
            let basis = orthonormal_basis(&pvecs);
            let mut w = raw;
            for _ in 0..2 {
                for q in &basis {
                    let cf = dot(&w, q);
                    w.iter_mut().zip(q).for_each(|(a, b)| *a -= cf * b);
                }
            }
            let wn = norm(&w);
            if basis.len() >= d || wn < 1e-8 {
                return Err(infeasible("no dimension left orthogonal to the partners"));
            }
            let s = schur.sqrt() / wn;
            v.iter_mut().zip(&w).for_each(|(x, y)| *x += s * y);
        }
        let n = norm(&v);
        dirs.push(v.into_iter().map(|x| x / n).collect());
    }
    let mut m = EmbeddingMatrix::from_rows(&dirs)?;
    m.mark_unit_rows()?;
    Ok(m)
}

/// Distinct pronounceable pseudo-words, one per class.
pub fn synthetic_class_names(k: usize, seed: u64) -> Vec<String> {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e61_6d65);
    let mut seen = BTreeSet::new();
    let mut names = Vec::with_capacity(k);
    while names.len() < k {
        let syllables = 2 + names.len() / 64;
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS[rng.gen_range(0..ONSETS.len())], VOWELS[rng.gen_range(0..VOWELS.len())]))
            .collect();
        if seen.insert(w.clone()) {
            names.push(w);
        }
    }
    names
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (k, d) = (spec.k, spec.d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let directions = place_directions(spec, &mut rng)?;

    let hub = {
        let h = gaussian_vec(&mut rng, d);
        let n = norm(&h);
        h.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut protos = Vec::with_capacity(k);
    for c in 0..k {
        let mut p = directions.row(c).to_vec();
        for (o, _) in spec.partners(c) {
            p.iter_mut().zip(directions.row(o)).for_each(|(x, y)| *x += spec.prototype_pull * y);
        }
        let a: f64 = rng.gen_range(0.0..1.0);
        p.iter_mut().zip(&hub).for_each(|(x, h)| *x += spec.text_bias * a * h);
        let xi = gaussian_vec(&mut rng, d);
        let s = spec.text_noise / (d as f64).sqrt();
        p.iter_mut().zip(&xi).for_each(|(x, z)| *x += s * z);
        protos.push(p);
    }
    let initial_prototypes = EmbeddingMatrix::from_rows(&protos)?.normalize_rows()?;

    let n = k * spec.n_per_class;
    let mut feats = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for _ in 0..spec.n_per_class {
            let mut f: Vec<f64> = directions.row(c).to_vec();
            if spec.noise_sigma > 0.0 {
                f.iter_mut().for_each(|x| *x += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal));
            }
            feats.extend(f);
            labels.push(c);
        }
    }
    let features = EmbeddingMatrix::new(n, d, feats)?.normalize_rows()?;
    Ok(SyntheticData {
        features,
        labels,
        directions,
        initial_prototypes,
        class_names: synthetic_class_names(k, spec.seed),
    })
}

fn check_labels(features: &EmbeddingMatrix, labels: &[usize], k: usize) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::shape(format!("{} labels", features.rows()), labels.len().to_string()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::DimensionMismatch(format!("label {bad} out of range for K = {k}")));
    }
    Ok(())
}

/// Fraction of samples whose cosine-argmax prototype is their label.
pub fn zero_shot_accuracy(features: &EmbeddingMatrix, labels: &[usize], prototypes: &EmbeddingMatrix) -> Result<f64> {
    check_labels(features, labels, prototypes.rows())?;
    let a = cosine_assign(features, prototypes)?;
    let correct = a.labels().iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    BatchRealistic,
    OnlineDirichlet,
    /// Classes one after another (the γ → 0 limit of the online stream).
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub mode: StreamMode,
    pub batch_size: usize,
    /// Tasks in batch mode, streams in the online modes.
    pub n_tasks: usize,
    pub keff_range: (usize, usize),
    pub gamma: f64,
    pub seed: u64,
    /// Redraw Dirichlet proportions for every batch instead of once per stream.
    pub resample_per_batch: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            mode: StreamMode::BatchRealistic,
            batch_size: 64,
            n_tasks: 1000,
            keff_range: (1, 4),
            gamma: 0.01,
            seed: 0,
            resample_per_batch: false,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.n_tasks == 0 {
            return bad("number of tasks must be >= 1".into());
        }
        let (lo, hi) = self.keff_range;
        if self.mode == StreamMode::BatchRealistic && !(1 <= lo && lo <= hi && hi <= k) {
            return bad(format!("effective-class range {lo}:{hi} must satisfy 1 <= lo <= hi <= K = {k}"));
        }
        if self.mode == StreamMode::OnlineDirichlet && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        Ok(())
    }
}

/// One evaluation unit: a batch-realistic task, or one whole online stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTask {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Sorted classes the classifier may predict.
    pub present_classes: Vec<usize>,
    pub keff: Option<usize>,
    pub gamma: Option<f64>,
    /// Some samples were drawn with replacement because a pool ran out.
    pub with_replacement: bool,
}

impl StreamTask {
    /// Concatenates ordered batches into one task (used to score a whole stream).
    pub fn merge(batches: &[StreamTask]) -> Self {
        let mut present = BTreeSet::new();
        let mut t = StreamTask {
            indices: Vec::new(),
            labels: Vec::new(),
            present_classes: Vec::new(),
            keff: None,
            gamma: batches.first().and_then(|b| b.gamma),
            with_replacement: false,
        };
        for b in batches {
            t.indices.extend(&b.indices);
            t.labels.extend(&b.labels);
            present.extend(&b.present_classes);
            t.with_replacement |= b.with_replacement;
        }
        t.present_classes = present.into_iter().collect();
        t
    }
}

fn class_pools(labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let mut pools = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::DimensionMismatch(format!("label {l} out of range for K = {k}")));
        }
        pools[l].push(i);
    }
    Ok(pools)
}

/// Batch-realistic tasks: K_eff ~ U{lo..hi}, that many distinct classes, then
/// `batch_size` samples from their pooled indices.
///
/// When `batch_size ≥ K_eff` every drawn class contributes at least one sample; the
/// rest are drawn from the union without replacement when it is large enough.
pub fn sample_batch_tasks(labels: &[usize], k: usize, cfg: &StreamConfig) -> Result<Vec<StreamTask>> {
    cfg.validate(k)?;
    let pools = class_pools(labels, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.keff_range;
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let keff = rng.gen_range(lo..=hi);
        let mut classes = index::sample(&mut rng, k, keff).into_vec();
        classes.sort_unstable();
        if let Some(&c) = classes.iter().find(|&&c| pools[c].is_empty()) {
            return Err(Error::EmptyClassPool(format!("task {t} drew class {c}, which has no samples")));
        }
        let b = cfg.batch_size;
        let mut chosen: Vec<usize> = Vec::with_capacity(b);
        if b >= keff {
            for &c in &classes {
                chosen.push(pools[c][rng.gen_range(0..pools[c].len())]);
            }
        }
        let taken: BTreeSet<usize> = chosen.iter().copied().collect();
        let rest: Vec<usize> =
            classes.iter().flat_map(|&c| pools[c].iter().copied()).filter(|i| !taken.contains(i)).collect();
        let need = b - chosen.len();
        let mut with_replacement = false;
        if need <= rest.len() {
            chosen.extend(index::sample(&mut rng, rest.len(), need).into_iter().map(|j| rest[j]));
        } else {
            with_replacement = true;
            let union: Vec<usize> = classes.iter().flat_map(|&c| pools[c].iter().copied()).collect();
            chosen.extend(rest.iter().copied());
            while chosen.len() < b {
                chosen.push(union[rng.gen_range(0..union.len())]);
            }
        }
        let task_labels = chosen.iter().map(|&i| labels[i]).collect();
        tasks.push(StreamTask {
            indices: chosen,
            labels: task_labels,
            present_classes: classes,
            keff: Some(keff),
            gamma: None,
            with_replacement,
        });
    }
    Ok(tasks)
}

/// Draws from Dirichlet(γ·1_K).
///
/// Gamma variates are combined in log space, `ln G(γ) = ln G(γ+1) + ln(U)/γ`, because
/// for γ ≪ 1 the raw Gamma(γ) draws underflow to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize, gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) || k == 0 {
        return Err(Error::InvalidConfig(format!("Dirichlet needs gamma > 0 and K >= 1 (got {gamma}, {k})")));
    }
    let g = Gamma::new(gamma + 1.0, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            g.sample(rng).ln() + u.ln() / gamma
        })
        .collect();
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / s).collect())
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total mass: last class with mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Per-class sampler that exhausts a shuffled pool before falling back to replacement.
struct PoolCursor {
    order: Vec<usize>,
    next: usize,
}

impl PoolCursor {
    fn draw(&mut self, rng: &mut ChaCha8Rng, replaced: &mut bool) -> usize {
        if self.next < self.order.len() {
            self.next += 1;
            self.order[self.next - 1]
        } else {
            *replaced = true;
            self.order[rng.gen_range(0..self.order.len())]
        }
    }
}

/// Online streams: `n_tasks` streams of `ceil(N / batch_size)` ordered batches each.
pub fn sample_online_streams(labels: &[usize], k: usize, cfg: &StreamConfig) -> Result<Vec<Vec<StreamTask>>> {
    cfg.validate(k)?;
    let pools = class_pools(labels, k)?;
    let nonempty: Vec<usize> = (0..k).filter(|&c| !pools[c].is_empty()).collect();
    if nonempty.is_empty() {
        return Err(Error::EmptyClassPool("dataset has no samples".into()));
    }
    let all_classes: Vec<usize> = (0..k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut streams = Vec::with_capacity(cfg.n_tasks);
    for _ in 0..cfg.n_tasks {
        let stream = match cfg.mode {
            StreamMode::Separate => separate_stream(&pools, cfg.batch_size, &mut rng),
            _ => dirichlet_stream(labels, &pools, &nonempty, &all_classes, cfg, &mut rng)?,
        };
        streams.push(stream);
    }
    Ok(streams)
}

fn dirichlet_stream(
    labels: &[usize],
    pools: &[Vec<usize>],
    nonempty: &[usize],
    all_classes: &[usize],
    cfg: &StreamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StreamTask>> {
    let mut cursors: Vec<PoolCursor> = pools
        .iter()
        .map(|p| {
            let mut order = p.clone();
            order.shuffle(rng);
            PoolCursor { order, next: 0 }
        })
        .collect();
    let n_batches = labels.len().div_ceil(cfg.batch_size);
    // Proportions live on the non-empty classes only.
    let mut props = sample_dirichlet(rng, nonempty.len(), cfg.gamma)?;
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        if b > 0 && cfg.resample_per_batch {
            props = sample_dirichlet(rng, nonempty.len(), cfg.gamma)?;
        }
        let mut replaced = false;
        let mut idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let c = nonempty[categorical(rng, &props)];
            idx.push(cursors[c].draw(rng, &mut replaced));
        }
        batches.push(StreamTask {
            labels: idx.iter().map(|&i| labels[i]).collect(),
            indices: idx,
            present_classes: all_classes.to_vec(),
            keff: None,
            gamma: Some(cfg.gamma),
            with_replacement: replaced,
        });
    }
    Ok(batches)
}

fn separate_stream(pools: &[Vec<usize>], batch: usize, rng: &mut ChaCha8Rng) -> Vec<StreamTask> {
    let k = pools.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for c in order {
        let mut pool = pools[c].clone();
        pool.shuffle(rng);
        for chunk in pool.chunks(batch) {
            batches.push(StreamTask {
                indices: chunk.to_vec(),
                labels: vec![c; chunk.len()],
                present_classes: (0..k).collect(),
                keff: None,
                gamma: Some(0.0),
                with_replacement: false,
            });
        }
    }
    batches
}

/// Accuracy of one task; predictions limited to `present_classes` when `restrict`.
pub fn task_accuracy(task: &StreamTask, features: &EmbeddingMatrix, prototypes: &EmbeddingMatrix, restrict: bool) -> f64 {
    if task.indices.is_empty() {
        return 0.0;
    }
    let all: Vec<usize>;
    let candidates: &[usize] = if restrict {
        &task.present_classes
    } else {
        all = (0..prototypes.rows()).collect();
        &all
    };
    let correct = task
        .indices
        .iter()
        .zip(&task.labels)
        .filter(|(&i, &l)| {
            let f = features.row(i);
            let best = argmax_lowest(candidates.iter().map(|&c| dot(f, prototypes.row(c)))).expect("non-empty classes");
            candidates[best] == l
        })
        .count();
    correct as f64 / task.indices.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub mean_accuracy: f64,
    pub per_task: Vec<f64>,
}

/// Per-task accuracies (parallel over tasks) and their mean.
pub fn evaluate_over_tasks(
    tasks: &[StreamTask],
    features: &EmbeddingMatrix,
    prototypes: &EmbeddingMatrix,
    restrict: bool,
) -> Result<TaskEvaluation> {
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("no tasks to evaluate".into()));
    }
    if !features.unit_rows() || !prototypes.unit_rows() {
        return Err(Error::NotNormalized);
    }
    if features.cols() != prototypes.cols() {
        return Err(Error::shape(format!("{} columns", prototypes.cols()), features.cols().to_string()));
    }
    let k = prototypes.rows();
    for t in tasks {
        if t.indices.iter().any(|&i| i >= features.rows()) || t.present_classes.iter().any(|&c| c >= k) {
            return Err(Error::shape(
                format!("indices < {} and classes < {k}", features.rows()),
                "out-of-range task entry",
            ));
        }
    }
    let per_task: Vec<f64> = tasks.par_iter().map(|t| task_accuracy(t, features, prototypes, restrict)).collect();
    let mean_accuracy = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(TaskEvaluation { mean_accuracy, per_task })
}

/// One line of a stream-evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_eff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub accuracy: f64,
}

pub fn task_records(tasks: &[StreamTask], eval: &TaskEvaluation) -> Vec<TaskRecord> {
    tasks
        .iter()
        .zip(&eval.per_task)
        .enumerate()
        .map(|(task_id, (t, &accuracy))| TaskRecord { task_id, k_eff: t.keff, gamma: t.gamma, accuracy })
        .collect()
}

/// Features, labels and (for synthetic data) the generating directions and initial
/// prototypes, as stored on disk.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub features: EmbeddingMatrix,
    pub labels: Vec<usize>,
    pub k: usize,
    pub class_names: Vec<String>,
    pub directions: Option<EmbeddingMatrix>,
    pub initial_prototypes: Option<EmbeddingMatrix>,
}

pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.txt";
pub const DIRECTIONS_FILE: &str = "directions.csv";
pub const PROTOTYPES_FILE: &str = "prototypes.csv";
pub const CLASS_NAMES_FILE: &str = "classes.txt";
pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub seed: Option<u64>,
    pub spec: Option<SyntheticSpec>,
}

impl DatasetBundle {
    pub fn from_synthetic(data: SyntheticData) -> Self {
        Self {
            k: data.directions.rows(),
            features: data.features,
            labels: data.labels,
            class_names: data.class_names,
            directions: Some(data.directions),
            initial_prototypes: Some(data.initial_prototypes),
        }
    }

    /// Writes the bundle files and returns their paths (dataset info last).
    pub fn save(&self, dir: &Path, spec: Option<&SyntheticSpec>) -> Result<Vec<std::path::PathBuf>> {
        let mut written = Vec::new();
        let fp = dir.join(FEATURES_FILE);
        io::save_matrix(&fp, &self.features)?;
        written.push(fp);
        let lp = dir.join(LABELS_FILE);
        io::save_labels(&lp, &self.labels)?;
        written.push(lp);
        let np = dir.join(CLASS_NAMES_FILE);
        io::write_atomic(&np, (self.class_names.join("\n") + "\n").as_bytes())?;
        written.push(np);
        if let Some(dm) = &self.directions {
            let p = dir.join(DIRECTIONS_FILE);
            io::save_matrix(&p, dm)?;
            written.push(p);
        }
        if let Some(pm) = &self.initial_prototypes {
            let p = dir.join(PROTOTYPES_FILE);
            io::save_matrix(&p, pm)?;
            written.push(p);
        }
        let info = DatasetInfo {
            k: self.k,
            d: self.features.cols(),
            n: self.features.rows(),
            seed: spec.map(|s| s.seed),
            spec: spec.cloned(),
        };
        let ip = dir.join(DATASET_MANIFEST);
        io::write_json(&ip, &info)?;
        written.push(ip);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ip = dir.join(DATASET_MANIFEST);
        let info: DatasetInfo = serde_json::from_str(&std::fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?)?;
        let features = io::load_matrix(&dir.join(FEATURES_FILE))?;
        let labels = io::load_labels(&dir.join(LABELS_FILE))?;
        check_labels(&features, &labels, info.k)?;
        let opt = |name: &str| -> Result<Option<EmbeddingMatrix>> {
            let p = dir.join(name);
            if p.exists() {
                io::load_matrix(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        let np = dir.join(CLASS_NAMES_FILE);
        let class_names = if np.exists() {
            crate::prototype::read_lines(&np)?
        } else {
            (0..info.k).map(|c| format!("class {c}")).collect()
        };
        Ok(Self {
            features,
            labels,
            k: info.k,
            class_names,
            directions: opt(DIRECTIONS_FILE)?,
            initial_prototypes: opt(PROTOTYPES_FILE)?,
        })
    }
}
