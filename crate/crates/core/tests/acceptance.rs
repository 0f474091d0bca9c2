//! Acceptance checks: one PASS/FAIL line per criterion, each with its runtime budget.
//!
//! Runs without the libtest harness so the report always prints in order. A failing
//! criterion is reported but only fails the process when `ACCEPTANCE_STRICT=1`, so that
//! `cargo test` still runs the remaining test targets.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use proto_forge::diagnostics::{self, alignment_to_class_means, AssignmentMatrix};
use proto_forge::encoder::{self, EncoderDims, EncoderParams};
use proto_forge::harness::{
    generate_synthetic, sample_batch_tasks, sample_dirichlet, sample_online_streams, zero_shot_accuracy,
    StreamConfig, StreamMode, SyntheticData, SyntheticSpec,
};
use proto_forge::linalg::dist_sq;
use proto_forge::objective::{self, grad_check, ObjectiveConfig, XMode};
use proto_forge::prototype::{PrototypeSet, TemplateSet};
use proto_forge::solvers::{self, TrainConfig, TrainMode};
use proto_forge::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = f();
    let elapsed = t0.elapsed();
    let in_time = elapsed <= budget;
    let pass = out.pass && in_time;
    let timing = if in_time { String::new() } else { " [over time budget]".to_owned() };
    println!(
        "{} [{id}] {title}: {} ({:.2}s of {:.0}s){timing}",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    pass
}

const SEEDS: u64 = 10;

fn unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
    common::random_unit(rng, n, d)
}

/// Within, total and between scatter computed from scratch.
fn scatter_oracle(f: &EmbeddingMatrix, labels: &[usize], k: usize) -> (f64, f64, f64) {
    let d = f.cols();
    let n = f.rows() as f64;
    let mut gmean = vec![0.0; d];
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &l) in f.row_iter().zip(labels) {
        for j in 0..d {
            gmean[j] += row[j] / n;
            means[l][j] += row[j];
        }
        counts[l] += 1;
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            m.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    let total = f.row_iter().map(|r| dist_sq(r, &gmean)).sum();
    let within = f.row_iter().zip(labels).map(|(r, &l)| dist_sq(r, &means[l])).sum();
    let between = (0..k).map(|c| counts[c] as f64 * dist_sq(&means[c], &gmean)).sum();
    (within, total, between)
}

fn c1_huygens() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut oracle_gap: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(2..=1000);
        let d = rng.gen_range(1..=128);
        let k = rng.gen_range(1..=20);
        let f = common::gaussian(&mut rng, n, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let u = AssignmentMatrix::from_labels(labels.clone(), k).unwrap();
        let s = diagnostics::huygens(&f, &u).unwrap();
        worst = worst.max((s.within - (s.total - s.between)).abs() / s.total.max(1.0));
        let (w, t, b) = scatter_oracle(&f, &labels, k);
        let scale = t.max(1.0);
        oracle_gap = oracle_gap.max(((s.within - w).abs() + (s.total - t).abs() + (s.between - b).abs()) / scale);
    }
    Outcome {
        pass: worst < 1e-9 && oracle_gap < 1e-9,
        detail: format!("max residual {worst:.2e}, max gap to direct scatter sums {oracle_gap:.2e} (tol 1e-9)"),
    }
}

fn c2_between_offdiag() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut oracle_gap: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let k = rng.gen_range(2..=30);
        let d = rng.gen_range(2..=64);
        let x = unit(&mut rng, k, d);
        let counts: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=100)).collect();
        let r = diagnostics::between_vs_offdiag(&x, &counts).unwrap();
        worst = worst.max(r.residual());
        // Between scatter of the prototypes replicated N_k times, from scratch.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, &nc) in counts.iter().enumerate() {
            for _ in 0..nc {
                rows.push(x.row(c).to_vec());
                labels.push(c);
            }
        }
        let (_, _, between) = scatter_oracle(&EmbeddingMatrix::from_rows(&rows).unwrap(), &labels, k);
        oracle_gap = oracle_gap.max((between - r.between).abs() / r.constant.max(1.0));
    }
    Outcome {
        pass: worst < 1e-9 && oracle_gap < 1e-9,
        detail: format!("max residual {worst:.2e}, between-scatter gap to replicated oracle {oracle_gap:.2e} (tol 1e-9)"),
    }
}

fn c3_gradients() -> Outcome {
    let mut x_err: f64 = 0.0;
    let mut chain_err: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let x = common::gaussian(&mut rng, 6, 32);
        let v = unit(&mut rng, 6, 32);
        let lambda = 2.0;
        let g = objective::loss_grad_x(&x, &v, lambda).unwrap();
        let base = common::x_loss_dd(x.data(), &v, lambda);
        let e = grad_check(|p| (common::x_loss_dd(p, &v, lambda) - base).to_f64(), g.data(), x.data(), 1e-5).unwrap();
        x_err = x_err.max(e);
        let f = common::chain_fixture(seed, 6, 32, 4);
        chain_err = chain_err.max(common::chain_grad_error(&f, XMode::Averaged, false, lambda));
    }
    Outcome {
        pass: x_err < 1e-5 && chain_err < 1e-5,
        detail: format!("20 seeds, max rel error dL/dX {x_err:.2e}, through encoder to adapters {chain_err:.2e} (tol 1e-5)"),
    }
}

fn c4_procrustes() -> Outcome {
    let mut worst_orth: f64 = 0.0;
    let mut losses = 0;
    let mut min_margin = f64::INFINITY;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let v = common::gaussian(&mut rng, 8, 32);
        let x = solvers::procrustes(&v).unwrap();
        let mut r = x.gram();
        for i in 0..8 {
            r.set(i, i, r.get(i, i) - 1.0);
        }
        worst_orth = worst_orth.max(r.frobenius());
        let best = x.sub(&v).unwrap().frobenius();
        for _ in 0..1000 {
            let q = common::random_orthonormal(&mut rng, 8, 32);
            let dq = q.sub(&v).unwrap().frobenius();
            min_margin = min_margin.min(dq - best);
            if dq < best {
                losses += 1;
            }
        }
    }
    Outcome {
        pass: worst_orth < 1e-8 && losses == 0,
        detail: format!(
            "max ||XX^T - I|| {worst_orth:.2e} (tol 1e-8), beaten by {losses} of 20000 competitors, min margin {min_margin:.3}"
        ),
    }
}

fn c5_cosine_equals_euclid() -> Outcome {
    let mut mismatches = 0;
    let mut ties = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let n = rng.gen_range(1..=300);
        let k = rng.gen_range(1..=20);
        let d = rng.gen_range(2..=32);
        let feats = unit(&mut rng, n, d);
        let mut protos = unit(&mut rng, k, d);
        if k > 2 && seed % 4 == 0 {
            // duplicated prototype: exact ties resolved toward the lower index
            let dup = protos.row(0).to_vec();
            protos.row_mut(k - 1).copy_from_slice(&dup);
            protos.mark_unit_rows().unwrap();
            ties += 1;
        }
        let a = diagnostics::cosine_assign(&feats, &protos).unwrap();
        for (i, f) in feats.row_iter().enumerate() {
            let mut best = 0;
            for c in 1..k {
                if dist_sq(f, protos.row(c)) < dist_sq(f, protos.row(best)) {
                    best = c;
                }
            }
            if a.labels()[i] != best {
                mismatches += 1;
            }
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("100 instances ({ties} with duplicated prototypes), {mismatches} assignment mismatches"),
    }
}

struct Bench {
    data: SyntheticData,
    v: PrototypeSet,
    features: EmbeddingMatrix,
}

fn bench(seed: u64) -> Bench {
    let data = generate_synthetic(&SyntheticSpec::benchmark(seed)).unwrap();
    let v = PrototypeSet::from_matrix(data.initial_prototypes.clone());
    let features = data.features.normalize_rows().unwrap();
    Bench { data, v, features }
}

fn accuracy(b: &Bench, x: &EmbeddingMatrix) -> f64 {
    zero_shot_accuracy(&b.features, &b.data.labels, &x.normalize_rows().unwrap()).unwrap()
}

fn c6_soft_vs_hard() -> Outcome {
    let (mut mean, mut svd, mut soft) = (0.0, 0.0, 0.0);
    for seed in 0..SEEDS {
        let b = bench(seed);
        mean += accuracy(&b, &solvers::solve_mean(&b.v).x);
        svd += accuracy(&b, &solvers::solve_procrustes(&b.v).unwrap().x);
        let x = solvers::solve_soft_direct(&b.v, &ObjectiveConfig::default(), &TrainConfig::default()).unwrap().x;
        soft += accuracy(&b, &x);
    }
    let n = SEEDS as f64;
    let (mean, svd, soft) = (mean / n, svd / n, soft / n);
    let (m1, m2) = (100.0 * (soft - mean), 100.0 * (soft - svd));
    Outcome {
        pass: m1 >= 2.0 && m2 >= 2.0,
        detail: format!(
            "accuracy mean {:.2}%, svd {:.2}%, soft {:.2}%; soft-mean {m1:+.2}pp, soft-svd {m2:+.2}pp (need >= +2pp each)",
            100.0 * mean,
            100.0 * svd,
            100.0 * soft
        ),
    }
}

fn c7_lambda_sweep() -> Outcome {
    let lambdas = [0.0, 0.2, 2.0, 20.0, 200.0, 2000.0, 20000.0];
    let mut acc = [0.0; 7];
    for seed in 0..SEEDS {
        let b = bench(seed);
        for (i, &l) in lambdas.iter().enumerate() {
            let obj = ObjectiveConfig { lambda0: l, ..Default::default() };
            let x = solvers::solve_soft_direct(&b.v, &obj, &TrainConfig::default()).unwrap().x;
            acc[i] += accuracy(&b, &x) / SEEDS as f64;
        }
    }
    let best = (0..7).fold(0, |bi, i| if acc[i] > acc[bi] { i } else { bi });
    let curve: Vec<String> = lambdas.iter().zip(&acc).map(|(l, a)| format!("{l}:{:.2}", 100.0 * a)).collect();
    Outcome {
        pass: best != 0 && best != lambdas.len() - 1,
        detail: format!("max at lambda {} [{}]", lambdas[best], curve.join(" ")),
    }
}

fn c8_training_invariants() -> Outcome {
    let t = TemplateSet::default_three();
    let tc = TrainConfig { mode: TrainMode::LoraEncoder, ..Default::default() };
    let mut monotone = 0;
    let mut worst_rise: f64 = 0.0;
    let mut frozen = true;
    let mut fraction: f64 = 0.0;
    for seed in 0..SEEDS {
        let b = bench(seed);
        let params = EncoderParams::random(EncoderDims::default(), seed)
            .unwrap()
            .fit_readout(&b.data.class_names, &t, &b.data.initial_prototypes)
            .unwrap();
        let before = params.clone();
        let out = solvers::solve_soft_lora(&b.data.class_names, &t, &params, &ObjectiveConfig::default(), &tc).unwrap();
        frozen &= params == before
            && params.w1.data().iter().zip(before.w1.data()).all(|(a, c)| a.to_bits() == c.to_bits())
            && params.w2.data().iter().zip(before.w2.data()).all(|(a, c)| a.to_bits() == c.to_bits());
        let means = out.result.epoch_means();
        let rise = means.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        worst_rise = worst_rise.max(rise);
        if rise <= 0.0 {
            monotone += 1;
        }
        fraction = fraction.max(encoder::trainable_fraction(&params, &out.adapters));
    }
    Outcome {
        pass: monotone == SEEDS as usize && frozen && fraction < 0.05,
        detail: format!(
            "epoch means non-increasing on {monotone}/{SEEDS} runs (largest epoch-to-epoch rise {worst_rise:+.4}), \
             base frozen {frozen}, trainable fraction {fraction:.4} (< 0.05)"
        ),
    }
}

fn c9_streams() -> Outcome {
    let k = 100;
    let labels: Vec<usize> = (0..k * 30).map(|i| i % k).collect();
    let mut keff_ok = true;
    for (lo, hi) in [(1, 4), (2, 10), (5, 25), (25, 50), (50, 100)] {
        let cfg = StreamConfig { keff_range: (lo, hi), n_tasks: 200, seed: lo as u64, ..Default::default() };
        for t in sample_batch_tasks(&labels, k, &cfg).unwrap() {
            let distinct: BTreeSet<usize> = t.labels.iter().copied().collect();
            let keff = t.keff.unwrap();
            let present: BTreeSet<usize> = t.present_classes.iter().copied().collect();
            keff_ok &= (lo..=hi).contains(&keff)
                && t.present_classes.len() == keff
                && distinct.is_subset(&present)
                // every drawn class appears when the batch can hold them all
                && (keff > cfg.batch_size || distinct.len() == keff)
                && t.labels.len() == cfg.batch_size;
        }
    }

    let (kd, draws) = (10, 10_000);
    let mut moments_ok = true;
    let mut max_z: f64 = 0.0;
    let mut variances = Vec::new();
    for (gi, gamma) in [0.1, 0.01, 0.001].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + gi as u64);
        let samples: Vec<Vec<f64>> = (0..draws).map(|_| sample_dirichlet(&mut rng, kd, gamma).unwrap()).collect();
        let mut var_sum = 0.0;
        for c in 0..kd {
            let xs: Vec<f64> = samples.iter().map(|p| p[c]).collect();
            let m = xs.iter().sum::<f64>() / draws as f64;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();
            let z = (m - 1.0 / kd as f64).abs() / se;
            max_z = max_z.max(z);
            moments_ok &= z <= 3.0;
            var_sum += var;
        }
        variances.push(var_sum / kd as f64);
    }
    let ordered = variances.windows(2).all(|w| w[0] < w[1]);

    let cfg = StreamConfig { keff_range: (2, 10), n_tasks: 50, seed: 4, ..Default::default() };
    let online = StreamConfig { mode: StreamMode::OnlineDirichlet, n_tasks: 10, gamma: 0.01, seed: 4, ..Default::default() };
    let spec = SyntheticSpec { k: 12, n_per_class: 10, ..SyntheticSpec::benchmark(4) };
    let same_data = {
        let (a, b) = (generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        a.features.data().iter().zip(b.features.data()).all(|(x, y)| x.to_bits() == y.to_bits()) && a.labels == b.labels
    };
    let reproducible = same_data
        && sample_batch_tasks(&labels, k, &cfg).unwrap() == sample_batch_tasks(&labels, k, &cfg).unwrap()
        && sample_online_streams(&labels, k, &online).unwrap() == sample_online_streams(&labels, k, &online).unwrap();
    let theory: Vec<String> = [0.1, 0.01, 0.001]
        .iter()
        .map(|g| format!("{:.4}", 0.1 * 0.9 / (kd as f64 * g + 1.0)))
        .collect();
    Outcome {
        pass: keff_ok && moments_ok && ordered && reproducible,
        detail: format!(
            "K_eff bounds {keff_ok}, means within 3 SE {moments_ok} (max |z| {max_z:.2}), variances {:.4}/{:.4}/{:.4} (theory {}) ordered {ordered}, \
             reproducible {reproducible}",
            variances[0],
            variances[1],
            variances[2],
            theory.join("/")
        ),
    }
}

fn c10_geometry() -> Outcome {
    let mut displaced = 0;
    let mut decorrelated = 0;
    let mut closer = 0;
    let mut disp_sum = 0.0;
    for seed in 0..SEEDS {
        let b = bench(seed);
        let x = solvers::solve_soft_direct(&b.v, &ObjectiveConfig::default(), &TrainConfig::default()).unwrap().x;
        let g = diagnostics::geometry_metrics(&x, &b.v.v, &b.data.features, &b.data.labels).unwrap();
        disp_sum += g.displacement_mean;
        if g.displacement_mean > 0.0 {
            displaced += 1;
        }
        if x.normalize_rows().unwrap().gram().max_abs_offdiag() < b.v.v.gram().max_abs_offdiag() {
            decorrelated += 1;
        }
        let mean_cos = |p: &EmbeddingMatrix| {
            let a = alignment_to_class_means(p, &b.data.features, &b.data.labels).unwrap();
            a.iter().flatten().sum::<f64>() / a.iter().flatten().count() as f64
        };
        if mean_cos(&x) > mean_cos(&b.v.v) {
            closer += 1;
        }
    }
    let n = SEEDS as usize;
    Outcome {
        pass: displaced == n && decorrelated == n && closer >= 8,
        detail: format!(
            "displacement > 0 on {displaced}/{n} (mean {:.3}), max off-diagonal decreased on {decorrelated}/{n}, \
             closer to class means on {closer}/{n} (need >= 8)",
            disp_sum / SEEDS as f64
        ),
    }
}

fn main() {
    let s = Duration::from_secs;
    let results = [
        check(1, "Huygens identity", s(5), c1_huygens),
        check(2, "between-scatter / off-diagonal affine identity", s(1), c2_between_offdiag),
        check(3, "gradient correctness", s(30), c3_gradients),
        check(4, "Procrustes optimality", s(10), c4_procrustes),
        check(5, "cosine assignment equals Euclidean argmin", s(2), c5_cosine_equals_euclid),
        check(6, "soft refinement beats mean and svd", s(120), c6_soft_vs_hard),
        check(7, "lambda sweep peaks in the interior", s(300), c7_lambda_sweep),
        check(8, "training monotonicity and frozen base", s(120), c8_training_invariants),
        check(9, "stream protocol fidelity", s(60), c9_streams),
        check(10, "geometry metrics direction", s(60), c10_geometry),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
