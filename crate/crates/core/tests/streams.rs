//! Large-sample checks of the stream samplers.

use proto_forge::harness::sample_dirichlet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn dirichlet_moments_match_theory_at_scale() {
    let (k, draws) = (10, 200_000);
    for (i, gamma) in [0.1, 0.01, 0.001].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        let mut sum = vec![0.0; k];
        let mut sq = vec![0.0; k];
        for _ in 0..draws {
            let p = sample_dirichlet(&mut rng, k, gamma).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..k {
                sum[c] += p[c];
                sq[c] += p[c] * p[c];
            }
        }
        // Var[p_c] = (1/K)(1 - 1/K) / (Kγ + 1)
        let theory = (1.0 / k as f64) * (1.0 - 1.0 / k as f64) / (k as f64 * gamma + 1.0);
        for c in 0..k {
            let m = sum[c] / draws as f64;
            let var = sq[c] / draws as f64 - m * m;
            let z = (m - 1.0 / k as f64) / (var / draws as f64).sqrt();
            assert!(z.abs() < 4.5, "gamma {gamma} class {c}: z {z}");
            assert!((var / theory - 1.0).abs() < 0.05, "gamma {gamma} class {c}: var {var} vs {theory}");
        }
    }
}

#[test]
fn tiny_gamma_gives_near_one_hot_draws() {
    // P(second component ≥ 1% of the first) ≈ (K − 1)·γ·ln 100 ≈ 0.4% at γ = 1e-4.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut peaked = 0;
    for _ in 0..1000 {
        let p = sample_dirichlet(&mut rng, 10, 1e-4).unwrap();
        assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        if p.iter().copied().fold(0.0, f64::max) > 0.99 {
            peaked += 1;
        }
    }
    assert!(peaked >= 980, "{peaked}");
}

#[test]
fn huge_gamma_gives_near_uniform_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let p = sample_dirichlet(&mut rng, 10, 1e6).unwrap();
        let mx = p.iter().copied().fold(0.0, f64::max);
        assert!((mx - 0.1).abs() < 0.05);
    }
}
