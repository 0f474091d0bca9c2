//! Accuracy across penalty weights, from the mean prototypes to near-hard orthonormality.

use proto_forge::cli::{sweep, SweepConfig};
use proto_forge::harness::{generate_synthetic, SyntheticSpec};

fn main() -> proto_forge::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::benchmark(4))?;
    let cfg = SweepConfig { lambdas: vec![0.0, 0.5, 2.0, 8.0, 32.0, 128.0], ..Default::default() };
    println!("{:>8}  {:>8}  {:>10}", "lambda", "accuracy", "penalty");
    for row in sweep(&data.features, &data.labels, &data.initial_prototypes, &cfg)? {
        match (row.accuracy, row.final_penalty) {
            (Some(a), Some(p)) => println!("{:>8}  {:>7.2}%  {:>10.4}", row.lambda, 100.0 * a, p),
            _ => println!("{:>8}  failed: {}", row.lambda, row.error.unwrap_or_default()),
        }
    }
    Ok(())
}
