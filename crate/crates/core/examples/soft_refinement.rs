//! Soft-penalty refinement of prototypes compared with the closed-form baselines.

use proto_forge::harness::{generate_synthetic, zero_shot_accuracy, SyntheticSpec};
use proto_forge::objective::ObjectiveConfig;
use proto_forge::prototype::PrototypeSet;
use proto_forge::solvers::{solve_mean, solve_procrustes, solve_soft_direct, TrainConfig};

fn main() -> proto_forge::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::benchmark(3))?;
    let v = PrototypeSet::from_matrix(data.initial_prototypes.clone());
    let features = data.features.normalize_rows()?;
    let acc = |x: &proto_forge::EmbeddingMatrix| -> proto_forge::Result<f64> {
        zero_shot_accuracy(&features, &data.labels, &x.normalize_rows()?)
    };

    let soft = solve_soft_direct(&v, &ObjectiveConfig::default(), &TrainConfig::default())?;
    for (e, m) in soft.epoch_means().iter().enumerate().step_by(4) {
        println!("epoch {e:>2}: mean loss {m:.4}");
    }
    println!("mean prototypes:  {:.2}%", 100.0 * acc(&solve_mean(&v).x)?);
    println!("Procrustes:       {:.2}%", 100.0 * acc(&solve_procrustes(&v)?.x)?);
    println!("soft penalty:     {:.2}%", 100.0 * acc(&soft.x)?);
    Ok(())
}
