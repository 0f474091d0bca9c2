//! Accuracy on batch-realistic tasks and online Dirichlet streams.

use proto_forge::harness::{
    evaluate_over_tasks, generate_synthetic, sample_batch_tasks, sample_online_streams, StreamConfig, StreamMode,
    StreamTask, SyntheticSpec,
};

fn main() -> proto_forge::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::benchmark(2))?;
    let features = data.features.normalize_rows()?;
    let v = data.initial_prototypes.normalize_rows()?;
    let k = v.rows();

    let batch = StreamConfig { n_tasks: 500, keff_range: (1, 4), ..Default::default() };
    let tasks = sample_batch_tasks(&data.labels, k, &batch)?;
    for restrict in [false, true] {
        let e = evaluate_over_tasks(&tasks, &features, &v, restrict)?;
        println!("batch tasks, restricted {restrict:<5}: {:.2}%", 100.0 * e.mean_accuracy);
    }

    for gamma in [0.01, 1.0, 100.0] {
        let cfg = StreamConfig { mode: StreamMode::OnlineDirichlet, n_tasks: 50, gamma, ..Default::default() };
        let streams: Vec<StreamTask> = sample_online_streams(&data.labels, k, &cfg)?.iter().map(|s| StreamTask::merge(s)).collect();
        let e = evaluate_over_tasks(&streams, &features, &v, false)?;
        println!("online streams, gamma {gamma:>6}: {:.3}%", 100.0 * e.mean_accuracy);
    }
    Ok(())
}
