//! Refinement through rank-r adapters on a frozen toy encoder.

use proto_forge::encoder::{trainable_fraction, EncoderDims, EncoderParams};
use proto_forge::objective::ObjectiveConfig;
use proto_forge::prototype::TemplateSet;
use proto_forge::solvers::{solve_soft_lora, TrainConfig, TrainMode};

fn main() -> proto_forge::Result<()> {
    let names: Vec<String> = ["heron", "egret", "stork", "crane", "ibis", "pelican"].map(String::from).to_vec();
    let templates = TemplateSet::default_three();
    let params = EncoderParams::random(EncoderDims::default(), 11)?;
    let tc = TrainConfig { mode: TrainMode::LoraEncoder, epochs: 10, steps_per_epoch: 30, ..Default::default() };
    let out = solve_soft_lora(&names, &templates, &params, &ObjectiveConfig::default(), &tc)?;

    println!("trainable fraction: {:.4}", trainable_fraction(&params, &out.adapters));
    let h = &out.result.history;
    let (first, last) = (h[0].loss, h[h.len() - 1].loss);
    println!("penalty {:.4} -> {:.4}", first.penalty, last.penalty);
    println!("max |offdiag| {:.3} -> {:.3}", out.v.gram().max_abs_offdiag(), out.result.x.gram().max_abs_offdiag());
    println!("prototype movement ‖X − V‖: {:.3}", out.result.x.sub(&out.v)?.frobenius());
    Ok(())
}
