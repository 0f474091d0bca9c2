//! Thin SVD of a prototype matrix and its nearest row-orthonormal matrix.

use proto_forge::harness::{generate_synthetic, SyntheticSpec};
use proto_forge::solvers::procrustes;

fn main() -> proto_forge::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::benchmark(0))?;
    let v = &data.initial_prototypes;
    let f = v.svd()?;
    println!("V is {}x{}", v.rows(), v.cols());
    println!("singular values: {:.3?}", f.sigma);
    println!("reconstruction error: {:.2e}", f.reconstruct().sub(v)?.frobenius());

    let x = procrustes(v)?;
    let k = x.rows();
    let orth = x.gram().sub(&proto_forge::EmbeddingMatrix::identity(k))?.frobenius();
    println!("max |offdiag| of VVᵀ: {:.3}", v.gram().max_abs_offdiag());
    println!("‖XXᵀ − I‖ after Procrustes: {orth:.2e}");
    println!("distance moved ‖X − V‖: {:.3}", x.sub(v)?.frobenius());
    Ok(())
}
