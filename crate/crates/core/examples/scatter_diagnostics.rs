//! Within/between scatter of features under prototype assignments.

use proto_forge::diagnostics::{between_vs_offdiag, cosine_assign, geometry_metrics, huygens, AssignmentMatrix};
use proto_forge::harness::{generate_synthetic, SyntheticSpec};
use proto_forge::solvers::procrustes;

fn main() -> proto_forge::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::benchmark(1))?;
    let features = data.features.normalize_rows()?;
    let v = data.initial_prototypes.normalize_rows()?;

    let truth = AssignmentMatrix::from_labels(data.labels.clone(), v.rows())?;
    let predicted = cosine_assign(&features, &v)?;
    for (name, u) in [("true labels", &truth), ("cosine argmax", &predicted)] {
        let s = huygens(&features, u)?;
        println!("{name:<14} total {:.3} = within {:.3} + between {:.3} (residual {:.1e})", s.total, s.within, s.between, s.residual());
    }

    let mut x = procrustes(&v)?;
    x.mark_unit_rows()?;
    for (name, p) in [("initial", &v), ("orthonormal", &x)] {
        let b = between_vs_offdiag(p, &truth.counts())?;
        println!("{name:<12} between {:.2}, weighted offdiag {:.2}, constant {:.2}", b.between, b.weighted_offdiag, b.constant);
    }
    let g = geometry_metrics(&x, &v, &features, &data.labels)?;
    println!("displacement mean {:.3}, median {:.3}; dispersion {:.3}", g.displacement_mean, g.displacement_median, g.dispersion);
    Ok(())
}
