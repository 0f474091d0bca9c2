//! Template-averaged prototypes from the toy text encoder.

use proto_forge::encoder::{EncoderDims, EncoderParams, ToyEncoder};
use proto_forge::prototype::{build_prototypes, expand_templates, TemplateSet};

fn main() -> proto_forge::Result<()> {
    let names: Vec<String> = ["tabby cat", "golden retriever", "sailboat", "maple tree"].map(String::from).to_vec();
    let templates = TemplateSet::default_three();
    for p in expand_templates(&names[..1], &templates)? {
        println!("prompt: {p}");
    }

    let params = EncoderParams::random(EncoderDims::default(), 7)?;
    let source = ToyEncoder { params: &params, adapters: &[] };
    let set = build_prototypes(&names, &templates, &source, true)?;
    println!("{} prototypes of dimension {}, averaged over {} templates", set.k(), set.v.cols(), set.template_count);
    for (name, (raw, unit)) in set.class_names.iter().zip(set.raw_mean.row_norms().iter().zip(set.v.row_norms())) {
        println!("  {name:<18} raw norm {raw:.3} -> {unit:.3}");
    }
    let g = set.v.gram();
    println!("max cosine between two classes: {:.3}", g.max_abs_offdiag());
    Ok(())
}
