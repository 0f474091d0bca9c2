//! Template expansion and embedding-mean prototypes.
//!
//! Each class name is instantiated into T prompt templates, every instantiation is
//! embedded, and the T embeddings are averaged into the class prototype. The embedding
//! source is pluggable: the toy encoder in [`crate::encoder`] or any per-template
//! embedding matrix loaded from disk.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, EmbeddingMatrix, ZERO_ROW_NORM};

pub const PLACEHOLDER: &str = "{}";

/// Ordered prompt templates, each with exactly one `{}` placeholder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    templates: Vec<String>,
}

impl TemplateSet {
    pub fn new<S: Into<String>>(templates: impl IntoIterator<Item = S>) -> Result<Self> {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(Error::InvalidConfig("template set is empty".into()));
        }
        for t in &templates {
            let count = t.matches(PLACEHOLDER).count();
            if count != 1 {
                return Err(Error::BadTemplate { template: t.clone(), count });
            }
        }
        let unique: HashSet<&String> = templates.iter().collect();
        if unique.len() != templates.len() {
            log_warning("template set contains duplicates");
        }
        Ok(Self { templates })
    }

    /// The three templates used by default during fine-tuning.
    pub fn default_three() -> Self {
        Self::new(["a photo of a {}.", "a photo of the {}.", "an image of a {}."])
            .expect("built-in templates are valid")
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Reads one template per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::new(read_lines(path)?)
    }
}

fn log_warning(msg: &str) {
    eprintln!("warning: {msg}");
}

/// Reads a UTF-8 list file, one entry per line, ignoring blank lines and `#` comments.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

/// Reads a class-name file (one name per line).
pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let names = read_lines(path)?;
    validate_names(&names)?;
    Ok(names)
}

fn validate_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::InvalidConfig("no class names".into()));
    }
    let mut seen = HashSet::new();
    for n in names {
        if n.trim().is_empty() {
            return Err(Error::InvalidConfig("empty class name".into()));
        }
        if !seen.insert(n.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate class name {n:?}")));
        }
    }
    Ok(())
}

/// Expands every class name through every template; output is row-major K×T:
/// `out[i*T + t]` is template `t` applied to name `i`.
pub fn expand_templates(names: &[String], tset: &TemplateSet) -> Result<Vec<String>> {
    validate_names(names)?;
    let mut out = Vec::with_capacity(names.len() * tset.len());
    for name in names {
        for t in tset.templates() {
            out.push(t.replacen(PLACEHOLDER, name, 1));
        }
    }
    Ok(out)
}

/// Initial prototypes plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub class_names: Vec<String>,
    pub v: EmbeddingMatrix,
    pub normalized: bool,
    pub template_count: usize,
    /// Template mean before projection to the sphere (equal to `v` when not normalized).
    pub raw_mean: EmbeddingMatrix,
}

impl PrototypeSet {
    /// Wraps an existing prototype matrix (e.g. loaded from disk).
    pub fn from_matrix(v: EmbeddingMatrix) -> Self {
        let class_names = (0..v.rows()).map(|k| format!("class {k}")).collect();
        let normalized = v.unit_rows();
        Self { class_names, raw_mean: v.clone(), v, normalized, template_count: 1 }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.v.rows() {
            return Err(Error::shape(format!("{} names", self.v.rows()), format!("{}", names.len())));
        }
        validate_names(&names)?;
        self.class_names = names;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.v.rows()
    }
}

/// Averages consecutive blocks of `t` rows into K class prototypes, optionally
/// projecting each mean onto the unit sphere.
pub fn average_prototypes(
    per_template: &EmbeddingMatrix,
    k: usize,
    t: usize,
    normalize: bool,
) -> Result<PrototypeSet> {
    if t == 0 || k == 0 || per_template.rows() != k * t {
        return Err(Error::shape(
            format!("{} rows (K={k} x T={t})", k * t),
            format!("{} rows", per_template.rows()),
        ));
    }
    let d = per_template.cols();
    let mut mean = vec![0.0; k * d];
    for i in 0..k {
        let out = &mut mean[i * d..(i + 1) * d];
        for r in 0..t {
            for (o, x) in out.iter_mut().zip(per_template.row(i * t + r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
    }
    let raw_mean = EmbeddingMatrix::new(k, d, mean)?;
    let v = if normalize {
        for (i, r) in raw_mean.row_iter().enumerate() {
            let n = norm(r);
            if n <= ZERO_ROW_NORM {
                return Err(Error::ZeroRow { row: i, norm: n });
            }
        }
        raw_mean.normalize_rows()?
    } else {
        raw_mean.clone()
    };
    Ok(PrototypeSet {
        class_names: (0..k).map(|i| format!("class {i}")).collect(),
        v,
        normalized: normalize,
        template_count: t,
        raw_mean,
    })
}

/// Source of per-template embeddings for a list of expanded prompts.
pub trait EmbeddingSource {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix>;
}

/// Precomputed embeddings, one row per expanded prompt in K×T order.
pub struct PrecomputedEmbeddings(pub EmbeddingMatrix);

impl EmbeddingSource for PrecomputedEmbeddings {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix> {
        if texts.len() != self.0.rows() {
            return Err(Error::shape(format!("{} rows", texts.len()), format!("{}", self.0.rows())));
        }
        Ok(self.0.clone())
    }
}

/// Builds class prototypes end to end: expand, embed, average.
pub fn build_prototypes(
    names: &[String],
    tset: &TemplateSet,
    source: &dyn EmbeddingSource,
    normalize: bool,
) -> Result<PrototypeSet> {
    let texts = expand_templates(names, tset)?;
    let emb = source.embed(&texts)?;
    average_prototypes(&emb, names.len(), tset.len(), normalize)?.with_names(names.to_vec())
}
