//! Class vocabularies, per-dataset name remapping, and prompt rendering.
//!
//! A vocabulary is an ordered list of class names; list position is the
//! class id everywhere downstream (cost volume channel, mask label,
//! confusion matrix row). Rendering wraps each name in a set of prompt
//! templates; the ensembled text embedding is the mean of the per-prompt
//! encoder outputs, unit-normalized once at the end.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array1;

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{}";

/// Wrapper templates shipped with the crate, one `{}` slot each.
pub const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.txt");
/// The reduced natural-image training vocabulary (41 classes).
pub const COCO_RS_SUBSET: &str = include_str!("../data/coco_rs_subset.txt");
/// Shipped dataset remap rows.
pub const DEFAULT_REMAPS: &str = include_str!("../data/remaps.tsv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    pub background_included: bool,
    pub remap_source: Option<String>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Validation("vocabulary has no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::Validation("vocabulary contains an empty class name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Validation(format!("duplicate class name: {n:?}")));
            }
        }
        Ok(Self { names, background_included: false, remap_source: None })
    }

    /// Parses one-name-per-line text; blank lines and `#` comments skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let names = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        Self::new(names)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// The 41-class reduced training vocabulary.
    pub fn coco_rs_subset() -> Self {
        Self::from_text(COCO_RS_SUBSET).expect("shipped vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for n in &self.names {
            body.push_str(n);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Validation("template set is empty".into()));
        }
        for t in &templates {
            let count = t.matches(PLACEHOLDER).count();
            if count != 1 {
                return Err(Error::Validation(format!(
                    "template {t:?} must contain the placeholder {PLACEHOLDER} exactly once, found {count}"
                )));
            }
        }
        Ok(Self { templates })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        Self::new(templates)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn default_set() -> Self {
        Self::from_text(DEFAULT_TEMPLATES).expect("shipped templates are valid")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }
}

/// Wraps `class_name` in every template, order preserved.
pub fn render_prompts(class_name: &str, templates: &PromptTemplateSet) -> Result<Vec<String>> {
    if class_name.is_empty() {
        return Err(Error::Validation("class name is empty".into()));
    }
    Ok(templates
        .templates()
        .iter()
        .map(|t| t.replacen(PLACEHOLDER, class_name, 1))
        .collect())
}

/// Mean of per-prompt embeddings, then one L2 normalization.
///
/// `encode` is the text encoder's raw (pre-normalization) output. Errors
/// when the mean is (numerically) the zero vector.
pub fn ensemble_embed(
    class_name: &str,
    templates: &PromptTemplateSet,
    mut encode: impl FnMut(&str) -> Result<Array1<f64>>,
) -> Result<Array1<f64>> {
    let prompts = render_prompts(class_name, templates)?;
    let mut mean: Option<Array1<f64>> = None;
    for p in &prompts {
        let e = encode(p)?;
        match &mut mean {
            None => mean = Some(e),
            Some(m) => {
                if m.len() != e.len() {
                    return Err(Error::Shape(format!(
                        "encoder returned inconsistent dimensions: {} vs {}",
                        m.len(),
                        e.len()
                    )));
                }
                *m += &e;
            }
        }
    }
    let mut m = mean.expect("template set is non-empty");
    m.mapv_inplace(|v| v / prompts.len() as f64);
    let norm = m.dot(&m).sqrt();
    if norm < 1e-12 {
        return Err(Error::Degenerate(format!(
            "ensembled embedding for {class_name:?} has zero magnitude"
        )));
    }
    m.mapv_inplace(|v| v / norm);
    Ok(m)
}

/// Dataset-keyed class-name substitutions.
#[derive(Debug, Clone, Default)]
pub struct RemapRegistry {
    /// dataset_id -> (raw_name -> new_name)
    rules: HashMap<String, HashMap<String, String>>,
}

impl RemapRegistry {
    /// Parses `dataset<TAB>raw<TAB>new` rows; `#` comments and blank
    /// lines are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rules: HashMap<String, HashMap<String, String>> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (ds, raw, new) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(d), Some(r), Some(n), None) => (d, r, n),
                _ => {
                    return Err(Error::Validation(format!(
                        "remap line {}: expected dataset<TAB>raw<TAB>new, got {line:?}",
                        lineno + 1
                    )))
                }
            };
            rules
                .entry(ds.to_string())
                .or_default()
                .insert(raw.to_string(), new.to_string());
        }
        Ok(Self { rules })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn shipped() -> Self {
        Self::from_text(DEFAULT_REMAPS).expect("shipped remap table is valid")
    }

    pub fn known_dataset(&self, dataset_id: &str) -> bool {
        dataset_id == "identity" || self.rules.contains_key(dataset_id)
    }

    /// Replaces each raw name per the registry; unknown names pass
    /// through. `"identity"` always maps names to themselves. Datasets
    /// without rows (potsdam, vaihingen) behave as identity too.
    pub fn remap(&self, dataset_id: &str, raw_names: &[String]) -> Vec<String> {
        let table = self.rules.get(dataset_id);
        raw_names
            .iter()
            .map(|n| match table.and_then(|t| t.get(n)) {
                Some(new) => new.clone(),
                None => n.clone(),
            })
            .collect()
    }
}
