use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ManifestError;

const AVA14: &str = include_str!("../../taxonomies/ava14.txt");

/// Ordered list of style class names. Position in the list is the class index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyRepr", into = "TaxonomyRepr")]
pub struct StyleTaxonomy {
    name: String,
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyRepr {
    name: String,
    classes: Vec<String>,
}

impl TryFrom<TaxonomyRepr> for StyleTaxonomy {
    type Error = ManifestError;

    fn try_from(repr: TaxonomyRepr) -> Result<Self, Self::Error> {
        StyleTaxonomy::new(repr.name, repr.classes)
    }
}

impl From<StyleTaxonomy> for TaxonomyRepr {
    fn from(t: StyleTaxonomy) -> Self {
        TaxonomyRepr {
            name: t.name,
            classes: t.classes,
        }
    }
}

impl StyleTaxonomy {
    pub fn new(name: impl Into<String>, classes: Vec<String>) -> Result<Self, ManifestError> {
        let name = name.into();
        if classes.is_empty() {
            return Err(ManifestError::Taxonomy(format!("taxonomy '{name}' has no classes")));
        }
        let mut index = HashMap::with_capacity(classes.len());
        for (i, class) in classes.iter().enumerate() {
            if class.trim().is_empty() {
                return Err(ManifestError::Taxonomy(format!("class {i} has an empty name")));
            }
            if index.insert(class.clone(), i).is_some() {
                return Err(ManifestError::Taxonomy(format!("duplicate class name '{class}'")));
            }
        }
        Ok(StyleTaxonomy { name, classes, index })
    }

    /// Parses a taxonomy file: one class per line, blank lines and `#` comments ignored.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, ManifestError> {
        let classes = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect();
        Self::new(name, classes)
    }

    /// Loads a taxonomy file; the file stem becomes the taxonomy name.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".to_owned());
        Self::parse(name, &text)
    }

    /// Resolves either a built-in taxonomy name (`ava14`) or a path to a taxonomy file.
    pub fn resolve(spec: &str) -> Result<Self, ManifestError> {
        match spec {
            "ava14" => Ok(Self::ava14()),
            path => Self::load(Path::new(path)),
        }
    }

    /// The 14 AVA Style classes in their canonical order.
    pub fn ava14() -> Self {
        Self::parse("ava14", AVA14).expect("bundled taxonomy is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.index.get(class).copied()
    }

    pub fn class_name(&self, index: usize) -> Option<&str> {
        self.classes.get(index).map(String::as_str)
    }
}
