use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub label: String,
    pub text_doc_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image_id: String,
    pub class_label: String,
}

/// Classes with their text document, and image samples with their class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<ClassEntry>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    /// Checks that labels are unique and every sample names a known class.
    pub fn validate(&self) -> Result<()> {
        let mut labels = HashSet::with_capacity(self.classes.len());
        for c in &self.classes {
            if !labels.insert(c.label.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate class label '{}' in manifest",
                    c.label
                )));
            }
        }
        let mut images = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !labels.contains(s.class_label.as_str()) {
                return Err(Error::Validation(format!(
                    "sample '{}' refers to unknown class '{}'",
                    s.image_id, s.class_label
                )));
            }
            if !images.insert(s.image_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate image id '{}' in manifest",
                    s.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.label.as_str())
    }

    pub fn class(&self, label: &str) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_schema() {
        let m = Manifest::from_json(
            r#"{"classes":[{"label":"Brewer_Blackbird","text_doc_id":"doc9"}],
                "samples":[{"image_id":"img1","class_label":"Brewer_Blackbird"}]}"#,
        )
        .unwrap();
        assert_eq!(m.classes[0].text_doc_id, "doc9");
        assert_eq!(m.samples[0].image_id, "img1");
        assert_eq!(Manifest::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn unknown_class_rejected() {
        let err = Manifest::from_json(
            r#"{"classes":[],"samples":[{"image_id":"i","class_label":"nope"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn duplicate_label_rejected() {
        let err = Manifest::from_json(
            r#"{"classes":[{"label":"a","text_doc_id":"x"},{"label":"a","text_doc_id":"y"}],"samples":[]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
