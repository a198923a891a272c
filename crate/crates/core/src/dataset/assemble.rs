use std::collections::{BTreeSet, HashMap};

use log::warn;

use super::{ClassVectorSet, FeatureTable, Manifest, SplitSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    /// Image id from the manifest.
    pub id: String,
    pub image: Vec<f32>,
    /// The class's text vector; shared by every row of that class.
    pub text: Vec<f32>,
    pub label_index: usize,
    pub label: String,
}

/// Rows ready for training or evaluation. `label_order` defines the one-hot
/// index of each label.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledDataset {
    pub rows: Vec<DatasetRow>,
    pub label_order: Vec<String>,
    pub image_dim: usize,
    pub text_dim: usize,
}

impl AssembledDataset {
    pub fn new(label_order: Vec<String>, image_dim: usize, text_dim: usize) -> Self {
        Self {
            rows: Vec::new(),
            label_order,
            image_dim,
            text_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_order.len()
    }

    /// A copy holding the selected rows in the given order; `label_order` is kept.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            label_order: self.label_order.clone(),
            image_dim: self.image_dim,
            text_dim: self.text_dim,
        }
    }

    /// Row indices grouped by `label_index`.
    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.label_order.len()];
        for (i, r) in self.rows.iter().enumerate() {
            groups[r.label_index].push(i);
        }
        groups
    }

    /// Checks row/label consistency.
    pub fn validate(&self) -> Result<()> {
        let mut text_of: HashMap<usize, &[f32]> = HashMap::new();
        for r in &self.rows {
            if r.label_index >= self.label_order.len() || self.label_order[r.label_index] != r.label
            {
                return Err(Error::Validation(format!(
                    "row '{}' has inconsistent label index {}",
                    r.id, r.label_index
                )));
            }
            if r.image.len() != self.image_dim || r.text.len() != self.text_dim {
                return Err(Error::Validation(format!("row '{}' has wrong dims", r.id)));
            }
            if let Some(prev) = text_of.insert(r.label_index, &r.text) {
                if prev != r.text.as_slice() {
                    return Err(Error::Validation(format!(
                        "class '{}' has more than one text vector",
                        r.label
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Assembly {
    pub train: AssembledDataset,
    pub zeroshot: AssembledDataset,
    /// Manifest classes without a class vector.
    pub dropped_classes: Vec<String>,
    pub warnings: Vec<String>,
}

/// Joins features, class vectors and the manifest into seen (train) and
/// unseen (zero-shot) datasets.
///
/// Classes without a class vector are dropped from both halves. Classes with
/// no samples are left out of `label_order`.
pub fn assemble_dataset(
    img: &FeatureTable,
    txt: &FeatureTable,
    cv: &ClassVectorSet,
    manifest: &Manifest,
    split: &SplitSpec,
) -> Result<Assembly> {
    manifest.validate()?;
    split.validate()?;
    let mut warnings = Vec::new();

    let dropped_classes: Vec<String> = manifest
        .labels()
        .filter(|l| !cv.contains(l))
        .map(str::to_owned)
        .collect();
    if !dropped_classes.is_empty() {
        let msg = format!(
            "dropping {} classes without class vectors: {}",
            dropped_classes.len(),
            dropped_classes.join(", ")
        );
        warn!("{msg}");
        warnings.push(msg);
    }

    let retained: BTreeSet<&str> = manifest.labels().filter(|l| cv.contains(l)).collect();
    for l in split.seen_labels.iter().chain(&split.unseen_labels) {
        if !retained.contains(l.as_str()) {
            return Err(Error::arg(format!(
                "split label '{l}' is not a manifest class with a class vector"
            )));
        }
    }
    let in_split: BTreeSet<&str> = split
        .seen_labels
        .iter()
        .chain(&split.unseen_labels)
        .map(String::as_str)
        .collect();
    let unsplit: Vec<&str> = retained.difference(&in_split).copied().collect();
    if !unsplit.is_empty() {
        let msg = format!(
            "ignoring {} classes absent from the split: {}",
            unsplit.len(),
            unsplit.join(", ")
        );
        warn!("{msg}");
        warnings.push(msg);
    }

    // Referential integrity, reported all at once.
    let mut missing_text = Vec::new();
    for c in &manifest.classes {
        if in_split.contains(c.label.as_str()) && !txt.contains(&c.text_doc_id) {
            missing_text.push(c.text_doc_id.clone());
        }
    }
    if !missing_text.is_empty() {
        return Err(Error::Integrity {
            kind: "text",
            missing: missing_text,
        });
    }
    let missing_images: Vec<String> = manifest
        .samples
        .iter()
        .filter(|s| in_split.contains(s.class_label.as_str()) && !img.contains(&s.image_id))
        .map(|s| s.image_id.clone())
        .collect();
    if !missing_images.is_empty() {
        return Err(Error::Integrity {
            kind: "image",
            missing: missing_images,
        });
    }

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &manifest.samples {
        *counts.entry(s.class_label.as_str()).or_default() += 1;
    }
    let mut build = |labels: &[String]| -> AssembledDataset {
        let mut order = Vec::with_capacity(labels.len());
        for l in labels {
            if counts.get(l.as_str()).copied().unwrap_or(0) == 0 {
                let msg = format!("class '{l}' has no samples; excluded");
                warn!("{msg}");
                warnings.push(msg);
            } else {
                order.push(l.clone());
            }
        }
        let index: HashMap<&str, usize> = order
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut ds = AssembledDataset::new(order.clone(), img.dim(), txt.dim());
        for s in &manifest.samples {
            let Some(&label_index) = index.get(s.class_label.as_str()) else {
                continue;
            };
            let doc = &manifest
                .class(&s.class_label)
                .expect("validated")
                .text_doc_id;
            ds.rows.push(DatasetRow {
                id: s.image_id.clone(),
                image: img.get(&s.image_id).expect("checked").to_vec(),
                text: txt.get(doc).expect("checked").to_vec(),
                label_index,
                label: s.class_label.clone(),
            });
        }
        ds
    };
    let train = build(&split.seen_labels);
    let zeroshot = build(&split.unseen_labels);

    Ok(Assembly {
        train,
        zeroshot,
        dropped_classes,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_split, ClassEntry, SampleEntry};

    /// `classes` classes with `per_class` samples each; class vectors only for
    /// the first `with_vectors` classes.
    fn fixture(
        classes: usize,
        per_class: usize,
        with_vectors: usize,
    ) -> (FeatureTable, FeatureTable, ClassVectorSet, Manifest) {
        let mut img = FeatureTable::new(2).unwrap();
        let mut txt = FeatureTable::new(1).unwrap();
        let mut cv = FeatureTable::new(3).unwrap();
        let mut m = Manifest::default();
        for c in 0..classes {
            let label = format!("c{c:03}");
            m.classes.push(ClassEntry {
                label: label.clone(),
                text_doc_id: format!("d{c}"),
            });
            txt.push(format!("d{c}"), &[c as f32]).unwrap();
            if c < with_vectors {
                cv.push(label.clone(), &[c as f32, 0.0, 1.0]).unwrap();
            }
            for s in 0..per_class {
                let id = format!("i{c}_{s}");
                img.push(id.clone(), &[c as f32, s as f32]).unwrap();
                m.samples.push(SampleEntry {
                    image_id: id,
                    class_label: label.clone(),
                });
            }
        }
        (img, txt, ClassVectorSet::new(cv), m)
    }

    #[test]
    fn drops_classes_without_vectors() {
        let (img, txt, cv, m) = fixture(200, 2, 196);
        let labels: Vec<String> = cv.labels().to_vec();
        let split = make_split(&labels, 25, 1).unwrap();
        let a = assemble_dataset(&img, &txt, &cv, &m, &split).unwrap();
        assert_eq!(a.dropped_classes.len(), 4);
        assert_eq!(a.train.num_classes() + a.zeroshot.num_classes(), 196);
        assert_eq!(a.train.label_order, split.seen_labels);
        assert!(a
            .train
            .rows
            .iter()
            .all(|r| split.seen_labels.contains(&r.label)));
        assert!(a
            .zeroshot
            .rows
            .iter()
            .all(|r| split.unseen_labels.contains(&r.label)));
        a.train.validate().unwrap();
        a.zeroshot.validate().unwrap();
    }

    #[test]
    fn single_unseen_class_rows() {
        let (img, txt, cv, m) = fixture(3, 60, 3);
        let labels: Vec<String> = cv.labels().to_vec();
        let split = make_split(&labels, 1, 4).unwrap();
        let a = assemble_dataset(&img, &txt, &cv, &m, &split).unwrap();
        assert_eq!(a.zeroshot.len(), 60);
        assert_eq!(a.train.len(), 120);
        // text vector replicated per class
        let t0 = &a.zeroshot.rows[0].text;
        assert!(a.zeroshot.rows.iter().all(|r| &r.text == t0));
    }

    #[test]
    fn class_without_samples_excluded() {
        let (img, txt, cv, mut m) = fixture(4, 3, 4);
        m.samples.retain(|s| s.class_label != "c001");
        let split = SplitSpec {
            seed: 0,
            seen_labels: vec!["c000".into(), "c001".into(), "c002".into()],
            unseen_labels: vec!["c003".into()],
        };
        let a = assemble_dataset(&img, &txt, &cv, &m, &split).unwrap();
        assert_eq!(a.train.label_order, ["c000", "c002"]);
        assert!(a.warnings.iter().any(|w| w.contains("c001")));
        assert_eq!(a.train.rows.iter().map(|r| r.label_index).max(), Some(1));
    }

    #[test]
    fn missing_ids_listed() {
        let (_, txt, cv, m) = fixture(3, 2, 3);
        let img = FeatureTable::from_records(2, [("i0_0", [0.0, 0.0])]).unwrap();
        let split = make_split(cv.labels(), 1, 0).unwrap();
        match assemble_dataset(&img, &txt, &cv, &m, &split).unwrap_err() {
            Error::Integrity { kind, missing } => {
                assert_eq!(kind, "image");
                assert_eq!(missing.len(), 5);
            }
            e => panic!("{e}"),
        }
        let (img, _, cv, m) = fixture(3, 2, 3);
        let txt = FeatureTable::from_records(1, [("d0", [0.0])]).unwrap();
        match assemble_dataset(&img, &txt, &cv, &m, &split).unwrap_err() {
            Error::Integrity { kind, missing } => {
                assert_eq!(kind, "text");
                assert_eq!(missing, ["d1", "d2"]);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn split_label_without_vector_rejected() {
        let (img, txt, cv, m) = fixture(3, 2, 2);
        let split = SplitSpec {
            seed: 0,
            seen_labels: vec!["c000".into(), "c001".into()],
            unseen_labels: vec!["c002".into()],
        };
        assert!(matches!(
            assemble_dataset(&img, &txt, &cv, &m, &split),
            Err(Error::Argument(_))
        ));
    }
}
