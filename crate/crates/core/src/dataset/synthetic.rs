//! Desk-scale stand-in data: Gaussian class vectors pushed through two fixed
//! random linear maps to produce image and text features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{ClassEntry, ClassVectorSet, FeatureTable, Manifest, SampleEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub semantic_dim: usize,
    pub per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Take absolute values of the class vectors, for models whose semantic
    /// layer is a ReLU and cannot emit negative components.
    pub nonnegative: bool,
}

impl SyntheticConfig {
    pub fn new(
        num_classes: usize,
        image_dim: usize,
        text_dim: usize,
        semantic_dim: usize,
        per_class: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_classes,
            image_dim,
            text_dim,
            semantic_dim,
            per_class,
            noise_sigma,
            seed,
            nonnegative: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub images: FeatureTable,
    pub texts: FeatureTable,
    pub class_vectors: ClassVectorSet,
    pub manifest: Manifest,
}

pub fn class_label(c: usize) -> String {
    format!("class_{c:03}")
}

/// Generates class vectors, image features and text features.
///
/// Class vectors are i.i.d. standard normal. Image vectors are `A·c + noise`
/// and the single text vector per class is `B·c`, where `A` and `B` have
/// i.i.d. entries with standard deviation `1/sqrt(semantic_dim)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    let SyntheticConfig {
        num_classes,
        image_dim,
        text_dim,
        semantic_dim,
        per_class,
        noise_sigma,
        seed,
        nonnegative,
    } = *cfg;
    if num_classes == 0 || image_dim == 0 || text_dim == 0 || semantic_dim == 0 || per_class == 0 {
        return Err(Error::arg(
            "synthetic dimensions and counts must be positive",
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::arg(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut class_vectors = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let v: Vec<f64> = (0..semantic_dim)
            .map(|_| {
                let x = gaussian(&mut rng);
                if nonnegative {
                    x.abs()
                } else {
                    x
                }
            })
            .collect();
        class_vectors.push(v);
    }
    let scale = 1.0 / (semantic_dim as f64).sqrt();
    let image_map: Vec<f64> = (0..image_dim * semantic_dim)
        .map(|_| gaussian(&mut rng) * scale)
        .collect();
    let text_map: Vec<f64> = (0..text_dim * semantic_dim)
        .map(|_| gaussian(&mut rng) * scale)
        .collect();

    let project = |map: &[f64], rows: usize, c: &[f64]| -> Vec<f64> {
        (0..rows)
            .map(|r| {
                map[r * semantic_dim..(r + 1) * semantic_dim]
                    .iter()
                    .zip(c)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    };

    let noise = Normal::new(0.0, noise_sigma).expect("sigma validated");
    let mut images = FeatureTable::with_capacity(image_dim, num_classes * per_class)?;
    let mut texts = FeatureTable::with_capacity(text_dim, num_classes)?;
    let mut cv = FeatureTable::with_capacity(semantic_dim, num_classes)?;
    let mut manifest = Manifest::default();

    for (c, cvec) in class_vectors.iter().enumerate() {
        let label = class_label(c);
        let doc = format!("doc_{c:03}");
        let cvec32: Vec<f32> = cvec.iter().map(|&x| x as f32).collect();
        cv.push(label.clone(), &cvec32)?;

        let text: Vec<f32> = project(&text_map, text_dim, cvec)
            .into_iter()
            .map(|x| x as f32)
            .collect();
        texts.push(doc.clone(), &text)?;
        manifest.classes.push(ClassEntry {
            label: label.clone(),
            text_doc_id: doc,
        });

        let clean = project(&image_map, image_dim, cvec);
        for s in 0..per_class {
            let id = format!("img_{c:03}_{s:03}");
            let v: Vec<f32> = clean
                .iter()
                .map(|&x| {
                    let n = if noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (x + n) as f32
                })
                .collect();
            images.push(id.clone(), &v)?;
            manifest.samples.push(SampleEntry {
                image_id: id,
                class_label: label.clone(),
            });
        }
    }

    Ok(SyntheticData {
        images,
        texts,
        class_vectors: ClassVectorSet::new(cv),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_duplicates() {
        let d = generate_synthetic(&SyntheticConfig::new(3, 5, 4, 2, 2, 0.0, 1)).unwrap();
        assert_eq!(d.images.row(0), d.images.row(1));
        assert_ne!(d.images.row(0), d.images.row(2));
        assert_eq!(d.texts.len(), 3);
        assert_eq!(d.manifest.samples.len(), 6);
        d.manifest.validate().unwrap();
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig::new(20, 8, 6, 4, 30, 0.1, 99);
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.to_bytes().unwrap(), b.images.to_bytes().unwrap());
        let c = generate_synthetic(&SyntheticConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.class_vectors, c.class_vectors);
    }

    #[test]
    fn class_vectors_distinct() {
        let d = generate_synthetic(&SyntheticConfig::new(20, 4, 4, 16, 1, 0.0, 5)).unwrap();
        let v: Vec<&[f32]> = d.class_vectors.iter().map(|(_, v)| v).collect();
        let mut min = f64::INFINITY;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                let d2: f64 = v[i]
                    .iter()
                    .zip(v[j])
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum();
                min = min.min(d2.sqrt());
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn nonnegative_option() {
        let mut cfg = SyntheticConfig::new(5, 4, 4, 8, 1, 0.0, 5);
        cfg.nonnegative = true;
        let d = generate_synthetic(&cfg).unwrap();
        assert!(d
            .class_vectors
            .iter()
            .all(|(_, v)| v.iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn bad_parameters() {
        for cfg in [
            SyntheticConfig::new(0, 4, 4, 4, 1, 0.0, 0),
            SyntheticConfig::new(2, 0, 4, 4, 1, 0.0, 0),
            SyntheticConfig::new(2, 4, 4, 4, 0, 0.0, 0),
            SyntheticConfig::new(2, 4, 4, 4, 1, -1.0, 0),
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::Argument(_))));
        }
    }
}
