use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Softmax,
}

/// One dense layer: `linear → [batchnorm] → activation → [dropout]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub has_batchnorm: bool,
    pub dropout_rate: f32,
}

/// Floor on hidden widths chosen by [`ArchConfig::tapered`].
pub const MIN_HIDDEN_WIDTH: usize = 128;

/// Network architecture and initialization seed.
///
/// The visual input passes through the reducer layers; the reduced vector is
/// concatenated with the text vector and fed to the trunk, whose last layer is
/// the semantic layer. A frozen class-vector matrix maps the semantic
/// activation to one logit per seen class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    /// Output widths of the reducer layers; the last one is the reduced
    /// visual dimension. Empty means the raw visual vector is used.
    pub reducer_widths: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub semantic_dim: usize,
    pub semantic_activation: Activation,
    pub reducer_dropout: f32,
    pub trunk_dropout: f32,
    pub reducer_batchnorm: bool,
    /// Lets SGD update the class-vector output matrix (ablation only).
    pub trainable_output: bool,
    pub seed: u64,
}

impl ArchConfig {
    /// 4096 → 2048 → 1536 → 1024 reducer and a 2048 → 1536 → 1024 → 768 →
    /// 512 → 300 trunk.
    pub fn paper_default(seed: u64) -> Self {
        Self::tapered(4096, 1024, 300, seed)
    }

    /// The default taper for arbitrary input sizes: three reducer layers down
    /// to a quarter of the visual dim, then five trunk layers narrowing the
    /// fused vector, never below the semantic dim. Hidden layers are at least
    /// [`MIN_HIDDEN_WIDTH`] wide so dropout does not starve small models.
    pub fn tapered(image_dim: usize, text_dim: usize, semantic_dim: usize, seed: u64) -> Self {
        let frac = |n: usize, num: usize, den: usize| (n * num / den).max(MIN_HIDDEN_WIDTH);
        let reduced = frac(image_dim, 1, 4);
        let fused = reduced + text_dim;
        Self {
            image_dim,
            text_dim,
            reducer_widths: vec![frac(image_dim, 1, 2), frac(image_dim, 3, 8), reduced],
            trunk_hidden: [(3, 4), (1, 2), (3, 8), (1, 4)]
                .iter()
                .map(|&(a, b)| frac(fused, a, b).max(semantic_dim))
                .collect(),
            semantic_dim,
            semantic_activation: Activation::Relu,
            reducer_dropout: 0.3,
            trunk_dropout: 0.2,
            reducer_batchnorm: true,
            trainable_output: false,
            seed,
        }
    }

    pub fn reduced_dim(&self) -> usize {
        self.reducer_widths
            .last()
            .copied()
            .unwrap_or(self.image_dim)
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.reduced_dim() + self.text_dim
    }

    pub fn reducer_specs(&self) -> Vec<LayerSpec> {
        let mut in_dim = self.image_dim;
        self.reducer_widths
            .iter()
            .map(|&out_dim| {
                let spec = LayerSpec {
                    in_dim,
                    out_dim,
                    activation: Activation::Relu,
                    has_batchnorm: self.reducer_batchnorm,
                    dropout_rate: self.reducer_dropout,
                };
                in_dim = out_dim;
                spec
            })
            .collect()
    }

    /// Trunk layers, the last being the semantic layer.
    pub fn trunk_specs(&self) -> Vec<LayerSpec> {
        let mut in_dim = self.trunk_input_dim();
        let mut specs: Vec<LayerSpec> = self
            .trunk_hidden
            .iter()
            .map(|&out_dim| {
                let spec = LayerSpec {
                    in_dim,
                    out_dim,
                    activation: Activation::Relu,
                    has_batchnorm: false,
                    dropout_rate: self.trunk_dropout,
                };
                in_dim = out_dim;
                spec
            })
            .collect();
        specs.push(LayerSpec {
            in_dim,
            out_dim: self.semantic_dim,
            activation: self.semantic_activation,
            has_batchnorm: false,
            dropout_rate: 0.0,
        });
        specs
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.image_dim, self.text_dim, self.semantic_dim];
        if dims.contains(&0) || self.reducer_widths.contains(&0) || self.trunk_hidden.contains(&0) {
            return Err(Error::Config("all layer widths must be positive".into()));
        }
        if self.semantic_activation == Activation::Softmax {
            return Err(Error::Config(
                "softmax is reserved for the output layer".into(),
            ));
        }
        for rate in [self.reducer_dropout, self.trunk_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn parse_widths(s: &str) -> Result<Vec<usize>> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|w| {
                w.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad width '{w}': {e}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_default_widths() {
        let c = ArchConfig::paper_default(0);
        assert_eq!(c.reducer_widths, [2048, 1536, 1024]);
        assert_eq!(c.trunk_input_dim(), 2048);
        assert_eq!(c.trunk_hidden, [1536, 1024, 768, 512]);
        let trunk = c.trunk_specs();
        assert_eq!(trunk.len(), 5);
        assert_eq!(trunk.last().unwrap().out_dim, 300);
        assert_eq!(c.reducer_specs()[0].in_dim, 4096);
        c.validate().unwrap();
    }

    #[test]
    fn small_taper_is_floored() {
        let c = ArchConfig::tapered(64, 32, 16, 0);
        assert_eq!(c.reducer_widths, [128, 128, 128]);
        assert_eq!(c.trunk_hidden, [128, 128, 128, 128]);
        let c = ArchConfig::tapered(64, 32, 300, 0);
        assert_eq!(c.trunk_hidden, [300, 300, 300, 300]);
        let c = ArchConfig::tapered(1024, 64, 16, 0);
        assert_eq!(c.reducer_widths, [512, 384, 256]);
        assert_eq!(c.trunk_hidden, [240, 160, 128, 128]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ArchConfig::tapered(8, 4, 3, 0);
        c.trunk_dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = ArchConfig::tapered(8, 4, 3, 0);
        c.semantic_activation = Activation::Softmax;
        assert!(c.validate().is_err());
        let mut c = ArchConfig::tapered(8, 4, 3, 0);
        c.reducer_widths = vec![4, 0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn width_lists() {
        assert_eq!(ArchConfig::parse_widths("8, 5").unwrap(), [8, 5]);
        assert!(ArchConfig::parse_widths("").unwrap().is_empty());
        assert!(ArchConfig::parse_widths("a").is_err());
    }
}
