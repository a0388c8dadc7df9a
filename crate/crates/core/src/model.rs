//! Model configuration, ablation variants, parameter initialization and
//! checkpoints with a JSON sidecar describing config and vocabulary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig, FusionInput};
use crate::numerics::{checkpoint, Graph, ParamStore, Var};
use crate::vision::{self, VisionConfig};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    B2t2,
    DualEncoder,
}

/// Where visual tokens enter the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Added to the non-contextualized embeddings.
    Full,
    /// Only the whole-image token `[b0]` is fused.
    NoBoxes,
    /// Nothing visual enters.
    TextOnly,
    /// Added to the input of the last encoder layer.
    LateFusion,
}

/// The ablation presets. Each fixes the architecture, fusion mode, label
/// prepending, position embeddings and appended box count `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    #[default]
    Full,
    NoBoxes,
    TextOnly,
    LateFusion,
    NoClassLabels,
    NoPositionEmbeddings,
    AppendedBoxes(usize),
    DualEncoder,
}

pub const DEFAULT_APPENDED_BOXES: usize = 8;
pub const FEWER_APPENDED_BOXES: usize = 4;

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoBoxes,
        Variant::TextOnly,
        Variant::LateFusion,
        Variant::NoClassLabels,
        Variant::NoPositionEmbeddings,
        Variant::AppendedBoxes(FEWER_APPENDED_BOXES),
        Variant::DualEncoder,
    ];

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::DualEncoder => Architecture::DualEncoder,
            _ => Architecture::B2t2,
        }
    }

    pub fn mode(self) -> FusionMode {
        match self {
            Variant::NoBoxes => FusionMode::NoBoxes,
            Variant::TextOnly | Variant::DualEncoder => FusionMode::TextOnly,
            Variant::LateFusion => FusionMode::LateFusion,
            _ => FusionMode::Full,
        }
    }

    pub fn class_labels(self) -> bool {
        self != Variant::NoClassLabels
    }

    pub fn position_embeddings(self) -> bool {
        self != Variant::NoPositionEmbeddings
    }

    /// Appended label/box pairs `p`.
    pub fn appended_boxes(self) -> usize {
        match self {
            Variant::AppendedBoxes(p) => p,
            Variant::NoBoxes | Variant::TextOnly | Variant::DualEncoder => 0,
            _ => DEFAULT_APPENDED_BOXES,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NoBoxes => f.write_str("no_boxes"),
            Variant::TextOnly => f.write_str("text_only"),
            Variant::LateFusion => f.write_str("late_fusion"),
            Variant::NoClassLabels => f.write_str("no_class_labels"),
            Variant::NoPositionEmbeddings => f.write_str("no_position_embeddings"),
            Variant::AppendedBoxes(FEWER_APPENDED_BOXES) => f.write_str("fewer_boxes"),
            Variant::AppendedBoxes(p) => write!(f, "appended_boxes_{p}"),
            Variant::DualEncoder => f.write_str("dual_encoder"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = match s.trim() {
            "full" => Variant::Full,
            "no_boxes" => Variant::NoBoxes,
            "text_only" => Variant::TextOnly,
            "late_fusion" | "late_fusion_last_layer" => Variant::LateFusion,
            "no_class_labels" => Variant::NoClassLabels,
            "no_position_embeddings" => Variant::NoPositionEmbeddings,
            "fewer_boxes" => Variant::AppendedBoxes(FEWER_APPENDED_BOXES),
            "dual_encoder" => Variant::DualEncoder,
            other => match other.strip_prefix("appended_boxes_").map(str::parse) {
                Some(Ok(p)) => Variant::AppendedBoxes(p),
                _ => return Err(Error::Config(format!("unknown variant {other:?}"))),
            },
        };
        Ok(v)
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// Parses a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vision: VisionConfig,
    pub fusion: FusionConfig,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.vision.validate()?;
        if !self.vision.out_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "visual dimension {} must be divisible by 4",
                self.vision.out_dim
            )));
        }
        if self.fusion.grid_size == 0 {
            return Err(Error::Config("grid_size must be positive".into()));
        }
        if self.variant.mode() == FusionMode::LateFusion && self.encoder.num_layers == 0 {
            return Err(Error::Config("late fusion needs an encoder layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    vocab: Vec<String>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&config.encoder, &mut params, &mut rng);
        vision::init_params(&config.vision, &mut params);
        fusion::init_params(&config, &mut params, &mut rng);
        Ok(Model { config, params })
    }

    /// Decision margin; `p(l = 1) = σ(margin)` for both architectures.
    pub fn margin(&self, g: &mut Graph, input: &FusionInput) -> Result<Var> {
        fusion::margin(g, &self.config, input)
    }

    /// Margin without building gradients.
    pub fn margin_value(&self, input: &FusionInput) -> Result<f64> {
        let mut g = Graph::inference(&self.params);
        let m = self.margin(&mut g, input)?;
        Ok(g.tape.data(m)[0])
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    /// Writes the binary checkpoint and its `.meta.json` sidecar.
    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        checkpoint::save(&self.params, path)?;
        let meta = Sidecar {
            config: self.config.clone(),
            vocab: vocab.tokens().to_vec(),
        };
        let side = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Vocab)> {
        let side = Self::sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar = serde_json::from_str(&text)?;
        let mut model = Model::init(meta.config, 0)?;
        let loaded = checkpoint::load(path)?;
        model.params.ensure_compatible(&loaded)?;
        model.params.load_matching(&loaded);
        let vocab = Vocab::from_tokens(meta.vocab)?;
        Ok((model, vocab))
    }

    /// Copies every same-named, same-shaped parameter from `other`.
    pub fn warm_start(&mut self, other: &ParamStore) -> Vec<String> {
        self.params.load_matching(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(
            "appended_boxes_2".parse::<Variant>().unwrap(),
            Variant::AppendedBoxes(2)
        );
        assert_eq!(
            "late_fusion_last_layer".parse::<Variant>().unwrap(),
            Variant::LateFusion
        );
        assert!("fusion_sauce".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_flags() {
        assert_eq!(Variant::Full.appended_boxes(), 8);
        assert_eq!(Variant::AppendedBoxes(4).appended_boxes(), 4);
        assert_eq!(Variant::NoBoxes.appended_boxes(), 0);
        assert!(!Variant::NoClassLabels.class_labels());
        assert!(!Variant::NoPositionEmbeddings.position_embeddings());
        assert_eq!(Variant::DualEncoder.architecture(), Architecture::DualEncoder);
    }

    #[test]
    fn parameter_shapes() {
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let p = &model.params;
        assert_eq!(p.get(fusion::M).unwrap().shape(), &[64, 32]);
        assert_eq!(p.get(fusion::D).unwrap().shape(), &[32, 64]);
        assert_eq!(p.get(fusion::X).unwrap().shape(), &[14, 8]);
        assert_eq!(p.get(fusion::CLASS_VECTORS).unwrap().shape(), &[2, 64]);
        assert_eq!(p.get(fusion::CLASS_BIAS).unwrap().shape(), &[2]);
        assert!(!p.is_trainable(vision::PROJECTION));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            variant: Variant::LateFusion,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg, 5).unwrap();
        let vocab = Vocab::from_tokens(
            ["[CLS]", "[SEP]", "[PAD]", "[MASK]", "[IMG]", "[BOX]", "[UNK]", "red"]
                .map(String::from)
                .to_vec(),
        )
        .unwrap();
        model.save(&path, &vocab).unwrap();
        let (back, v2) = Model::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(v2, vocab);
        assert!(!back.params.is_trainable(vision::PROJECTION));
    }
}
