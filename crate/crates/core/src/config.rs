//! Configuration types: model architecture, training schedule, synthetic
//! data parameters, and the ablation flag set.

use crate::error::{MipError, Result};
use serde::{Deserialize, Serialize};

/// Input modality of an image. Every image carries exactly one flag.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vis,
    Ir,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Vis, Modality::Ir];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Vis => "vis",
            Modality::Ir => "ir",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vis" => Ok(Modality::Vis),
            "ir" => Ok(Modality::Ir),
            other => Err(MipError::InvalidConfig(format!("unknown modality {other:?}"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which mechanism produces the instance-conditioned prompt tokens.
///
/// `General` is the ablation control: one static learnable prompt block per
/// layer that replaces both the modality-aware and instance-aware prompts.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IpgVariant {
    #[default]
    Generated,
    Fused,
    General,
}

impl IpgVariant {
    pub fn tag(self) -> &'static str {
        match self {
            IpgVariant::Generated => "generated",
            IpgVariant::Fused => "fused",
            IpgVariant::General => "general",
        }
    }
}

/// Component toggles for ablation cells.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_mpl: bool,
    pub use_ipg: bool,
    #[serde(default)]
    pub ipg_variant: IpgVariant,
    pub use_iael: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_mpl: true, use_ipg: true, ipg_variant: IpgVariant::Generated, use_iael: true }
    }
}

impl AblationFlags {
    pub fn baseline() -> Self {
        Self { use_mpl: false, use_ipg: false, ipg_variant: IpgVariant::Generated, use_iael: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_iael && !self.use_ipg {
            return Err(MipError::InvalidConfig(
                "use_iael requires use_ipg: the loss supervises generated prompts".into(),
            ));
        }
        if self.use_ipg && self.ipg_variant == IpgVariant::General {
            if self.use_mpl {
                return Err(MipError::InvalidConfig(
                    "general prompts replace the modality prompts; disable use_mpl".into(),
                ));
            }
            if self.use_iael {
                return Err(MipError::InvalidConfig(
                    "general prompts are static; the instance-aware loss does not apply".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if !self.use_mpl && !self.use_ipg {
            return "baseline".into();
        }
        if self.use_ipg && self.ipg_variant == IpgVariant::General {
            return "general".into();
        }
        let mut parts = Vec::new();
        if self.use_mpl {
            parts.push("mpl".to_string());
        }
        if self.use_ipg {
            match self.ipg_variant {
                IpgVariant::Generated => parts.push("ipg".to_string()),
                IpgVariant::Fused => parts.push("ipg-fused".to_string()),
                IpgVariant::General => unreachable!(),
            }
        }
        if self.use_iael {
            parts.push("iael".to_string());
        }
        parts.join("+")
    }
}

/// Architectural and core training hyperparameters.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Tokens per modality-specific prompt block (j).
    pub modality_prompt_len: usize,
    /// Tokens per instance-specific prompt block (k).
    pub instance_prompt_len: usize,
    /// Heads inside the shared prompt-generator layer.
    pub generator_heads: usize,
    /// Prototype count for the fusion-based generator variant.
    pub prototype_bank_size: usize,
    pub num_identities: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: 64x32 inputs, 32 patches, a 4-layer encoder.
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            modality_prompt_len: 16,
            instance_prompt_len: 16,
            generator_heads: 1,
            prototype_bank_size: 8,
            num_identities: 20,
            alpha1: 1.0,
            alpha2: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(MipError::InvalidConfig(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(MipError::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.generator_heads == 0 || self.embed_dim % self.generator_heads != 0 {
            return Err(MipError::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of generator_heads {}",
                self.embed_dim, self.generator_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(MipError::InvalidConfig("num_layers must be >= 1".into()));
        }
        if self.channels == 0 {
            return Err(MipError::InvalidConfig("channels must be >= 1".into()));
        }
        if self.num_identities == 0 {
            return Err(MipError::InvalidConfig("num_identities must be >= 1".into()));
        }
        if self.prototype_bank_size < 2 {
            return Err(MipError::InvalidConfig("prototype_bank_size must be >= 2".into()));
        }
        Ok(())
    }

    /// Patch count l = (H/b) * (W/b).
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Flattened patch dimension C * b * b.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Optimizer, schedule, and run-control settings.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of epochs trained on the first-stage objective only.
    pub stage1_fraction: f64,
    pub triplet_margin: f64,
    /// Identities per batch (P).
    pub batch_persons: usize,
    /// Visible images per identity per batch.
    pub batch_vis_per_person: usize,
    /// Infrared images per identity per batch.
    pub batch_ir_per_person: usize,
    /// Fraction of training identities held out for checkpoint selection.
    pub val_fraction: f64,
    /// Evaluate on the validation identities every this many epochs
    /// (0 disables tracking; only the final checkpoint is written).
    pub eval_every: usize,
    /// Average the instance-prompt loss over layers instead of summing.
    pub iael_average_layers: bool,
    pub augment: bool,
    pub seed: u64,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            base_lr: 1e-2,
            min_lr: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            stage1_fraction: 0.1,
            triplet_margin: 0.3,
            batch_persons: 4,
            batch_vis_per_person: 8,
            batch_ir_per_person: 8,
            val_fraction: 0.2,
            eval_every: 5,
            iael_average_layers: false,
            augment: true,
            seed: 0,
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_lr > self.base_lr {
            return Err(MipError::InvalidConfig(format!(
                "min_lr {} exceeds base_lr {}",
                self.min_lr, self.base_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return Err(MipError::InvalidConfig("stage1_fraction must be in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(MipError::InvalidConfig("val_fraction must be in [0,1)".into()));
        }
        if self.batch_persons == 0 || self.batch_vis_per_person + self.batch_ir_per_person < 2 {
            return Err(MipError::InvalidConfig(
                "each identity must contribute at least two images per batch".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(MipError::InvalidConfig("epochs must be >= 1".into()));
        }
        self.flags.validate()
    }

    /// Epochs trained with the first-stage objective.
    pub fn stage1_epochs(&self) -> usize {
        (self.epochs as f64 * self.stage1_fraction).floor() as usize
    }

    pub fn batch_size(&self) -> usize {
        self.batch_persons * (self.batch_vis_per_person + self.batch_ir_per_person)
    }
}

/// Parameters of the synthetic paired-modality dataset.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_train_identities: usize,
    pub num_test_identities: usize,
    pub images_per_id_per_modality: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Standard deviation of the per-image pixel jitter.
    pub noise_sigma: f64,
    /// Deterministic visible-to-infrared map: per-channel response weights.
    pub ir_response: [f64; 3],
    /// Exponent applied to the weighted response (brightness nonlinearity).
    pub ir_gamma: f64,
    /// Ambient infrared floor added after the response map.
    pub ir_floor: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_train_identities: 20,
            num_test_identities: 10,
            images_per_id_per_modality: 20,
            image_height: 64,
            image_width: 32,
            noise_sigma: 0.05,
            ir_response: [0.15, 0.35, 0.80],
            ir_gamma: 1.5,
            ir_floor: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_train_identities == 0 || self.num_test_identities == 0 {
            return Err(MipError::InvalidConfig("need at least one identity per split".into()));
        }
        if self.images_per_id_per_modality == 0 {
            return Err(MipError::InvalidConfig("images_per_id_per_modality must be >= 1".into()));
        }
        if self.image_height < 16 || self.image_width < 8 {
            return Err(MipError::InvalidConfig("image size too small for the body layout".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(MipError::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_identities(&self) -> usize {
        self.num_train_identities + self.num_test_identities
    }
}

/// Canonical text form of the model config plus flags; hashed into
/// checkpoints so a loader can detect architecture mismatches.
pub fn config_fingerprint(cfg: &ModelConfig, flags: &AblationFlags) -> String {
    format!(
        "h={};w={};c={};b={};d={};n={};heads={};mlp={};j={};k={};gh={};bank={};ids={};a1={};a2={};seed={};mpl={};ipg={};variant={};iael={}",
        cfg.image_height,
        cfg.image_width,
        cfg.channels,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.num_layers,
        cfg.num_heads,
        cfg.mlp_ratio,
        cfg.modality_prompt_len,
        cfg.instance_prompt_len,
        cfg.generator_heads,
        cfg.prototype_bank_size,
        cfg.num_identities,
        cfg.alpha1,
        cfg.alpha2,
        cfg.seed,
        flags.use_mpl,
        flags.use_ipg,
        flags.ipg_variant.tag(),
        flags.use_iael,
    )
}

pub fn config_hash(cfg: &ModelConfig, flags: &AblationFlags) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(config_fingerprint(cfg, flags).as_bytes());
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
        SynthSpec::default().validate().unwrap();
    }

    #[test]
    fn patch_divisibility_is_enforced() {
        let cfg = ModelConfig { image_height: 65, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn iael_requires_ipg() {
        let flags = AblationFlags { use_ipg: false, use_iael: true, ..AblationFlags::default() };
        assert!(flags.validate().is_err());
    }

    #[test]
    fn general_variant_excludes_mpl() {
        let flags = AblationFlags {
            use_mpl: true,
            use_ipg: true,
            ipg_variant: IpgVariant::General,
            use_iael: false,
        };
        assert!(flags.validate().is_err());
    }

    #[test]
    fn hash_changes_with_architecture() {
        let cfg = ModelConfig::default();
        let flags = AblationFlags::default();
        let h1 = config_hash(&cfg, &flags);
        let cfg2 = ModelConfig { embed_dim: 32, ..cfg.clone() };
        assert_ne!(h1, config_hash(&cfg2, &flags));
        assert_eq!(h1, config_hash(&cfg, &flags));
    }

    #[test]
    fn stage_boundary_uses_epoch_fraction() {
        let cfg = TrainConfig { epochs: 30, stage1_fraction: 0.1, ..TrainConfig::default() };
        assert_eq!(cfg.stage1_epochs(), 3);
        let cfg = TrainConfig { epochs: 80, stage1_fraction: 0.1, ..TrainConfig::default() };
        assert_eq!(cfg.stage1_epochs(), 8);
    }

    #[test]
    fn toml_round_trip_preserves_flags() {
        let cfg = TrainConfig {
            flags: AblationFlags {
                use_mpl: false,
                use_ipg: true,
                ipg_variant: IpgVariant::Fused,
                use_iael: true,
            },
            ..TrainConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
