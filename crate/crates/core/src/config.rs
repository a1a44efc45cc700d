//! Experiment configuration.
//!
//! One JSON document drives data generation, the model, the loss, training
//! and evaluation. Every section has defaults, so a config file only needs
//! the keys it overrides. The whole document is echoed into checkpoints and
//! evaluation reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PrimitiveKind, TextureMode};
use crate::error::{config_err, Error, Result};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "MODOT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub num_samples: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Inclusive range of primitives per scene.
    pub num_primitives: [usize; 2],
    pub kinds: Vec<PrimitiveKind>,
    pub textures: Vec<TextureMode>,
    /// `[z_min, z_max]` in meters; the back wall sits at `z_max`.
    pub depth_range: [f64; 2],
    pub fov_deg: f64,
    /// Depth-contrast threshold for discontinuity boundaries, meters.
    pub contrast_threshold: f64,
    /// Grazing-angle tolerance of the self-occlusion rim rule, degrees.
    pub rim_angle_deg: f64,
    pub split_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            num_samples: 8,
            image_width: 64,
            image_height: 64,
            num_primitives: [1, 4],
            kinds: PrimitiveKind::ALL.to_vec(),
            textures: TextureMode::ALL.to_vec(),
            depth_range: [1.0, 6.0],
            fov_deg: 60.0,
            contrast_threshold: 0.05,
            rim_angle_deg: 5.0,
            split_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Patch-merging windowed-attention transformer.
    Transformer,
    /// Convolutional stand-in with identical output shapes.
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub base_channels: usize,
    pub window_size: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Transformer,
            base_channels: 16,
            window_size: 4,
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasmConfig {
    /// Channel-attention reduction ratio.
    pub reduction: usize,
    /// Number of square 3x3 branches in the strip fuse block.
    pub square_branches: usize,
}

impl Default for CasmConfig {
    fn default() -> Self {
        Self {
            reduction: 4,
            square_branches: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub casm: CasmConfig,
    pub use_casm: bool,
    pub use_eip: bool,
    pub use_ssr: bool,
    /// Upper bound of the depth head, meters.
    pub max_depth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            casm: CasmConfig::default(),
            use_casm: true,
            use_eip: true,
            use_ssr: true,
            max_depth: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObdclVariant {
    /// `B * (m - delta)`, unclamped.
    Literal,
    /// `B * max(0, m - delta)`.
    Hinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_d: f64,
    pub w_ob: f64,
    pub w_c: f64,
    pub silog_lambda: f64,
    pub silog_alpha: f64,
    pub cce_eps: f64,
    pub obdcl_n: usize,
    pub obdcl_margin: f64,
    pub obdcl_variant: ObdclVariant,
    /// Weights for `[final, side_1, .., side_5]`; empty means equal weights.
    pub ob_map_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_d: 1.2,
            w_ob: 1.0,
            w_c: 0.1,
            silog_lambda: 0.85,
            silog_alpha: 10.0,
            cce_eps: 1e-6,
            obdcl_n: 1,
            obdcl_margin: 1.0,
            obdcl_variant: ObdclVariant::Literal,
            ob_map_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr: f64,
    /// Learning rate reached at the last step (linear decay).
    pub lr_end: f64,
    pub hflip: bool,
    pub color_jitter: bool,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub out_dir: PathBuf,
    /// Stage-one checkpoint consumed by stage two; defaults to
    /// `<out_dir>/stage1.ckpt`.
    pub stage1_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            batch_size: 4,
            stage1_steps: 2000,
            stage2_steps: 500,
            lr: 1e-4,
            lr_end: 1e-5,
            hflip: true,
            color_jitter: false,
            checkpoint_every: 500,
            log_every: 50,
            out_dir: PathBuf::from("runs/default"),
            stage1_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub depth_cap: f64,
    pub min_eval_depth: f64,
    pub ob_threshold: f64,
    pub tolerance_radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            depth_cap: 10.0,
            min_eval_depth: 1e-3,
            ob_threshold: 0.7,
            tolerance_radius: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config file and applies the `MODOT_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| config_err!("{}: {e}", path.display()))?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| config_err!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.image_width == 0 || d.image_height == 0 || !d.image_width.is_multiple_of(32) || !d.image_height.is_multiple_of(32) {
            return Err(config_err!(
                "data image size {}x{} must be a positive multiple of 32",
                d.image_width,
                d.image_height
            ));
        }
        if d.num_primitives[0] == 0 || d.num_primitives[0] > d.num_primitives[1] {
            return Err(config_err!("data.num_primitives must satisfy 1 <= min <= max"));
        }
        if d.kinds.is_empty() || d.textures.is_empty() {
            return Err(config_err!("data.kinds and data.textures must be non-empty"));
        }
        if !(d.depth_range[0] > 0.0 && d.depth_range[0] < d.depth_range[1]) {
            return Err(config_err!("data.depth_range needs 0 < z_min < z_max"));
        }
        if d.contrast_threshold <= 0.0 {
            return Err(config_err!("data.contrast_threshold must be positive"));
        }
        if !(0.0..=1.0).contains(&d.split_fraction) {
            return Err(config_err!("data.split_fraction must lie in [0, 1]"));
        }

        let e = &self.model.encoder;
        if e.base_channels < 8 {
            return Err(config_err!("model.encoder.base_channels must be >= 8"));
        }
        if e.window_size == 0 {
            return Err(config_err!("model.encoder.window_size must be positive"));
        }
        for (i, &h) in e.heads.iter().enumerate() {
            let width = e.base_channels << i;
            if h == 0 || !width.is_multiple_of(h) {
                return Err(config_err!("stage {i} width {width} is not divisible by {h} heads"));
            }
        }
        if self.model.casm.reduction == 0 {
            return Err(config_err!("model.casm.reduction must be positive"));
        }
        if self.model.max_depth <= 0.0 {
            return Err(config_err!("model.max_depth must be positive"));
        }

        let l = &self.loss;
        if l.w_d < 0.0 || l.w_ob < 0.0 || l.w_c < 0.0 {
            return Err(config_err!("loss weights must be non-negative"));
        }
        if l.obdcl_n == 0 {
            return Err(config_err!("loss.obdcl_n must be >= 1"));
        }
        if !l.ob_map_weights.is_empty() && l.ob_map_weights.len() != 6 {
            return Err(config_err!("loss.ob_map_weights needs 6 entries (final + 5 sides)"));
        }

        let t = &self.train;
        if t.crop_size == 0 || !t.crop_size.is_multiple_of(32) {
            return Err(config_err!("train.crop_size must be a positive multiple of 32"));
        }
        if t.batch_size == 0 || t.stage1_steps == 0 || t.stage2_steps == 0 {
            return Err(config_err!("train batch size and step counts must be >= 1"));
        }
        if t.lr <= 0.0 || t.lr_end < 0.0 {
            return Err(config_err!("train learning rates must be positive"));
        }

        let v = &self.eval;
        if !(0.0..=1.0).contains(&v.ob_threshold) {
            return Err(config_err!("eval.ob_threshold must lie in [0, 1]"));
        }
        if v.depth_cap <= 0.0 || v.min_eval_depth < 0.0 || v.min_eval_depth >= v.depth_cap {
            return Err(config_err!("eval depth window must satisfy 0 <= min < cap"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"loss": {"w_c": 0.0}, "model": {"use_casm": false}}"#).unwrap();
        assert_eq!(cfg.loss.w_c, 0.0);
        assert_eq!(cfg.loss.w_d, 1.2);
        assert!(!cfg.model.use_casm);
        assert_eq!(cfg.model.encoder.base_channels, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"los": {}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.crop_size = 60;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.eval.ob_threshold = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
