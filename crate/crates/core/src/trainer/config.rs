//! Run configuration: one TOML document covering data generation, model,
//! optimisation and ablation switches. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ahsw::AhswConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::geometry::{ring_rig, VoxelGridSpec};
use crate::losses::LossConfig;
use crate::synthdata::{SceneSpec, N_CLS};
use crate::temporal::TemporalConfig;

/// Label prior of the long-tail synthetic dataset; entry `c − 1` is category `c`.
pub const LONG_TAIL: [f64; N_CLS] = [0.55, 0.20, 0.10, 0.06, 0.04, 0.03, 0.015, 0.005];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_sequences: usize,
    pub val_sequences: usize,
    /// Frames per sequence; the last one is supervised.
    pub sequence_length: usize,
    pub n_objects: usize,
    pub class_frequencies: Vec<f64>,
    pub n_cameras: usize,
    pub hfov_deg: f64,
    pub camera_offset: f64,
    pub image_size: [usize; 2],
    /// Fine grid.
    pub grid_dims: [usize; 3],
    pub voxel_size: f64,
    pub grid_origin: [f64; 3],
    pub lidar_rays: usize,
    pub sweeps_per_frame: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_sequences: 64,
            val_sequences: 16,
            sequence_length: 4,
            n_objects: 36,
            class_frequencies: LONG_TAIL.to_vec(),
            n_cameras: 4,
            hfov_deg: 100.0,
            camera_offset: 0.2,
            image_size: [64, 48],
            grid_dims: [64, 64, 16],
            voxel_size: 0.5,
            grid_origin: [-16.0, -16.0, -4.0],
            lidar_rays: 8192,
            sweeps_per_frame: 2,
        }
    }
}

impl DataConfig {
    pub fn grid(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(self.grid_dims, self.voxel_size, self.grid_origin)
    }

    /// Seed of sequence `i` of a split; validation seeds follow the training ones.
    pub fn sequence_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(0x0001_0000_0001).wrapping_add(index as u64)
    }

    /// The `n` categories with the smallest prior, rarest first.
    pub fn rarest_categories(&self, n: usize) -> Vec<usize> {
        let mut c: Vec<usize> = (1..=self.class_frequencies.len()).collect();
        c.sort_by(|&a, &b| self.class_frequencies[a - 1].total_cmp(&self.class_frequencies[b - 1]).then(b.cmp(&a)));
        c.truncate(n);
        c
    }

    pub fn scene_spec(&self, seed: u64) -> Result<SceneSpec> {
        let rig = ring_rig(self.n_cameras, self.hfov_deg, (self.image_size[0], self.image_size[1]), self.camera_offset)?;
        let spec = SceneSpec {
            seed,
            n_objects: self.n_objects,
            class_frequencies: self.class_frequencies.clone(),
            sequence_length: self.sequence_length,
            rig,
            grid: self.grid()?,
            lidar_rays: self.lidar_rays,
            sweeps_per_frame: self.sweeps_per_frame,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Two fusion layers and a narrower image encoder.
    Small,
    #[default]
    Base,
    /// Base without query proposal: every voxel is attended.
    Dense,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width `D`.
    pub d: usize,
    pub image_hidden: usize,
    /// Fine-to-coarse ratio, also the decoder upsampling rate.
    pub upsample: usize,
    pub scale: Scale,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 16, image_hidden: 16, upsample: 2, scale: Scale::Base, precision: Precision::F32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, lr: 2e-4, weight_decay: 0.01, batch_size: 2, seed: 0, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8 }
    }
}

/// Component switches; every row of a component ablation is one setting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub proxy_loss: bool,
    pub ahsw: bool,
    pub gsca: bool,
    pub ssca: bool,
    pub temporal: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { proxy_loss: true, ahsw: true, gsca: true, ssca: true, temporal: true }
    }
}

impl AblationFlags {
    pub const NAMES: [&'static str; 5] = ["proxy_loss", "ahsw", "gsca", "ssca", "temporal"];

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "proxy_loss" => &mut self.proxy_loss,
            "ahsw" => &mut self.ahsw,
            "gsca" => &mut self.gsca,
            "ssca" => &mut self.ssca,
            "temporal" => &mut self.temporal,
            other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
        };
        *slot = on;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub temporal: TemporalConfig,
    pub loss: LossConfig,
    pub ahsw: AhswConfig,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets one key from its text form. Keys are dotted paths
    /// (`fusion.k_percent`); the ablation flags and `scale` may be given bare,
    /// and flags accept `on`/`off`. The result is validated.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let path = if AblationFlags::NAMES.contains(&key) {
            format!("ablation.{key}")
        } else if key == "scale" || key == "precision" {
            format!("model.{key}")
        } else {
            key.to_string()
        };
        let parsed = match value {
            "on" => toml::Value::Boolean(true),
            "off" => toml::Value::Boolean(false),
            v => toml::from_str::<toml::Table>(&format!("v = {v}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| toml::Value::String(v.to_string())),
        };
        let mut root = toml::Value::try_from(&*self).expect("config serialises");
        let mut slot = &mut root;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot.as_table_mut().ok_or_else(|| Error::Config(format!("`{path}` is not a config key")))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) {
                    return Err(Error::Config(format!("unknown key `{path}`")));
                }
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            slot = table.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown key `{path}`")))?;
        }
        let next: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("`{path}` = {value}: {}", e.message())))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Small preset used by tests and the acceptance harness.
    pub fn tiny() -> Self {
        Self {
            data: DataConfig {
                train_sequences: 24,
                val_sequences: 8,
                n_objects: 10,
                image_size: [32, 24],
                grid_dims: [32, 32, 8],
                voxel_size: 0.5,
                grid_origin: [-8.0, -8.0, -2.5],
                lidar_rays: 2048,
                ..DataConfig::default()
            },
            model: ModelConfig { d: 8, image_hidden: 8, ..ModelConfig::default() },
            fusion: FusionConfig { n_layers: 2, n_heads: 2, n_points: 4, ssca_heads: 2, ..FusionConfig::default() },
            temporal: TemporalConfig { n_heads: 2, ..TemporalConfig::default() },
            loss: LossConfig::default(),
            ahsw: AhswConfig { warmup: 2, ..AhswConfig::default() },
            train: TrainConfig { epochs: 12, lr: 3e-3, ..TrainConfig::default() },
            ablation: AblationFlags::default(),
        }
    }

    /// The configuration actually run: scale and ablation switches folded into
    /// the module settings.
    pub fn effective(&self) -> RunConfig {
        let mut c = self.clone();
        match c.model.scale {
            Scale::Small => {
                c.fusion.n_layers = c.fusion.n_layers.min(2);
                c.model.image_hidden = (c.model.image_hidden / 2).max(1);
            }
            Scale::Base => {}
            Scale::Dense => c.fusion.k_percent = 100.0,
        }
        c.fusion.gsca &= c.ablation.gsca;
        c.fusion.ssca &= c.ablation.ssca;
        if !c.ablation.temporal {
            c.temporal.k = 0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Error::Config(m);
        let grid = self.data.grid().map_err(|e| cfg(format!("data grid: {e}")))?;
        grid.coarsen(self.model.upsample).map_err(|e| cfg(format!("model.upsample: {e}")))?;
        if self.model.d == 0 || self.model.image_hidden == 0 {
            return Err(cfg("model.d and model.image_hidden must be >= 1".into()));
        }
        if self.data.train_sequences == 0 {
            return Err(cfg("data.train_sequences must be >= 1".into()));
        }
        if self.data.image_size.iter().any(|&s| s < 8) {
            return Err(cfg("data.image_size must be at least 8×8".into()));
        }
        if self.data.sequence_length == 0 {
            return Err(cfg("data.sequence_length must be >= 1".into()));
        }
        self.data.scene_spec(0).map_err(|e| cfg(format!("data: {e}")))?;
        let eff = self.effective();
        self.fusion.validate(self.model.d)?;
        eff.fusion.validate(self.model.d)?;
        eff.temporal.validate(self.model.d)?;
        self.loss.validate()?;
        self.ahsw.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(cfg("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.weight_decay >= 0.0) {
            return Err(cfg("train.lr must be positive and train.weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return Err(cfg("train.beta1 and train.beta2 must lie in [0, 1) and train.adam_eps be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_key_accepts_flags_scale_and_dotted_paths() {
        let mut c = RunConfig::tiny();
        c.set_key("proxy_loss", "off").unwrap();
        c.set_key("scale", "dense").unwrap();
        c.set_key("fusion.k_percent", "50").unwrap();
        c.set_key("loss.alpha", "16.0").unwrap();
        assert!(!c.ablation.proxy_loss);
        assert_eq!(c.model.scale, Scale::Dense);
        assert_eq!(c.fusion.k_percent, 50.0);
        assert_eq!(c.loss.alpha, 16.0);
        let before = c.clone();
        let err = c.set_key("fusion.bogus", "1").unwrap_err().to_string();
        assert!(err.contains("fusion.bogus"), "{err}");
        assert!(c.set_key("scale", "huge").is_err());
        assert!(c.set_key("fusion.k_percent", "150").is_err());
        assert_eq!(c, before);
    }

    #[test]
    fn rarest_categories_follow_the_prior() {
        assert_eq!(DataConfig::default().rarest_categories(3), vec![8, 7, 6]);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        for c in [RunConfig::default(), RunConfig::tiny()] {
            c.validate().unwrap();
            let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml_str("[train]\nepochz = 3\n").unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = RunConfig::from_toml_str("bogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[fusion]\nk_percent = 120.0\n",
            "[ahsw]\nlambda = 0.5\n",
            "[model]\nupsample = 3\n",
            "[model]\nd = 6\n[fusion]\nn_heads = 4\n",
            "[train]\nlr = -1.0\n",
            "[data]\nclass_frequencies = [1.0]\n",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn scale_and_ablation_fold_into_modules() {
        let mut c = RunConfig::default();
        c.model.scale = Scale::Dense;
        assert_eq!(c.effective().fusion.k_percent, 100.0);
        c.model.scale = Scale::Small;
        assert_eq!(c.effective().fusion.n_layers, 2);
        c.ablation.ssca = false;
        c.ablation.temporal = false;
        let e = c.effective();
        assert!(!e.fusion.ssca && e.fusion.gsca);
        assert_eq!(e.temporal.k, 0);
        assert!(c.ablation.clone().set("nope", true).is_err());
    }
}
