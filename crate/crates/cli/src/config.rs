//! Run configuration, loaded from JSON. Unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use octattn_core::otb::OtbConfig;
use octattn_core::semantic::SamConfig;
use octattn_core::voxel::VoxelSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Train,
    #[default]
    Infer,
}

/// Voxel geometry presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Kitti,
    Waymo,
}

impl Preset {
    pub fn spec(self) -> VoxelSpec {
        match self {
            Preset::Kitti => VoxelSpec::KITTI,
            Preset::Waymo => VoxelSpec::WAYMO,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Voxel edge lengths in meters.
    pub voxel_size: [f64; 3],
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    /// Pyramid height of each stacked OTB layer.
    pub heights: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub k: usize,
    /// Octant budget; `4·k` when absent.
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub big_k: Option<usize>,
    pub tau: f64,
    pub sam_gamma: f64,
    pub delta_q: f64,
    pub delta_k: f64,
    pub seed: u64,
    pub mode: RunMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = VoxelSpec::KITTI;
        Self {
            voxel_size: spec.voxel_size,
            range_min: spec.range_min,
            range_max: spec.range_max,
            heights: vec![4, 3],
            d: 64,
            heads: 2,
            head_dim: 32,
            k: 8,
            big_k: None,
            tau: 1.0,
            sam_gamma: 10000.0,
            delta_q: 0.05,
            delta_k: 0.2,
            seed: 0,
            mode: RunMode::Infer,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        let s = preset.spec();
        self.voxel_size = s.voxel_size;
        self.range_min = s.range_min;
        self.range_max = s.range_max;
        self
    }

    pub fn big_k(&self) -> usize {
        self.big_k.unwrap_or(4 * self.k)
    }

    pub fn spec(&self) -> VoxelSpec {
        VoxelSpec {
            voxel_size: self.voxel_size,
            range_min: self.range_min,
            range_max: self.range_max,
        }
    }

    pub fn sam(&self) -> SamConfig {
        SamConfig {
            delta_q: self.delta_q,
            delta_k: self.delta_k,
            big_gamma: self.sam_gamma,
        }
    }

    /// Block configuration for the layer with pyramid height `height`.
    pub fn otb(&self, height: usize) -> OtbConfig {
        OtbConfig {
            height,
            d: self.d,
            heads: self.heads,
            head_dim: self.head_dim,
            k: self.k,
            big_k: self.big_k(),
            tau: self.tau,
            ffn_hidden: 2 * self.d,
            sam: self.sam(),
            ..OtbConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heights.is_empty() {
            bail!("heights must list at least one layer");
        }
        if self.heads * self.head_dim != self.d {
            bail!("d ({}) must equal heads · head_dim ({} · {})", self.d, self.heads, self.head_dim);
        }
        self.spec().validate()?;
        for &h in &self.heights {
            self.otb(h).validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&json).unwrap(), cfg);
        assert_eq!(cfg.big_k(), 32);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_json(r#"{"d": 64, "dropout": 0.1}"#).unwrap_err();
        assert!(format!("{err:#}").contains("dropout"));
    }

    #[test]
    fn explicit_budget_overrides() {
        let cfg = RunConfig::from_json(r#"{"k": 4, "K": 10}"#).unwrap();
        assert_eq!(cfg.big_k(), 10);
        assert_eq!(RunConfig::from_json(r#"{"k": 4}"#).unwrap().big_k(), 16);
    }

    #[test]
    fn width_mismatch_rejected() {
        assert!(RunConfig::from_json(r#"{"d": 60}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mode": "train", "seed": 3}"#).is_ok());
    }
}
