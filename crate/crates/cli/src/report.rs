//! JSON report types. Every report carries `"schema": "octattn-report/1"`
//! and validates against `schemas/report.schema.json`.

use serde::{Deserialize, Serialize};

use crate::backbone::LayerSummary;
use crate::config::{RunConfig, RunMode};

pub const SCHEMA: &str = "octattn-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub seed: u64,
    pub mode: RunMode,
    pub config: RunConfig,
    pub elapsed_ms: f64,
    #[serde(flatten)]
    pub body: Body,
}

impl Report {
    pub fn new(config: &RunConfig, elapsed_ms: f64, body: Body) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            seed: config.seed,
            mode: config.mode,
            config: config.clone(),
            elapsed_ms,
            body,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Body {
    Forward(ForwardReport),
    Oracle(OracleReport),
    Bench(BenchReport),
    TrainSeg(TrainSegReport),
    Synth(SynthReport),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardReport {
    /// Input file, or `synthetic` for a generated scene.
    pub source: String,
    pub points: usize,
    pub dropped_points: usize,
    pub voxels: usize,
    pub output_shape: [usize; 2],
    /// SHA-256 of the output values as little-endian `f64`s.
    pub checksum: String,
    pub foreground_fraction: f64,
    pub layers: Vec<LayerSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleScene {
    pub seed: u64,
    pub voxels: usize,
    /// Max abs deviation of the attended features per level, finest first.
    pub level_max_dev: Vec<f64>,
    pub output_max_dev: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub tolerance: f64,
    pub scenes: Vec<OracleScene>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub target_voxels: usize,
    pub voxels: usize,
    pub level_counts: Vec<usize>,
    pub observed_omega: f64,
    pub dense_macs: u64,
    pub octattn_macs: u64,
    pub predicted_octattn_macs: u64,
    pub prediction_exact: bool,
    pub dense_ms: f64,
    pub octattn_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub height: usize,
    pub k: usize,
    pub big_k: usize,
    pub points: Vec<BenchPoint>,
    pub dense_slope: f64,
    pub octattn_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSegReport {
    pub steps: usize,
    pub learning_rate: f64,
    pub voxels: usize,
    pub foreground_voxels: usize,
    /// Loss before the first step, then after each step.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `1 − final / initial`.
    pub reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub points: usize,
    pub voxels: usize,
    pub boxes: Vec<SynthBox>,
    pub points_path: Option<String>,
    pub boxes_path: Option<String>,
}
