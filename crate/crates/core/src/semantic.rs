//! Foreground segmentation, focal loss, the semantic-aware positional
//! embedding (SAPE) and the semantic attention mask (SAM).

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Linear, ParamTree};
use crate::sparse_conv::{subm_conv, SubmConvParams};
use crate::tensor::Tensor;
use crate::voxel::SparseVoxelGrid;

/// Probabilities are clamped to `[SCORE_CLAMP, 1 − SCORE_CLAMP]` before the log.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct SegParams<T> {
    pub conv: SubmConvParams<T>,
    pub head: Linear<T>,
}

impl SegParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            conv: SubmConvParams::init(d, d, rng),
            head: Linear::init(d, 1, true, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            conv: SubmConvParams {
                kernel: Tensor::zeros([3, 3, 3, d, d]),
                bias: Tensor::zeros([d]),
            },
            head: Linear::zeros(d, 1, true),
        }
    }
}

impl<T> ParamTree<T> for SegParams<T> {
    type Mapped<U> = SegParams<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> SegParams<U> {
        SegParams {
            conv: self.conv.map_params(f),
            head: self.head.map_params(f),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        self.conv.visit(f);
        self.head.visit(f);
    }
}

/// Per-voxel foreground probability, `m × 1`.
pub fn seg_branch<'t>(
    grid: &SparseVoxelGrid,
    features: Var<'t>,
    params: &SegParams<Var<'t>>,
) -> Result<Var<'t>> {
    let h = subm_conv(grid, features, &params.conv)?.relu();
    Ok(params.head.forward(h)?.sigmoid())
}

/// Axis-aligned ground-truth box in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBox {
    pub scene_id: i64,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBox {
    /// Inclusive on `min`, exclusive on `max`.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }
}

/// Reads `scene_id,xmin,ymin,zmin,xmax,ymax,zmax` rows; a non-numeric first
/// line is treated as a header.
pub fn load_boxes(path: &Path) -> Result<Vec<SceneBox>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_boxes(&text, path)
}

pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<SceneBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if out.is_empty() && i == 0 && fields[0].parse::<i64>().is_err() {
            continue;
        }
        if fields.len() != 7 {
            return Err(err(format!("expected 7 columns, got {}", fields.len())));
        }
        let scene_id = fields[0]
            .parse::<i64>()
            .map_err(|e| err(format!("scene id {:?}: {e}", fields[0])))?;
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| err(format!("{f:?}: {e}")))?;
        }
        let b = SceneBox {
            scene_id,
            min: [v[0], v[1], v[2]],
            max: [v[3], v[4], v[5]],
        };
        if (0..3).any(|a| !(b.min[a] < b.max[a])) {
            return Err(err("box min must be below max on every axis".into()));
        }
        out.push(b);
    }
    Ok(out)
}

/// Foreground iff the voxel center lies in a box of the same scene.
/// `scene_of_batch[b]` is the scene id of batch index `b`.
pub fn label_voxels(grid: &SparseVoxelGrid, boxes: &[SceneBox], scene_of_batch: &[i64]) -> Vec<bool> {
    grid.centers()
        .iter()
        .zip(grid.batch_ids())
        .map(|(&c, &b)| {
            let sid = scene_of_batch[b];
            boxes.iter().any(|bx| bx.scene_id == sid && bx.contains(c))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Mean of `−α_t (1 − p_t)^γ ln p_t` over voxels, with `p_t = S` on
/// foreground and `1 − S` on background.
pub fn focal_loss<'t>(scores: Var<'t>, labels: &[bool], cfg: FocalConfig) -> Result<Var<'t>> {
    let s = scores.value();
    if s.numel() != labels.len() {
        return Err(Error::Dimension {
            op: "focal_loss",
            lhs: s.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let m = labels.len();
    let FocalConfig { alpha, gamma } = cfg;
    let mut total = 0.0;
    let mut dloss = vec![0.0; m];
    for (i, (&raw, &fg)) in s.data().iter().zip(labels).enumerate() {
        let inside = (SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&raw);
        let sc = raw.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        let (pt, at, sign) = if fg {
            (sc, alpha, 1.0)
        } else {
            (1.0 - sc, 1.0 - alpha, -1.0)
        };
        let q = 1.0 - pt;
        total += -at * q.powf(gamma) * pt.ln();
        if inside {
            // d/dp_t of −α (1−p)^γ ln p
            let dpt = at * (gamma * q.powf(gamma - 1.0) * pt.ln() - q.powf(gamma) / pt);
            dloss[i] = sign * dpt;
        }
    }
    let mean = if m == 0 { 0.0 } else { total / m as f64 };
    let shape = s.shape().to_vec();
    let inv = if m == 0 { 0.0 } else { 1.0 / m as f64 };
    Ok(scores
        .tape()
        .custom(Tensor::scalar(mean), &[scores], move |g| {
            let scale = g.data()[0] * inv;
            vec![Tensor::new(shape.clone(), dloss.iter().map(|d| d * scale).collect())
                .expect("focal grad")]
        }))
}

/// `FC_{d+4→d}({x, y, z, score | f})` without bias. `positions` is `m × 4`
/// and `weight` is `(d+4) × d` with the position block in its first four rows.
pub fn sape<'t>(features: Var<'t>, positions: &Tensor, weight: Var<'t>) -> Result<Var<'t>> {
    let pos = features.tape().constant(positions.clone());
    Var::concat_cols(&[pos, features])?.matmul(weight)
}

/// `FC_{d→d}(f) + FC_{4→d}(x, y, z, score)` over the same weight partition
/// as [`sape`].
pub fn sape_split<'t>(features: Var<'t>, positions: &Tensor, weight: Var<'t>) -> Result<Var<'t>> {
    let rows = weight.shape()[0];
    let pos = features.tape().constant(positions.clone());
    let feat_part = features.matmul(weight.slice_rows(4, rows)?)?;
    let pos_part = pos.matmul(weight.slice_rows(0, 4)?)?;
    feat_part.add(pos_part)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamConfig {
    pub delta_q: f64,
    pub delta_k: f64,
    /// Suppression magnitude Γ.
    pub big_gamma: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            delta_q: 0.05,
            delta_k: 0.2,
            big_gamma: 10000.0,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.big_gamma > 0.0)
            || !(0.0..=1.0).contains(&self.delta_q)
            || !(0.0..=1.0).contains(&self.delta_k)
        {
            return Err(Error::Param(format!("invalid mask config {self:?}")));
        }
        Ok(())
    }

    /// Additive entry for one query/key pair. Background queries are left
    /// untouched; foreground queries lose background keys.
    pub fn entry(&self, s_q: f64, s_k: f64) -> f64 {
        if s_q < self.delta_q || s_k >= self.delta_k {
            0.0
        } else {
            -self.big_gamma
        }
    }
}

/// `N_q × N_k` additive pre-softmax mask.
pub fn sam_mask(s_q: &[f64], s_k: &[f64], cfg: &SamConfig) -> Tensor {
    let data = s_q
        .iter()
        .flat_map(|&q| s_k.iter().map(move |&k| cfg.entry(q, k)))
        .collect();
    Tensor::new([s_q.len(), s_k.len()], data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::grad_check;
    use crate::voxel::VoxelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(s: f64, fg: bool, cfg: FocalConfig) -> f64 {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new([1, 1], vec![s]).unwrap());
        focal_loss(v, &[fg], cfg).unwrap().value().data()[0]
    }

    #[test]
    fn focal_hand_value() {
        let l = loss_of(0.5, true, FocalConfig::default());
        assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - 0.0433217).abs() < 1e-6);
    }

    #[test]
    fn focal_perfect_prediction_vanishes() {
        assert!(loss_of(1.0 - 1e-7, true, FocalConfig::default()) < 1e-20);
        assert!(loss_of(1.0, true, FocalConfig::default()) < 1e-20);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let cfg = FocalConfig {
            alpha: 0.5,
            gamma: 0.0,
        };
        for &(s, fg) in &[(0.3, true), (0.8, false), (0.01, true)] {
            let bce: f64 = if fg { -(s as f64).ln() } else { -(1.0 - s as f64).ln() };
            assert!((loss_of(s, fg, cfg) - 0.5 * bce).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Tensor::uniform([12, 1], 0.05, 0.95, &mut rng);
        let labels: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let report = grad_check(&[s], 1e-5, |_, v| {
            focal_loss(v[0], &labels, FocalConfig::default())
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{report:?}");
    }

    #[test]
    fn mask_entries() {
        let cfg = SamConfig::default();
        assert_eq!(cfg.entry(0.5, 0.1), -10000.0);
        assert_eq!(cfg.entry(0.5, 0.9), 0.0);
        let m = sam_mask(&[0.01], &[0.0, 0.5, 1.0], &cfg);
        assert!(m.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_seg_weights_give_half() {
        let g = SparseVoxelGrid::new(
            vec![[0, 0, 0], [0, 0, 1]],
            vec![0, 0],
            Tensor::full([2, 3], 0.7),
            VoxelSpec::unit(4),
            1,
        )
        .unwrap();
        let tape = Tape::new();
        let p = crate::params::bind(&SegParams::zeros(3), &tape);
        let s = seg_branch(&g, tape.constant(g.features().clone()), &p).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn boxes_parse_and_label() {
        let boxes = parse_boxes(
            "scene_id,xmin,ymin,zmin,xmax,ymax,zmax\n0,0,0,0,2,2,2\n1,0,0,0,4,4,4\n",
            Path::new("b.csv"),
        )
        .unwrap();
        assert_eq!(boxes.len(), 2);
        let g = SparseVoxelGrid::new(
            vec![[0, 0, 0], [3, 3, 3], [3, 3, 3]],
            vec![0, 0, 1],
            Tensor::zeros([3, 1]),
            VoxelSpec::unit(4),
            2,
        )
        .unwrap();
        assert_eq!(label_voxels(&g, &boxes, &[0, 1]), vec![true, false, true]);
        assert_eq!(label_voxels(&g, &[], &[0, 1]), vec![false; 3]);
        assert!(parse_boxes("0,1,0,0,1,2,2\n", Path::new("b.csv")).is_err());
    }
}
