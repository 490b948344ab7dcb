//! Dense reference for the Octree Transformer Block.
//!
//! Every level attends over all tokens of the same scene with plain loops.
//! With exhaustive selection (`k = K ≥` scene size) the octree recursion
//! reaches exactly these key sets, so the two paths must agree to rounding.

use crate::attention::AttnParams;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::otb::{fuse_levels, level_tokens, semantic_stats, OtbConfig, OtbParams};
use crate::params::bind_const;
use crate::pyramid::build_pyramid;
use crate::semantic::SamConfig;
use crate::tensor::Tensor;
use crate::voxel::SparseVoxelGrid;

/// Largest scene the oracle accepts; the cost grows with the square.
pub const ORACLE_MAX_VOXELS: usize = 512;

#[derive(Clone, Debug)]
pub struct OracleOutput {
    pub output: Tensor,
    /// Attended features per level, level 0 first.
    pub attended: Vec<Tensor>,
}

/// Multi-head attention of each row over all rows with the same batch id.
/// `sam`, when present, carries per-row segmentation scores for the mask.
pub fn dense_level_attention(
    x: &Tensor,
    batch_ids: &[usize],
    params: &AttnParams<Tensor>,
    scale: f64,
    sam: Option<(&[f64], &SamConfig)>,
) -> Result<Tensor> {
    let (m, d) = (x.rows(), x.cols());
    if batch_ids.len() != m {
        return Err(Error::Dimension {
            op: "dense_level_attention",
            lhs: x.shape().to_vec(),
            rhs: vec![batch_ids.len()],
        });
    }
    let mut out = Tensor::zeros([m, d]);
    for head in &params.heads {
        let q = x.matmul(&head.wq)?;
        let k = x.matmul(&head.wk)?;
        let v = x.matmul(&head.wv)?;
        let hd = q.cols();
        let mut attended = Tensor::zeros([m, hd]);
        for i in 0..m {
            let keys: Vec<usize> = (0..m).filter(|&j| batch_ids[j] == batch_ids[i]).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += q.at(i, c) * k.at(j, c);
                    }
                    let mask = sam.map_or(0.0, |(sc, cfg)| cfg.entry(sc[i], sc[j]));
                    s * scale + mask
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for (&j, w) in keys.iter().zip(&e) {
                for c in 0..hd {
                    attended.data_mut()[i * hd + c] += w / total * v.at(j, c);
                }
            }
        }
        let projected = attended.matmul(&head.wh)?;
        out = out.zip_map(&projected, |a, b| a + b);
    }
    Ok(out)
}

/// Reference forward pass: same pyramid, SAPE and fusion as
/// [`crate::otb::otb_forward`], dense attention at every level.
pub fn oracle_forward(
    grid: &SparseVoxelGrid,
    base: &Tensor,
    params: &OtbParams<Tensor>,
    cfg: &OtbConfig,
    seg_scores: Option<&[f64]>,
) -> Result<OracleOutput> {
    if grid.len() > ORACLE_MAX_VOXELS {
        return Err(Error::Param(format!(
            "oracle limited to {ORACLE_MAX_VOXELS} voxels, scene has {}",
            grid.len()
        )));
    }
    cfg.validate()?;
    let tape = Tape::new();
    let p = bind_const(params, &tape);
    let base_var = tape.constant(base.clone());
    let bn: Vec<_> = p.levels.iter().map(|l| l.bn.clone()).collect();
    let pyramid = build_pyramid(grid, base_var, cfg.height, &bn, cfg.bn_eps)?;
    let stats = seg_scores.map(|s| semantic_stats(&pyramid.layout, grid, s));
    let tokens = level_tokens(&pyramid, &p, stats.as_deref())?;
    let mut attended = Vec::with_capacity(cfg.height);
    for (n, tok) in tokens.iter().enumerate() {
        let sam = stats.as_ref().map(|st| (st[n].scores.as_slice(), &cfg.sam));
        attended.push(dense_level_attention(
            &tok.value(),
            &pyramid.layout.levels[n].batch_ids,
            &params.levels[n].attn,
            cfg.scale(),
            sam,
        )?);
    }
    let vars: Vec<_> = attended.iter().map(|a| tape.constant(a.clone())).collect();
    let output = fuse_levels(grid, base_var, &pyramid.layout, &vars, &p, cfg)?;
    let output = output.value().as_ref().clone();
    Ok(OracleOutput { output, attended })
}
