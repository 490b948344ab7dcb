//! Attention cost accounting.
//!
//! Only the multiply-accumulates inside `Q·Kᵀ` and `A·V` are counted;
//! projections are booked separately on the tape and left out here.

use crate::attention::AttnParams;
use crate::autodiff::MacCounts;
use crate::error::{Error, Result};
use crate::pyramid::PyramidLayout;
use crate::tensor::{matmul_into, Tensor};
use crate::voxel::dense_slots;

/// Closed-form attention MACs of octree attention over `layout`.
///
/// The top level is a padded self-attention over `B · m_max²` pairs; each
/// lower level scores every query against a fixed-width set of `K` slots.
/// Scores and weighted values cost the same, `heads · head_dim` per pair.
pub fn predicted_octattn_macs(layout: &PyramidLayout, heads: usize, head_dim: usize, big_k: usize) -> MacCounts {
    let top = &layout.levels[layout.height() - 1];
    let (_, m_max) = dense_slots(&top.coords, &top.batch_ids, layout.num_scenes, 0);
    let mut pairs = (layout.num_scenes * m_max * m_max) as u64;
    for level in &layout.levels[..layout.height() - 1] {
        pairs += (level.len() * big_k) as u64;
    }
    let per = pairs * (heads * head_dim) as u64;
    MacCounts {
        attn_score: per,
        attn_value: per,
        ..MacCounts::default()
    }
}

/// Attention MACs of full per-scene self-attention.
pub fn dense_macs(scene_counts: &[usize], heads: usize, head_dim: usize) -> MacCounts {
    let pairs: u64 = scene_counts.iter().map(|&m| (m * m) as u64).sum();
    let per = pairs * (heads * head_dim) as u64;
    MacCounts {
        attn_score: per,
        attn_value: per,
        ..MacCounts::default()
    }
}

/// Query rows processed together by [`dense_attention_streaming`].
const QUERY_BLOCK: usize = 64;

/// Full multi-head self-attention within each scene, evaluated a block of
/// query rows at a time so memory stays linear in the token count.
/// Attention MACs are added to `macs` as they are performed.
pub fn dense_attention_streaming(
    x: &Tensor,
    batch_ids: &[usize],
    params: &AttnParams<Tensor>,
    scale: f64,
    macs: &mut MacCounts,
) -> Result<Tensor> {
    let (m, d) = (x.rows(), x.cols());
    if batch_ids.len() != m {
        return Err(Error::Dimension {
            op: "dense_attention_streaming",
            lhs: x.shape().to_vec(),
            rhs: vec![batch_ids.len()],
        });
    }
    let num_scenes = batch_ids.iter().max().map_or(0, |b| b + 1);
    let mut members = vec![Vec::new(); num_scenes];
    for (r, &b) in batch_ids.iter().enumerate() {
        members[b].push(r);
    }
    let mut out = Tensor::zeros([m, d]);
    for head in &params.heads {
        let q = x.matmul(&head.wq)?;
        let k = x.matmul(&head.wk)?;
        let v = x.matmul(&head.wv)?;
        let hd = q.cols();
        let mut attended = Tensor::zeros([m, hd]);
        for rows in members.iter().filter(|r| !r.is_empty()) {
            let n = rows.len();
            // keys transposed (hd × n) and values (n × hd) of this scene
            let mut kt = vec![0.0; hd * n];
            let mut vs = vec![0.0; n * hd];
            for (j, &r) in rows.iter().enumerate() {
                for c in 0..hd {
                    kt[c * n + j] = k.at(r, c);
                }
                vs[j * hd..(j + 1) * hd].copy_from_slice(v.row(r));
            }
            let mut qb = vec![0.0; QUERY_BLOCK * hd];
            let mut sb = vec![0.0; QUERY_BLOCK * n];
            let mut ob = vec![0.0; QUERY_BLOCK * hd];
            for block in rows.chunks(QUERY_BLOCK) {
                let b = block.len();
                for (i, &r) in block.iter().enumerate() {
                    qb[i * hd..(i + 1) * hd].copy_from_slice(q.row(r));
                }
                sb[..b * n].fill(0.0);
                matmul_into(&qb[..b * hd], &kt, &mut sb[..b * n], b, hd, n);
                for row in sb[..b * n].chunks_mut(n) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |a, &l| a.max(l * scale));
                    let mut total = 0.0;
                    for l in row.iter_mut() {
                        *l = (*l * scale - max).exp();
                        total += *l;
                    }
                    row.iter_mut().for_each(|w| *w /= total);
                }
                ob[..b * hd].fill(0.0);
                matmul_into(&sb[..b * n], &vs, &mut ob[..b * hd], b, n, hd);
                for (i, &r) in block.iter().enumerate() {
                    attended.row_mut(r).copy_from_slice(&ob[i * hd..(i + 1) * hd]);
                }
                let pairs = (b * n * hd) as u64;
                macs.attn_score += pairs;
                macs.attn_value += pairs;
            }
        }
        let projected = attended.matmul(&head.wh)?;
        out = out.zip_map(&projected, |a, b| a + b);
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Param(format!(
            "slope needs >= 2 paired samples, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Param("log-log slope needs positive samples".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Param("slope needs at least two distinct x values".into()));
    }
    Ok(sxy / sxx)
}
