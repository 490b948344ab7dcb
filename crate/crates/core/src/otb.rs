//! Octree attention and the Octree Transformer Block.
//!
//! The pyramid top runs full self-attention per scene. Each query keeps its
//! `k` highest-scoring tokens; one level down, the children of those tokens
//! (at most `8k`, cut to `K`) become the key set shared by all children of
//! the query, and the step repeats until level 0. The per-level attended
//! features are upsampled to level 0, concatenated, projected back to `d`
//! and added to a submanifold-conv positional term; an FFN with a
//! batch-normed residual finishes the block.

use rand::Rng;

use crate::attention::{cross_attention, mhsa_top, AttnParams, TokenLayout};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{init_uniform, BatchNorm, Linear, ParamTree};
use crate::pyramid::{build_pyramid, level_stats, upsample, FeaturePyramid, LevelStats, PyramidLayout};
use crate::select::{sample_octants, topk_select, IndexSets, Mode};
use crate::semantic::{sape, SamConfig};
use crate::sparse_conv::{subm_conv, SubmConvParams};
use crate::tensor::Tensor;
use crate::voxel::{dense_slots, SparseVoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtbConfig {
    /// Pyramid height `N`.
    pub height: usize,
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Tokens kept per query row.
    pub k: usize,
    /// Octant budget per query.
    pub big_k: usize,
    pub tau: f64,
    pub bn_eps: f64,
    /// FFN hidden width.
    pub ffn_hidden: usize,
    pub sam: SamConfig,
}

impl Default for OtbConfig {
    fn default() -> Self {
        Self {
            height: 4,
            d: 64,
            heads: 2,
            head_dim: 32,
            k: 8,
            big_k: 32,
            tau: 1.0,
            bn_eps: 1e-5,
            ffn_hidden: 128,
            sam: SamConfig::default(),
        }
    }
}

impl OtbConfig {
    /// Small-width configuration for tests and oracle runs.
    pub fn small(height: usize, d: usize, heads: usize) -> Self {
        Self {
            height,
            d,
            heads,
            head_dim: d / heads,
            ffn_hidden: 2 * d,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 {
            return Err(Error::Param("pyramid height must be >= 1".into()));
        }
        if self.heads == 0 || self.heads * self.head_dim != self.d {
            return Err(Error::Param(format!(
                "heads · head_dim must equal d ({} · {} != {})",
                self.heads, self.head_dim, self.d
            )));
        }
        if self.k == 0 || self.big_k == 0 {
            return Err(Error::Param("k and K must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Param(format!("temperature must be positive, got {}", self.tau)));
        }
        self.sam.validate()
    }

    /// Dot-product scale `1/sqrt(d)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }

    /// Selection wide enough that nothing is ever cut for grids of up to
    /// `m0` voxels.
    pub fn exhaustive(&self, m0: usize) -> Self {
        Self {
            k: m0.max(1),
            big_k: m0.max(1),
            ..*self
        }
    }

    pub fn mode(&self, train: bool) -> Mode {
        if train {
            Mode::Train { tau: self.tau }
        } else {
            Mode::Infer
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelParams<T> {
    pub attn: AttnParams<T>,
    /// `(d+4) × d`, position block first.
    pub sape: T,
    pub bn: BatchNorm<T>,
}

impl<T> ParamTree<T> for LevelParams<T> {
    type Mapped<U> = LevelParams<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LevelParams<U> {
        LevelParams {
            attn: self.attn.map_params(f),
            sape: f(&self.sape),
            bn: self.bn.map_params(f),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        self.attn.visit(f);
        f(&self.sape);
        self.bn.visit(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T> ParamTree<T> for FfnParams<T> {
    type Mapped<U> = FfnParams<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> FfnParams<U> {
        FfnParams {
            up: self.up.map_params(f),
            down: self.down.map_params(f),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        self.up.visit(f);
        self.down.visit(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtbParams<T> {
    /// One entry per pyramid level, level 0 first.
    pub levels: Vec<LevelParams<T>>,
    /// `N·d → d` projection of the concatenated levels.
    pub fc: Linear<T>,
    pub lepe: SubmConvParams<T>,
    pub ffn: FfnParams<T>,
    pub ffn_bn: BatchNorm<T>,
}

impl OtbParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &OtbConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let levels = (0..cfg.height)
            .map(|_| LevelParams {
                attn: AttnParams::init(d, cfg.heads, cfg.head_dim, rng),
                sape: init_uniform(&[d + 4, d], d + 4, rng),
                bn: BatchNorm::identity(d),
            })
            .collect();
        Self {
            levels,
            fc: Linear::init(cfg.height * d, d, true, rng),
            lepe: SubmConvParams::init(d, d, rng),
            ffn: FfnParams {
                up: Linear::init(d, cfg.ffn_hidden, true, rng),
                down: Linear::init(cfg.ffn_hidden, d, true, rng),
            },
            ffn_bn: BatchNorm::identity(d),
        }
    }
}

impl<T> ParamTree<T> for OtbParams<T> {
    type Mapped<U> = OtbParams<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> OtbParams<U> {
        OtbParams {
            levels: self.levels.map_params(f),
            fc: self.fc.map_params(f),
            lepe: self.lepe.map_params(f),
            ffn: self.ffn.map_params(f),
            ffn_bn: self.ffn_bn.map_params(f),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        self.levels.visit(f);
        self.fc.visit(f);
        self.lepe.visit(f);
        self.ffn.visit(f);
        self.ffn_bn.visit(f);
    }
}

/// Selection state of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTrace {
    pub level: usize,
    /// Top: `[B, m_max, m_max]` (slot order). Lower: `m_n × K` aligned with
    /// `key_sets`.
    pub scores: Tensor,
    /// Top-k rows of this level (`m_n` rows of width `k`, level rows).
    pub selection: IndexSets,
    /// Key rows attended by each query (lower levels only).
    pub key_sets: Option<IndexSets>,
    /// Slot → level row at the top (top level only).
    pub slots: Option<Vec<Option<usize>>>,
}

#[derive(Clone, Debug)]
pub struct OctreeAttention<'t> {
    /// Attended features per level, level 0 first, rows aligned with the level.
    pub attended: Vec<Var<'t>>,
    /// Traces per level, level 0 first.
    pub traces: Vec<LevelTrace>,
}

/// The octree attention recursion over already-embedded level tokens.
///
/// `tokens[n]` holds level `n` features (rows aligned with
/// `layout.levels[n]`). `semantic`, when given, carries per-level mean
/// segmentation scores used for the attention mask.
pub fn octree_attention<'t, R: Rng + ?Sized>(
    layout: &PyramidLayout,
    tokens: &[Var<'t>],
    attn: &[&AttnParams<Var<'t>>],
    cfg: &OtbConfig,
    semantic: Option<&[LevelStats]>,
    mode: Mode,
    rng: &mut R,
) -> Result<OctreeAttention<'t>> {
    let top = layout.height() - 1;
    let scale = cfg.scale();
    let mut attended: Vec<Option<Var<'t>>> = vec![None; layout.height()];
    let mut traces: Vec<Option<LevelTrace>> = vec![None; layout.height()];

    // full self-attention at the top, padded per scene
    let lvl = &layout.levels[top];
    let (slots, m_max) = dense_slots(&lvl.coords, &lvl.batch_ids, layout.num_scenes, 0);
    let b = layout.num_scenes;
    let token_layout = TokenLayout {
        num_scenes: b,
        m_max,
        validity: slots.iter().map(Option::is_some).collect(),
    };
    let mask = semantic.map(|st| {
        let s = &st[top].scores;
        let mut t = Tensor::zeros([b, m_max, m_max]);
        for sc in 0..b {
            for i in 0..m_max {
                let Some(qi) = slots[sc * m_max + i] else { continue };
                for j in 0..m_max {
                    let Some(kj) = slots[sc * m_max + j] else { continue };
                    t.data_mut()[(sc * m_max + i) * m_max + j] = cfg.sam.entry(s[qi], s[kj]);
                }
            }
        }
        t
    });
    let padded = tokens[top].gather_rows(&slots)?;
    let out = mhsa_top(padded, &token_layout, attn[top], scale, mask.as_ref())?;
    let mut slot_of_row = vec![None; lvl.len()];
    for (slot, r) in slots.iter().enumerate() {
        if let Some(r) = *r {
            slot_of_row[r] = Some(slot);
        }
    }
    attended[top] = Some(out.features.gather_rows(&slot_of_row)?);
    let mut rows_sel = Vec::with_capacity(lvl.len());
    for slot in slot_of_row.iter().map(|s| s.expect("every row has a slot")) {
        let sc = slot / m_max.max(1);
        let row_scores = &out.scores.data()[slot * m_max..(slot + 1) * m_max];
        let valid = &token_layout.validity[sc * m_max..(sc + 1) * m_max];
        let picks = topk_select(row_scores, valid, cfg.k, mode, rng)?;
        rows_sel.push(
            picks
                .into_iter()
                .map(|j| slots[sc * m_max + j].expect("selected a valid slot"))
                .collect::<Vec<_>>(),
        );
    }
    let mut selection = IndexSets::from_rows(cfg.k, &rows_sel);
    traces[top] = Some(LevelTrace {
        level: top,
        scores: out.scores,
        selection: selection.clone(),
        key_sets: None,
        slots: Some(slots),
    });

    // cross-attention down the pyramid
    for n in (0..top).rev() {
        let bank = &layout.banks[n];
        let sampled = sample_octants(&selection, bank, cfg.big_k, mode, rng)?;
        let key_sets = sampled.broadcast(&bank.child_to_parent);
        let mask = semantic.map(|st| {
            let s = &st[n].scores;
            let w = key_sets.width();
            let mut t = Tensor::zeros([key_sets.rows(), w]);
            for q in 0..key_sets.rows() {
                for (j, slot) in key_sets.row(q).iter().enumerate() {
                    if let Some(kr) = *slot {
                        t.data_mut()[q * w + j] = cfg.sam.entry(s[q], s[kr]);
                    }
                }
            }
            t
        });
        let out = cross_attention(tokens[n], tokens[n], &key_sets, attn[n], scale, mask.as_ref())?;
        let w = key_sets.width();
        let valid = key_sets.validity();
        let mut rows_sel = Vec::with_capacity(key_sets.rows());
        for q in 0..key_sets.rows() {
            let picks = topk_select(
                out.scores.row(q),
                &valid[q * w..(q + 1) * w],
                cfg.k,
                mode,
                rng,
            )?;
            rows_sel.push(
                picks
                    .into_iter()
                    .map(|j| key_sets.row(q)[j].expect("selected a valid key"))
                    .collect::<Vec<_>>(),
            );
        }
        selection = IndexSets::from_rows(cfg.k, &rows_sel);
        attended[n] = Some(out.features);
        traces[n] = Some(LevelTrace {
            level: n,
            scores: out.scores,
            selection: selection.clone(),
            key_sets: Some(key_sets),
            slots: None,
        });
    }
    Ok(OctreeAttention {
        attended: attended.into_iter().map(|a| a.expect("level visited")).collect(),
        traces: traces.into_iter().map(|t| t.expect("level visited")).collect(),
    })
}

/// `d → hidden → d` with ReLU. Batch norm and the residual are applied by
/// the caller.
pub fn ffn<'t>(x: Var<'t>, params: &FfnParams<Var<'t>>) -> Result<Var<'t>> {
    params.down.forward(params.up.forward(x)?.relu())
}

/// Locally enhanced positional term: a submanifold conv of `F₀`.
pub fn lepe<'t>(grid: &SparseVoxelGrid, base: Var<'t>, params: &SubmConvParams<Var<'t>>) -> Result<Var<'t>> {
    subm_conv(grid, base, params)
}

/// Per-level tokens: pyramid features, passed through SAPE when semantic
/// statistics are available.
pub fn level_tokens<'t>(
    pyramid: &FeaturePyramid<'t>,
    params: &OtbParams<Var<'t>>,
    semantic: Option<&[LevelStats]>,
) -> Result<Vec<Var<'t>>> {
    pyramid
        .levels
        .iter()
        .enumerate()
        .map(|(n, &f)| match semantic {
            Some(st) => sape(f, &st[n].position_rows(), params.levels[n].sape),
            None => Ok(f),
        })
        .collect()
}

/// Upsample, concatenate (top level first), project, add LePE, then the
/// FFN with batch-normed residual.
pub fn fuse_levels<'t>(
    grid: &SparseVoxelGrid,
    base: Var<'t>,
    layout: &PyramidLayout,
    attended: &[Var<'t>],
    params: &OtbParams<Var<'t>>,
    cfg: &OtbConfig,
) -> Result<Var<'t>> {
    let up = attended
        .iter()
        .enumerate()
        .rev()
        .map(|(n, &f)| upsample(f, layout, n))
        .collect::<Result<Vec<_>>>()?;
    let fused = params
        .fc
        .forward(Var::concat_cols(&up)?)?
        .add(lepe(grid, base, &params.lepe)?)?;
    params
        .ffn_bn
        .forward(ffn(fused, &params.ffn)?, cfg.bn_eps)?
        .add(fused)
}

/// Per-level position/score statistics from level-0 scores.
pub fn semantic_stats(layout: &PyramidLayout, grid: &SparseVoxelGrid, scores: &[f64]) -> Vec<LevelStats> {
    let centers = grid.centers();
    (0..layout.height())
        .map(|n| level_stats(layout, n, &centers, scores))
        .collect()
}

#[derive(Clone, Debug)]
pub struct OtbOutput<'t> {
    /// `m₀ × d`.
    pub output: Var<'t>,
    pub pyramid: FeaturePyramid<'t>,
    pub attention: OctreeAttention<'t>,
}

/// One Octree Transformer Block over `base` (rows aligned with `grid`).
///
/// `seg_scores`, when given, are level-0 foreground probabilities; they
/// switch on the semantic positional embedding and the attention mask.
pub fn otb_forward<'t, R: Rng + ?Sized>(
    grid: &SparseVoxelGrid,
    base: Var<'t>,
    params: &OtbParams<Var<'t>>,
    cfg: &OtbConfig,
    seg_scores: Option<&[f64]>,
    mode: Mode,
    rng: &mut R,
) -> Result<OtbOutput<'t>> {
    cfg.validate()?;
    if params.levels.len() != cfg.height {
        return Err(Error::Param(format!(
            "parameters for {} levels, config wants {}",
            params.levels.len(),
            cfg.height
        )));
    }
    if grid.is_empty() {
        return Err(Error::Param("octree attention needs a non-empty grid".into()));
    }
    if let Some(s) = seg_scores {
        if s.len() != grid.len() {
            return Err(Error::Dimension {
                op: "otb_forward scores",
                lhs: vec![grid.len()],
                rhs: vec![s.len()],
            });
        }
    }
    let bn: Vec<BatchNorm<Var<'t>>> = params.levels.iter().map(|l| l.bn.clone()).collect();
    let pyramid = build_pyramid(grid, base, cfg.height, &bn, cfg.bn_eps)?;
    let stats = seg_scores.map(|s| semantic_stats(&pyramid.layout, grid, s));
    let tokens = level_tokens(&pyramid, params, stats.as_deref())?;
    let attn: Vec<&AttnParams<Var<'t>>> = params.levels.iter().map(|l| &l.attn).collect();
    let attention = octree_attention(
        &pyramid.layout,
        &tokens,
        &attn,
        cfg,
        stats.as_deref(),
        mode,
        rng,
    )?;
    let output = fuse_levels(grid, base, &pyramid.layout, &attention.attended, params, cfg)?;
    Ok(OtbOutput {
        output,
        pyramid,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::bind;
    use crate::voxel::VoxelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(m: usize, d: usize, seed: u64) -> SparseVoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coords = std::collections::BTreeSet::new();
        while coords.len() < m {
            coords.insert([
                rng.random_range(0..16),
                rng.random_range(0..16),
                rng.random_range(0..8),
            ]);
        }
        let coords: Vec<_> = coords.into_iter().collect();
        SparseVoxelGrid::new(
            coords,
            vec![0; m],
            Tensor::uniform([m, d], -1.0, 1.0, &mut rng),
            VoxelSpec::unit(16),
            1,
        )
        .unwrap()
    }

    #[test]
    fn output_shape() {
        let cfg = OtbConfig::small(3, 8, 2);
        let g = scene(40, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = OtbParams::init(&cfg, &mut rng);
        let tape = Tape::new();
        let out = otb_forward(
            &g,
            tape.constant(g.features().clone()),
            &bind(&p, &tape),
            &cfg,
            None,
            Mode::Infer,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.output.shape(), vec![40, 8]);
        assert_eq!(out.attention.traces.len(), 3);
        let ks = out.attention.traces[0].key_sets.as_ref().unwrap();
        assert_eq!(ks.width(), cfg.big_k);
    }

    #[test]
    fn selections_stay_in_scene_and_distinct() {
        let cfg = OtbConfig {
            k: 3,
            big_k: 6,
            ..OtbConfig::small(3, 8, 2)
        };
        let a = scene(30, 8, 3);
        let b = scene(25, 8, 4);
        let g = SparseVoxelGrid::concat_scenes(&[a, b]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = OtbParams::init(&cfg, &mut rng);
        let tape = Tape::new();
        let out = otb_forward(
            &g,
            tape.constant(g.features().clone()),
            &bind(&p, &tape),
            &cfg,
            None,
            Mode::Train { tau: 1.0 },
            &mut rng,
        )
        .unwrap();
        for tr in &out.attention.traces {
            let lvl = &out.pyramid.layout.levels[tr.level];
            for q in 0..lvl.len() {
                let sel: Vec<usize> = tr.selection.valid(q).collect();
                assert!(!sel.is_empty() && sel.len() <= cfg.k);
                let mut s = sel.clone();
                s.sort_unstable();
                s.dedup();
                assert_eq!(s.len(), sel.len());
                assert!(sel.iter().all(|&r| lvl.batch_ids[r] == lvl.batch_ids[q]));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = OtbConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.big_k, 4 * cfg.k);
        cfg.head_dim = 16;
        assert!(cfg.validate().is_err());
    }
}
