//! Subcommand implementations. Each returns a finished [`Report`].

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use octattn_core::complexity::{dense_attention_streaming, loglog_slope, predicted_octattn_macs};
use octattn_core::oracle::{oracle_forward, ORACLE_MAX_VOXELS};
use octattn_core::otb::{octree_attention, otb_forward};
use octattn_core::params::{bind, bind_const, flatten, unflatten, BatchNorm};
use octattn_core::pyramid::build_pyramid;
use octattn_core::select::Mode;
use octattn_core::semantic::{focal_loss, label_voxels, seg_branch, FocalConfig};
use octattn_core::voxel::{embed, load_points, voxelize, PointCloud, PointFormat, VoxelSpec, Voxelized};
use octattn_core::{MacCounts, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::{backbone_forward, normalized_features, BackboneParams};
use crate::config::RunConfig;
use crate::report::*;
use crate::synth::{synth_scene, synth_with_voxels, Scene, SynthSpec};

/// Streams drawn from the run seed: parameters and selection noise never
/// share a generator.
fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let params = ChaCha8Rng::seed_from_u64(seed);
    let mut select = ChaCha8Rng::seed_from_u64(seed);
    select.set_stream(1);
    (params, select)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// `[range_min, range_min + cells · voxel)` clipped to the configured range.
pub fn sub_range(cfg: &RunConfig, cells: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let lo = cfg.range_min;
    let hi = std::array::from_fn(|a| (lo[a] + cells[a] * cfg.voxel_size[a]).min(cfg.range_max[a]));
    (lo, hi)
}

/// Default generated scene for `forward`: a ground slab plus a few objects
/// over a 128 × 128 × 16 voxel window.
pub fn forward_scene_spec(cfg: &RunConfig) -> SynthSpec {
    let (lo, hi) = sub_range(cfg, [128.0, 128.0, 16.0]);
    SynthSpec {
        ground_points: 12000,
        ground_thickness: cfg.voxel_size[2],
        ..SynthSpec::cluttered(4, 400, 200, (&lo, &hi))
    }
}

/// Small scenes for the dense oracle and the toy segmentation task.
pub fn small_scene_spec(cfg: &RunConfig, n_objects: usize, per_object: usize, background: usize) -> SynthSpec {
    let (lo, hi) = sub_range(cfg, [64.0, 64.0, 16.0]);
    SynthSpec::cluttered(n_objects, per_object, background, (&lo, &hi))
}

pub enum Input<'a> {
    File(&'a Path),
    Synthetic(SynthSpec),
}

fn ingest(cfg: &RunConfig, input: &Input) -> Result<(String, PointCloud, Voxelized)> {
    let (source, cloud) = match input {
        Input::File(p) => (p.display().to_string(), load_points(p, PointFormat::from_path(p))?),
        Input::Synthetic(spec) => ("synthetic".to_string(), synth_scene(cfg.seed, spec)?.cloud),
    };
    let v = voxelize(&cloud, &cfg.spec())?;
    ensure!(!v.grid.is_empty(), "{source}: no points inside the configured range");
    Ok((source, cloud, v))
}

pub fn forward(cfg: &RunConfig, input: &Input) -> Result<Report> {
    let start = Instant::now();
    let (source, cloud, v) = ingest(cfg, input)?;
    let (mut prng, mut srng) = rngs(cfg.seed);
    let params = BackboneParams::init(cfg, &mut prng);
    let tape = Tape::new();
    let out = backbone_forward(&tape, &v.grid, &bind_const(&params, &tape), cfg, &mut srng)?;
    let features = out.features.value();
    let scores = out.seg_scores.value();
    let fg = scores.data().iter().filter(|&&s| s >= cfg.delta_q).count();
    let body = Body::Forward(ForwardReport {
        source,
        points: cloud.len(),
        dropped_points: v.dropped,
        voxels: v.grid.len(),
        output_shape: [features.rows(), features.cols()],
        checksum: checksum(&features),
        foreground_fraction: fg as f64 / scores.numel() as f64,
        layers: out.layers,
    });
    Ok(Report::new(cfg, ms(start), body))
}

/// Octree block with exhaustive selection against the dense per-level
/// oracle on one scene.
pub fn oracle_scene(cfg: &RunConfig, seed: u64, v: &Voxelized, tolerance: f64) -> Result<OracleScene> {
    let grid = &v.grid;
    ensure!(
        grid.len() <= ORACLE_MAX_VOXELS,
        "scene has {} voxels; the dense oracle is limited to {ORACLE_MAX_VOXELS}",
        grid.len()
    );
    let (mut prng, mut srng) = rngs(seed);
    let params = BackboneParams::init(cfg, &mut prng);
    let otb_cfg = cfg.otb(cfg.heights[0]).exhaustive(grid.len());

    let tape = Tape::new();
    let p = bind_const(&params, &tape);
    let raw = tape.constant(normalized_features(grid, grid.spec()));
    let base = embed(grid, raw, &p.embed)?;
    let scores = seg_branch(grid, base, &p.seg)?.value().data().to_vec();
    let out = otb_forward(grid, base, &p.layers[0], &otb_cfg, Some(&scores), Mode::Infer, &mut srng)?;
    let reference = oracle_forward(grid, &base.value(), &params.layers[0], &otb_cfg, Some(&scores))?;

    let level_max_dev: Vec<f64> = out
        .attention
        .attended
        .iter()
        .zip(&reference.attended)
        .map(|(a, b)| a.value().max_abs_diff(b))
        .collect();
    let output_max_dev = out.output.value().max_abs_diff(&reference.output);
    let pass = output_max_dev <= tolerance && level_max_dev.iter().all(|&d| d <= tolerance);
    Ok(OracleScene {
        seed,
        voxels: grid.len(),
        level_max_dev,
        output_max_dev,
        pass,
    })
}

pub const ORACLE_TOLERANCE: f64 = 1e-9;

/// Oracle check on `input`, or on generated scenes for every seed in `seeds`.
pub fn oracle(cfg: &RunConfig, input: Option<&Path>, seeds: &[u64]) -> Result<Report> {
    let start = Instant::now();
    let mut scenes = Vec::new();
    match input {
        Some(path) => {
            let (_, _, v) = ingest(cfg, &Input::File(path))?;
            scenes.push(oracle_scene(cfg, cfg.seed, &v, ORACLE_TOLERANCE)?);
        }
        None => {
            for &seed in seeds {
                let scene = synth_scene(seed, &small_scene_spec(cfg, 2, 100, 100))?;
                let v = voxelize(&scene.cloud, &cfg.spec())?;
                scenes.push(oracle_scene(cfg, seed, &v, ORACLE_TOLERANCE)?);
            }
        }
    }
    let pass = !scenes.is_empty() && scenes.iter().all(|s| s.pass);
    let body = Body::Oracle(OracleReport {
        tolerance: ORACLE_TOLERANCE,
        scenes,
        pass,
    });
    Ok(Report::new(cfg, ms(start), body))
}

pub const DEFAULT_BENCH_SIZES: [usize; 6] = [1 << 10, 1 << 11, 1 << 12, 1 << 13, 1 << 14, 1 << 15];

/// Surface-like scene of about `target` voxels: a one-voxel ground slab over
/// roughly `1.5 · target` cells plus four small objects.
pub fn bench_scene(cfg: &RunConfig, seed: u64, target: usize) -> Result<(Scene, Voxelized)> {
    let side = (1.5 * target as f64).sqrt().ceil();
    let lo = cfg.range_min;
    let hi: [f64; 3] = std::array::from_fn(|a| lo[a] + [side, side, 16.0][a] * cfg.voxel_size[a]);
    let spec = SynthSpec {
        ground_points: 1,
        ground_thickness: cfg.voxel_size[2],
        ..SynthSpec::cluttered(4, target / 64, 0, (&lo, &hi))
    };
    let voxels = VoxelSpec {
        voxel_size: cfg.voxel_size,
        range_min: lo,
        range_max: hi,
    };
    synth_with_voxels(seed, &spec, &voxels, target)
}

pub fn bench_point(cfg: &RunConfig, target: usize) -> Result<BenchPoint> {
    let height = cfg.heights[0];
    let otb_cfg = cfg.otb(height);
    let (_, v) = bench_scene(cfg, cfg.seed, target)?;
    let grid = &v.grid;
    let (mut prng, mut srng) = rngs(cfg.seed);
    let params = BackboneParams::init(cfg, &mut prng);

    let tape = Tape::new();
    let p = bind_const(&params, &tape);
    let raw = tape.constant(normalized_features(grid, grid.spec()));
    let base = embed(grid, raw, &p.embed)?;
    let bn: Vec<BatchNorm<_>> = p.layers[0].levels.iter().map(|l| l.bn.clone()).collect();
    let pyramid = build_pyramid(grid, base, height, &bn, otb_cfg.bn_eps)?;
    let attn: Vec<_> = p.layers[0].levels.iter().map(|l| &l.attn).collect();

    let before = tape.macs();
    let t = Instant::now();
    octree_attention(&pyramid.layout, &pyramid.levels, &attn, &otb_cfg, None, crate::backbone::selection_mode(cfg), &mut srng)?;
    let octattn_ms = ms(t);
    let measured = tape.macs() - before;
    let predicted = predicted_octattn_macs(&pyramid.layout, otb_cfg.heads, otb_cfg.head_dim, otb_cfg.big_k);

    let mut dense = MacCounts::default();
    let t = Instant::now();
    dense_attention_streaming(
        &pyramid.levels[0].value(),
        grid.batch_ids(),
        &params.layers[0].levels[0].attn,
        otb_cfg.scale(),
        &mut dense,
    )?;
    let dense_ms = ms(t);

    Ok(BenchPoint {
        target_voxels: target,
        voxels: grid.len(),
        level_counts: pyramid.layout.counts(),
        observed_omega: pyramid.layout.observed_omega(),
        dense_macs: dense.attention(),
        octattn_macs: measured.attention(),
        predicted_octattn_macs: predicted.attention(),
        prediction_exact: measured.attn_score == predicted.attn_score && measured.attn_value == predicted.attn_value,
        dense_ms,
        octattn_ms,
    })
}

pub fn bench(cfg: &RunConfig, sizes: &[usize]) -> Result<Report> {
    ensure!(sizes.len() >= 2, "the benchmark needs at least two sizes");
    ensure!(sizes.windows(2).all(|w| w[0] < w[1]), "benchmark sizes must be strictly ascending");
    let start = Instant::now();
    let points = sizes.iter().map(|&m| bench_point(cfg, m)).collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.voxels as f64).collect();
    let dense: Vec<f64> = points.iter().map(|p| p.dense_macs as f64).collect();
    let oct: Vec<f64> = points.iter().map(|p| p.octattn_macs as f64).collect();
    let body = Body::Bench(BenchReport {
        height: cfg.heights[0],
        k: cfg.k,
        big_k: cfg.big_k(),
        dense_slope: loglog_slope(&xs, &dense)?,
        octattn_slope: loglog_slope(&xs, &oct)?,
        points,
    });
    Ok(Report::new(cfg, ms(start), body))
}

pub const DEFAULT_TRAIN_STEPS: usize = 200;
pub const DEFAULT_LEARNING_RATE: f64 = 0.5;

/// Toy segmentation: plain gradient descent on the segmentation branch
/// over a generated two-box scene, embedding held fixed.
pub fn train_seg(cfg: &RunConfig, steps: usize, lr: f64) -> Result<Report> {
    ensure!(steps >= 1, "train-seg needs at least one step");
    let start = Instant::now();
    let scene = synth_scene(cfg.seed, &small_scene_spec(cfg, 2, 150, 300))?;
    let v = voxelize(&scene.cloud, &cfg.spec())?;
    let grid = &v.grid;
    let labels = label_voxels(grid, &scene.boxes, &[scene.cloud.scene_id]);
    let (mut prng, _) = rngs(cfg.seed);
    let params = BackboneParams::init(cfg, &mut prng);
    let base = {
        let tape = Tape::new();
        let raw = tape.constant(normalized_features(grid, grid.spec()));
        embed(grid, raw, &bind_const(&params.embed, &tape))?.value().as_ref().clone()
    };
    let focal = FocalConfig::default();
    let loss_at = |seg: &octattn_core::semantic::SegParams<Tensor>, grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = bind(seg, &tape);
        let scores = seg_branch(grid, tape.constant(base.clone()), &p)?;
        let loss = focal_loss(scores, &labels, focal)?;
        let value = loss.value().data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        let mut out = Vec::new();
        octattn_core::params::ParamTree::visit(&p, &mut |v| out.push(g.wrt(*v)));
        Ok((value, out))
    };

    let mut seg = params.seg.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grads) = loss_at(&seg, true)?;
        if !loss.is_finite() {
            bail!("loss diverged at step {}", losses.len());
        }
        losses.push(loss);
        let updated: Vec<Tensor> = flatten(&seg)
            .iter()
            .zip(&grads)
            .map(|(w, g)| w.zip_map(g, |a, b| a - lr * b))
            .collect();
        seg = unflatten(&seg, &updated);
    }
    let (final_loss, _) = loss_at(&seg, false)?;
    losses.push(final_loss);
    let initial_loss = losses[0];
    let body = Body::TrainSeg(TrainSegReport {
        steps,
        learning_rate: lr,
        voxels: grid.len(),
        foreground_voxels: labels.iter().filter(|&&l| l).count(),
        initial_loss,
        final_loss,
        reduction: 1.0 - final_loss / initial_loss,
        losses,
    });
    Ok(Report::new(cfg, ms(start), body))
}

/// Writes `x,y,z,intensity` rows (`.csv`) or little-endian `f32`
/// quadruples (anything else).
pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let bytes: Vec<u8> = match PointFormat::from_path(path) {
        PointFormat::Csv => {
            let mut s = String::from("x,y,z,intensity\n");
            for p in &cloud.points {
                let _ = writeln!(s, "{},{},{},{}", p[0], p[1], p[2], p[3]);
            }
            s.into_bytes()
        }
        PointFormat::BinF32x4 => cloud
            .points
            .iter()
            .flat_map(|p| p.iter().flat_map(|&v| (v as f32).to_le_bytes()))
            .collect(),
    };
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_boxes(path: &Path, scene: &Scene) -> Result<()> {
    let mut s = String::from("scene_id,xmin,ymin,zmin,xmax,ymax,zmax\n");
    for b in &scene.boxes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            b.scene_id, b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
        );
    }
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(cfg: &RunConfig, spec: &SynthSpec, points_out: Option<&Path>, boxes_out: Option<&Path>) -> Result<Report> {
    let start = Instant::now();
    let scene = synth_scene(cfg.seed, spec)?;
    if let Some(p) = points_out {
        write_points(p, &scene.cloud)?;
    }
    if let Some(p) = boxes_out {
        write_boxes(p, &scene)?;
    }
    let v = voxelize(&scene.cloud, &cfg.spec())?;
    let body = Body::Synth(SynthReport {
        points: scene.cloud.len(),
        voxels: v.grid.len(),
        boxes: scene.boxes.iter().map(|b| SynthBox { min: b.min, max: b.max }).collect(),
        points_path: points_out.map(|p| p.display().to_string()),
        boxes_path: boxes_out.map(|p| p.display().to_string()),
    });
    Ok(Report::new(cfg, ms(start), body))
}
