//! Seeded synthetic scenes: Gaussian object clusters inside axis-aligned
//! boxes, uniform background clutter and an optional thin ground slab.

use anyhow::{bail, Result};
use octattn_core::semantic::SceneBox;
use octattn_core::voxel::{voxelize, PointCloud, VoxelSpec, Voxelized};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_objects: usize,
    pub points_per_object: usize,
    pub background_points: usize,
    /// Points on a slab of `ground_thickness` meters at the range floor.
    pub ground_points: usize,
    pub ground_thickness: f64,
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
}

impl SynthSpec {
    /// Objects and background clutter over `range`.
    pub fn cluttered(n_objects: usize, points_per_object: usize, background_points: usize, range: (&[f64; 3], &[f64; 3])) -> Self {
        Self {
            n_objects,
            points_per_object,
            background_points,
            ground_points: 0,
            ground_thickness: 0.0,
            range_min: *range.0,
            range_max: *range.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<SceneBox>,
}

/// Objects are generated first, then background, then ground, all from one
/// stream; raising only the last count extends the cloud without changing
/// the points already drawn.
pub fn synth_scene(seed: u64, spec: &SynthSpec) -> Result<Scene> {
    let (lo, hi) = (spec.range_min, spec.range_max);
    if (0..3).any(|a| !(lo[a] < hi[a])) {
        bail!("empty synthesis range {lo:?} .. {hi:?}");
    }
    let scene_id = seed as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(
        spec.n_objects * spec.points_per_object + spec.background_points + spec.ground_points,
    );
    let mut boxes = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        let size: [f64; 3] = std::array::from_fn(|a| (hi[a] - lo[a]) * rng.random_range(0.08..0.25));
        let min: [f64; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..hi[a] - size[a]));
        let max: [f64; 3] = std::array::from_fn(|a| min[a] + size[a]);
        let b = SceneBox { scene_id, min, max };
        let axes: Vec<Normal<f64>> = (0..3)
            .map(|a| Normal::new(min[a] + size[a] / 2.0, size[a] / 4.0).expect("positive spread"))
            .collect();
        for _ in 0..spec.points_per_object {
            // resample until the draw lands inside the box
            let p = loop {
                let p: [f64; 3] = std::array::from_fn(|a| axes[a].sample(&mut rng));
                if b.contains(p) {
                    break p;
                }
            };
            points.push([p[0], p[1], p[2], rng.random_range(0.6..1.0)]);
        }
        boxes.push(b);
    }
    for _ in 0..spec.background_points {
        let p: [f64; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..hi[a]));
        points.push([p[0], p[1], p[2], rng.random_range(0.0..0.4)]);
    }
    let top = (lo[2] + spec.ground_thickness).min(hi[2]);
    for _ in 0..spec.ground_points {
        let z = if top > lo[2] { rng.random_range(lo[2]..top) } else { lo[2] };
        points.push([rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1]), z, rng.random_range(0.0..0.4)]);
    }
    Ok(Scene {
        cloud: PointCloud::new(points, scene_id)?,
        boxes,
    })
}

/// A scene whose voxelization has `target` non-empty voxels within 5%.
///
/// The last non-empty point stream of `spec` (ground if any, else
/// background) is bisected; the voxel count is monotone in it.
pub fn synth_with_voxels(seed: u64, spec: &SynthSpec, voxels: &VoxelSpec, target: usize) -> Result<(Scene, Voxelized)> {
    let tol = (target as f64 * 0.05).floor() as usize;
    let with = |n: usize| {
        let mut s = spec.clone();
        if spec.ground_points > 0 || spec.background_points == 0 {
            s.ground_points = n;
        } else {
            s.background_points = n;
        }
        let scene = synth_scene(seed, &s)?;
        let v = voxelize(&scene.cloud, voxels)?;
        Ok::<_, anyhow::Error>((scene, v))
    };
    let (mut lo, mut hi) = (0usize, target.max(1));
    loop {
        let (scene, v) = with(hi)?;
        let m = v.grid.len();
        if m.abs_diff(target) <= tol {
            return Ok((scene, v));
        }
        if m > target {
            break;
        }
        lo = hi;
        hi *= 2;
        if hi > 64 * target.max(16) {
            bail!("cannot reach {target} voxels: the range saturates at {m}");
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let (scene, v) = with(mid)?;
        let m = v.grid.len();
        if m.abs_diff(target) <= tol {
            return Ok((scene, v));
        }
        if m > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    bail!("no point count gives {target} ± {tol} voxels")
}
