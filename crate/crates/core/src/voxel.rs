//! Point ingestion, voxelization and sparse voxel grids.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Linear, ParamTree};
use crate::sparse_conv::{subm_conv, SubmConvParams};
use crate::tensor::Tensor;

/// Integer voxel coordinate `(ix, iy, iz)`.
pub type Coord = [i32; 3];

/// Raw per-voxel feature width: mean `x, y, z, intensity`.
pub const RAW_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `(x, y, z, intensity)` in meters and `[0, 1]`.
    pub points: Vec<[f64; 4]>,
    pub scene_id: i64,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>, scene_id: i64) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Param(format!("non-finite point {p:?}")));
        }
        Ok(Self { points, scene_id })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointFormat {
    /// `x,y,z[,intensity]`, optional header row.
    Csv,
    /// Little-endian `f32` quadruples `(x, y, z, intensity)`.
    BinF32x4,
}

impl PointFormat {
    /// Guesses from the file extension: `.bin` is binary, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => PointFormat::BinF32x4,
            _ => PointFormat::Csv,
        }
    }
}

pub fn load_points(path: &Path, format: PointFormat) -> Result<PointCloud> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    match format {
        PointFormat::Csv => {
            let text = fs::read_to_string(path).map_err(io)?;
            parse_csv_points(&text, path)
        }
        PointFormat::BinF32x4 => {
            let bytes = fs::read(path).map_err(io)?;
            parse_bin_points(&bytes, path)
        }
    }
}

pub fn parse_bin_points(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    const RECORD: usize = 16;
    if bytes.len() % RECORD != 0 {
        return Err(Error::Size {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: RECORD as u64,
        });
    }
    let points = bytes
        .chunks_exact(RECORD)
        .map(|rec| {
            std::array::from_fn(|i| {
                f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap()) as f64
            })
        })
        .collect();
    PointCloud::new(points, 0)
}

pub fn parse_csv_points(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if first {
            first = false;
            if fields[0].parse::<f64>().is_err() {
                continue;
            }
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if !(3..=4).contains(&fields.len()) {
            return Err(err(format!("expected 3 or 4 columns, got {}", fields.len())));
        }
        let mut p = [0.0; 4];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| err(format!("{f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite value {f:?}")));
            }
        }
        points.push(p);
    }
    PointCloud::new(points, 0)
}

/// Voxel geometry: cell size and the half-open point range `[min, max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelSpec {
    pub voxel_size: [f64; 3],
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
}

impl VoxelSpec {
    pub const KITTI: VoxelSpec = VoxelSpec {
        voxel_size: [0.05, 0.05, 0.125],
        range_min: [0.0, -40.0, -3.0],
        range_max: [70.4, 40.0, 1.0],
    };

    pub const WAYMO: VoxelSpec = VoxelSpec {
        voxel_size: [0.1, 0.1, 0.1875],
        range_min: [-75.2, -75.2, -2.0],
        range_max: [75.2, 75.2, 4.0],
    };

    /// Unit voxels over `[0, n)³`.
    pub fn unit(n: u32) -> Self {
        Self {
            voxel_size: [1.0; 3],
            range_min: [0.0; 3],
            range_max: [n as f64; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.voxel_size[a] > 0.0) {
                return Err(Error::Param(format!(
                    "voxel size must be positive, got {:?}",
                    self.voxel_size
                )));
            }
            if !(self.range_min[a] < self.range_max[a]) {
                return Err(Error::Param(format!(
                    "empty range on axis {a}: {} .. {}",
                    self.range_min[a], self.range_max[a]
                )));
            }
        }
        Ok(())
    }

    /// Grid extent in voxels per axis.
    pub fn dims(&self) -> [i32; 3] {
        std::array::from_fn(|a| {
            ((self.range_max[a] - self.range_min[a]) / self.voxel_size[a]).ceil() as i32
        })
    }

    /// Voxel containing `p`, or `None` outside the range.
    pub fn coord_of(&self, p: [f64; 3]) -> Option<Coord> {
        let dims = self.dims();
        let mut c = [0; 3];
        for a in 0..3 {
            if !(p[a] >= self.range_min[a] && p[a] < self.range_max[a]) {
                return None;
            }
            let i = ((p[a] - self.range_min[a]) / self.voxel_size[a]).floor() as i32;
            c[a] = i.min(dims[a] - 1);
        }
        Some(c)
    }

    pub fn center(&self, c: Coord) -> [f64; 3] {
        std::array::from_fn(|a| self.range_min[a] + (c[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Same range with every cell `2^levels` times larger.
    pub fn coarsened(&self, levels: u32) -> Self {
        let f = (1u64 << levels) as f64;
        Self {
            voxel_size: self.voxel_size.map(|s| s * f),
            ..*self
        }
    }
}

/// Non-empty voxels of one or more scenes.
#[derive(Clone, Debug)]
pub struct SparseVoxelGrid {
    coords: Vec<Coord>,
    batch_ids: Vec<usize>,
    features: Tensor,
    spec: VoxelSpec,
    num_scenes: usize,
    index: HashMap<(usize, Coord), usize>,
}

impl PartialEq for SparseVoxelGrid {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
            && self.batch_ids == other.batch_ids
            && self.features == other.features
            && self.spec == other.spec
            && self.num_scenes == other.num_scenes
    }
}

impl SparseVoxelGrid {
    pub fn new(
        coords: Vec<Coord>,
        batch_ids: Vec<usize>,
        features: Tensor,
        spec: VoxelSpec,
        num_scenes: usize,
    ) -> Result<Self> {
        let m = coords.len();
        if batch_ids.len() != m || features.ndim() != 2 || features.rows() != m {
            return Err(Error::Dimension {
                op: "SparseVoxelGrid::new",
                lhs: vec![m, batch_ids.len()],
                rhs: features.shape().to_vec(),
            });
        }
        let dims = spec.dims();
        let mut index = HashMap::with_capacity(m);
        for (r, (&c, &b)) in coords.iter().zip(&batch_ids).enumerate() {
            if b >= num_scenes {
                return Err(Error::Param(format!(
                    "batch id {b} out of range for {num_scenes} scenes"
                )));
            }
            if (0..3).any(|a| c[a] < 0 || c[a] >= dims[a]) {
                return Err(Error::Param(format!(
                    "coord {c:?} outside grid bounds {dims:?}"
                )));
            }
            if index.insert((b, c), r).is_some() {
                return Err(Error::Param(format!(
                    "duplicate voxel {c:?} in scene {b}"
                )));
            }
        }
        Ok(Self {
            coords,
            batch_ids,
            features,
            spec,
            num_scenes,
            index,
        })
    }

    pub fn empty(spec: VoxelSpec, channels: usize) -> Self {
        Self {
            coords: Vec::new(),
            batch_ids: Vec::new(),
            features: Tensor::zeros([0, channels]),
            spec,
            num_scenes: 1,
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn batch_ids(&self) -> &[usize] {
        &self.batch_ids
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn spec(&self) -> &VoxelSpec {
        &self.spec
    }

    pub fn num_scenes(&self) -> usize {
        self.num_scenes
    }

    pub fn lookup(&self, batch: usize, coord: Coord) -> Option<usize> {
        self.index.get(&(batch, coord)).copied()
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.ndim() != 2 || features.rows() != self.len() {
            return Err(Error::Dimension {
                op: "with_features",
                lhs: vec![self.len()],
                rhs: features.shape().to_vec(),
            });
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Voxel centers in meters.
    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.coords.iter().map(|&c| self.spec.center(c)).collect()
    }

    /// Rows of scene `b`, in row order.
    pub fn scene_rows(&self, b: usize) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.batch_ids[r] == b).collect()
    }

    pub fn scene_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_scenes];
        for &b in &self.batch_ids {
            counts[b] += 1;
        }
        counts
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut feats = Tensor::zeros([perm.len(), self.channels()]);
        for (i, &p) in perm.iter().enumerate() {
            feats.row_mut(i).copy_from_slice(self.features.row(p));
        }
        Self::new(
            perm.iter().map(|&p| self.coords[p]).collect(),
            perm.iter().map(|&p| self.batch_ids[p]).collect(),
            feats,
            self.spec,
            self.num_scenes,
        )
    }

    /// Stacks single- or multi-scene grids into one batch; batch ids are
    /// assigned in argument order.
    pub fn concat_scenes(grids: &[SparseVoxelGrid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Param("concat_scenes of nothing".into()))?;
        let c = first.channels();
        let mut coords = Vec::new();
        let mut batch_ids = Vec::new();
        let mut data = Vec::new();
        let mut offset = 0;
        for g in grids {
            if g.spec != first.spec || g.channels() != c {
                return Err(Error::Param("concat_scenes: mismatched grids".into()));
            }
            coords.extend_from_slice(&g.coords);
            batch_ids.extend(g.batch_ids.iter().map(|b| b + offset));
            data.extend_from_slice(g.features.data());
            offset += g.num_scenes;
        }
        let m = coords.len();
        Self::new(coords, batch_ids, Tensor::new([m, c], data)?, first.spec, offset)
    }
}

#[derive(Clone, Debug)]
pub struct Voxelized {
    pub grid: SparseVoxelGrid,
    /// Member points per voxel row.
    pub point_counts: Vec<usize>,
    /// Points outside the range.
    pub dropped: usize,
}

/// Mean-point voxelization of one scene. Rows come out in lexicographic
/// coordinate order, and member points are summed in a canonical order so
/// the result does not depend on input point order.
pub fn voxelize(pc: &PointCloud, spec: &VoxelSpec) -> Result<Voxelized> {
    spec.validate()?;
    let mut cells: BTreeMap<Coord, Vec<[f64; 4]>> = BTreeMap::new();
    let mut dropped = 0;
    for p in &pc.points {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Param(format!("non-finite point {p:?}")));
        }
        match spec.coord_of([p[0], p[1], p[2]]) {
            Some(c) => cells.entry(c).or_default().push(*p),
            None => dropped += 1,
        }
    }
    let m = cells.len();
    let mut coords = Vec::with_capacity(m);
    let mut counts = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m * RAW_FEATURES);
    for (c, mut pts) in cells {
        pts.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = pts.len() as f64;
        let mut sum = [0.0; RAW_FEATURES];
        for p in &pts {
            sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        coords.push(c);
        counts.push(pts.len());
        data.extend(sum.iter().map(|s| s / n));
    }
    let grid = SparseVoxelGrid::new(
        coords,
        vec![0; m],
        Tensor::new([m, RAW_FEATURES], data)?,
        *spec,
        1,
    )?;
    Ok(Voxelized {
        grid,
        point_counts: counts,
        dropped,
    })
}

/// Padded `B × m_max × d` view of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTokenBatch {
    /// Shape `[B, m_max, d]`; invalid slots are zero.
    pub tokens: Tensor,
    /// `B · m_max` flags.
    pub validity: Vec<bool>,
    /// Grid row held by each slot, `None` for padding.
    pub row_map: Vec<Option<usize>>,
    pub num_scenes: usize,
    pub m_max: usize,
}

impl DenseTokenBatch {
    /// Slot order per scene: lexicographic coordinate order.
    pub fn slot_rows(grid: &SparseVoxelGrid, min_slots: usize) -> (Vec<Option<usize>>, usize) {
        dense_slots(grid.coords(), grid.batch_ids(), grid.num_scenes(), min_slots)
    }

    pub fn from_grid(grid: &SparseVoxelGrid) -> Self {
        Self::from_grid_padded(grid, 0)
    }

    /// Like [`Self::from_grid`] but with at least `min_slots` slots per scene.
    pub fn from_grid_padded(grid: &SparseVoxelGrid, min_slots: usize) -> Self {
        let (row_map, m_max) = Self::slot_rows(grid, min_slots);
        let d = grid.channels();
        let b = grid.num_scenes();
        let mut tokens = Tensor::zeros([b, m_max, d]);
        for (slot, r) in row_map.iter().enumerate() {
            if let Some(r) = *r {
                tokens.data_mut()[slot * d..(slot + 1) * d].copy_from_slice(grid.features().row(r));
            }
        }
        Self {
            tokens,
            validity: row_map.iter().map(Option::is_some).collect(),
            row_map,
            num_scenes: b,
            m_max,
        }
    }

    /// Compact features back in original grid row order.
    pub fn to_compact(&self, rows: usize) -> Tensor {
        let d = self.tokens.shape()[2];
        let mut out = Tensor::zeros([rows, d]);
        for (slot, r) in self.row_map.iter().enumerate() {
            if let Some(r) = *r {
                out.row_mut(r)
                    .copy_from_slice(&self.tokens.data()[slot * d..(slot + 1) * d]);
            }
        }
        out
    }

    /// Rebuilds the grid this batch was taken from.
    pub fn to_grid(&self, template: &SparseVoxelGrid) -> Result<SparseVoxelGrid> {
        template.with_features(self.to_compact(template.len()))
    }
}

/// Row held by each of the `num_scenes × m_max` slots, scenes padded to the
/// largest (or `min_slots`), rows within a scene in coordinate order.
pub fn dense_slots(
    coords: &[Coord],
    batch_ids: &[usize],
    num_scenes: usize,
    min_slots: usize,
) -> (Vec<Option<usize>>, usize) {
    let mut per_scene: Vec<Vec<usize>> = vec![Vec::new(); num_scenes];
    for (r, &b) in batch_ids.iter().enumerate() {
        per_scene[b].push(r);
    }
    for rows in &mut per_scene {
        rows.sort_by_key(|&r| coords[r]);
    }
    let m_max = per_scene
        .iter()
        .map(Vec::len)
        .max()
        .unwrap_or(0)
        .max(min_slots);
    let mut map = vec![None; num_scenes * m_max];
    for (s, rows) in per_scene.iter().enumerate() {
        for (j, &r) in rows.iter().enumerate() {
            map[s * m_max + j] = Some(r);
        }
    }
    (map, m_max)
}

pub fn to_dense_batch(grid: &SparseVoxelGrid) -> DenseTokenBatch {
    DenseTokenBatch::from_grid(grid)
}

/// Patch embedding: one submanifold conv on the raw features, then a
/// linear map to `d` channels with ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams<T> {
    pub conv: SubmConvParams<T>,
    pub linear: Linear<T>,
}

impl EmbedParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(c_in: usize, d: usize, rng: &mut R) -> Self {
        Self {
            conv: SubmConvParams::init(c_in, c_in, rng),
            linear: Linear::init(c_in, d, true, rng),
        }
    }
}

impl<T> ParamTree<T> for EmbedParams<T> {
    type Mapped<U> = EmbedParams<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EmbedParams<U> {
        EmbedParams {
            conv: self.conv.map_params(f),
            linear: self.linear.map_params(f),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        self.conv.visit(f);
        self.linear.visit(f);
    }
}

pub fn embed<'t>(
    grid: &SparseVoxelGrid,
    features: Var<'t>,
    params: &EmbedParams<Var<'t>>,
) -> Result<Var<'t>> {
    let conv = subm_conv(grid, features, &params.conv)?;
    Ok(params.linear.forward(conv)?.relu())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::bind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_single_record() {
        let bytes: Vec<u8> = [1.0f32, 2.0, 3.0, 0.5]
            .iter()
            .flat_map(|f| f.to_le_bytes())
            .collect();
        let pc = parse_bin_points(&bytes, Path::new("x.bin")).unwrap();
        assert_eq!(pc.points, vec![[1.0, 2.0, 3.0, 0.5]]);
    }

    #[test]
    fn truncated_binary_is_size_error() {
        let err = parse_bin_points(&[0u8; 33], Path::new("x.bin")).unwrap_err();
        assert!(matches!(err, Error::Size { len: 33, .. }));
    }

    #[test]
    fn csv_with_header_defaults_intensity() {
        let pc = parse_csv_points("x,y,z\n1.0,2.0,3.0", Path::new("a.csv")).unwrap();
        assert_eq!(pc.points, vec![[1.0, 2.0, 3.0, 0.0]]);
        let pc = parse_csv_points("1,2,3,0.25\n\n4,5,6\n", Path::new("a.csv")).unwrap();
        assert_eq!(pc.points.len(), 2);
        assert_eq!(pc.points[0][3], 0.25);
    }

    #[test]
    fn csv_reports_line_number() {
        let err = parse_csv_points("x,y,z\n1,2,3\n1,oops,3\n", Path::new("a.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_csv_points("1,2\n", Path::new("a.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn two_points_one_voxel() {
        let spec = VoxelSpec {
            voxel_size: [0.05, 0.05, 0.125],
            range_min: [0.0; 3],
            range_max: [1.0; 3],
        };
        let pc = PointCloud::new(
            vec![[0.12, 0.07, 0.30, 0.2], [0.14, 0.08, 0.31, 0.4]],
            0,
        )
        .unwrap();
        let v = voxelize(&pc, &spec).unwrap();
        assert_eq!(v.grid.coords(), &[[2, 1, 2]]);
        assert_eq!(v.point_counts, vec![2]);
        let f = v.grid.features().row(0);
        let expect = [0.13, 0.075, 0.305, 0.3];
        for (a, b) in f.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn boundary_point_floors_up() {
        let spec = VoxelSpec {
            voxel_size: [0.125, 0.25, 0.5],
            range_min: [0.0; 3],
            range_max: [4.0; 3],
        };
        let pc = PointCloud::new(vec![[3.0 * 0.125, 2.0 * 0.25, 0.5, 0.0]], 0).unwrap();
        assert_eq!(voxelize(&pc, &spec).unwrap().grid.coords(), &[[3, 2, 1]]);
    }

    #[test]
    fn out_of_range_points_dropped() {
        let spec = VoxelSpec::unit(4);
        let pc = PointCloud::new(
            vec![[-0.1, 0.0, 0.0, 0.0], [4.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 0.0]],
            0,
        )
        .unwrap();
        let v = voxelize(&pc, &spec).unwrap();
        assert_eq!(v.dropped, 2);
        assert_eq!(v.grid.len(), 1);
        let empty = voxelize(&PointCloud::new(vec![[9.0; 4]], 0).unwrap(), &spec).unwrap();
        assert!(empty.grid.is_empty());
    }

    #[test]
    fn bad_spec_rejected() {
        let mut spec = VoxelSpec::unit(4);
        spec.voxel_size[1] = 0.0;
        assert!(voxelize(&PointCloud::new(vec![], 0).unwrap(), &spec).is_err());
    }

    #[test]
    fn dense_batch_counts() {
        let g0 = SparseVoxelGrid::new(
            vec![[0, 0, 0], [1, 0, 0], [2, 0, 0]],
            vec![0; 3],
            Tensor::full([3, 2], 1.0),
            VoxelSpec::unit(8),
            1,
        )
        .unwrap();
        let g1 = SparseVoxelGrid::new(
            (0..5).map(|i| [0, i, 0]).collect(),
            vec![0; 5],
            Tensor::full([5, 2], 2.0),
            VoxelSpec::unit(8),
            1,
        )
        .unwrap();
        let single = to_dense_batch(&g1);
        assert!(single.validity.iter().all(|&v| v));
        let g = SparseVoxelGrid::concat_scenes(&[g0, g1]).unwrap();
        let batch = to_dense_batch(&g);
        assert_eq!(batch.tokens.shape(), &[2, 5, 2]);
        assert_eq!(batch.validity[..5].iter().filter(|&&v| !v).count(), 2);
        assert!(batch.tokens.data()[3 * 2..5 * 2].iter().all(|&x| x == 0.0));
        assert_eq!(batch.to_grid(&g).unwrap(), g);
    }

    #[test]
    fn embed_empty_and_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EmbedParams::init(4, 8, &mut rng);
        let tape = Tape::new();
        let bp = bind(&p, &tape);
        let empty = SparseVoxelGrid::empty(VoxelSpec::unit(4), 4);
        let out = embed(&empty, tape.constant(empty.features().clone()), &bp).unwrap();
        assert_eq!(out.shape(), vec![0, 8]);

        let g = SparseVoxelGrid::new(
            vec![[1, 2, 3]],
            vec![0],
            Tensor::new([1, 4], vec![0.3, -0.2, 0.9, 0.5]).unwrap(),
            VoxelSpec::unit(4),
            1,
        )
        .unwrap();
        let out = embed(&g, tape.constant(g.features().clone()), &bp)
            .unwrap()
            .value();
        // center tap only, then linear + relu
        let center = Tensor::new(
            [4, 4],
            p.conv.kernel.data()[13 * 16..14 * 16].to_vec(),
        )
        .unwrap();
        let mut h = g.features().matmul(&center).unwrap();
        h.data_mut()
            .iter_mut()
            .zip(p.conv.bias.data())
            .for_each(|(x, b)| *x += b);
        let mut y = h.matmul(&p.linear.weight).unwrap();
        y.data_mut()
            .iter_mut()
            .zip(p.linear.bias.as_ref().unwrap().data())
            .for_each(|(x, b)| *x = (*x + b).max(0.0));
        assert!(out.max_abs_diff(&y) < 1e-14);
    }

    #[test]
    fn duplicate_voxels_rejected() {
        let res = SparseVoxelGrid::new(
            vec![[1, 1, 1], [1, 1, 1]],
            vec![0, 0],
            Tensor::zeros([2, 1]),
            VoxelSpec::unit(4),
            1,
        );
        assert!(res.is_err());
        let ok = SparseVoxelGrid::new(
            vec![[1, 1, 1], [1, 1, 1]],
            vec![0, 1],
            Tensor::zeros([2, 1]),
            VoxelSpec::unit(4),
            2,
        );
        assert!(ok.is_ok());
    }
}
