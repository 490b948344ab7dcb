//! Submanifold sparse 3×3×3 convolution.
//!
//! Outputs exist only at already non-empty voxels, and each output reads
//! only non-empty neighbors from the same scene. Neighbors are found
//! through the grid's coordinate hash.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{MacKind, Var};
use crate::error::{Error, Result};
use crate::params::{init_uniform, ParamTree};
use crate::tensor::Tensor;
use crate::voxel::SparseVoxelGrid;

/// Number of kernel taps.
pub const TAPS: usize = 27;
/// Tap index of the `(0, 0, 0)` offset.
pub const CENTER_TAP: usize = 13;

/// Offset for tap `t`, with `t = (dx+1)·9 + (dy+1)·3 + (dz+1)`.
pub fn tap_offset(t: usize) -> [i32; 3] {
    [(t / 9) as i32 - 1, ((t / 3) % 3) as i32 - 1, (t % 3) as i32 - 1]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubmConvParams<T> {
    /// Shape `[3, 3, 3, c_in, c_out]`.
    pub kernel: T,
    /// Shape `[c_out]`.
    pub bias: T,
}

impl SubmConvParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = TAPS * c_in;
        Self {
            kernel: init_uniform(&[3, 3, 3, c_in, c_out], fan_in, rng),
            bias: init_uniform(&[c_out], fan_in, rng),
        }
    }

    /// Center tap is the identity, all other taps and the bias are zero.
    pub fn identity(c: usize) -> Self {
        let mut kernel = Tensor::zeros([3, 3, 3, c, c]);
        let base = CENTER_TAP * c * c;
        for i in 0..c {
            kernel.data_mut()[base + i * c + i] = 1.0;
        }
        Self {
            kernel,
            bias: Tensor::zeros([c]),
        }
    }
}

impl<T> ParamTree<T> for SubmConvParams<T> {
    type Mapped<U> = SubmConvParams<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> SubmConvParams<U> {
        SubmConvParams {
            kernel: f(&self.kernel),
            bias: f(&self.bias),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        f(&self.kernel);
        f(&self.bias);
    }
}

/// Per-voxel neighbor rows for every tap.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborMap {
    rows: Vec<[Option<usize>; TAPS]>,
}

impl NeighborMap {
    pub fn build(grid: &SparseVoxelGrid) -> Self {
        let rows = (0..grid.len())
            .map(|r| {
                let c = grid.coords()[r];
                let b = grid.batch_ids()[r];
                std::array::from_fn(|t| {
                    let o = tap_offset(t);
                    grid.lookup(b, [c[0] + o[0], c[1] + o[1], c[2] + o[2]])
                })
            })
            .collect();
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn neighbors(&self, row: usize) -> &[Option<usize>; TAPS] {
        &self.rows[row]
    }
}

/// Convolution of `features` (rows aligned with `grid`) with `params`.
pub fn subm_conv<'t>(
    grid: &SparseVoxelGrid,
    features: Var<'t>,
    params: &SubmConvParams<Var<'t>>,
) -> Result<Var<'t>> {
    let nbrs = Rc::new(NeighborMap::build(grid));
    subm_conv_with(nbrs, features, params)
}

/// Same as [`subm_conv`] with a prebuilt neighbor map.
pub fn subm_conv_with<'t>(
    nbrs: Rc<NeighborMap>,
    features: Var<'t>,
    params: &SubmConvParams<Var<'t>>,
) -> Result<Var<'t>> {
    let x = features.value();
    let kernel = params.kernel.value();
    let bias = params.bias.value();
    let ks = kernel.shape();
    if ks.len() != 5 || ks[..3] != [3, 3, 3] {
        return Err(Error::Dimension {
            op: "subm_conv kernel",
            lhs: ks.to_vec(),
            rhs: vec![3, 3, 3],
        });
    }
    let (c_in, c_out) = (ks[3], ks[4]);
    let m = x.rows();
    if x.ndim() != 2 || x.cols() != c_in || bias.numel() != c_out || nbrs.len() != m {
        return Err(Error::Dimension {
            op: "subm_conv",
            lhs: x.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let tap = |t: usize| &kernel.data()[t * c_in * c_out..(t + 1) * c_in * c_out];

    let mut out = Tensor::zeros([m, c_out]);
    let mut taps_used = 0u64;
    for v in 0..m {
        let orow = out.row_mut(v);
        orow.copy_from_slice(bias.data());
        for (t, nb) in nbrs.neighbors(v).iter().enumerate() {
            let Some(u) = *nb else { continue };
            taps_used += 1;
            let w = tap(t);
            for (i, &xv) in x.row(u).iter().enumerate() {
                let wrow = &w[i * c_out..(i + 1) * c_out];
                orow.iter_mut().zip(wrow).for_each(|(o, &wv)| *o += xv * wv);
            }
        }
    }
    features
        .tape()
        .count_macs(MacKind::Conv, taps_used * (c_in * c_out) as u64);

    let kshape = ks.to_vec();
    Ok(features.tape().custom(
        out,
        &[features, params.kernel, params.bias],
        move |g| {
            let mut dx = Tensor::zeros([m, c_in]);
            let mut dk = Tensor::zeros(kshape.clone());
            let mut db = Tensor::zeros([c_out]);
            for v in 0..m {
                let gv = g.row(v);
                db.data_mut()
                    .iter_mut()
                    .zip(gv)
                    .for_each(|(d, &x)| *d += x);
                for (t, nb) in nbrs.neighbors(v).iter().enumerate() {
                    let Some(u) = *nb else { continue };
                    let base = t * c_in * c_out;
                    let xu = x.row(u);
                    for i in 0..c_in {
                        let wrow = &kernel.data()[base + i * c_out..base + (i + 1) * c_out];
                        dx.row_mut(u)[i] += wrow.iter().zip(gv).map(|(w, g)| w * g).sum::<f64>();
                        let dkrow = &mut dk.data_mut()[base + i * c_out..base + (i + 1) * c_out];
                        dkrow
                            .iter_mut()
                            .zip(gv)
                            .for_each(|(d, &gg)| *d += xu[i] * gg);
                    }
                }
            }
            vec![dx, dk, db]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::bind;
    use crate::voxel::VoxelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(coords: &[[i32; 3]], c: usize, seed: u64) -> SparseVoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Tensor::uniform([coords.len(), c], -1.0, 1.0, &mut rng);
        SparseVoxelGrid::new(
            coords.to_vec(),
            vec![0; coords.len()],
            feats,
            VoxelSpec::unit(16),
            1,
        )
        .unwrap()
    }

    #[test]
    fn tap_layout() {
        assert_eq!(tap_offset(CENTER_TAP), [0, 0, 0]);
        assert_eq!(tap_offset(0), [-1, -1, -1]);
        assert_eq!(tap_offset(26), [1, 1, 1]);
    }

    #[test]
    fn isolated_voxel_uses_center_tap() {
        let g = grid(&[[1, 1, 1], [5, 5, 5]], 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SubmConvParams::init(2, 3, &mut rng);
        let tape = Tape::new();
        let out = subm_conv(&g, tape.constant(g.features().clone()), &bind(&p, &tape))
            .unwrap()
            .value();
        let center = Tensor::new(
            [2, 3],
            p.kernel.data()[CENTER_TAP * 6..CENTER_TAP * 6 + 6].to_vec(),
        )
        .unwrap();
        let mut expect = Tensor::new([1, 2], g.features().row(0).to_vec())
            .unwrap()
            .matmul(&center)
            .unwrap();
        expect
            .data_mut()
            .iter_mut()
            .zip(p.bias.data())
            .for_each(|(e, b)| *e += b);
        for (a, b) in out.row(0).iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let g = grid(&[[1, 1, 1], [1, 1, 2], [2, 1, 1]], 4, 3);
        let tape = Tape::new();
        let p = bind(&SubmConvParams::identity(4), &tape);
        let out = subm_conv(&g, tape.constant(g.features().clone()), &p).unwrap();
        assert_eq!(*out.value(), *g.features());
    }

    #[test]
    fn scenes_do_not_mix() {
        let feats = Tensor::new([2, 1], vec![1.0, 10.0]).unwrap();
        let g = SparseVoxelGrid::new(
            vec![[1, 1, 1], [1, 1, 2]],
            vec![0, 1],
            feats,
            VoxelSpec::unit(8),
            2,
        )
        .unwrap();
        let mut k = Tensor::full([3, 3, 3, 1, 1], 1.0);
        k.data_mut()[CENTER_TAP] = 0.0;
        let tape = Tape::new();
        let p = bind(
            &SubmConvParams {
                kernel: k,
                bias: Tensor::zeros([1]),
            },
            &tape,
        );
        let out = subm_conv(&g, tape.constant(g.features().clone()), &p).unwrap();
        assert_eq!(out.value().data(), &[0.0, 0.0]);
    }
}
