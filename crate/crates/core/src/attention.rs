//! Multi-head attention in two shapes: padded self-attention over dense
//! token batches (the pyramid top) and gathered cross-attention where each
//! query attends to its own fixed-width key set (every lower level).
//!
//! Both return the head-summed post-softmax score matrix alongside the
//! attended features. Per head `h` the output is
//! `W_h · softmax(scale · X_q W_q (X_k W_k)ᵀ + mask) · X_k W_v`, and the
//! heads are summed.

use rand::Rng;

use crate::autodiff::{MacKind, Var};
use crate::error::{Error, Result};
use crate::params::{init_uniform, ParamTree};
use crate::select::IndexSets;
use crate::tensor::{dot, Tensor};

/// Projections of one head: `W_q, W_k, W_v: d × head_dim`, `W_h: head_dim × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnHead<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wh: T,
}

impl<T> ParamTree<T> for AttnHead<T> {
    type Mapped<U> = AttnHead<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttnHead<U> {
        AttnHead {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wh: f(&self.wh),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        f(&self.wq);
        f(&self.wk);
        f(&self.wv);
        f(&self.wh);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    pub heads: Vec<AttnHead<T>>,
}

impl AttnParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, head_dim: usize, rng: &mut R) -> Self {
        Self {
            heads: (0..heads)
                .map(|_| AttnHead {
                    wq: init_uniform(&[d, head_dim], d, rng),
                    wk: init_uniform(&[d, head_dim], d, rng),
                    wv: init_uniform(&[d, head_dim], d, rng),
                    wh: init_uniform(&[head_dim, d], head_dim, rng),
                })
                .collect(),
        }
    }
}

impl<T> ParamTree<T> for AttnParams<T> {
    type Mapped<U> = AttnParams<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttnParams<U> {
        AttnParams {
            heads: self.heads.map_params(f),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        self.heads.visit(f);
    }
}

/// Slot layout of a padded token batch: `num_scenes × m_max` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub num_scenes: usize,
    pub m_max: usize,
    pub validity: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SelfAttention<'t> {
    /// Head-summed post-softmax scores, `[B, m_max, m_max]`.
    pub scores: Tensor,
    /// Padded attended features, `(B·m_max) × d`.
    pub features: Var<'t>,
}

/// Self-attention within each scene of a padded token batch.
///
/// `tokens` is `(B·m_max) × d`. Padding keys are masked out; padding query
/// rows are computed but meaningless. `additive` is an optional
/// `[B, m_max, m_max]` pre-softmax mask shared by all heads.
pub fn mhsa_top<'t>(
    tokens: Var<'t>,
    layout: &TokenLayout,
    params: &AttnParams<Var<'t>>,
    scale: f64,
    additive: Option<&Tensor>,
) -> Result<SelfAttention<'t>> {
    let (b, m) = (layout.num_scenes, layout.m_max);
    if tokens.shape()[0] != b * m || layout.validity.len() != b * m {
        return Err(Error::Dimension {
            op: "mhsa_top",
            lhs: tokens.shape(),
            rhs: vec![b, m],
        });
    }
    if let Some(a) = additive {
        if a.numel() != b * m * m {
            return Err(Error::Dimension {
                op: "mhsa_top mask",
                lhs: a.shape().to_vec(),
                rhs: vec![b, m, m],
            });
        }
    }
    let mut scores = Tensor::zeros([b, m, m]);
    let mut scene_out = Vec::with_capacity(b);
    for s in 0..b {
        let x = tokens.slice_rows(s * m, (s + 1) * m)?;
        let key_valid = &layout.validity[s * m..(s + 1) * m];
        let mask: Vec<bool> = (0..m * m).map(|ij| key_valid[ij % m]).collect();
        let scene_mask = additive
            .map(|a| Tensor::new([m, m], a.data()[s * m * m..(s + 1) * m * m].to_vec()))
            .transpose()?;
        let mut acc: Option<Var<'t>> = None;
        for head in &params.heads {
            let q = x.matmul(head.wq)?;
            let k = x.matmul(head.wk)?;
            let v = x.matmul(head.wv)?;
            let mut logits = q.matmul_t(k, MacKind::AttnScore)?.scale(scale);
            if let Some(sm) = &scene_mask {
                logits = logits.add_const(sm)?;
            }
            let (p, _) = logits.softmax_rows(Some(&mask))?;
            scores.data_mut()[s * m * m..(s + 1) * m * m]
                .iter_mut()
                .zip(p.value().data())
                .for_each(|(a, &w)| *a += w);
            let o = p.matmul_as(v, MacKind::AttnValue)?.matmul(head.wh)?;
            acc = Some(match acc {
                Some(a) => a.add(o)?,
                None => o,
            });
        }
        scene_out.push(acc.ok_or_else(|| Error::Param("attention needs >= 1 head".into()))?);
    }
    Ok(SelfAttention {
        scores,
        features: Var::concat_rows(&scene_out)?,
    })
}

#[derive(Clone, Debug)]
pub struct CrossAttention<'t> {
    /// Head-summed post-softmax scores, `m × K`, aligned with the key sets.
    pub scores: Tensor,
    /// Attended features, `m × d`.
    pub features: Var<'t>,
}

/// Each query row attends to the key rows listed in its key set.
///
/// `queries` is `m × d`, `keys` is `n × d` and `key_sets` has `m` rows of
/// width `K` indexing into `keys`. `additive` is an optional `m × K`
/// pre-softmax mask shared by all heads.
pub fn cross_attention<'t>(
    queries: Var<'t>,
    keys: Var<'t>,
    key_sets: &IndexSets,
    params: &AttnParams<Var<'t>>,
    scale: f64,
    additive: Option<&Tensor>,
) -> Result<CrossAttention<'t>> {
    let m = queries.shape()[0];
    if key_sets.rows() != m && !(m == 0 && key_sets.width() == 0) {
        return Err(Error::Dimension {
            op: "cross_attention",
            lhs: queries.shape(),
            rhs: vec![key_sets.rows(), key_sets.width()],
        });
    }
    let mut scores = Tensor::zeros([m, key_sets.width()]);
    let mut acc: Option<Var<'t>> = None;
    for head in &params.heads {
        let q = queries.matmul(head.wq)?;
        let k = keys.matmul(head.wk)?;
        let v = keys.matmul(head.wv)?;
        let (o, w) = gathered_attention(q, k, v, key_sets, scale, additive)?;
        scores
            .data_mut()
            .iter_mut()
            .zip(w.data())
            .for_each(|(a, &x)| *a += x);
        let o = o.matmul(head.wh)?;
        acc = Some(match acc {
            Some(a) => a.add(o)?,
            None => o,
        });
    }
    Ok(CrossAttention {
        scores,
        features: acc.ok_or_else(|| Error::Param("attention needs >= 1 head".into()))?,
    })
}

/// Single-head attention of `q: m × c` over per-row key sets into
/// `k, v: n × c`. Returns the attended values and the `m × K` weights.
///
/// Every one of the `K` slots is scored, padding slots against a zero key,
/// so the booked MACs are exactly `m·K·c` for scores and again for values.
pub fn gathered_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    key_sets: &IndexSets,
    scale: f64,
    additive: Option<&Tensor>,
) -> Result<(Var<'t>, Tensor)> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (m, c) = (qv.rows(), qv.cols());
    let width = key_sets.width();
    if kv.cols() != c || vv.cols() != c || kv.rows() != vv.rows() || key_sets.rows() != m {
        return Err(Error::Dimension {
            op: "gathered_attention",
            lhs: qv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        });
    }
    if let Some(a) = additive {
        if a.numel() != m * width {
            return Err(Error::Dimension {
                op: "gathered_attention mask",
                lhs: a.shape().to_vec(),
                rhs: vec![m, width],
            });
        }
    }
    let zero = vec![0.0; c];
    let mut weights = Tensor::zeros([m, width]);
    let mut out = Tensor::zeros([m, c]);
    let mut logits = vec![0.0; width];
    for i in 0..m {
        let qi = qv.row(i);
        let slots = key_sets.row(i);
        for (j, &slot) in slots.iter().enumerate() {
            let kr = slot.map_or(zero.as_slice(), |r| kv.row(r));
            logits[j] = scale * dot(qi, kr) + additive.map_or(0.0, |a| a.data()[i * width + j]);
        }
        let max = slots
            .iter()
            .zip(&logits)
            .filter(|(s, _)| s.is_some())
            .map(|(_, &l)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let wrow = weights.row_mut(i);
        if max > f64::NEG_INFINITY {
            let mut total = 0.0;
            for (j, &slot) in slots.iter().enumerate() {
                if slot.is_some() {
                    wrow[j] = (logits[j] - max).exp();
                    total += wrow[j];
                }
            }
            wrow.iter_mut().for_each(|w| *w /= total);
        }
        let orow = out.row_mut(i);
        for (j, &slot) in slots.iter().enumerate() {
            let vr = slot.map_or(zero.as_slice(), |r| vv.row(r));
            let w = wrow[j];
            orow.iter_mut().zip(vr).for_each(|(o, &x)| *o += w * x);
        }
    }
    let tape = q.tape();
    let macs = (m * width * c) as u64;
    tape.count_macs(MacKind::AttnScore, macs);
    tape.count_macs(MacKind::AttnValue, macs);

    let sets = key_sets.clone();
    let p = weights.clone();
    let n = kv.rows();
    let var = tape.custom(out, &[q, k, v], move |g| {
        let mut dq = Tensor::zeros([m, c]);
        let mut dk = Tensor::zeros([n, c]);
        let mut dv = Tensor::zeros([n, c]);
        let mut dp = vec![0.0; width];
        for i in 0..m {
            let (gi, pi, slots) = (g.row(i), p.row(i), sets.row(i));
            for (j, &slot) in slots.iter().enumerate() {
                dp[j] = slot.map_or(0.0, |r| dot(gi, vv.row(r)));
            }
            let inner = dot(pi, &dp);
            for (j, &slot) in slots.iter().enumerate() {
                let Some(r) = slot else { continue };
                let ds = pi[j] * (dp[j] - inner) * scale;
                let kr = kv.row(r);
                dq.row_mut(i)
                    .iter_mut()
                    .zip(kr)
                    .for_each(|(d, &x)| *d += ds * x);
                let qi = qv.row(i);
                dk.row_mut(r)
                    .iter_mut()
                    .zip(qi)
                    .for_each(|(d, &x)| *d += ds * x);
                dv.row_mut(r)
                    .iter_mut()
                    .zip(gi)
                    .for_each(|(d, &x)| *d += pi[j] * x);
            }
        }
        vec![dq, dk, dv]
    });
    Ok((var, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::grad_check;
    use crate::params::bind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttnParams::init(4, 2, 2, &mut rng);
        let x = Tensor::uniform([1, 4], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let bp = bind(&p, &tape);
        let layout = TokenLayout {
            num_scenes: 1,
            m_max: 1,
            validity: vec![true],
        };
        let out = mhsa_top(tape.constant(x.clone()), &layout, &bp, 0.5, None).unwrap();
        assert_eq!(out.scores.data(), &[2.0]);
        let mut expect = Tensor::zeros([1, 4]);
        for h in &p.heads {
            let y = x.matmul(&h.wv).unwrap().matmul(&h.wh).unwrap();
            expect = expect.zip_map(&y, |a, b| a + b);
        }
        assert!(out.features.value().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn identical_tokens_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttnParams::init(3, 2, 2, &mut rng);
        let row = Tensor::uniform([1, 3], -1.0, 1.0, &mut rng);
        let x = Tensor::new([2, 3], [row.data(), row.data()].concat()).unwrap();
        let tape = Tape::new();
        let layout = TokenLayout {
            num_scenes: 1,
            m_max: 2,
            validity: vec![true, true],
        };
        let out = mhsa_top(tape.constant(x), &layout, &bind(&p, &tape), 1.0, None).unwrap();
        for &s in out.scores.data() {
            assert!((s - 1.0).abs() < 1e-15);
        }
        let f = out.features.value();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AttnParams::init(4, 2, 2, &mut rng);
        let x = Tensor::uniform([3, 4], -1.0, 1.0, &mut rng);
        let sets = IndexSets::from_rows(3, &[vec![2], vec![0], vec![1]]);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = cross_attention(xv, xv, &sets, &bind(&p, &tape), 0.5, None).unwrap();
        assert_eq!(out.scores.row(0), &[2.0, 0.0, 0.0]);
        let mut expect = Tensor::zeros([1, 4]);
        let key = Tensor::new([1, 4], x.row(2).to_vec()).unwrap();
        for h in &p.heads {
            let y = key.matmul(&h.wv).unwrap().matmul(&h.wh).unwrap();
            expect = expect.zip_map(&y, |a, b| a + b);
        }
        for (a, b) in out.features.value().row(0).iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gathered_attention_macs_cover_every_slot() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::full([3, 2], 0.1));
        let kv = tape.constant(Tensor::full([5, 2], 0.2));
        let sets = IndexSets::from_rows(4, &[vec![0], vec![1, 2], vec![3, 4, 0, 1]]);
        gathered_attention(q, kv, kv, &sets, 1.0, None).unwrap();
        assert_eq!(tape.macs().attn_score, 3 * 4 * 2);
        assert_eq!(tape.macs().attn_value, 3 * 4 * 2);
    }

    #[test]
    fn gathered_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::uniform([4, 3], -2.0, 2.0, &mut rng);
        let k = Tensor::uniform([5, 3], -2.0, 2.0, &mut rng);
        let v = Tensor::uniform([5, 3], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform([4, 3], -1.0, 1.0, &mut rng);
        let mask = Tensor::uniform([4, 3], -1.0, 1.0, &mut rng);
        let sets = IndexSets::from_rows(
            3,
            &[vec![0, 1, 2], vec![4], vec![3, 1], vec![2, 0, 4]],
        );
        let report = grad_check(&[q, k, v], 1e-5, |_, x| {
            let (o, _) = gathered_attention(x[0], x[1], x[2], &sets, 0.7, Some(&mask))?;
            o.weighted_sum(&w)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }
}
