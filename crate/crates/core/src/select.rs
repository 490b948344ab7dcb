//! Relevance selection: row-wise top-k (optionally Gumbel-perturbed) and
//! octant sampling through the index bank.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::error::{Error, Result};
use crate::pyramid::IndexBank;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Gumbel-perturbed selection with temperature `tau`; random octant
    /// sampling.
    Train { tau: f64 },
    /// Plain top-k and deterministic octant truncation.
    Infer,
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Fixed-width rows of optional indices. Valid entries come first in every
/// row; the tail is `None` padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSets {
    width: usize,
    slots: Vec<Option<usize>>,
}

impl IndexSets {
    pub fn new(width: usize, rows: usize) -> Self {
        Self {
            width,
            slots: vec![None; width * rows],
        }
    }

    /// Packs variable-length rows, truncating nothing; panics if a row is
    /// wider than `width`.
    pub fn from_rows(width: usize, rows: &[Vec<usize>]) -> Self {
        let mut out = Self::new(width, rows.len());
        for (i, r) in rows.iter().enumerate() {
            assert!(r.len() <= width, "row {i} has {} > {width} entries", r.len());
            for (j, &v) in r.iter().enumerate() {
                out.slots[i * width + j] = Some(v);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.slots.len() / self.width
        }
    }

    pub fn row(&self, i: usize) -> &[Option<usize>] {
        &self.slots[i * self.width..(i + 1) * self.width]
    }

    /// Valid entries of row `i`.
    pub fn valid(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i).iter().map_while(|s| *s)
    }

    pub fn slots(&self) -> &[Option<usize>] {
        &self.slots
    }

    pub fn validity(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    /// Row `i` of the result is row `map[i]` of `self`.
    pub fn broadcast(&self, map: &[usize]) -> Self {
        let mut slots = Vec::with_capacity(map.len() * self.width);
        for &p in map {
            slots.extend_from_slice(self.row(p));
        }
        Self {
            width: self.width,
            slots,
        }
    }
}

/// Orders `candidates` (positions into `scores`) by descending score, ties by
/// lowest position, and keeps the first `k`.
fn top_positions(scores: &[f64], candidates: &mut Vec<usize>, k: usize) {
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    candidates.truncate(k);
}

/// Top-`k` positions of one score row among `valid` entries.
///
/// In train mode scores are perturbed as `(s + g) / τ` with standard Gumbel
/// noise `g`. Rows with fewer than `k` valid entries return all of them.
pub fn topk_select<R: Rng + ?Sized>(
    scores: &[f64],
    valid: &[bool],
    k: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Param("top-k needs k >= 1".into()));
    }
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&j| valid[j]).collect();
    match mode {
        Mode::Infer => top_positions(scores, &mut cand, k),
        Mode::Train { tau } => {
            if !(tau > 0.0) {
                return Err(Error::Param(format!("temperature must be positive, got {tau}")));
            }
            let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
            let mut perturbed = vec![f64::NEG_INFINITY; scores.len()];
            for &j in &cand {
                perturbed[j] = (scores[j] + gumbel.sample(rng)) / tau;
            }
            top_positions(&perturbed, &mut cand, k);
        }
    }
    Ok(cand)
}

/// Gathers the children of each row's selected parents and cuts the
/// candidate list to `big_k` entries.
///
/// Candidates are listed selection by selection (in rank order), children
/// in coordinate order. Infer mode keeps the first `big_k`; train mode
/// draws `big_k` uniformly without replacement and keeps them in candidate
/// order.
pub fn sample_octants<R: Rng + ?Sized>(
    selected: &IndexSets,
    bank: &IndexBank,
    big_k: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<IndexSets> {
    if big_k == 0 {
        return Err(Error::Param("octant budget K must be >= 1".into()));
    }
    let mut out = IndexSets::new(big_k, selected.rows());
    for i in 0..selected.rows() {
        let cand: Vec<usize> = selected
            .valid(i)
            .flat_map(|p| bank.parent_to_children[p].iter().copied())
            .collect();
        let kept: Vec<usize> = if cand.len() <= big_k || !mode.is_train() {
            cand.into_iter().take(big_k).collect()
        } else {
            let mut picks = sample(rng, cand.len(), big_k).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|j| cand[j]).collect()
        };
        for (j, c) in kept.into_iter().enumerate() {
            out.slots[i * big_k + j] = Some(c);
        }
    }
    Ok(out)
}
