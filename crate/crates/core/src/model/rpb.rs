//! Relative position bias indexing.
//!
//! A bias table holds one learned value per head and per relative
//! displacement `(dy, dx)` on the patch grid, `(2H-1)(2W-1)` entries in
//! all. The CLS token has no grid position: its row and column take a
//! learned per-head scalar pair instead.

use std::rc::Rc;

use crate::autograd::GATHER_ZERO;

/// Number of distinct displacements on an `h x w` grid.
pub fn table_len(h: usize, w: usize) -> usize {
    (2 * h - 1) * (2 * w - 1)
}

/// Row-major `[N, N]` map from (query, key) patch pairs to table entries:
/// `(dy + H - 1)(2W - 1) + (dx + W - 1)` with `(dy, dx) = coord(k) - coord(q)`.
pub fn build_rel_pos_index(h: usize, w: usize) -> Vec<usize> {
    let n = h * w;
    let mut index = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qy, qx) = (q / w, q % w);
        for k in 0..n {
            let (ky, kx) = (k / w, k % w);
            let dy = ky as isize - qy as isize + h as isize - 1;
            let dx = kx as isize - qx as isize + w as isize - 1;
            index.push(dy as usize * (2 * w - 1) + dx as usize);
        }
    }
    index
}

/// Inverse of the index formula: table entry to `(dy, dx)`.
pub fn displacement_of(entry: usize, h: usize, w: usize) -> (isize, isize) {
    let cols = 2 * w - 1;
    (
        (entry / cols) as isize - (h as isize - 1),
        (entry % cols) as isize - (w as isize - 1),
    )
}

/// Precomputed gather maps that expand a `[heads, table_len]` table and a
/// `[heads, 2]` CLS pair into a full `[heads, T, T]` logit bias.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub grid: (usize, usize),
    pub heads: usize,
    /// Per-(query, key) patch index into one head's table.
    pub index: Vec<usize>,
    /// True when a single table serves every layer.
    pub shared: bool,
    pub(crate) table_gather: Rc<[usize]>,
    pub(crate) cls_gather: Rc<[usize]>,
}

impl RelPosBias {
    pub fn new(h: usize, w: usize, heads: usize, shared: bool) -> Self {
        let index = build_rel_pos_index(h, w);
        let n = h * w;
        let t = n + 1;
        let r = table_len(h, w);
        let mut table_gather = Vec::with_capacity(heads * t * t);
        let mut cls_gather = Vec::with_capacity(heads * t * t);
        for hh in 0..heads {
            for q in 0..t {
                for k in 0..t {
                    if q > 0 && k > 0 {
                        table_gather.push(hh * r + index[(q - 1) * n + (k - 1)]);
                        cls_gather.push(GATHER_ZERO);
                    } else {
                        table_gather.push(GATHER_ZERO);
                        // CLS query row uses slot 0, patch queries attending CLS use slot 1
                        cls_gather.push(hh * 2 + usize::from(q > 0));
                    }
                }
            }
        }
        Self {
            grid: (h, w),
            heads,
            index,
            shared,
            table_gather: table_gather.into(),
            cls_gather: cls_gather.into(),
        }
    }

    pub fn table_len(&self) -> usize {
        table_len(self.grid.0, self.grid.1)
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_patch() {
        assert_eq!(build_rel_pos_index(1, 1), vec![0]);
    }

    #[test]
    fn two_by_two_corner() {
        let idx = build_rel_pos_index(2, 2);
        // q = (0,0) -> token 0, k = (1,1) -> token 3
        assert_eq!(idx[3], 8);
        assert_eq!(displacement_of(8, 2, 2), (1, 1));
    }

    #[test]
    fn antisymmetric_and_in_range() {
        for (h, w) in [(2, 3), (3, 3), (4, 2)] {
            let n = h * w;
            let idx = build_rel_pos_index(h, w);
            for q in 0..n {
                for k in 0..n {
                    let a = idx[q * n + k];
                    assert!(a < table_len(h, w));
                    let (dy, dx) = displacement_of(a, h, w);
                    let (ry, rx) = displacement_of(idx[k * n + q], h, w);
                    assert_eq!((dy, dx), (-ry, -rx));
                }
            }
        }
    }

    #[test]
    fn cls_slots() {
        let b = RelPosBias::new(2, 2, 1, true);
        let t = 5;
        assert_eq!(b.cls_gather[0], 0);
        assert_eq!(b.cls_gather[3], 0);
        assert_eq!(b.cls_gather[2 * t], 1);
        assert_eq!(b.table_gather[t + 1], b.index[0]);
    }
}
