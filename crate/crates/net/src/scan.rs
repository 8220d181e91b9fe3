//! Cross-scan expansion of a token grid into four ordered sequences and the
//! matching merge.
//!
//! Order 0 is row-major from the top-left, order 1 column-major from the
//! top-left, orders 2 and 3 are their reversals (starting bottom-right).

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const N_SCANS: usize = 4;

/// `orders[k][i]` is the token visited at sequence position `i`.
pub fn scan_orders(h: usize, w: usize) -> [Vec<usize>; N_SCANS] {
    let row_major: Vec<usize> = (0..h * w).collect();
    let col_major: Vec<usize> = (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect();
    let mut row_rev = row_major.clone();
    row_rev.reverse();
    let mut col_rev = col_major.clone();
    col_rev.reverse();
    [row_major, col_major, row_rev, col_rev]
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![usize::MAX; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Gather map reordering the rows of an `(L, C)` matrix by `perm`.
pub fn row_gather_index(perm: &[usize], cols: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(perm.len() * cols);
    for &p in perm {
        idx.extend(p * cols..(p + 1) * cols);
    }
    idx
}

/// The four scan sequences of a feature map with their permutations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequences {
    pub orders: [Vec<usize>; N_SCANS],
    pub sequences: [Tensor; N_SCANS],
}

fn reorder(f: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(f.rows, f.cols);
    for (i, &p) in perm.iter().enumerate() {
        out.data[i * f.cols..(i + 1) * f.cols].copy_from_slice(f.row(p));
    }
    out
}

/// `f` is `(h*w, C)` in row-major token order.
pub fn scan_expand(f: &Tensor, h: usize, w: usize) -> ScanSequences {
    assert_eq!(f.rows, h * w);
    let orders = scan_orders(h, w);
    let sequences = [
        reorder(f, &orders[0]),
        reorder(f, &orders[1]),
        reorder(f, &orders[2]),
        reorder(f, &orders[3]),
    ];
    ScanSequences { orders, sequences }
}

/// Returns every sequence to token order and sums the four branches.
pub fn scan_merge(s: &ScanSequences) -> Tensor {
    let (rows, cols) = s.sequences[0].shape();
    let mut out = Tensor::zeros(rows, cols);
    for (order, seq) in s.orders.iter().zip(&s.sequences) {
        out.add_assign(&reorder(seq, &invert(order)));
    }
    out
}

/// Graph version of [`scan_expand`].
pub fn expand_var(g: &mut Graph, x: Var, h: usize, w: usize) -> ([Var; N_SCANS], [Vec<usize>; N_SCANS]) {
    let cols = g.value(x).cols;
    let orders = scan_orders(h, w);
    let l = h * w;
    let vars = [0, 1, 2, 3].map(|k| g.gather(x, row_gather_index(&orders[k], cols), l, cols));
    (vars, orders)
}

/// Graph version of [`scan_merge`].
pub fn merge_vars(g: &mut Graph, ys: &[Var; N_SCANS], orders: &[Vec<usize>; N_SCANS]) -> Var {
    let (l, cols) = g.value(ys[0]).shape();
    let mut acc: Option<Var> = None;
    for (y, order) in ys.iter().zip(orders) {
        let back = g.gather(*y, row_gather_index(&invert(order), cols), l, cols);
        acc = Some(match acc {
            Some(a) => g.add(a, back),
            None => back,
        });
    }
    acc.expect("four branches")
}
