//! Attention fusion blocks.
//!
//! * [`pair_attention`]: bi-modal contextual attention between two `N × d`
//!   modality embeddings. Each sequence of one modality attends over all
//!   sequences of the other through a row-softmax of the cross matching
//!   matrix; the attended representation then gates the receiving
//!   modality element-wise.
//! * [`mmms_ba_fuse`]: the three pairwise blocks plus the raw embeddings.
//! * [`mmus_sa_block`] / [`mmus_sa_fuse`]: self-attention across the three
//!   modalities of a single sequence.
//! * [`ms_sa_block`] / [`ms_sa_fuse`]: self-attention across the sequences of
//!   a single modality.
//!
//! No `1/√d` scaling is applied to the matching matrices.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// Every intermediate of one [`pair_attention`] call.
#[derive(Clone, Copy, Debug)]
pub struct PairAttentionTrace {
    /// `Xp · Xqᵀ`
    pub m1: Var,
    /// `Xq · Xpᵀ`
    pub m2: Var,
    pub k1: Var,
    pub k2: Var,
    /// `K1 · Xq`
    pub o1: Var,
    /// `K2 · Xp`
    pub o2: Var,
    /// `O1 ⊙ Xp`
    pub a1: Var,
    /// `O2 ⊙ Xq`
    pub a2: Var,
    /// `[A1 | A2]`, `N × 2d`
    pub fused: Var,
}

fn same_shape<T: Scalar>(g: &Graph<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

pub fn pair_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    xp: Var,
    xq: Var,
) -> Result<PairAttentionTrace> {
    same_shape(g, "pair_attention", xp, xq)?;
    let m1 = g.matmul_nt(xp, xq)?;
    let m2 = g.matmul_nt(xq, xp)?;
    let k1 = g.row_softmax(m1)?;
    let k2 = g.row_softmax(m2)?;
    let o1 = g.matmul(k1, xq)?;
    let o2 = g.matmul(k2, xp)?;
    let a1 = g.hadamard(o1, xp)?;
    let a2 = g.hadamard(o2, xq)?;
    let fused = g.concat_cols(&[a1, a2])?;
    Ok(PairAttentionTrace {
        m1,
        m2,
        k1,
        k2,
        o1,
        o2,
        a1,
        a2,
        fused,
    })
}

/// Column layout: `[VL | AV | AL | V | A | L]`, where each pair block is the
/// `2d`-wide `fused` output of [`pair_attention`]; total width `9d`.
pub fn mmms_ba_fuse<T: Scalar>(g: &mut Graph<'_, T>, v: Var, l: Var, a: Var) -> Result<Var> {
    same_shape(g, "mmms_ba_fuse", v, l)?;
    same_shape(g, "mmms_ba_fuse", v, a)?;
    let vl = pair_attention(g, v, l)?;
    let av = pair_attention(g, a, v)?;
    let al = pair_attention(g, a, l)?;
    g.concat_cols(&[vl.fused, av.fused, al.fused, v, a, l])
}

/// Two-modality variant: `[pair(p, q) | p | q]`, width `4d`.
pub fn mmms_ba_fuse_pair<T: Scalar>(g: &mut Graph<'_, T>, p: Var, q: Var) -> Result<Var> {
    let pq = pair_attention(g, p, q)?;
    g.concat_cols(&[pq.fused, p, q])
}

/// Self-attention over the three modality rows of one sequence; returns the
/// row-major flattening of `[A_p ; X_p]` as a `1 × 6r` row.
pub fn mmus_sa_block<T: Scalar>(g: &mut Graph<'_, T>, xp: Var) -> Result<Var> {
    let (rows, r) = g.shape(xp);
    if rows != 3 {
        return Err(Error::shape("mmus_sa_block", (rows, r), (3, r)));
    }
    let m = g.matmul_nt(xp, xp)?;
    let k = g.row_softmax(m)?;
    let o = g.matmul(k, xp)?;
    let att = g.hadamard(o, xp)?;
    let stacked = g.concat_rows(&[att, xp])?;
    g.reshape(stacked, 1, 6 * r)
}

/// One [`mmus_sa_block`] per sequence over rows `(V_p, L_p, A_p)`; `N × 6d`.
pub fn mmus_sa_fuse<T: Scalar>(g: &mut Graph<'_, T>, v: Var, l: Var, a: Var) -> Result<Var> {
    same_shape(g, "mmus_sa_fuse", v, l)?;
    same_shape(g, "mmus_sa_fuse", v, a)?;
    let n = g.shape(v).0;
    let mut rows = Vec::with_capacity(n);
    for p in 0..n {
        let vp = g.row(v, p)?;
        let lp = g.row(l, p)?;
        let ap = g.row(a, p)?;
        let xp = g.concat_rows(&[vp, lp, ap])?;
        rows.push(mmus_sa_block(g, xp)?);
    }
    g.concat_rows(&rows)
}

/// Self-attention over the `N` sequences of one modality: returns
/// `softmax(X·Xᵀ)·X ⊙ X`.
pub fn ms_sa_block<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    if g.shape(x).0 == 0 {
        return Err(Error::shape("ms_sa_block", g.shape(x), (1, g.shape(x).1)));
    }
    let m = g.matmul_nt(x, x)?;
    let k = g.row_softmax(m)?;
    let o = g.matmul(k, x)?;
    g.hadamard(o, x)
}

/// Column layout `[A_v | A_l | A_a | V | L | A]`, width `6d`.
pub fn ms_sa_fuse<T: Scalar>(g: &mut Graph<'_, T>, v: Var, l: Var, a: Var) -> Result<Var> {
    same_shape(g, "ms_sa_fuse", v, l)?;
    same_shape(g, "ms_sa_fuse", v, a)?;
    let av = ms_sa_block(g, v)?;
    let al = ms_sa_block(g, l)?;
    let aa = ms_sa_block(g, a)?;
    g.concat_cols(&[av, al, aa, v, l, a])
}
