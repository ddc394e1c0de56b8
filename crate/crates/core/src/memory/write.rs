//! Write rules. They operate on plain tensors, so the hidden states fed to
//! them carry no graph by construction.

use std::cmp::Ordering;

use super::adapter::AttentionWriteParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_width<T: Scalar>(op: &'static str, h: &Tensor<T>, w: &Tensor<T>) -> Result<()> {
    let (_, d) = h.expect_matrix(op)?;
    if w.rows() != d {
        return Err(Error::shape(op, h.shape(), w.shape()));
    }
    Ok(())
}

/// Attention-coupled update `P_t = gamma P + softmax(Q_w K_w^T / sqrt(d))^T V_w`.
pub fn write_attention<T: Scalar>(
    bank: &Tensor<T>,
    hidden: &Tensor<T>,
    w: &AttentionWriteParams<T>,
    decay: f64,
) -> Result<Tensor<T>> {
    check_width("write_attention", hidden, &w.wq)?;
    let (_, d) = bank.expect_matrix("write_attention")?;
    if hidden.cols() != d {
        return Err(Error::shape("write_attention", bank.shape(), hidden.shape()));
    }
    let q = hidden.matmul(&w.wq)?;
    let k = bank.matmul(&w.wk)?;
    let v = hidden.matmul(&w.wv)?;
    let scores = q.matmul_nt(&k)?.scale(T::one() / T::cst(d as f64).sqrt());
    let a = scores.softmax_rows()?;
    bank.scale(T::cst(decay)).add(&a.matmul_tn(&v)?)
}

/// Hebbian update `M_t = gamma M + (1/n) (H W_K)^T (H W_V)`.
pub fn write_hebbian<T: Scalar>(
    matrix: &Tensor<T>,
    hidden: &Tensor<T>,
    proj_k: &Tensor<T>,
    proj_v: &Tensor<T>,
    decay: f64,
) -> Result<Tensor<T>> {
    check_width("write_hebbian", hidden, proj_k)?;
    check_width("write_hebbian", hidden, proj_v)?;
    let n = hidden.rows();
    let k = hidden.matmul(proj_k)?;
    let v = hidden.matmul(proj_v)?;
    let update = k.matmul_tn(&v)?.scale(T::one() / T::cst(n as f64));
    if update.shape() != matrix.shape() {
        return Err(Error::shape("write_hebbian", matrix.shape(), update.shape()));
    }
    matrix.scale(T::cst(decay)).add(&update)
}

/// Top-k slot write. Returns the new bank and the written slot indices in
/// ascending order; rows outside the selection are copied unchanged.
#[allow(clippy::too_many_arguments)]
pub fn write_slot<T: Scalar>(
    slots: &Tensor<T>,
    hidden: &Tensor<T>,
    w_a: &Tensor<T>,
    w_s: &Tensor<T>,
    w_v: &Tensor<T>,
    decay: f64,
    k: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (s, d) = slots.expect_matrix("write_slot")?;
    if k == 0 || k > s {
        return Err(Error::Config(format!("top-k {k} must lie in 1..={s}")));
    }
    check_width("write_slot", hidden, w_a)?;
    check_width("write_slot", slots, w_s)?;
    check_width("write_slot", hidden, w_v)?;
    let keys = hidden.matmul(w_a)?;
    let addr = slots.matmul(w_s)?;
    // affinities transposed to S x n so each slot's softmax runs over tokens
    let affinity = addr.matmul_nt(&keys)?.scale(T::one() / T::cst(d as f64).sqrt());
    let alpha: Vec<T> = (0..s)
        .map(|j| affinity.row(j).iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| {
        alpha[b]
            .partial_cmp(&alpha[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut written = order[..k].to_vec();
    written.sort_unstable();

    let weights = affinity.softmax_rows()?;
    let values = hidden.matmul(w_v)?;
    let (n, dv) = (values.rows(), values.cols());
    if dv != d {
        return Err(Error::shape("write_slot", slots.shape(), values.shape()));
    }
    let (g, keep) = (T::cst(decay), T::cst(1.0 - decay));
    let mut out = slots.clone();
    let data = out.data_mut();
    for &j in &written {
        let wj = weights.row(j);
        let row = &mut data[j * d..(j + 1) * d];
        let mut v = vec![T::zero(); d];
        for (i, &a) in wj.iter().enumerate().take(n) {
            for (acc, &x) in v.iter_mut().zip(values.row(i)) {
                *acc += a * x;
            }
        }
        for (p, vj) in row.iter_mut().zip(v) {
            *p = g * *p + keep * vj;
        }
    }
    Ok((out, written))
}
