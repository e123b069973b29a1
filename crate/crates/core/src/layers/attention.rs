//! Self-attention without projections: each row of the input is a sequence
//! `X` of `seq_len` tokens, and the output row is `softmax(X Xᵀ / sqrt(d)) X`.

use crate::error::Result;
use crate::tensor::{Element, Tensor};

fn sample<T: Element>(x: &Tensor<T>, i: usize, seq_len: usize, head_dim: usize) -> Tensor<T> {
    Tensor::new(vec![seq_len, head_dim], x.row(i).to_vec()).expect("row holds seq_len * head_dim values")
}

fn softmax_rows<T: Element>(s: &mut Tensor<T>, n: usize) {
    for row in s.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Output plus the per-sample attention weights `[seq_len x seq_len]`.
pub(super) fn forward<T: Element>(
    x: &Tensor<T>,
    seq_len: usize,
    head_dim: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let scale = T::one() / T::from_usize(head_dim).expect("head_dim fits").sqrt();
    let mut out = Vec::with_capacity(x.len());
    let mut weights = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let xi = sample(x, i, seq_len, head_dim);
        let mut a = xi.matmul(&xi.transpose2d()?)?.scale(scale);
        softmax_rows(&mut a, seq_len);
        out.extend_from_slice(a.matmul(&xi)?.data());
        weights.push(a);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, weights))
}

pub(super) fn backward<T: Element>(
    x: &Tensor<T>,
    weights: &[Tensor<T>],
    dy: &Tensor<T>,
    seq_len: usize,
    head_dim: usize,
) -> Result<Tensor<T>> {
    let scale = T::one() / T::from_usize(head_dim).expect("head_dim fits").sqrt();
    let mut dx = Vec::with_capacity(x.len());
    for (i, a) in weights.iter().enumerate() {
        let xi = sample(x, i, seq_len, head_dim);
        let dyi = sample(dy, i, seq_len, head_dim);
        // value path
        let mut dxi = a.transpose2d()?.matmul(&dyi)?;
        // softmax backward: dS = A * (dA - rowsum(dA * A))
        let da = dyi.matmul(&xi.transpose2d()?)?;
        let mut ds = da.clone();
        for r in 0..seq_len {
            let ar = &a.data()[r * seq_len..(r + 1) * seq_len];
            let dar = &da.data()[r * seq_len..(r + 1) * seq_len];
            let dot = ar.iter().zip(dar).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
            for (c, v) in ds.data_mut()[r * seq_len..(r + 1) * seq_len].iter_mut().enumerate() {
                *v = ar[c] * (dar[c] - dot) * scale;
            }
        }
        // score path: S = X Xᵀ, both operands depend on X
        let via_query = ds.matmul(&xi)?;
        let via_key = ds.transpose2d()?.matmul(&xi)?;
        dxi = dxi.add(&via_query)?.add(&via_key)?;
        dx.extend_from_slice(dxi.data());
    }
    Tensor::new(x.shape().to_vec(), dx)
}
