use crate::tensor::{Element, Tensor};

fn dim_as<T: Element>(dim: usize) -> T {
    T::from_usize(dim).expect("dim fits in the element type")
}

/// Returns the normalized-and-scaled output and one RMS value per
/// (row, chunk), in row-major chunk order.
pub(super) fn forward<T: Element>(x: &Tensor<T>, gain: &Tensor<T>, dim: usize, eps: T) -> (Tensor<T>, Vec<T>) {
    let n = dim_as::<T>(dim);
    let mut y = x.clone();
    let mut rms = Vec::with_capacity(x.len() / dim);
    for chunk in y.data_mut().chunks_mut(dim) {
        let ms = chunk.iter().fold(T::zero(), |acc, &v| acc + v * v) / n;
        let r = (ms + eps).sqrt();
        for (v, &g) in chunk.iter_mut().zip(gain.data()) {
            *v = *v / r * g;
        }
        rms.push(r);
    }
    (y, rms)
}

/// Input gradient, plus the normalized input `x / rms` kept for backward-p2.
///
/// `dx = (g*dy - xhat * mean(g*dy*xhat)) / rms`, per chunk.
pub(super) fn backward_input<T: Element>(
    x: &Tensor<T>,
    rms: &[T],
    gain: &Tensor<T>,
    dy: &Tensor<T>,
    dim: usize,
) -> (Tensor<T>, Tensor<T>) {
    let n = dim_as::<T>(dim);
    let g = gain.data();
    let mut dx = dy.clone();
    let mut normalized = x.clone();
    for (c, &r) in rms.iter().enumerate() {
        let range = c * dim..(c + 1) * dim;
        let xn = &mut normalized.data_mut()[range.clone()];
        for v in xn.iter_mut() {
            *v = *v / r;
        }
        let dyc = &dy.data()[range.clone()];
        let mut dot = T::zero();
        for j in 0..dim {
            dot = dot + g[j] * dyc[j] * xn[j];
        }
        let mean = dot / n;
        let xn: Vec<T> = xn.to_vec();
        for (j, v) in dx.data_mut()[range].iter_mut().enumerate() {
            *v = (g[j] * dyc[j] - xn[j] * mean) / r;
        }
    }
    (dx, normalized)
}

/// `dg = Σ dy * xhat` over every row and chunk.
pub(super) fn gain_grad<T: Element>(normalized: &Tensor<T>, dy: &Tensor<T>, dim: usize) -> Tensor<T> {
    let mut dg = vec![T::zero(); dim];
    for (xn, d) in normalized.data().chunks(dim).zip(dy.data().chunks(dim)) {
        for j in 0..dim {
            dg[j] = dg[j] + d[j] * xn[j];
        }
    }
    Tensor::new(vec![dim], dg).expect("dim >= 1")
}
