use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Softmax cross-entropy averaged over the batch.
///
/// Returns the loss and `dlogits = (softmax - onehot) / b`.
pub fn loss_forward_backward<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::RankMismatch {
            op: "loss_forward_backward",
            expected: 2,
            shape: logits.shape().to_vec(),
        });
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != b {
        return Err(Error::Batch(format!("{} targets for {b} logit rows", targets.len())));
    }
    if let Some(&target) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::TargetOutOfRange { target, classes: c });
    }
    let inv_b = T::one() / T::from_usize(b).expect("batch fits");
    let mut grad = logits.clone();
    let mut total = T::zero();
    for (row, &target) in grad.data_mut().chunks_mut(c).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
        total = total - row[target].ln();
        row[target] = row[target] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}
