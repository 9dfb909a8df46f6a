use std::sync::Arc;

use crate::autodiff::{Scalar, Var};
use crate::error::{Error, Result};

/// Number of pixels kept by top-k selection: `ceil(frac * n)`, at least one.
pub fn topk_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Mean softmax cross-entropy over the `frac` fraction of hardest pixels of one image.
///
/// `logits` is `[N, K]`; labels `>= K` (the ignore id) are excluded before
/// selection. Ties at the threshold are taken in index order.
pub fn topk_cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, labels: Arc<[u32]>, frac: f64) -> Result<Var<'t, T>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::config("topk_frac", format!("{frac} is not in (0, 1]")));
    }
    let k_classes = logits.value().last_dim();
    let per_pixel = logits.cross_entropy_rows(labels.clone())?;
    let losses: Vec<f64> = per_pixel.value().data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut order: Vec<usize> = (0..losses.len()).filter(|&i| (labels[i] as usize) < k_classes).collect();
    if order.is_empty() {
        return Err(Error::InvalidArgument("no labelled pixels for the loss".into()));
    }
    let k = topk_count(frac, order.len());
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let mut weights = vec![T::zero(); losses.len()];
    let w = T::of(1.0 / k as f64);
    for &i in &order[..k] {
        weights[i] = w;
    }
    per_pixel.mul_const(&weights)?.sum_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    #[test]
    fn full_fraction_is_the_plain_mean() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![5, 3], |i| (i as f64 * 0.7).cos()));
        let labels: Arc<[u32]> = vec![0, 1, 255, 2, 1].into();
        let loss = topk_cross_entropy(x, labels.clone(), 1.0).unwrap().item();
        let per = x.cross_entropy_rows(labels).unwrap();
        let want: f64 = per.value().data().iter().sum::<f64>() / 4.0;
        assert!((loss - want).abs() < 1e-14);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let tape = Tape::<f64>::new();
        let labels = [2u32, 0, 1, 1];
        let x =
            tape.constant(Tensor::from_fn(vec![4, 3], |i| if i % 3 == labels[i / 3] as usize { 100.0 } else { 0.0 }));
        assert!(topk_cross_entropy(x, labels.to_vec().into(), 0.2).unwrap().item() <= 1e-3);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(topk_cross_entropy(x, vec![255, 255].into(), 0.5).is_err());
    }

    #[test]
    fn counts_round_up() {
        assert_eq!(topk_count(0.2, 10), 2);
        assert_eq!(topk_count(0.2, 11), 3);
        assert_eq!(topk_count(0.01, 3), 1);
        assert_eq!(topk_count(1.0, 7), 7);
    }
}
