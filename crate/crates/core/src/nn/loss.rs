use super::{NnError, Scalar, Tensor};

/// Row-wise softmax of `[batch, classes]` logits, max-subtracted.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (_, c) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.data.len());
    for row in logits.data.chunks_exact(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&z| (z - m).exp()));
        let s: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|p| *p = *p / s);
    }
    Ok(Tensor { shape: logits.shape.clone(), data: out })
}

/// Gradient through softmax given its output `p` and upstream `dp`.
pub fn softmax_backward<T: Scalar>(p: &Tensor<T>, dp: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (_, c) = p.dims2()?;
    if p.shape != dp.shape {
        return Err(NnError::ShapeMismatch("softmax gradient shape".into()));
    }
    let mut dz = Vec::with_capacity(p.data.len());
    for (prow, grow) in p.data.chunks_exact(c).zip(dp.data.chunks_exact(c)) {
        let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
        dz.extend(prow.iter().zip(grow).map(|(&pi, &gi)| pi * (gi - dot)));
    }
    Ok(Tensor { shape: p.shape.clone(), data: dz })
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
/// With class weights the mean is weighted by each row's target weight.
pub fn softmax_xent<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    class_weights: Option<&[T]>,
) -> Result<(T, Tensor<T>), NnError> {
    let (b, c) = logits.dims2()?;
    if targets.len() != b {
        return Err(NnError::ShapeMismatch(format!("{} targets for batch {b}", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(NnError::IndexOutOfRange { index: bad, classes: c });
    }
    if class_weights.is_some_and(|w| w.len() != c) {
        return Err(NnError::ShapeMismatch("class weight count".into()));
    }
    let weight = |t: usize| class_weights.map_or(T::one(), |w| w[t]);
    let total: T = targets.iter().map(|&t| weight(t)).sum();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(b * c);
    for (row, &t) in logits.data.chunks_exact(c).zip(targets) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        let w = weight(t) / total;
        loss += w * (lse - row[t]);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            let y = if j == t { T::one() } else { T::zero() };
            grad.push((p - y) * w);
        }
    }
    Ok((loss, Tensor { shape: logits.shape.clone(), data: grad }))
}
