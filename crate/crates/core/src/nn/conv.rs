use rand::Rng;

use super::{check_finite, glorot, Layer, NnError, Param, Scalar, Tensor};

/// floor((len + 2p - k) / s) + 1, or None when the kernel does not fit.
pub fn conv_out_len(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (len + 2 * p).checked_sub(k).map(|span| span / s + 1)
}

/// 1-D cross-correlation with zero padding. Weights are `[k, in, out]`.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new<R: Rng>(k: usize, stride: usize, pad: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        assert!(k > 0 && stride > 0 && cin > 0 && cout > 0);
        let w = glorot(k * cin, k * cout, k * cin * cout, rng);
        Conv1d {
            k,
            stride,
            pad,
            cin,
            cout,
            weight: Param::new("w", vec![k, cin, cout], w, true),
            bias: Param::filled("b", vec![cout], T::zero(), true),
            input: None,
        }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        conv_out_len(len, self.k, self.stride, self.pad)
    }

    /// Input position feeding output `o` through tap `kk`, if inside the signal.
    #[inline]
    fn tap(&self, o: usize, kk: usize, len: usize) -> Option<usize> {
        let pos = o * self.stride + kk;
        (pos >= self.pad && pos - self.pad < len).then(|| pos - self.pad)
    }
}

impl<T: Scalar> Layer<T> for Conv1d<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>, NnError> {
        let (b, l, c) = x.dims3()?;
        if c != self.cin {
            return Err(NnError::ShapeMismatch(format!("conv expects {} channels, got {c}", self.cin)));
        }
        let lout = self
            .out_len(l)
            .ok_or_else(|| NnError::ShapeMismatch(format!("kernel {} longer than padded input {l}", self.k)))?;
        let (cin, cout) = (self.cin, self.cout);
        let w = &self.weight.value;
        let mut y = vec![T::zero(); b * lout * cout];
        for bi in 0..b {
            for o in 0..lout {
                let yrow = &mut y[(bi * lout + o) * cout..][..cout];
                yrow.copy_from_slice(&self.bias.value);
                for kk in 0..self.k {
                    let Some(xi) = self.tap(o, kk, l) else { continue };
                    let xrow = &x.data[(bi * l + xi) * cin..][..cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let wrow = &w[(kk * cin + ci) * cout..][..cout];
                        for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                            *yv += xv * wv;
                        }
                    }
                }
            }
        }
        let y = Tensor { shape: vec![b, lout, cout], data: y };
        check_finite(&y, "conv1d")?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.input.as_ref().ok_or(NnError::NoCache("conv1d"))?;
        let (b, l, _) = x.dims3()?;
        let lout = self.out_len(l).unwrap();
        if dy.shape != [b, lout, self.cout] {
            return Err(NnError::ShapeMismatch(format!("conv gradient {:?}, expected {:?}", dy.shape, [b, lout, self.cout])));
        }
        let (cin, cout) = (self.cin, self.cout);
        let mut dx = vec![T::zero(); x.data.len()];
        for bi in 0..b {
            for o in 0..lout {
                let dyrow = &dy.data[(bi * lout + o) * cout..][..cout];
                for (db, &g) in self.bias.grad.iter_mut().zip(dyrow) {
                    *db += g;
                }
                for kk in 0..self.k {
                    let Some(xi) = self.tap(o, kk, l) else { continue };
                    let base = (bi * l + xi) * cin;
                    for ci in 0..cin {
                        let off = (kk * cin + ci) * cout;
                        let xv = x.data[base + ci];
                        if xv != T::zero() {
                            let dw = &mut self.weight.grad[off..off + cout];
                            for (d, &g) in dw.iter_mut().zip(dyrow) {
                                *d += xv * g;
                            }
                        }
                        let wrow = &self.weight.value[off..off + cout];
                        let mut acc = T::zero();
                        for (&wv, &g) in wrow.iter().zip(dyrow) {
                            acc += wv * g;
                        }
                        dx[base + ci] += acc;
                    }
                }
            }
        }
        Ok(Tensor { shape: x.shape.clone(), data: dx })
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Conv1d::<f64>::new(1, 1, 0, 3, 3, &mut rng);
        c.weight.value = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = Tensor::new(vec![2, 4, 3], (0..24).map(|v| v as f64 - 7.0).collect()).unwrap();
        assert_eq!(c.forward(&x, false).unwrap(), x);
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_out_len(121, 3, 2, 1), Some(61));
        assert_eq!(conv_out_len(61, 3, 2, 2), Some(32));
        assert_eq!(conv_out_len(61, 3, 2, 1), Some(31));
        assert_eq!(conv_out_len(61, 1, 2, 1), Some(32));
        assert_eq!(conv_out_len(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_len(1, 5, 1, 1), None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Conv1d::<f32>::new(3, 2, 1, 1, 16, &mut rng);
        let y = c.forward(&Tensor::zeros(vec![2, 121, 1]), false).unwrap();
        assert_eq!(y.shape, vec![2, 61, 16]);
    }

    #[test]
    fn hand_computed_padding() {
        // x = [1, 2, 3], k=3, s=1, p=1, w = [1, 10, 100]
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Conv1d::<f64>::new(3, 1, 1, 1, 1, &mut rng);
        c.weight.value = vec![1.0, 10.0, 100.0];
        c.bias.value = vec![0.5];
        let y = c.forward(&Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap(), false).unwrap();
        assert_eq!(y.data, vec![210.5, 321.5, 32.5]);
    }

    #[test]
    fn channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Conv1d::<f32>::new(3, 1, 1, 2, 1, &mut rng);
        assert!(matches!(c.forward(&Tensor::zeros(vec![1, 5, 3]), false), Err(NnError::ShapeMismatch(_))));
    }
}
