use rand::Rng;

use super::{check_finite, glorot, Layer, NnError, Param, Scalar, Tensor};

/// y = xW + b with W stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        assert!(fan_in > 0 && fan_out > 0);
        Dense {
            fan_in,
            fan_out,
            weight: Param::new("w", vec![fan_in, fan_out], glorot(fan_in, fan_out, fan_in * fan_out, rng), true),
            bias: Param::filled("b", vec![fan_out], T::zero(), true),
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>, NnError> {
        let (b, f) = x.dims2()?;
        if f != self.fan_in {
            return Err(NnError::ShapeMismatch(format!("dense expects width {}, got {f}", self.fan_in)));
        }
        let out = self.fan_out;
        let mut y = Vec::with_capacity(b * out);
        for xrow in x.data.chunks_exact(f) {
            let start = y.len();
            y.extend_from_slice(&self.bias.value);
            let yrow = &mut y[start..];
            for (i, &xv) in xrow.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                for (yv, &wv) in yrow.iter_mut().zip(&self.weight.value[i * out..(i + 1) * out]) {
                    *yv += xv * wv;
                }
            }
        }
        let y = Tensor { shape: vec![b, out], data: y };
        check_finite(&y, "dense")?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.input.as_ref().ok_or(NnError::NoCache("dense"))?;
        let (b, f) = x.dims2()?;
        let out = self.fan_out;
        if dy.shape != [b, out] {
            return Err(NnError::ShapeMismatch(format!("dense gradient {:?}, expected {:?}", dy.shape, [b, out])));
        }
        let mut dx = vec![T::zero(); b * f];
        for ((xrow, grow), dxrow) in x.data.chunks_exact(f).zip(dy.data.chunks_exact(out)).zip(dx.chunks_exact_mut(f)) {
            for (db, &g) in self.bias.grad.iter_mut().zip(grow) {
                *db += g;
            }
            for i in 0..f {
                let w = &self.weight.value[i * out..(i + 1) * out];
                let mut acc = T::zero();
                for (&wv, &g) in w.iter().zip(grow) {
                    acc += wv * g;
                }
                dxrow[i] = acc;
                let xv = xrow[i];
                if xv != T::zero() {
                    for (d, &g) in self.weight.grad[i * out..(i + 1) * out].iter_mut().zip(grow) {
                        *d += xv * g;
                    }
                }
            }
        }
        Ok(Tensor { shape: vec![b, f], data: dx })
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
