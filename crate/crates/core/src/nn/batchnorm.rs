use super::{check_finite, Layer, NnError, Param, Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization over batch and length. Accepts
/// `[batch, length, channels]` or `[batch, channels]`.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

fn view<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize), NnError> {
    match x.shape[..] {
        [b, l, c] => Ok((b * l, c)),
        [b, c] => Ok((b, c)),
        _ => Err(NnError::ShapeMismatch(format!("batchnorm input {:?}", x.shape))),
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            gamma: Param::filled("gamma", vec![channels], T::one(), true),
            beta: Param::filled("beta", vec![channels], T::zero(), true),
            running_mean: Param::filled("running_mean", vec![channels], T::zero(), false),
            running_var: Param::filled("running_var", vec![channels], T::one(), false),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let (n, c) = view(x)?;
        if c != self.channels {
            return Err(NnError::ShapeMismatch(format!("batchnorm expects {} channels, got {c}", self.channels)));
        }
        let eps = T::of(self.epsilon);
        let (mean, var) = if train {
            if x.shape[0] < 2 {
                return Err(NnError::BatchTooSmall(x.shape[0]));
            }
            let nf = T::of(n as f64);
            let mut mean = vec![T::zero(); c];
            for row in x.data.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / nf);
            let mut var = vec![T::zero(); c];
            for row in x.data.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s = *s / nf);
            let mo = T::of(self.momentum);
            for i in 0..c {
                let rm = &mut self.running_mean.value[i];
                *rm = mo * *rm + (T::one() - mo) * mean[i];
                let rv = &mut self.running_var.value[i];
                *rv = mo * *rv + (T::one() - mo) * var[i];
            }
            (mean, var)
        } else {
            (self.running_mean.value.clone(), self.running_var.value.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.data.len());
        let mut y = Vec::with_capacity(x.data.len());
        for row in x.data.chunks_exact(c) {
            for i in 0..c {
                let h = (row[i] - mean[i]) * inv_std[i];
                xhat.push(h);
                y.push(self.gamma.value[i] * h + self.beta.value[i]);
            }
        }
        let y = Tensor { shape: x.shape.clone(), data: y };
        check_finite(&y, "batchnorm")?;
        self.cache = Some(Cache { shape: x.shape.clone(), xhat, inv_std, train });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.as_ref().ok_or(NnError::NoCache("batchnorm"))?;
        if dy.shape != cache.shape {
            return Err(NnError::ShapeMismatch(format!("batchnorm gradient {:?}, expected {:?}", dy.shape, cache.shape)));
        }
        let c = self.channels;
        let n = dy.data.len() / c;
        let mut sum_dxhat = vec![T::zero(); c];
        let mut sum_dxhat_xhat = vec![T::zero(); c];
        for (grow, hrow) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for i in 0..c {
                self.gamma.grad[i] += grow[i] * hrow[i];
                self.beta.grad[i] += grow[i];
                let d = grow[i] * self.gamma.value[i];
                sum_dxhat[i] += d;
                sum_dxhat_xhat[i] += d * hrow[i];
            }
        }
        let mut dx = Vec::with_capacity(dy.data.len());
        let nf = T::of(n as f64);
        for (grow, hrow) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for i in 0..c {
                let d = grow[i] * self.gamma.value[i];
                dx.push(if cache.train {
                    cache.inv_std[i] / nf * (nf * d - sum_dxhat[i] - hrow[i] * sum_dxhat_xhat[i])
                } else {
                    d * cache.inv_std[i]
                });
            }
        }
        Ok(Tensor { shape: dy.shape.clone(), data: dx })
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}
