//! Central finite-difference checks in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{softmax_xent, BatchNorm, Conv1d, Dense, Layer, NnError, Relu, Tensor};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-7;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. "input[3]" or "w[17]".
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckResult {
    fn new() -> Self {
        GradCheckResult { max_rel_error: 0.0, worst: String::new(), checked: 0, skipped: 0 }
    }

    fn record(&mut self, what: impl FnOnce() -> String, a: f64, n: f64) {
        let e = rel_error(a, n);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = what();
        }
    }
}

fn objective<L: Layer<f64> + ?Sized>(layer: &mut L, x: &Tensor<f64>, r: &[f64], train: bool) -> Result<f64, NnError> {
    let y = layer.forward(x, train)?;
    Ok(y.data.iter().zip(r).map(|(a, b)| a * b).sum())
}

/// Compares analytic gradients of sum(layer(x) * R), R random, against
/// central differences for every input element and every trainable
/// parameter. Inputs the layer reports as kinks are skipped.
pub fn grad_check<L: Layer<f64> + ?Sized>(
    layer: &mut L,
    x: &Tensor<f64>,
    step: f64,
    train: bool,
    seed: u64,
) -> Result<GradCheckResult, NnError> {
    // offset so R is never the same stream as a caller's input generator
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let y = layer.forward(x, train)?;
    let r: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let dx = layer.backward(&Tensor { shape: y.shape.clone(), data: r.clone() })?;
    let grads: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();
    let kinks = layer.kinks(x, step);

    let mut res = GradCheckResult::new();
    let mut xp = x.clone();
    for i in 0..x.data.len() {
        if kinks.as_ref().is_some_and(|k| k[i]) {
            res.skipped += 1;
            continue;
        }
        let orig = xp.data[i];
        xp.data[i] = orig + step;
        let fp = objective(layer, &xp, &r, train)?;
        xp.data[i] = orig - step;
        let fm = objective(layer, &xp, &r, train)?;
        xp.data[i] = orig;
        res.record(|| format!("input[{i}]"), dx.data[i], (fp - fm) / (2.0 * step));
    }

    let n_params = grads.len();
    for pi in 0..n_params {
        let (trainable, len, name) = {
            let p = &layer.params()[pi];
            (p.trainable, p.value.len(), p.name.clone())
        };
        if !trainable {
            continue;
        }
        for j in 0..len {
            let orig = layer.params()[pi].value[j];
            layer.params_mut()[pi].value[j] = orig + step;
            let fp = objective(layer, x, &r, train)?;
            layer.params_mut()[pi].value[j] = orig - step;
            let fm = objective(layer, x, &r, train)?;
            layer.params_mut()[pi].value[j] = orig;
            res.record(|| format!("{name}[{j}]"), grads[pi][j], (fp - fm) / (2.0 * step));
        }
    }
    Ok(res)
}

/// Checks the cross-entropy gradient w.r.t. the logits.
pub fn grad_check_softmax_xent(logits: &Tensor<f64>, targets: &[usize], step: f64) -> Result<GradCheckResult, NnError> {
    let (_, d) = softmax_xent(logits, targets, None)?;
    let mut res = GradCheckResult::new();
    let mut z = logits.clone();
    for i in 0..z.data.len() {
        let orig = z.data[i];
        z.data[i] = orig + step;
        let fp = softmax_xent(&z, targets, None)?.0;
        z.data[i] = orig - step;
        let fm = softmax_xent(&z, targets, None)?.0;
        z.data[i] = orig;
        res.record(|| format!("logits[{i}]"), d.data[i], (fp - fm) / (2.0 * step));
    }
    Ok(res)
}

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub layer: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub worst: String,
    pub passed: bool,
}

fn uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape matches data")
}

/// Every layer type over seeds `0..seeds`, worst case per layer.
pub fn layer_suite(seeds: u64) -> Result<Vec<SuiteRow>, NnError> {
    let names = ["conv1d", "batchnorm(train)", "batchnorm(eval)", "dense", "relu", "softmax_xent"];
    let mut worst: Vec<GradCheckResult> = names.iter().map(|_| GradCheckResult::new()).collect();
    let mut keep = |i: usize, r: GradCheckResult| {
        if r.max_rel_error >= worst[i].max_rel_error {
            worst[i] = r;
        }
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Conv1d::<f64>::new(3, 2, 1, 3, 4, &mut rng);
        conv.bias.value = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        keep(0, grad_check(&mut conv, &uniform(vec![2, 9, 3], &mut rng), 1e-3, true, seed)?);

        let mut bn = BatchNorm::<f64>::new(3);
        bn.gamma.value = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
        bn.beta.value = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        keep(1, grad_check(&mut bn, &uniform(vec![4, 5, 3], &mut rng), 1e-5, true, seed)?);
        bn.running_var.value = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
        keep(2, grad_check(&mut bn, &uniform(vec![4, 5, 3], &mut rng), 1e-5, false, seed)?);

        let mut d = Dense::<f64>::new(6, 4, &mut rng);
        keep(3, grad_check(&mut d, &uniform(vec![3, 6], &mut rng), 1e-5, true, seed)?);

        // keep inputs away from the kink
        let mut x = uniform(vec![3, 7], &mut rng);
        x.data.iter_mut().filter(|v| v.abs() < 0.1).for_each(|v| *v += 0.2);
        keep(4, grad_check(&mut Relu::new(), &x, 1e-5, true, seed)?);

        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        keep(5, grad_check_softmax_xent(&uniform(vec![4, 5], &mut rng), &targets, 1e-5)?);
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, r)| SuiteRow {
            layer: n.to_string(),
            seeds,
            max_rel_error: r.max_rel_error,
            worst: r.worst,
            passed: r.max_rel_error < TOLERANCE,
        })
        .collect())
}
