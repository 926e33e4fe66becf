//! Small fully connected networks with hand-written backpropagation.
//!
//! Hidden layers use tanh; the output layer is linear. Parameters live in one flat
//! buffer laid out layer by layer as `W (out x in, row-major)` followed by `b (out)`,
//! which is also the order used by the checkpoint format and by [`Adam`].

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;

/// Hidden layer sizes for each network family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproximatorConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub velocity_hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for ApproximatorConfig {
    fn default() -> Self {
        ApproximatorConfig {
            actor_hidden: vec![128, 64],
            critic_hidden: vec![128, 64],
            velocity_hidden: vec![64, 32],
            init_log_std: -0.5,
        }
    }
}

impl ApproximatorConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, h) in [
            ("actor_hidden", &self.actor_hidden),
            ("critic_hidden", &self.critic_hidden),
            ("velocity_hidden", &self.velocity_hidden),
        ] {
            if h.contains(&0) {
                return Err(format!("approximator.{name} layers must be non-empty"));
            }
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.init_log_std) {
            return Err(format!("approximator.init_log_std must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass: the input followed by each hidden layer's output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Array2<f64>>,
}

impl Mlp {
    /// Orthogonal initialization with unit gain on hidden layers and `output_gain` on
    /// the last layer; biases start at zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut mlp = Mlp::zeros(sizes);
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let gain = if l + 1 == layers { output_gain } else { 1.0 };
            let w = orthogonal(fan_out, fan_in, rng);
            let (off, _) = mlp.layer_offsets(l);
            for (dst, src) in mlp.params[off..off + fan_out * fan_in].iter_mut().zip(w.iter()) {
                *dst = gain * src;
            }
        }
        mlp
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let n = param_count(sizes);
        Mlp { sizes: sizes.to_vec(), params: vec![0.0; n] }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, String> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(format!("invalid layer sizes {sizes:?}"));
        }
        let n = param_count(sizes);
        if params.len() != n {
            return Err(format!("layer sizes {sizes:?} need {n} parameters, got {}", params.len()));
        }
        Ok(Mlp { sizes: sizes.to_vec(), params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offsets of layer `l`'s weight matrix and bias vector in the flat buffer.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for i in 0..l {
            off += self.sizes[i + 1] * (self.sizes[i] + 1);
        }
        (off, off + self.sizes[l + 1] * self.sizes[l])
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, _) = self.layer_offsets(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        ArrayView2::from_shape((o, i), &self.params[w..w + o * i]).unwrap()
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b) = self.layer_offsets(l);
        ArrayView1::from(&self.params[b..b + self.sizes[l + 1]])
    }

    /// Set the output bias (used to pin return-estimator outputs in tests).
    pub fn set_output_bias(&mut self, bias: &[f64]) {
        let l = self.num_layers() - 1;
        let (_, b) = self.layer_offsets(l);
        self.params[b..b + bias.len()].copy_from_slice(bias);
    }

    /// Batched forward pass over rows of `input`.
    pub fn forward_batch(&self, input: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        assert_eq!(
            input.ncols(),
            self.input_dim(),
            "input width {} does not match network input {}",
            input.ncols(),
            self.input_dim()
        );
        let layers = self.num_layers();
        let mut activations = Vec::with_capacity(layers);
        let mut a = input.clone();
        for l in 0..layers {
            let w = self.weight(l);
            let b = self.bias(l);
            let mut z = Array2::zeros((a.nrows(), w.nrows()));
            z.rows_mut().into_iter().for_each(|mut row| row.assign(&b));
            general_mat_mul(1.0, &a, &w.t(), 1.0, &mut z);
            if l + 1 < layers {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(std::mem::replace(&mut a, z));
        }
        (a, MlpCache { activations })
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, input: &Array2<f64>) -> Array2<f64> {
        self.forward_batch(input).0
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, MlpCache) {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        let (y, cache) = self.forward_batch(&x);
        (y.into_raw_vec_and_offset().0, cache)
    }

    /// Gradients of `sum(output_grad * output)` with respect to every parameter,
    /// in flat-buffer order, plus the gradient with respect to the input rows.
    pub fn backward(&self, cache: &MlpCache, output_grad: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let layers = self.num_layers();
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = output_grad.clone();
        for l in (0..layers).rev() {
            let a_prev = &cache.activations[l];
            let (w_off, b_off) = self.layer_offsets(l);
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            {
                let mut gw = ndarray::ArrayViewMut2::from_shape((o, i), &mut grads[w_off..w_off + o * i]).unwrap();
                general_mat_mul(1.0, &delta.t(), a_prev, 0.0, &mut gw);
            }
            let gb = delta.sum_axis(Axis(0));
            grads[b_off..b_off + o].copy_from_slice(gb.as_slice().unwrap());
            let mut d_prev = Array2::zeros((delta.nrows(), i));
            general_mat_mul(1.0, &delta, &self.weight(l), 0.0, &mut d_prev);
            if l > 0 {
                // a_prev = tanh(z_prev), so dtanh = 1 - a_prev^2.
                d_prev.zip_mut_with(a_prev, |d, a| *d *= 1.0 - a * a);
            }
            delta = d_prev;
        }
        (grads, delta)
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

/// Random `rows x cols` matrix with orthonormal rows (or columns, whichever is shorter).
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut m = Array2::<f64>::zeros((r, c));
    m.mapv_inplace(|_| StandardNormal.sample(rng));
    for i in 0..r {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let n = m.row(i).dot(&m.row(i)).sqrt().max(1e-12);
        m.row_mut(i).mapv_inplace(|v| v / n);
    }
    if transpose {
        m.t().to_owned()
    } else {
        m
    }
}

/// Log density of a diagonal Gaussian.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Sample from `N(mean, diag(exp(2 log_std)))` and return the sample with its log probability.
/// `log_std` is clamped to `[LOG_STD_MIN, LOG_STD_MAX]` first.
pub fn gaussian_head<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let ls: Vec<f64> = log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
    let sample: Vec<f64> = mean
        .iter()
        .zip(&ls)
        .map(|(m, l)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + l.exp() * eps
        })
        .collect();
    let lp = gaussian_log_prob(&sample, mean, &ls);
    (sample, lp)
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;
    log_std.iter().map(|l| l + HALF_LN_2PI_E).sum()
}

/// Stochastic policy: an MLP producing the action mean and a state-independent log std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        action_dim: usize,
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        GaussianPolicy {
            net: Mlp::new(&sizes, 0.01, rng),
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); action_dim],
        }
    }

    pub fn clamp_log_std(&mut self) {
        for l in &mut self.log_std {
            *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Mean over rows of the squared error summed across output columns, with its
/// parameter gradient.
pub fn mse_loss_and_grads(net: &Mlp, x: &Array2<f64>, y: &Array2<f64>) -> (f64, Vec<f64>) {
    let (out, cache) = net.forward_batch(x);
    let n = x.nrows() as f64;
    let err = &out - y;
    let loss = err.iter().map(|e| e * e).sum::<f64>() / n;
    let (grads, _) = net.backward(&cache, &(err * (2.0 / n)));
    (loss, grads)
}

/// Shuffled-minibatch squared-error regression. Returns the mean per-sample loss
/// seen across the pass.
#[allow(clippy::too_many_arguments)]
pub fn fit_mse<R: Rng + ?Sized>(
    net: &mut Mlp,
    opt: &mut Adam,
    x: &Array2<f64>,
    y: &Array2<f64>,
    epochs: usize,
    minibatch: usize,
    max_grad_norm: f64,
    rng: &mut R,
) -> f64 {
    assert_eq!(x.nrows(), y.nrows());
    if x.nrows() == 0 {
        return f64::NAN;
    }
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    let (mut total, mut batches) = (0.0, 0.0);
    for _ in 0..epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(minibatch.max(1)) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let (loss, mut g) = mse_loss_and_grads(net, &xb, &yb);
            clip_grad_norm(&mut [&mut g], max_grad_norm);
            opt.step(net.params_mut(), &g);
            total += loss * chunk.len() as f64;
            batches += chunk.len() as f64;
        }
    }
    total / batches
}

/// Stack row slices into a matrix.
pub fn rows_to_matrix(rows: &[&[f64]]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ArrayView1::from(*r));
    }
    m
}

pub fn column(m: &Array2<f64>, c: usize) -> Array1<f64> {
    m.column(c).to_owned()
}
