//! Small fully-connected tanh networks with hand-written gradients.
//!
//! Parameters live in one flat vector (per layer: weight matrix `out x in`
//! row-major, then bias), which is also the layout of the checkpoint payload
//! and what [`AdamState`] operates on.
//!
//! Two differentiation paths are provided:
//! * [`MlpModel::forward_cached`] / [`MlpModel::backward`]: reverse mode for
//!   the outputs, giving parameter and input gradients.
//! * [`MlpModel::forward_jacobian`] / [`MlpModel::backward_jacobian`]: the
//!   input Jacobian by forward-mode tangents, then reverse mode through both
//!   the primal and tangent passes. Losses that depend on `div v_theta` use
//!   this path.

use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::densities::{sin_cos, wrap_angle};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
}

/// Map applied to raw inputs before the first layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFeatures {
    #[default]
    Identity,
    /// Angle `x` becomes `(sin x, cos x)`; the model is then exactly
    /// `2 pi`-periodic.
    Circle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
    features: InputFeatures,
}

/// Intermediate values of a forward pass, consumed by [`MlpModel::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Array2<f64>,
    /// `hidden[0]` holds the featurized inputs, `hidden[l]` the activations of
    /// hidden layer `l`.
    hidden: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Forward pass with input tangents.
#[derive(Clone, Debug)]
pub struct JacobianCache {
    hidden: Vec<Array2<f64>>,
    /// `tangents[l][k]`: derivative of `hidden[l]` along input direction `k`.
    tangents: Vec<Vec<Array2<f64>>>,
    /// `pre_tangents[l][k]`: derivative of the pre-activation of hidden layer
    /// `l` (index 0 unused).
    pre_tangents: Vec<Vec<Array2<f64>>>,
    output: Array2<f64>,
    jacobian: Vec<Array2<f64>>,
}

impl JacobianCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// `jacobian()[k][(i, o)] = d out_o / d x_k` at sample `i`.
    pub fn jacobian(&self) -> &[Array2<f64>] {
        &self.jacobian
    }

    /// Trace of the Jacobian per sample; requires a square Jacobian.
    pub fn divergence(&self) -> Array1<f64> {
        let n = self.output.nrows();
        let mut div = Array1::zeros(n);
        for (k, jk) in self.jacobian.iter().enumerate() {
            div += &jk.column(k);
        }
        div
    }
}

impl MlpModel {
    /// Network with all parameters zero.
    pub fn zeros(sizes: &[usize], features: InputFeatures) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::arg(format!("invalid layer sizes {sizes:?}")));
        }
        if features == InputFeatures::Circle && sizes[0] != 2 {
            return Err(Error::arg("circle features need a first layer of width 2"));
        }
        let n: usize = sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
            activation: Activation::Tanh,
            features,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(sizes: &[usize], features: InputFeatures, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(sizes, features)?;
        for l in 0..m.n_layers() {
            let (fan_in, fan_out) = (m.sizes[l], m.sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let off = m.offset(l);
            for w in &mut m.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(m)
    }

    pub fn from_params(sizes: &[usize], features: InputFeatures, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(sizes, features)?;
        if params.len() != m.params.len() {
            return Err(Error::arg(format!(
                "expected {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn features(&self) -> InputFeatures {
        self.features
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        match self.features {
            InputFeatures::Identity => self.sizes[0],
            InputFeatures::Circle => 1,
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..layer + 1]
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (i, o) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.offset(layer);
        ArrayView2::from_shape((o, i), &self.params[off..off + o * i]).expect("layer shape")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (i, o) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.offset(layer) + o * i;
        ArrayView1::from(&self.params[off..off + o])
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::arg(format!(
                "model expects inputs of dimension {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn featurize(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        match self.features {
            InputFeatures::Identity => x.to_owned(),
            InputFeatures::Circle => {
                let mut h = Array2::zeros((x.nrows(), 2));
                for (mut row, xi) in h.rows_mut().into_iter().zip(x.column(0)) {
                    let (sin, cos) = sin_cos(wrap_angle(*xi));
                    row[0] = sin;
                    row[1] = cos;
                }
                h
            }
        }
    }

    /// `h W^T + b`.
    fn affine(&self, layer: usize, h: &Array2<f64>) -> Array2<f64> {
        let mut z = Array2::zeros((h.nrows(), self.sizes[layer + 1]));
        general_mat_mul(1.0, h, &self.weight(layer).t(), 0.0, &mut z);
        z += &self.bias(layer);
        z
    }

    fn linear(&self, layer: usize, h: &Array2<f64>) -> Array2<f64> {
        let mut z = Array2::zeros((h.nrows(), self.sizes[layer + 1]));
        general_mat_mul(1.0, h, &self.weight(layer).t(), 0.0, &mut z);
        z
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Single-point convenience wrapper around [`MlpModel::forward`].
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::arg(format!("input shape: {e}")))?;
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let mut hidden = Vec::with_capacity(self.n_layers());
        hidden.push(self.featurize(&x));
        for l in 0..self.n_layers() - 1 {
            let mut z = self.affine(l, &hidden[l]);
            z.mapv_inplace(f64::tanh);
            hidden.push(z);
        }
        let output = self.affine(self.n_layers() - 1, &hidden[self.n_layers() - 1]);
        Ok(ForwardCache {
            inputs: x.to_owned(),
            hidden,
            output,
        })
    }

    /// Reverse-mode gradients of `<upstream, forward(x)>`: the flat parameter
    /// gradient and the gradient with respect to the raw inputs.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::arg(format!(
                "upstream shape {:?} does not match output shape {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut g = upstream.to_owned();
        for l in (0..self.n_layers()).rev() {
            let h = &cache.hidden[l];
            self.accumulate_layer_grad(l, &g, h, &mut grad);
            let mut g_prev = g.dot(&self.weight(l));
            if l > 0 {
                Zip::from(&mut g_prev)
                    .and(h)
                    .for_each(|gp, &a| *gp *= 1.0 - a * a);
            }
            g = g_prev;
        }
        let input_grad = match self.features {
            InputFeatures::Identity => g,
            InputFeatures::Circle => {
                let mut gx = Array2::zeros((g.nrows(), 1));
                for ((gi, row), xi) in gx.iter_mut().zip(g.rows()).zip(cache.inputs.column(0)) {
                    let (sin, cos) = sin_cos(*xi);
                    *gi = row[0] * cos - row[1] * sin;
                }
                gx
            }
        };
        Ok((grad, input_grad))
    }

    /// Adds `g^T h` to the weight gradient and column sums of `g` to the bias
    /// gradient of `layer`.
    fn accumulate_layer_grad(
        &self,
        layer: usize,
        g: &Array2<f64>,
        h: &Array2<f64>,
        grad: &mut [f64],
    ) {
        self.accumulate_weight_grad(layer, g, h, grad);
        let (i, o) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.offset(layer) + o * i;
        for (b, s) in grad[off..off + o].iter_mut().zip(g.sum_axis(Axis(0))) {
            *b += s;
        }
    }

    /// Tangents pass through `W` only, so they contribute no bias gradient.
    fn accumulate_weight_grad(
        &self,
        layer: usize,
        g: &Array2<f64>,
        h: &Array2<f64>,
        grad: &mut [f64],
    ) {
        let (i, o) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.offset(layer);
        let mut w_grad =
            ArrayViewMut2::from_shape((o, i), &mut grad[off..off + o * i]).expect("layer shape");
        general_mat_mul(1.0, &g.t(), h, 1.0, &mut w_grad);
    }

    /// Forward pass that also propagates the input Jacobian.
    pub fn forward_jacobian(&self, x: ArrayView2<f64>) -> Result<JacobianCache> {
        self.check_input(&x)?;
        let n = x.nrows();
        let d_in = self.input_dim();
        let h0 = self.featurize(&x);
        let t0: Vec<Array2<f64>> = (0..d_in)
            .map(|k| match self.features {
                InputFeatures::Identity => {
                    let mut t = Array2::zeros((n, self.sizes[0]));
                    t.column_mut(k).fill(1.0);
                    t
                }
                InputFeatures::Circle => {
                    let mut t = Array2::zeros((n, 2));
                    for (mut row, xi) in t.rows_mut().into_iter().zip(x.column(0)) {
                        let (sin, cos) = sin_cos(*xi);
                        row[0] = cos;
                        row[1] = -sin;
                    }
                    t
                }
            })
            .collect();

        let mut hidden = vec![h0];
        let mut tangents = vec![t0];
        let mut pre_tangents = vec![Vec::new()];
        for l in 0..self.n_layers() - 1 {
            let mut h = self.affine(l, &hidden[l]);
            h.mapv_inplace(f64::tanh);
            let slope = h.mapv(|a| 1.0 - a * a);
            let dz: Vec<Array2<f64>> = tangents[l].iter().map(|t| self.linear(l, t)).collect();
            let dh: Vec<Array2<f64>> = dz.iter().map(|d| d * &slope).collect();
            hidden.push(h);
            tangents.push(dh);
            pre_tangents.push(dz);
        }
        let last = self.n_layers() - 1;
        let output = self.affine(last, &hidden[last]);
        let jacobian = tangents[last]
            .iter()
            .map(|t| self.linear(last, t))
            .collect();
        Ok(JacobianCache {
            hidden,
            tangents,
            pre_tangents,
            output,
            jacobian,
        })
    }

    /// Parameter gradient of `<g_out, out> + sum_k <g_jac[k], jacobian[k]>`.
    pub fn backward_jacobian(
        &self,
        cache: &JacobianCache,
        g_out: ArrayView2<f64>,
        g_jac: &[Array2<f64>],
    ) -> Result<Vec<f64>> {
        if g_out.dim() != cache.output.dim()
            || g_jac.len() != cache.jacobian.len()
            || g_jac.iter().any(|g| g.dim() != cache.output.dim())
        {
            return Err(Error::arg(
                "cotangent shapes do not match the Jacobian cache",
            ));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut g = g_out.to_owned();
        let mut gt: Vec<Array2<f64>> = g_jac.to_vec();
        for l in (0..self.n_layers()).rev() {
            let h = &cache.hidden[l];
            self.accumulate_layer_grad(l, &g, h, &mut grad);
            for (gk, tk) in gt.iter().zip(&cache.tangents[l]) {
                self.accumulate_weight_grad(l, gk, tk, &mut grad);
            }
            if l == 0 {
                break;
            }
            let w = self.weight(l);
            let g_h = g.dot(&w);
            let g_dh: Vec<Array2<f64>> = gt.iter().map(|gk| gk.dot(&w)).collect();
            let slope = h.mapv(|a| 1.0 - a * a);
            // d(slope)/dh = -2h; slope feeds every tangent dh_k = slope * dz_k
            let mut g_slope = Array2::zeros(h.dim());
            for (gk, dz) in g_dh.iter().zip(&cache.pre_tangents[l]) {
                g_slope += &(gk * dz);
            }
            let mut g_z = g_h;
            Zip::from(&mut g_z)
                .and(&g_slope)
                .and(h)
                .and(&slope)
                .for_each(|gz, &gs, &a, &sl| *gz = (*gz - 2.0 * a * gs) * sl);
            g = g_z;
            gt = g_dh.into_iter().map(|gk| gk * &slope).collect();
        }
        Ok(grad)
    }

    /// Writes the `TIMLP1` checkpoint: magic, number of layer sizes (u64),
    /// the sizes (u64 each), then per layer the row-major weights and the
    /// biases as f64. All integers and floats little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.sizes.len() as u64).to_le_bytes())?;
        for s in &self.sizes {
            w.write_all(&(*s as u64).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `TIMLP1` checkpoint. The feature map is not stored in the file
    /// and must be supplied.
    pub fn read_checkpoint<R: Read>(mut r: R, features: InputFeatures) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let count = u64::from_le_bytes(word) as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Checkpoint(format!(
                "implausible layer count {count}"
            )));
        }
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word)?;
            sizes.push(u64::from_le_bytes(word) as usize);
        }
        let mut model = Self::zeros(&sizes, features)?;
        for p in model.params.iter_mut() {
            r.read_exact(&mut word)?;
            *p = f64::from_le_bytes(word);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(model)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"TIMLP1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::arg(format!(
                "Adam state for {} parameters given {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Energy-MMD V-statistic between row sets and its gradient with respect to
/// every row of `generated`. Coincident pairs contribute zero gradient.
pub fn energy_mmd_value_and_grad(
    generated: ArrayView2<f64>,
    target: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let (nx, ny, d) = (generated.nrows(), target.nrows(), generated.ncols());
    if nx == 0 || ny == 0 {
        return Err(Error::arg("energy MMD needs nonempty batches"));
    }
    if target.ncols() != d {
        return Err(Error::arg("energy MMD batches differ in dimension"));
    }
    let gen = generated.as_standard_layout();
    let tgt = target.as_standard_layout();
    let gs = gen.as_slice().expect("standard layout");
    let ts = tgt.as_slice().expect("standard layout");
    let (fx, fy) = (nx as f64, ny as f64);
    let cross_w = 2.0 / (fx * fy);
    let self_w = 2.0 / (fx * fx);

    let mut grad = Array2::zeros((nx, d));
    let gsl = grad.as_slice_mut().expect("fresh array");
    let mut diff = vec![0.0; d];
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..nx {
        let xi = &gs[i * d..(i + 1) * d];
        let gi = &mut gsl[i * d..(i + 1) * d];
        for j in 0..ny {
            let yj = &ts[j * d..(j + 1) * d];
            let r = diff_norm(xi, yj, &mut diff);
            sxy += r;
            if r > 0.0 {
                for (g, df) in gi.iter_mut().zip(&diff) {
                    *g += cross_w * df / r;
                }
            }
        }
        for k in 0..nx {
            if k == i {
                continue;
            }
            let xk = &gs[k * d..(k + 1) * d];
            let r = diff_norm(xi, xk, &mut diff);
            sxx += r;
            if r > 0.0 {
                for (g, df) in gi.iter_mut().zip(&diff) {
                    *g -= self_w * df / r;
                }
            }
        }
    }
    for j in 0..ny {
        let yj = &ts[j * d..(j + 1) * d];
        for k in 0..ny {
            if k != j {
                syy += diff_norm(yj, &ts[k * d..(k + 1) * d], &mut diff);
            }
        }
    }
    let value = 2.0 * (sxy / (fx * fy)) - (sxx / (fx * fx) + syy / (fy * fy));
    Ok((value, grad))
}

#[inline]
fn diff_norm(a: &[f64], b: &[f64], out: &mut [f64]) -> f64 {
    let mut s = 0.0;
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x - y;
        s += *o * *o;
    }
    s.sqrt()
}

/// Gradient of the energy-MMD V-statistic with respect to each generated point.
pub fn mmd_loss_grad(generated: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Array2<f64>> {
    energy_mmd_value_and_grad(generated, target).map(|(_, g)| g)
}
