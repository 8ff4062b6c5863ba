//! Feed-forward networks with hand-written reverse-mode gradients.
//!
//! Parameter layout is frozen: layers in order, each layer stores its
//! `fan_out x fan_in` weight matrix column-major (entry `(i, j)` at
//! `offset + j * fan_out + i`) followed by its `fan_out` biases.
//!
//! Batched calls take a `dim x batch` matrix whose columns are samples.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::Rng;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hidden-layer nonlinearity; the output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Tanh,
}

/// `tanh` through a single `exp`; agrees with `f64::tanh` to a few ulps.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    let ax = x.abs();
    if ax > 19.0 {
        return x.signum();
    }
    let e = (-2.0 * ax).exp();
    let t = (1.0 - e) / (1.0 + e);
    if x < 0.0 {
        -t
    } else {
        t
    }
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => fast_tanh(v),
        }
    }

    /// Derivative expressed through the activated value `a = act(pre)`.
    /// For relu, `a > 0` exactly when `pre > 0`, so the kink gets slope 0.
    #[inline]
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    /// Second derivative through the activated value.
    #[inline]
    fn curvature(self, a: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn w_len(&self) -> usize {
        self.fan_in * self.fan_out
    }
    fn bias_offset(&self) -> usize {
        self.offset + self.w_len()
    }
    fn end(&self) -> usize {
        self.bias_offset() + self.fan_out
    }
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid("layer_sizes", "need at least input and output sizes"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer_sizes", "sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `sum (fan_in + 1) * fan_out` over layers.
    pub fn n_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let l = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset = l.end();
                l
            })
            .collect()
    }
}

/// Flat parameter vector in the documented layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVec(pub Vec<f64>);

impl ParamVec {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }
}

impl std::ops::Deref for ParamVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::DerefMut for ParamVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Weights uniform in `+/- 1/sqrt(fan_in)`, biases zero.
pub fn init_params(spec: &MlpSpec, rng: &mut Rng) -> ParamVec {
    let mut p = ParamVec::zeros(spec.n_params());
    for l in spec.layers() {
        let bound = 1.0 / (l.fan_in as f64).sqrt();
        for w in &mut p[l.offset..l.bias_offset()] {
            *w = rng.random_range(-bound..bound);
        }
    }
    p
}

/// Network spec bundled with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamVec,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: ParamVec) -> Result<Self> {
        spec.validate()?;
        Error::check_dim("parameter vector", spec.n_params(), params.len())?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&spec, rng);
        Self::new(spec, params)
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        let n = spec.n_params();
        Self::new(spec, ParamVec::zeros(n))
    }

    /// Single affine layer `x -> W x + b`.
    pub fn affine(w: &DMatrix<f64>, b: &[f64]) -> Result<Self> {
        Error::check_dim("affine bias", w.nrows(), b.len())?;
        let spec = MlpSpec::new(vec![w.ncols(), w.nrows()], Activation::Tanh)?;
        let mut params = w.as_slice().to_vec();
        params.extend_from_slice(b);
        Self::new(spec, ParamVec(params))
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, x).map(|(y, _)| y)
    }

    pub fn eval_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        forward_batch(&self.spec, &self.params, x).map(|(y, _)| y)
    }

    /// Weight matrix of layer `l` as an owned matrix.
    pub fn weight(&self, l: usize) -> DMatrix<f64> {
        let layer = self.spec.layers()[l];
        DMatrix::from_column_slice(
            layer.fan_out,
            layer.fan_in,
            &self.params[layer.offset..layer.bias_offset()],
        )
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let layer = self.spec.layers()[l];
        &self.params[layer.bias_offset()..layer.end()]
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            format_version: CHECKPOINT_VERSION,
            layer_sizes: self.spec.layer_sizes.clone(),
            activation: self.spec.activation,
            params: self.params.0.clone(),
        }
    }

    pub fn from_checkpoint(ck: NetCheckpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(
                "format_version",
                format!("unsupported network checkpoint version {}", ck.format_version),
            ));
        }
        Self::new(MlpSpec::new(ck.layer_sizes, ck.activation)?, ParamVec(ck.params))
    }
}

/// JSON form of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetCheckpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// `c = alpha * op(a) * op(b) + beta * c` on column-major buffers, with each
/// operand given by shape and (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs + 1
    };
    assert!(k == 0 || a.len() >= span(m, k, rsa, csa));
    assert!(k == 0 || b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access in bounds and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}

/// Activations kept from a batched forward pass: the input of every layer.
#[derive(Debug, Clone)]
pub struct BatchCache {
    inputs: Vec<DMatrix<f64>>,
}

/// Cache for a single-sample forward pass.
#[derive(Debug, Clone)]
pub struct Cache(BatchCache);

pub fn forward_batch(
    spec: &MlpSpec,
    params: &[f64],
    x: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, BatchCache)> {
    Error::check_dim("network input", spec.input_dim(), x.nrows())?;
    Error::check_dim("network parameters", spec.n_params(), params.len())?;
    let layers = spec.layers();
    let batch = x.ncols();
    let mut inputs = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for (idx, l) in layers.iter().enumerate() {
        let mut out = DMatrix::<f64>::zeros(l.fan_out, batch);
        let bias = &params[l.bias_offset()..l.end()];
        for mut col in out.column_iter_mut() {
            col.copy_from_slice(bias);
        }
        gemm(
            l.fan_out,
            l.fan_in,
            batch,
            1.0,
            &params[l.offset..l.bias_offset()],
            (1, l.fan_out),
            cur.as_slice(),
            (1, l.fan_in),
            1.0,
            out.as_mut_slice(),
        );
        if idx + 1 < layers.len() {
            let act = spec.activation;
            out.apply(|v| *v = act.apply(*v));
        }
        inputs.push(std::mem::replace(&mut cur, out));
    }
    Ok((cur, BatchCache { inputs }))
}

/// Accumulates `d<grad_out, net(x)>/dparams` into `grad_params` and returns
/// the gradient with respect to the input batch.
pub fn backward_batch(
    spec: &MlpSpec,
    params: &[f64],
    cache: &BatchCache,
    grad_out: &DMatrix<f64>,
    grad_params: &mut [f64],
) -> DMatrix<f64> {
    let layers = spec.layers();
    assert_eq!(grad_params.len(), spec.n_params());
    assert_eq!(grad_out.nrows(), spec.output_dim());
    let batch = grad_out.ncols();
    let mut g = grad_out.clone();
    for (idx, l) in layers.iter().enumerate().rev() {
        let a = &cache.inputs[idx];
        // dW += g a^T
        gemm(
            l.fan_out,
            batch,
            l.fan_in,
            1.0,
            g.as_slice(),
            (1, l.fan_out),
            a.as_slice(),
            (l.fan_in, 1),
            1.0,
            &mut grad_params[l.offset..l.bias_offset()],
        );
        for (gb, row) in grad_params[l.bias_offset()..l.end()]
            .iter_mut()
            .zip(g.row_iter())
        {
            *gb += row.sum();
        }
        // g_prev = W^T g
        let mut prev = DMatrix::<f64>::zeros(l.fan_in, batch);
        gemm(
            l.fan_in,
            l.fan_out,
            batch,
            1.0,
            &params[l.offset..l.bias_offset()],
            (l.fan_out, 1),
            g.as_slice(),
            (1, l.fan_out),
            0.0,
            prev.as_mut_slice(),
        );
        if idx > 0 {
            let act = spec.activation;
            prev.zip_apply(a, |gp, av| *gp *= act.slope(av));
        }
        g = prev;
    }
    g
}

pub fn forward(spec: &MlpSpec, params: &[f64], x: &[f64]) -> Result<(Vec<f64>, Cache)> {
    let xm = DMatrix::from_column_slice(x.len(), 1, x);
    let (y, cache) = forward_batch(spec, params, &xm)?;
    Ok((y.as_slice().to_vec(), Cache(cache)))
}

/// Exact reverse-mode gradients of `<grad_output, net(x)>`.
pub fn backward(
    spec: &MlpSpec,
    params: &[f64],
    cache: &Cache,
    grad_output: &[f64],
) -> (ParamVec, Vec<f64>) {
    let mut gp = ParamVec::zeros(spec.n_params());
    let g = DMatrix::from_column_slice(grad_output.len(), 1, grad_output);
    let gx = backward_batch(spec, params, &cache.0, &g, &mut gp);
    (gp, gx.as_slice().to_vec())
}

/// `output_dim x input_dim` Jacobian; row `i` is the input gradient for the
/// unit output direction `e_i`.
pub fn jacobian_input(spec: &MlpSpec, params: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
    let n_out = spec.output_dim();
    let xm = DMatrix::from_fn(x.len(), n_out, |i, _| x[i]);
    let (_, cache) = forward_batch(spec, params, &xm)?;
    let eye = DMatrix::<f64>::identity(n_out, n_out);
    let mut scratch = vec![0.0; spec.n_params()];
    let gx = backward_batch(spec, params, &cache, &eye, &mut scratch);
    Ok(gx.transpose())
}

/// Cache of a forward pass carrying tangents (directional derivatives).
#[derive(Debug, Clone)]
pub struct TangentCache {
    inputs: Vec<DMatrix<f64>>,
    tangents: Vec<DMatrix<f64>>,
}

/// Forward pass that also pushes tangent columns `v` through the network,
/// returning `(net(x), J(x) v)` columnwise.
pub fn forward_tangent_batch(
    spec: &MlpSpec,
    params: &[f64],
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, TangentCache)> {
    Error::check_dim("tangent rows", x.nrows(), v.nrows())?;
    Error::check_dim("tangent columns", x.ncols(), v.ncols())?;
    let (out, cache) = forward_batch(spec, params, x)?;
    let layers = spec.layers();
    let batch = x.ncols();
    let mut tangents = Vec::with_capacity(layers.len());
    let mut cur = v.clone();
    for (idx, l) in layers.iter().enumerate() {
        let mut t = DMatrix::<f64>::zeros(l.fan_out, batch);
        gemm(
            l.fan_out,
            l.fan_in,
            batch,
            1.0,
            &params[l.offset..l.bias_offset()],
            (1, l.fan_out),
            cur.as_slice(),
            (1, l.fan_in),
            0.0,
            t.as_mut_slice(),
        );
        if idx + 1 < layers.len() {
            let act = spec.activation;
            t.zip_apply(&cache.inputs[idx + 1], |tv, a| *tv *= act.slope(a));
        }
        tangents.push(std::mem::replace(&mut cur, t));
    }
    Ok((
        out,
        cur,
        TangentCache {
            inputs: cache.inputs,
            tangents,
        },
    ))
}

/// Reverse pass through [`forward_tangent_batch`]. Accumulates parameter
/// gradients of `<g_out, net(x)> + <g_tan, J(x) v>` and returns the
/// gradients with respect to `x` and `v`.
pub fn backward_tangent_batch(
    spec: &MlpSpec,
    params: &[f64],
    cache: &TangentCache,
    g_out: &DMatrix<f64>,
    g_tan: &DMatrix<f64>,
    grad_params: &mut [f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let layers = spec.layers();
    let batch = g_out.ncols();
    let act = spec.activation;
    // Adjoints of the layer outputs (post-activation) and their tangents.
    let mut ga = g_out.clone();
    let mut gt = g_tan.clone();
    for (idx, l) in layers.iter().enumerate().rev() {
        let a_in = &cache.inputs[idx];
        let t_in = &cache.tangents[idx];
        // Convert adjoints of post-activation values into pre-activation ones.
        // Hidden outputs: a = act(p), ta = act'(p) tp.
        let (gp, gtp) = if idx + 1 < layers.len() {
            let a_out = &cache.inputs[idx + 1];
            let mut gp = ga.clone();
            let mut gtp = gt.clone();
            // tp is needed for the curvature term; recover it from the
            // stored (post-slope) tangent via the pre-slope product.
            let t_pre = {
                let mut t = DMatrix::<f64>::zeros(l.fan_out, batch);
                gemm(
                    l.fan_out,
                    l.fan_in,
                    batch,
                    1.0,
                    &params[l.offset..l.bias_offset()],
                    (1, l.fan_out),
                    t_in.as_slice(),
                    (1, l.fan_in),
                    0.0,
                    t.as_mut_slice(),
                );
                t
            };
            for j in 0..batch {
                for i in 0..l.fan_out {
                    let a = a_out[(i, j)];
                    let s = act.slope(a);
                    gp[(i, j)] = ga[(i, j)] * s + gt[(i, j)] * act.curvature(a) * t_pre[(i, j)];
                    gtp[(i, j)] = gt[(i, j)] * s;
                }
            }
            (gp, gtp)
        } else {
            (ga.clone(), gt.clone())
        };
        // W gradient: gp a_in^T + gtp t_in^T
        let w = l.offset..l.bias_offset();
        gemm(l.fan_out, batch, l.fan_in, 1.0, gp.as_slice(), (1, l.fan_out),
             a_in.as_slice(), (l.fan_in, 1), 1.0, &mut grad_params[w.clone()]);
        gemm(l.fan_out, batch, l.fan_in, 1.0, gtp.as_slice(), (1, l.fan_out),
             t_in.as_slice(), (l.fan_in, 1), 1.0, &mut grad_params[w.clone()]);
        for (gb, row) in grad_params[l.bias_offset()..l.end()]
            .iter_mut()
            .zip(gp.row_iter())
        {
            *gb += row.sum();
        }
        let mut ga_prev = DMatrix::<f64>::zeros(l.fan_in, batch);
        let mut gt_prev = DMatrix::<f64>::zeros(l.fan_in, batch);
        gemm(l.fan_in, l.fan_out, batch, 1.0, &params[w.clone()], (l.fan_out, 1),
             gp.as_slice(), (1, l.fan_out), 0.0, ga_prev.as_mut_slice());
        gemm(l.fan_in, l.fan_out, batch, 1.0, &params[w], (l.fan_out, 1),
             gtp.as_slice(), (1, l.fan_out), 0.0, gt_prev.as_mut_slice());
        ga = ga_prev;
        gt = gt_prev;
    }
    (ga, gt)
}

/// Largest singular value of `w` by power iteration on `w^T w`.
pub fn spectral_norm(w: &DMatrix<f64>) -> f64 {
    const MAX_ITERS: usize = 100;
    const TOL: f64 = 1e-8;
    if w.is_empty() {
        return 0.0;
    }
    // Deterministic start with no special alignment to any axis.
    let mut v = DVector::from_fn(w.ncols(), |i, _| 1.0 + 0.37 * ((i * 7919 % 13) as f64));
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..MAX_ITERS {
        let wv = w * &v;
        let next_sigma = wv.norm();
        if next_sigma == 0.0 {
            return 0.0;
        }
        let mut next = w.transpose() * wv;
        let n = next.norm();
        if n == 0.0 {
            return next_sigma;
        }
        next /= n;
        let done = (next_sigma - sigma).abs() <= TOL * next_sigma;
        sigma = next_sigma;
        v = next;
        if done {
            break;
        }
    }
    sigma
}

/// Product of layer spectral norms; relu and tanh are 1-Lipschitz.
pub fn lipschitz_upper_bound(spec: &MlpSpec, params: &[f64]) -> f64 {
    spec.layers()
        .iter()
        .map(|l| {
            spectral_norm(&DMatrix::from_column_slice(
                l.fan_out,
                l.fan_in,
                &params[l.offset..l.bias_offset()],
            ))
        })
        .product()
}
