//! Minimal dense network engine: forward, exact reverse-mode gradients, Adam.
//!
//! Networks are plain structs with value semantics. A forward pass that needs
//! gradients runs through [`MlpNet::forward_traced`], which records the
//! per-layer inputs and pre-activations; [`MlpNet::backward`] then replays the
//! chain rule exactly. Hidden layers use Mish, outputs are linear, matching
//! the three-hidden-layer role networks used everywhere else in the crate.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::Mat;
use crate::math;
use crate::{Error, Result};

/// Element-wise activation applied after a layer's affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Identity,
}

/// `mish(x) = x * tanh(ln(1 + e^x))`, with an overflow-safe softplus.
#[inline]
pub fn mish(x: f64) -> f64 {
    x * math::tanh(math::softplus(x))
}

/// Derivative of [`mish`]: `tanh(sp) + x * (1 - tanh^2(sp)) * sigmoid(x)`.
#[inline]
fn mish_grad(x: f64) -> f64 {
    let t = math::tanh(math::softplus(x));
    t + x * (1.0 - t * t) * sigmoid(x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `y = act(W x + b)` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Mat,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Dense multi-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    layers: Vec<Layer>,
}

impl MlpNet {
    /// Builds a network from explicit layer sizes `[in, h_1, .., h_k, out]`.
    ///
    /// Hidden layers get Mish, the output layer is linear. Weights are drawn
    /// uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; biases start at 0.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidParam(
                "network needs at least an input and an output size".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidParam("layer sizes must be positive".into()));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / math::sqrt(fan_in as f64);
            let weights = Mat::from_vec(
                fan_out,
                fan_in,
                (0..fan_in * fan_out)
                    .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound)
                    .collect(),
            )?;
            layers.push(Layer {
                weights,
                biases: vec![0.0; fan_out],
                activation: Activation::Mish,
            });
        }
        layers.last_mut().unwrap().activation = Activation::Identity;
        Ok(MlpNet { layers })
    }

    /// The paper-role shape: exactly three Mish hidden layers of equal width.
    pub fn three_hidden<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(&[input, hidden, hidden, hidden, output], rng)
    }

    /// Builds a network directly from layers, validating shape composition.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParam("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    context: "MlpNet::from_layers adjacent layers",
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                });
            }
        }
        for layer in &layers {
            if layer.biases.len() != layer.out_dim() {
                return Err(Error::ShapeMismatch {
                    context: "MlpNet::from_layers bias length",
                    expected: layer.out_dim(),
                    got: layer.biases.len(),
                });
            }
            if !layer.weights.is_finite() || !layer.biases.iter().all(|b| b.is_finite()) {
                return Err(Error::NonFinite("layer parameters"));
            }
        }
        Ok(MlpNet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.biases.len())
            .sum()
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "MlpNet forward input width",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Batched forward pass: `x` is `batch x in`, the result `batch x out`.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = affine(&h, layer);
            for v in h.as_mut_slice() {
                *v = layer.activation.apply(*v);
            }
        }
        Ok(h)
    }

    /// Forward pass for a single sample.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Mat::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m)?.as_slice().to_vec())
    }

    /// Forward pass that records what [`MlpNet::backward`] needs.
    pub fn forward_traced(&self, x: &Mat) -> Result<(Mat, Trace)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            inputs.push(h.clone());
            let z = affine(&h, layer);
            pre_acts.push(z.clone());
            h = z;
            for v in h.as_mut_slice() {
                *v = layer.activation.apply(*v);
            }
        }
        Ok((h, Trace { inputs, pre_acts }))
    }

    /// Exact reverse-mode gradients of `sum(upstream .* output)` w.r.t. all
    /// parameters, given the trace of the corresponding forward pass.
    pub fn backward(&self, trace: &Trace, upstream: &Mat) -> Result<Gradients> {
        let last = trace.pre_acts.last().expect("trace has layers");
        if upstream.rows() != last.rows() || upstream.cols() != last.cols() {
            return Err(Error::ShapeMismatch {
                context: "MlpNet backward upstream",
                expected: last.cols(),
                got: upstream.cols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre_acts[idx];
            let x = &trace.inputs[idx];
            // dZ = g .* act'(z)
            let mut dz = g;
            for (v, zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *v *= layer.activation.grad(*zv);
            }
            // dW = dZ^T X, db = column sums of dZ
            let batch = dz.rows();
            let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
            let mut dw = Mat::zeros(out_dim, in_dim);
            let mut db = vec![0.0; out_dim];
            for b in 0..batch {
                let dz_row = dz.row(b);
                let x_row = x.row(b);
                for o in 0..out_dim {
                    let d = dz_row[o];
                    if d != 0.0 {
                        let wrow = dw.row_mut(o);
                        for (wv, &xv) in wrow.iter_mut().zip(x_row) {
                            *wv += d * xv;
                        }
                    }
                    db[o] += d;
                }
            }
            // g = dZ W propagates to the previous layer.
            if idx > 0 {
                let mut gprev = Mat::zeros(batch, in_dim);
                for b in 0..batch {
                    let dz_row = dz.row(b);
                    let gp_row = gprev.row_mut(b);
                    for o in 0..out_dim {
                        let d = dz_row[o];
                        if d != 0.0 {
                            let wrow = layer.weights.row(o);
                            for (gv, &wv) in gp_row.iter_mut().zip(wrow) {
                                *gv += d * wv;
                            }
                        }
                    }
                }
                g = gprev;
            } else {
                g = dz; // keep shapes alive; unused past the first layer
            }
            grads.push(LayerGrads { dw, db });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

fn affine(x: &Mat, layer: &Layer) -> Mat {
    let batch = x.rows();
    let out_dim = layer.out_dim();
    let mut z = Mat::zeros(batch, out_dim);
    for b in 0..batch {
        let xrow = x.row(b);
        let zrow = z.row_mut(b);
        for o in 0..out_dim {
            zrow[o] = crate::linalg::dot(layer.weights.row(o), xrow) + layer.biases[o];
        }
    }
    z
}

/// Cached forward-pass state consumed by [`MlpNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Mat>,
    pre_acts: Vec<Mat>,
}

/// Per-layer parameter gradients, shape-matched to an [`MlpNet`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dw: Mat,
    pub db: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    dw: Mat::zeros(l.out_dim(), l.in_dim()),
                    db: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.dw.is_finite() && l.db.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for v in l.dw.as_mut_slice() {
                *v *= factor;
            }
            for v in &mut l.db {
                *v *= factor;
            }
        }
    }
}

/// Adam optimizer state: first/second moments per parameter plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<LayerGrads>,
    v: Vec<LayerGrads>,
    t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with the crate's defaults `beta1=0.9, beta2=0.999, eps=1e-8`.
    pub fn new(net: &MlpNet, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidParam("learning rate must be positive".into()));
        }
        Ok(AdamState {
            m: Gradients::zeros_like(net).layers,
            v: Gradients::zeros_like(net).layers,
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update; rejects non-finite gradients.
pub fn adam_step(net: &mut MlpNet, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::ShapeMismatch {
            context: "adam_step layer count",
            expected: net.layers.len(),
            got: grads.layers.len(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - math::powf(state.beta1, t);
    let bc2 = 1.0 - math::powf(state.beta2, t);
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads.layers[li];
        let m = &mut state.m[li];
        let v = &mut state.v[li];
        update_params(
            layer.weights.as_mut_slice(),
            g.dw.as_slice(),
            m.dw.as_mut_slice(),
            v.dw.as_mut_slice(),
            state.learning_rate,
            state.beta1,
            state.beta2,
            state.epsilon,
            bc1,
            bc2,
        );
        update_params(
            &mut layer.biases,
            &g.db,
            &mut m.db,
            &mut v.db,
            state.learning_rate,
            state.beta1,
            state.beta2,
            state.epsilon,
            bc1,
            bc2,
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_params(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (math::sqrt(v_hat) + eps);
    }
}

/// Per-parameter convex blend `target <- rate * source + (1 - rate) * target`.
pub fn blend_into(target: &mut MlpNet, source: &MlpNet, rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidParam("blend rate must be in (0, 1]".into()));
    }
    if target.layers.len() != source.layers.len() {
        return Err(Error::ShapeMismatch {
            context: "blend_into layer count",
            expected: source.layers.len(),
            got: target.layers.len(),
        });
    }
    for (tl, sl) in target.layers.iter_mut().zip(&source.layers) {
        for (t, s) in tl.weights.as_mut_slice().iter_mut().zip(sl.weights.as_slice()) {
            *t = rate * s + (1.0 - rate) * *t;
        }
        for (t, s) in tl.biases.iter_mut().zip(&sl.biases) {
            *t = rate * s + (1.0 - rate) * *t;
        }
    }
    Ok(())
}

// --- checkpoint bytes ------------------------------------------------------

const MAGIC: &[u8; 4] = b"GPDP";
const FORMAT_VERSION: u32 = 1;

impl MlpNet {
    /// Serializes to the checkpoint layout: magic `GPDP`, format version,
    /// layer count, then per layer `rows, cols`, row-major little-endian
    /// weights and biases. Round-trips bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.param_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.weights.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.weights.cols() as u32).to_le_bytes());
            for w in layer.weights.as_slice() {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for b in &layer.biases {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Decode("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Decode("unsupported checkpoint version"));
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 {
            return Err(Error::Decode("checkpoint has no layers"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for idx in 0..n_layers {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut weights = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                weights.push(r.f64()?);
            }
            let mut biases = Vec::with_capacity(rows);
            for _ in 0..rows {
                biases.push(r.f64()?);
            }
            let activation = if idx + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Mish
            };
            layers.push(Layer {
                weights: Mat::from_vec(rows, cols, weights)?,
                biases,
                activation,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Decode("trailing bytes after checkpoint payload"));
        }
        MlpNet::from_layers(layers)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Decode("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_net(sizes: &[usize]) -> MlpNet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = MlpNet::new(sizes, &mut rng).unwrap();
        for layer in net.layers_mut() {
            for w in layer.weights.as_mut_slice() {
                *w = 0.0;
            }
        }
        net
    }

    fn batch(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = zero_net(&[3, 8, 8, 8, 2]);
        let out = net.forward(&batch(&[&[0.5, -1.0, 2.0], &[3.0, 3.0, 3.0]])).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_layer() {
        let layer = Layer {
            weights: Mat::from_vec(1, 1, vec![2.0]).unwrap(),
            biases: vec![1.0],
            activation: Activation::Identity,
        };
        let net = MlpNet::from_layers(vec![layer]).unwrap();
        assert_eq!(net.forward_one(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn golden_forward_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = MlpNet::new(&[2, 16, 16, 16, 1], &mut rng).unwrap();
        let out = net.forward_one(&[0.3, -0.7]).unwrap();
        // Frozen from the first run of this revision; guards refactors.
        let expected = -1.65800419093339452e-2;
        assert!(
            (out[0] - expected).abs() < 1e-15,
            "golden forward drifted: got {:.17e}",
            out[0]
        );
    }

    #[test]
    fn mish_reference_values() {
        assert_eq!(mish(0.0), 0.0);
        assert!(mish(20.0) >= 19.999 && mish(20.0) <= 20.0);
        // High-precision scalar reference for x = -0.30777.
        assert!((mish(-0.30777) - (-0.15428857036311706)).abs() < 1e-12);
    }

    #[test]
    fn mish_bounded_below_on_grid() {
        let mut x = -10.0;
        while x <= 10.0 {
            assert!(mish(x) > -0.31, "mish({x}) = {} dipped below -0.31", mish(x));
            x += 1e-3;
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = MlpNet::new(&[3, 8, 8, 8, 2], &mut rng).unwrap();
        let x = batch(&[&[0.1, 0.2, 0.3]]);
        let (_, trace) = net.forward_traced(&x).unwrap();
        let grads = net.backward(&trace, &Mat::zeros(1, 2)).unwrap();
        for l in &grads.layers {
            assert!(l.dw.as_slice().iter().all(|&v| v == 0.0));
            assert!(l.db.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_linear_layer_outer_product() {
        let layer = Layer {
            weights: Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap(),
            biases: vec![0.0, 0.0],
            activation: Activation::Identity,
        };
        let net = MlpNet::from_layers(vec![layer]).unwrap();
        let x = [1.0, -2.0, 3.0];
        let g = [0.7, -0.4];
        let (_, trace) = net.forward_traced(&batch(&[&x])).unwrap();
        let grads = net
            .backward(&trace, &Mat::from_vec(1, 2, g.to_vec()).unwrap())
            .unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(grads.layers[0].dw[(r, c)], g[r] * x[c]);
            }
            assert_eq!(grads.layers[0].db[r], g[r]);
        }
    }

    /// Scalar objective sum(upstream .* forward(x)) evaluated for finite
    /// differences; `backward` must reproduce its exact gradient.
    fn objective(net: &MlpNet, x: &Mat, upstream: &Mat) -> f64 {
        let out = net.forward(x).unwrap();
        out.as_slice()
            .iter()
            .zip(upstream.as_slice())
            .map(|(o, u)| o * u)
            .sum()
    }

    fn max_fd_rel_error(sizes: &[usize], seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MlpNet::new(sizes, &mut rng).unwrap();
        let batch_n = 3;
        let x = Mat::from_vec(
            batch_n,
            sizes[0],
            (0..batch_n * sizes[0])
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect(),
        )
        .unwrap();
        let out_dim = *sizes.last().unwrap();
        let upstream = Mat::from_vec(
            batch_n,
            out_dim,
            (0..batch_n * out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (_, trace) = net.forward_traced(&x).unwrap();
        let grads = net.backward(&trace, &upstream).unwrap();

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let base_layers = net.layers().to_vec();
        let mut check = |li: usize, wi: Option<(usize, usize)>, bi: Option<usize>, analytic: f64| {
            let mut plus = base_layers.clone();
            let mut minus = base_layers.clone();
            match (wi, bi) {
                (Some(rc), None) => {
                    plus[li].weights[rc] += h;
                    minus[li].weights[rc] -= h;
                }
                (None, Some(b)) => {
                    plus[li].biases[b] += h;
                    minus[li].biases[b] -= h;
                }
                _ => unreachable!(),
            }
            let jp = objective(&MlpNet::from_layers(plus).unwrap(), &x, &upstream);
            let jm = objective(&MlpNet::from_layers(minus).unwrap(), &x, &upstream);
            let fd = (jp - jm) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max((fd - analytic).abs() / denom);
        };
        for (li, layer) in base_layers.iter().enumerate() {
            for r in 0..layer.weights.rows() {
                for c in 0..layer.weights.cols() {
                    check(li, Some((r, c)), None, grads.layers[li].dw[(r, c)]);
                }
                check(li, None, Some(r), grads.layers[li].db[r]);
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (sizes, seed) in [
            (&[3usize, 8, 8, 8, 2][..], 11u64),
            (&[2, 16, 16, 16, 1][..], 12),
            (&[5, 4, 4, 4, 3][..], 13),
        ] {
            let err = max_fd_rel_error(sizes, seed);
            assert!(err < 1e-4, "fd mismatch {err} for sizes {sizes:?}");
        }
    }

    #[test]
    fn adam_zero_grads_leave_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = MlpNet::new(&[2, 4, 4, 4, 1], &mut rng).unwrap();
        let before = net.to_bytes();
        let grads = Gradients::zeros_like(&net);
        let mut adam = AdamState::new(&net, 1e-3).unwrap();
        adam_step(&mut net, &grads, &mut adam).unwrap();
        assert_eq!(net.to_bytes(), before);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let layer = Layer {
            weights: Mat::from_vec(1, 1, vec![0.0]).unwrap(),
            biases: vec![0.0],
            activation: Activation::Identity,
        };
        let mut net = MlpNet::from_layers(vec![layer]).unwrap();
        let mut adam = AdamState::new(&net, 0.1).unwrap();
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].dw[(0, 0)] = 1.0;
        adam_step(&mut net, &grads, &mut adam).unwrap();
        let w = net.layers()[0].weights[(0, 0)];
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-16, "got {w}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_descends_scalar_quadratic() {
        let layer = Layer {
            weights: Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            biases: vec![0.0],
            activation: Activation::Identity,
        };
        let mut net = MlpNet::from_layers(vec![layer]).unwrap();
        let mut adam = AdamState::new(&net, 0.05).unwrap();
        let mut prev = 1.0_f64; // f(w) = w^2 at w = 1
        for _ in 0..10 {
            let w = net.layers()[0].weights[(0, 0)];
            let mut grads = Gradients::zeros_like(&net);
            grads.layers[0].dw[(0, 0)] = 2.0 * w;
            adam_step(&mut net, &grads, &mut adam).unwrap();
            let w_new = net.layers()[0].weights[(0, 0)];
            let f = w_new * w_new;
            assert!(f < prev, "f(w) failed to decrease: {f} >= {prev}");
            prev = f;
        }
    }

    #[test]
    fn adam_rejects_non_finite_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = MlpNet::new(&[2, 4, 4, 4, 1], &mut rng).unwrap();
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].dw[(0, 0)] = f64::NAN;
        let mut adam = AdamState::new(&net, 1e-3).unwrap();
        assert!(matches!(
            adam_step(&mut net, &grads, &mut adam),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn seeded_pipeline_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut net = MlpNet::new(&[3, 8, 8, 8, 2], &mut rng).unwrap();
            let x = batch(&[&[0.4, -0.6, 1.1], &[0.0, 0.9, -0.3]]);
            let (out, trace) = net.forward_traced(&x).unwrap();
            let mut upstream = Mat::zeros(2, 2);
            for v in upstream.as_mut_slice() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let grads = net.backward(&trace, &upstream).unwrap();
            let mut adam = AdamState::new(&net, 1e-3).unwrap();
            adam_step(&mut net, &grads, &mut adam).unwrap();
            (out.as_slice().to_vec(), net.to_bytes())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpNet::new(&[6, 64, 64, 64, 2], &mut rng).unwrap();
        let bytes = net.to_bytes();
        let restored = MlpNet::from_bytes(&bytes).unwrap();
        assert_eq!(net, restored);
        assert_eq!(bytes, restored.to_bytes());
    }

    #[test]
    fn checkpoint_decode_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpNet::new(&[2, 4, 4, 4, 1], &mut rng).unwrap();
        let bytes = net.to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(MlpNet::from_bytes(&bad_magic), Err(Error::Decode(_))));

        assert!(matches!(
            MlpNet::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Decode(_))
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(MlpNet::from_bytes(&trailing), Err(Error::Decode(_))));
    }

    #[test]
    fn shape_violations_are_reported() {
        let l1 = Layer {
            weights: Mat::from_vec(2, 3, vec![0.0; 6]).unwrap(),
            biases: vec![0.0; 2],
            activation: Activation::Mish,
        };
        let l2 = Layer {
            weights: Mat::from_vec(1, 4, vec![0.0; 4]).unwrap(),
            biases: vec![0.0],
            activation: Activation::Identity,
        };
        assert!(matches!(
            MlpNet::from_layers(vec![l1.clone(), l2]),
            Err(Error::ShapeMismatch { .. })
        ));

        let net = MlpNet::from_layers(vec![l1]).unwrap();
        assert!(matches!(
            net.forward(&Mat::zeros(1, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            net.forward(&Mat::from_vec(1, 3, vec![0.0, f64::NAN, 0.0]).unwrap()),
            Err(Error::NonFinite(_))
        ));
    }
}
