use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Activation;
use crate::error::{ensure_len, Error, Result};

/// Shape of a dense network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    input_dim: usize,
    hidden_dim: usize,
    hidden_layers: usize,
    output_dim: usize,
    activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || hidden_layers == 0 || output_dim == 0 {
            return Err(Error::invalid(format!(
                "network dims must be >= 1 (in={input_dim}, hidden={hidden_dim}, \
                 layers={hidden_layers}, out={output_dim})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            hidden_layers,
            output_dim,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn hidden_layers(&self) -> usize {
        self.hidden_layers
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `(fan_in, fan_out)` of every dense layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            shapes.push((fan_in, self.hidden_dim));
            fan_in = self.hidden_dim;
        }
        shapes.push((fan_in, self.output_dim));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }
}

/// Flat parameters of one network plus gradient accumulator and Adam moments.
///
/// Layer `l` occupies `fan_in * fan_out` weights stored row-major as
/// `W[input][output]`, immediately followed by `fan_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    values: Vec<f64>,
    gradients: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step_count: u64,
}

impl ParameterBlock {
    pub fn zeros(len: usize) -> Self {
        Self::from_values(vec![0.0; len])
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            gradients: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }

    /// Rebuilds a block from checkpointed state. Gradients start at zero.
    pub fn from_parts(
        values: Vec<f64>,
        adam_m: Vec<f64>,
        adam_v: Vec<f64>,
        step_count: u64,
    ) -> Result<Self> {
        ensure_len("adam_m", adam_m.len(), values.len())?;
        ensure_len("adam_v", adam_v.len(), values.len())?;
        let n = values.len();
        Ok(Self {
            values,
            gradients: vec![0.0; n],
            adam_m,
            adam_v,
            step_count,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn gradients(&self) -> &[f64] {
        &self.gradients
    }

    pub fn gradients_mut(&mut self) -> &mut [f64] {
        &mut self.gradients
    }

    pub fn zero_gradients(&mut self) {
        self.gradients.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn optimizer_parts(&mut self) -> (&mut [f64], &[f64], &mut [f64], &mut [f64], &mut u64) {
        (
            &mut self.values,
            &self.gradients,
            &mut self.adam_m,
            &mut self.adam_v,
            &mut self.step_count,
        )
    }
}

/// Uniform fan-in initialization: every weight and bias of a layer with
/// `fan_in` inputs is drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` using a
/// ChaCha8 stream seeded with `seed`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParameterBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_shapes() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..(fan_in * fan_out + fan_out) {
            values.push(rng.random_range(-bound..bound));
        }
    }
    ParameterBlock::from_values(values)
}

/// Intermediate values of a batched forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    // input of every layer
    inputs: Vec<Array2<f64>>,
    // pre-activation of every hidden layer
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    /// The network input this tape was recorded for.
    pub fn input(&self) -> ArrayView2<'_, f64> {
        self.inputs[0].view()
    }
}

fn layer_views<'a>(
    values: &'a [f64],
    spec: &MlpSpec,
) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
    let mut out = Vec::with_capacity(spec.hidden_layers + 1);
    let mut off = 0;
    for (i, o) in spec.layer_shapes() {
        let w = ArrayView2::from_shape((i, o), &values[off..off + i * o]).expect("layer shape");
        off += i * o;
        let b = ArrayView1::from(&values[off..off + o]);
        off += o;
        out.push((w, b));
    }
    out
}

fn forward_impl(values: &[f64], spec: &MlpSpec, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
    ensure_len("network input width", x.ncols(), spec.input_dim)?;
    ensure_len("parameter block", values.len(), spec.param_count())?;
    let layers = layer_views(values, spec);
    let n = x.nrows();
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(spec.hidden_layers);
    let mut cur = x.to_owned();
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut z = Array2::<f64>::zeros((n, w.ncols()));
        z += b;
        general_mat_mul(1.0, &cur, w, 1.0, &mut z);
        inputs.push(cur);
        if l + 1 < layers.len() {
            let act = spec.activation;
            let a = z.mapv(|v| act.apply(v));
            pre.push(z);
            cur = a;
        } else {
            cur = z;
        }
    }
    Ok((cur, Tape { inputs, pre }))
}

fn backward_impl(
    values: &[f64],
    spec: &MlpSpec,
    tape: &Tape,
    cotangent: ArrayView2<'_, f64>,
    mut grads: Option<&mut [f64]>,
) -> Result<Array2<f64>> {
    ensure_len("output cotangent width", cotangent.ncols(), spec.output_dim)?;
    ensure_len("output cotangent rows", cotangent.nrows(), tape.batch_size())?;
    let layers = layer_views(values, spec);
    let shapes = spec.layer_shapes();
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &(i, o) in &shapes {
        offsets.push(off);
        off += i * o + o;
    }

    let mut delta = cotangent.to_owned();
    for l in (0..layers.len()).rev() {
        if l + 1 < layers.len() {
            let act = spec.activation;
            delta.zip_mut_with(&tape.pre[l], |d, &z| *d *= act.derivative(z));
        }
        let (w, _) = &layers[l];
        if let Some(g) = grads.as_deref_mut() {
            let (i, o) = shapes[l];
            let base = offsets[l];
            {
                let mut gw = ArrayViewMut2::from_shape((i, o), &mut g[base..base + i * o])
                    .expect("layer shape");
                general_mat_mul(1.0, &tape.inputs[l].t(), &delta, 1.0, &mut gw);
            }
            let gb = &mut g[base + i * o..base + i * o + o];
            for row in delta.axis_iter(Axis(0)) {
                for (acc, &d) in gb.iter_mut().zip(row.iter()) {
                    *acc += d;
                }
            }
        }
        let mut prev = Array2::<f64>::zeros((delta.nrows(), w.nrows()));
        general_mat_mul(1.0, &delta, &w.t(), 0.0, &mut prev);
        delta = prev;
    }
    Ok(delta)
}

/// Single-input forward pass.
pub fn forward(params: &ParameterBlock, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    ensure_len("network input", input.len(), spec.input_dim)?;
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row");
    let (y, _) = forward_impl(params.values(), spec, x)?;
    Ok(y.into_raw_vec_and_offset().0)
}

/// Single-input backward pass: recomputes the forward pass, accumulates
/// parameter gradients and returns the input cotangent.
pub fn backward(
    params: &mut ParameterBlock,
    spec: &MlpSpec,
    input: &[f64],
    output_cotangent: &[f64],
) -> Result<Vec<f64>> {
    ensure_len("network input", input.len(), spec.input_dim)?;
    ensure_len("output cotangent", output_cotangent.len(), spec.output_dim)?;
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row");
    let (_, tape) = forward_impl(params.values(), spec, x)?;
    let g = ArrayView2::from_shape((1, output_cotangent.len()), output_cotangent).expect("row");
    let ParameterBlock {
        values, gradients, ..
    } = params;
    let dx = backward_impl(values, spec, &tape, g, Some(gradients))?;
    Ok(dx.into_raw_vec_and_offset().0)
}

/// A network: its shape plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: ParameterBlock,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: ParameterBlock) -> Result<Self> {
        ensure_len("parameter block", params.len(), spec.param_count())?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterBlock {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterBlock {
        &mut self.params
    }

    /// Batched forward pass; rows of `x` are independent inputs.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        forward_impl(self.params.values(), &self.spec, x)
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward_batch(x).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients for `cotangent` and returns the input cotangent.
    pub fn backward_batch(&mut self, tape: &Tape, cotangent: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let ParameterBlock {
            values, gradients, ..
        } = &mut self.params;
        backward_impl(values, &self.spec, tape, cotangent, Some(gradients))
    }

    /// Input cotangent only; parameter gradients are left untouched.
    pub fn input_gradient(&self, tape: &Tape, cotangent: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        backward_impl(self.params.values(), &self.spec, tape, cotangent, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn param_count_matches_layer_arithmetic() {
        let spec = MlpSpec::new(10, 512, 3, 1, Activation::Mish).unwrap();
        assert_eq!(
            spec.param_count(),
            10 * 512 + 512 + 2 * (512 * 512 + 512) + 512 + 1
        );
        assert_eq!(init_params(&spec, 3).len(), spec.param_count());
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(MlpSpec::new(0, 4, 1, 1, Activation::Elu).is_err());
        assert!(MlpSpec::new(2, 4, 0, 1, Activation::Elu).is_err());
    }

    #[test]
    fn init_is_seeded_and_zeroes_optimizer_state() {
        let spec = MlpSpec::new(3, 8, 2, 2, Activation::Elu).unwrap();
        let a = init_params(&spec, 11);
        let b = init_params(&spec, 11);
        assert_eq!(a, b);
        assert_ne!(a.values(), init_params(&spec, 12).values());
        assert!(a.gradients().iter().all(|&g| g == 0.0));
        assert_eq!(a.step_count(), 0);
        // fan-in bound of the first layer
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.values()[..3 * 8].iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn linear_layer_cotangent_is_transpose_product() {
        // one hidden layer whose output layer we make the identity-ish check on
        // directly via the impl: y = x W + b with W (2x3)
        let spec = MlpSpec::new(2, 3, 1, 2, Activation::Elu).unwrap();
        let mut params = init_params(&spec, 0);
        let x = [0.3, -0.2];
        let g = [1.0, -2.0];
        // reference: recompute by hand
        let v = params.values().to_vec();
        let w1 = ArrayView2::from_shape((2, 3), &v[0..6]).unwrap();
        let b1 = ArrayView1::from(&v[6..9]);
        let w2 = ArrayView2::from_shape((3, 2), &v[9..15]).unwrap();
        let xr = ArrayView2::from_shape((1, 2), &x[..]).unwrap();
        let z1 = xr.dot(&w1) + &b1;
        let dz1: Vec<f64> = (0..3)
            .map(|j| {
                let dh = g[0] * w2[[j, 0]] + g[1] * w2[[j, 1]];
                dh * Activation::Elu.derivative(z1[[0, j]])
            })
            .collect();
        let expected: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|j| w1[[i, j]] * dz1[j]).sum())
            .collect();
        let dx = backward(&mut params, &spec, &x, &g).unwrap();
        for (a, b) in dx.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_cotangent_accumulates_nothing() {
        let spec = MlpSpec::new(4, 6, 2, 3, Activation::Mish).unwrap();
        let mut params = init_params(&spec, 5);
        backward(&mut params, &spec, &[0.1, 0.2, 0.3, 0.4], &[0.0; 3]).unwrap();
        assert!(params.gradients().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let spec = MlpSpec::new(4, 6, 2, 3, Activation::Mish).unwrap();
        let mut params = init_params(&spec, 5);
        assert!(matches!(
            forward(&params, &spec, &[1.0; 3]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            backward(&mut params, &spec, &[1.0; 4], &[1.0; 2]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let spec = MlpSpec::new(3, 16, 3, 2, Activation::Mish).unwrap();
        let net = Mlp::new(spec, 9);
        let x = array![[0.1, -0.4, 2.0], [1.5, 0.0, -0.3]];
        let y = net.predict(x.view()).unwrap();
        for r in 0..2 {
            let single = forward(net.params(), &spec, x.row(r).as_slice().unwrap()).unwrap();
            for (a, b) in y.row(r).iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
