//! A small dense MLP with hand-written backprop, used as the flow function
//! on Cayley graphs: one output per generator plus the terminal edge.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graphs::{CayleyGraph, Perm};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Layer sizes plus all weights and biases in one flat buffer. Layer `l`
/// stores its `out × in` weight matrix row-major followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl MlpParams {
    /// `[input, hidden..., output]`.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    /// Offsets of (weights, bias) of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.dims[k + 1] * (self.dims[k] + 1);
        }
        (off, off + self.dims[l + 1] * self.dims[l])
    }

    /// Writes a `u64` layer count, the `u64` dims, then the parameters as
    /// little-endian `f64`.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.dims.len() as u64).to_le_bytes())?;
        for &d in &self.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        let mut next = |input: &mut R| -> Result<[u8; 8]> {
            input.read_exact(&mut buf)?;
            Ok(buf)
        };
        let n = u64::from_le_bytes(next(&mut input)?) as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::InvalidArchitecture(format!(
                "{n} layer sizes in header"
            )));
        }
        let dims = (0..n)
            .map(|_| Ok(u64::from_le_bytes(next(&mut input)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.iter().any(|&d| d == 0 || d > 1 << 20) {
            return Err(Error::InvalidArchitecture(format!("dims {dims:?}")));
        }
        let len: usize = dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        let data = (0..len)
            .map(|_| Ok(f64::from_le_bytes(next(&mut input)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, data })
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, zero biases. `depth` counts linear
/// layers, so `depth = 3` has two hidden layers of `width` units.
pub fn mlp_init(
    seed: u64,
    input_dim: usize,
    width: usize,
    depth: usize,
    output_dim: usize,
) -> Result<MlpParams> {
    if depth == 0 || input_dim == 0 || output_dim == 0 || (depth > 1 && width == 0) {
        return Err(Error::InvalidArchitecture(format!(
            "input {input_dim}, width {width}, depth {depth}, output {output_dim}"
        )));
    }
    let mut dims = vec![input_dim];
    dims.extend(std::iter::repeat_n(width, depth - 1));
    dims.push(output_dim);
    let len: usize = dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
    let mut params = MlpParams {
        dims,
        data: vec![0.0; len],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..params.num_layers() {
        let (w, b) = params.offsets(l);
        let bound = 1.0 / (params.dims[l] as f64).sqrt();
        for x in &mut params.data[w..b] {
            *x = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Cached values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input to each layer (`inputs[0]` is the network input).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<f64>>,
    /// Final flows, `exp` of the last pre-activation.
    pub output: Vec<f64>,
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Linear layers with LeakyReLU in between and an `exp` head.
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
    if x.len() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} entries, expected {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(params.num_layers());
    let mut pre = Vec::with_capacity(params.num_layers());
    let mut h = x.to_vec();
    for l in 0..params.num_layers() {
        let (w, b) = params.offsets(l);
        let (n_in, n_out) = (params.dims[l], params.dims[l + 1]);
        let z: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &params.data[w + o * n_in..w + (o + 1) * n_in];
                params.data[b + o] + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let next = if l + 1 < params.num_layers() {
            z.iter().map(|&v| leaky(v)).collect()
        } else {
            Vec::new()
        };
        inputs.push(std::mem::replace(&mut h, next));
        pre.push(z);
    }
    let output: Vec<f64> = pre.last().unwrap().iter().map(|z| z.exp()).collect();
    Ok((
        output.clone(),
        ForwardTrace {
            inputs,
            pre,
            output,
        },
    ))
}

/// Adds `Σ_k upstream_k ∂output_k/∂θ` into `grad`.
pub fn mlp_backward_into(
    params: &MlpParams,
    trace: &ForwardTrace,
    upstream: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    if upstream.len() != params.output_dim() || trace.pre.len() != params.num_layers() {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} entries for {} outputs",
            upstream.len(),
            params.output_dim()
        )));
    }
    if grad.len() != params.num_params() {
        return Err(Error::ShapeMismatch(format!(
            "gradient buffer {} vs {} params",
            grad.len(),
            params.num_params()
        )));
    }
    let mut delta: Vec<f64> = upstream
        .iter()
        .zip(&trace.output)
        .map(|(u, o)| u * o)
        .collect();
    for l in (0..params.num_layers()).rev() {
        let (w, b) = params.offsets(l);
        let (n_in, n_out) = (params.dims[l], params.dims[l + 1]);
        let input = &trace.inputs[l];
        for o in 0..n_out {
            grad[b + o] += delta[o];
            if delta[o] != 0.0 {
                for i in 0..n_in {
                    grad[w + o * n_in + i] += delta[o] * input[i];
                }
            }
        }
        if l > 0 {
            let prev_pre = &trace.pre[l - 1];
            delta = (0..n_in)
                .map(|i| {
                    let s: f64 = (0..n_out)
                        .map(|o| params.data[w + o * n_in + i] * delta[o])
                        .sum();
                    if prev_pre[i] > 0.0 {
                        s
                    } else {
                        LEAKY_SLOPE * s
                    }
                })
                .collect();
        }
    }
    Ok(())
}

/// Gradient of `Σ_k upstream_k output_k` with respect to every parameter.
pub fn mlp_backward(
    params: &MlpParams,
    trace: &ForwardTrace,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.num_params()];
    mlp_backward_into(params, trace, upstream, &mut grad)?;
    Ok(grad)
}

/// Network input for a permutation: `σ(i) / p`.
pub fn encode_perm(g: &Perm) -> Vec<f64> {
    let p = g.degree() as f64;
    g.as_slice().iter().map(|&v| v as f64 / p).collect()
}

/// Flows around one Cayley state computed from the network.
#[derive(Debug, Clone, PartialEq)]
pub struct InOutFlow {
    /// Σ_i F(gσ_i⁻¹)_i over generators.
    pub f_in: f64,
    /// Generator flows plus the terminal flow.
    pub f_out: f64,
    /// Network outputs at `g`: one per generator, then the terminal edge.
    pub edges: Vec<f64>,
}

/// Evaluates the network at `g` and at every predecessor `gσ_i⁻¹`.
pub fn cayley_in_out_flow(space: &CayleyGraph, params: &MlpParams, g: &Perm) -> Result<InOutFlow> {
    let q = space.num_generators();
    if params.output_dim() != q + 1 || params.input_dim() != space.degree() {
        return Err(Error::ShapeMismatch(format!(
            "network {:?} does not fit S_{} with {q} generators",
            params.dims(),
            space.degree()
        )));
    }
    let (edges, _) = mlp_forward(params, &encode_perm(g))?;
    let mut f_in = 0.0;
    for (i, pred) in space.predecessors(g).iter().enumerate() {
        f_in += mlp_forward(params, &encode_perm(pred))?.0[i];
    }
    Ok(InOutFlow {
        f_in,
        f_out: edges.iter().sum(),
        edges,
    })
}
