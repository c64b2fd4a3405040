//! Small network layers built from tape primitives.
//!
//! Layers hold slot ids into a [`ParamStore`]; the store owns the values.

use std::sync::Arc;

use rand::Rng;

use crate::ad::{ParamStore, Role, Tape, Tensor, Var};
use crate::error::Result;
use crate::prob::StreamRng;

fn uniform(rng: &mut StreamRng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Affine map `y = x W + b` with `W: [input, output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        input: usize,
        output: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = Tensor::matrix(input, output, uniform(rng, input * output, bound))?;
        Self::with_values(store, prefix, role, w, Tensor::zeros(&[output]))
    }

    pub fn zeros(
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        Self::with_values(
            store,
            prefix,
            role,
            Tensor::zeros(&[input, output]),
            Tensor::zeros(&[output]),
        )
    }

    fn with_values(
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        w: Tensor,
        b: Tensor,
    ) -> Result<Self> {
        let (input, output) = (w.shape()[0], w.shape()[1]);
        Ok(Linear {
            w: store.insert(format!("{prefix}.w"), role, w)?,
            b: store.insert(format!("{prefix}.b"), role, b)?,
            input,
            output,
        })
    }

    pub fn bias_id(&self) -> usize {
        self.b
    }

    pub fn weight_id(&self) -> usize {
        self.w
    }

    /// `x` is `[input]` or `[rows, input]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param_by_id(store, self.w)?;
        let b = tape.param_by_id(store, self.b)?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Gated recurrent cell.
///
/// `r = σ(x W_r + h U_r + b_r)`, `u = σ(x W_u + h U_u + b_u)`,
/// `n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))`, `h' = n + u ⊙ (h − n)`.
#[derive(Clone, Debug)]
pub struct Gru {
    wx: usize,
    wh: usize,
    bx: usize,
    bh: usize,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        input: usize,
        hidden: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let wx = Tensor::matrix(input, 3 * hidden, uniform(rng, input * 3 * hidden, bound))?;
        let wh = Tensor::matrix(hidden, 3 * hidden, uniform(rng, hidden * 3 * hidden, bound))?;
        Ok(Gru {
            wx: store.insert(format!("{prefix}.wx"), role, wx)?,
            wh: store.insert(format!("{prefix}.wh"), role, wh)?,
            bx: store.insert(format!("{prefix}.bx"), role, Tensor::zeros(&[3 * hidden]))?,
            bh: store.insert(format!("{prefix}.bh"), role, Tensor::zeros(&[3 * hidden]))?,
            input,
            hidden,
        })
    }

    pub fn input_weight_id(&self) -> usize {
        self.wx
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let wx = tape.param_by_id(store, self.wx)?;
        let gx = tape.matmul(x, wx)?;
        self.step_projected(tape, store, gx, h)
    }

    /// Rows `start..start + len` of the input weight, `[len, 3H]`.
    pub fn input_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let w = 3 * self.hidden;
        let wx = tape.param_by_id(store, self.wx)?;
        let rows = tape.slice(wx, start * w, len * w)?;
        tape.reshape(rows, vec![len, w])
    }

    /// `e_i W_x` for a one-hot input `e_i`.
    pub fn input_row(&self, tape: &mut Tape, store: &ParamStore, i: usize) -> Result<Var> {
        let w = 3 * self.hidden;
        let wx = tape.param_by_id(store, self.wx)?;
        tape.slice(wx, i * w, w)
    }

    /// Step from an already projected input `gx = x W_x` (bias not included).
    pub fn step_projected(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gx: Var,
        h: Var,
    ) -> Result<Var> {
        let n = self.hidden;
        let wh = tape.param_by_id(store, self.wh)?;
        let bx = tape.param_by_id(store, self.bx)?;
        let bh = tape.param_by_id(store, self.bh)?;
        let gx = tape.add(gx, bx)?;
        let gh = tape.matmul(h, wh)?;
        let gh = tape.add(gh, bh)?;

        let gate = |tape: &mut Tape, i: usize| -> Result<Var> {
            let a = tape.slice(gx, i * n, n)?;
            let b = tape.slice(gh, i * n, n)?;
            let s = tape.add(a, b)?;
            tape.sigmoid(s)
        };
        let r = gate(tape, 0)?;
        let u = gate(tape, 1)?;
        let xn = tape.slice(gx, 2 * n, n)?;
        let hn = tape.slice(gh, 2 * n, n)?;
        let rh = tape.mul(r, hn)?;
        let pre = tape.add(xn, rh)?;
        let cand = tape.tanh(pre)?;
        let diff = tape.sub(h, cand)?;
        let ud = tape.mul(u, diff)?;
        tape.add(cand, ud)
    }
}

/// Strided 2-D convolution without padding over `[height, width, channels]`
/// inputs, followed by `tanh`. A 1-D convolution is the `height = 1` case.
#[derive(Clone, Debug)]
pub struct Conv {
    lin: Linear,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub channels_in: usize,
    pub channels_out: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        kernel: (usize, usize),
        stride: (usize, usize),
        channels_in: usize,
        channels_out: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let lin = Linear::new(
            store,
            prefix,
            role,
            kernel.0 * kernel.1 * channels_in,
            channels_out,
            rng,
        )?;
        Ok(Conv {
            lin,
            kernel,
            stride,
            channels_in,
            channels_out,
        })
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height - self.kernel.0) / self.stride.0 + 1,
            (width - self.kernel.1) / self.stride.1 + 1,
        )
    }

    /// Patch extraction indices for an input of the given spatial size.
    fn im2col(&self, height: usize, width: usize) -> Vec<usize> {
        let (oh, ow) = self.output_size(height, width);
        let (kh, kw) = self.kernel;
        let c = self.channels_in;
        let mut idx = Vec::with_capacity(oh * ow * kh * kw * c);
        for i in 0..oh {
            for j in 0..ow {
                for di in 0..kh {
                    for dj in 0..kw {
                        let base = ((i * self.stride.0 + di) * width + j * self.stride.1 + dj) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
        idx
    }

    /// Returns the activation as `[oh * ow, channels_out]` and its spatial size.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        height: usize,
        width: usize,
    ) -> Result<(Var, (usize, usize))> {
        let (oh, ow) = self.output_size(height, width);
        let idx: Arc<[usize]> = self.im2col(height, width).into();
        let cols = tape.gather(x, idx, vec![oh * ow, self.lin.input])?;
        let y = self.lin.forward(tape, store, cols)?;
        Ok((tape.tanh(y)?, (oh, ow)))
    }
}

/// Two convolutions and a linear map to a fixed-size embedding.
#[derive(Clone, Debug)]
pub struct ConvEmbedding {
    conv1: Conv,
    conv2: Conv,
    head: Linear,
    height: usize,
    width: usize,
    pub dim: usize,
}

impl ConvEmbedding {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        input: (usize, usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        channels: (usize, usize),
        dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let (height, width, c_in) = input;
        let conv1 = Conv::new(
            store,
            &format!("{prefix}.conv1"),
            role,
            kernel,
            stride,
            c_in,
            channels.0,
            rng,
        )?;
        let (h1, w1) = conv1.output_size(height, width);
        let conv2 = Conv::new(
            store,
            &format!("{prefix}.conv2"),
            role,
            kernel,
            stride,
            channels.0,
            channels.1,
            rng,
        )?;
        let (h2, w2) = conv2.output_size(h1, w1);
        let head = Linear::new(
            store,
            &format!("{prefix}.head"),
            role,
            h2 * w2 * channels.1,
            dim,
            rng,
        )?;
        Ok(ConvEmbedding {
            conv1,
            conv2,
            head,
            height,
            width,
            dim,
        })
    }

    /// `x` holds `height * width * channels` values in row-major HWC order.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (a1, (h1, w1)) = self
            .conv1
            .forward(tape, store, x, self.height, self.width)?;
        let (a2, _) = self.conv2.forward(tape, store, a1, h1, w1)?;
        let n = tape.value(a2).len();
        let flat = tape.reshape(a2, vec![n])?;
        let y = self.head.forward(tape, store, flat)?;
        tape.tanh(y)
    }

    /// Slot ids of the output layer, for ablations that silence the embedding.
    pub fn head_ids(&self) -> (usize, usize) {
        (self.head.weight_id(), self.head.bias_id())
    }
}
