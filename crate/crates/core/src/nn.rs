//! Layer building blocks expressed as graph operations.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::params::{ParamId, ParamStore};

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), (input, output), input, rng);
        let bias = bias.then(|| store.uniform(format!("{name}.bias"), (1, output), input, rng));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// Temporal convolution with "same" zero padding. Input `T×C_in`, output `T×C_out`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input * kernel;
        let weight = store.uniform(format!("{name}.weight"), (fan_in, output), fan_in, rng);
        let bias = store.uniform(format!("{name}.bias"), (1, output), fan_in, rng);
        Self {
            weight,
            bias,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = g.im2col(x, self.kernel);
        self.forward_unfolded(g, cols)
    }

    /// Forward on an input already unfolded with `im2col(x, self.kernel)`;
    /// lets several convolutions over the same input share one unfolding.
    pub fn forward_unfolded(&self, g: &mut Graph, cols: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(cols, w);
        g.add(y, b)
    }
}

/// Inverted dropout with a fixed Bernoulli mask drawn from `rng`.
pub fn dropout<R: Rng>(g: &mut Graph, x: Var, p: f64, rng: &mut R) -> Var {
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let mask = Array2::from_shape_fn(g.shape(x), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Standard sinusoidal position table, `len×dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Additive causal mask: 0 on and below the diagonal, a large negative value above.
pub fn causal_mask(len: usize) -> Mat {
    Array2::from_shape_fn((len, len), |(i, j)| if j > i { -1e9 } else { 0.0 })
}

/// Multi-head self-attention with output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads >= 1 && width.is_multiple_of(heads),
            "width {width} not divisible by {heads} heads"
        );
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, true, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, true, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, true, rng),
            heads,
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Mat>) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice_cols(q, a, b);
            let kh = g.slice_cols(k, a, b);
            let vh = g.slice_cols(v, a, b);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let mut logits = g.scale(logits, scale);
            if let Some(m) = mask {
                logits = g.add(logits, m);
            }
            let att = g.softmax_rows(logits);
            outs.push(g.matmul(att, vh));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.output.forward(g, merged)
    }
}

/// Two-layer position-wise feed-forward network with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), width, hidden, true, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, width, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// Single-layer recurrent unit kinds used by the recurrent reconstructors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecurrentKind {
    Gru,
    Lstm,
}

#[derive(Clone, Debug)]
pub struct Recurrent {
    pub kind: RecurrentKind,
    pub input_proj: Linear,
    pub hidden_proj: Linear,
    pub hidden: usize,
}

impl Recurrent {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: RecurrentKind,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let gates = match kind {
            RecurrentKind::Gru => 3,
            RecurrentKind::Lstm => 4,
        };
        Self {
            kind,
            input_proj: Linear::new(
                store,
                &format!("{name}.input"),
                input,
                gates * hidden,
                true,
                rng,
            ),
            hidden_proj: Linear::new(
                store,
                &format!("{name}.hidden"),
                hidden,
                gates * hidden,
                false,
                rng,
            ),
            hidden,
        }
    }

    /// Runs over the rows of `x` from a zero state and returns all hidden states stacked.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let steps = g.shape(x).0;
        let projected = self.input_proj.forward(g, x);
        let hd = self.hidden;
        let mut h = g.constant(Array2::zeros((1, hd)));
        let mut c = g.constant(Array2::zeros((1, hd)));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(projected, t, t + 1);
            let ht = self.hidden_proj.forward(g, h);
            match self.kind {
                RecurrentKind::Gru => {
                    let xz = g.slice_cols(xt, 0, hd);
                    let xr = g.slice_cols(xt, hd, 2 * hd);
                    let xn = g.slice_cols(xt, 2 * hd, 3 * hd);
                    let hz = g.slice_cols(ht, 0, hd);
                    let hr = g.slice_cols(ht, hd, 2 * hd);
                    let hn = g.slice_cols(ht, 2 * hd, 3 * hd);
                    let z = g.add(xz, hz);
                    let z = g.sigmoid(z);
                    let r = g.add(xr, hr);
                    let r = g.sigmoid(r);
                    let rh = g.mul(r, hn);
                    let n = g.add(xn, rh);
                    let n = g.tanh(n);
                    let one_minus_z = g.affine(z, -1.0, 1.0);
                    let a = g.mul(one_minus_z, n);
                    let b = g.mul(z, h);
                    h = g.add(a, b);
                }
                RecurrentKind::Lstm => {
                    let gates = g.add(xt, ht);
                    let i = g.slice_cols(gates, 0, hd);
                    let f = g.slice_cols(gates, hd, 2 * hd);
                    let cand = g.slice_cols(gates, 2 * hd, 3 * hd);
                    let o = g.slice_cols(gates, 3 * hd, 4 * hd);
                    let i = g.sigmoid(i);
                    let f = g.sigmoid(f);
                    let cand = g.tanh(cand);
                    let o = g.sigmoid(o);
                    let keep = g.mul(f, c);
                    let write = g.mul(i, cand);
                    c = g.add(keep, write);
                    let tc = g.tanh(c);
                    h = g.mul(o, tc);
                }
            }
            states.push(h);
        }
        g.concat_rows(&states)
    }
}
