//! Text-segment mining: video embedding, foreground attention, class text
//! queries matched against segments, top-k pooling and the MIL objective.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{invalid, Result};
use crate::nn::{dropout, Conv1d, FeedForward, MultiHeadSelfAttention};
use crate::params::ParamStore;
use crate::text::PromptParams;

/// How segment-level class scores are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreHead {
    /// Inner products with encoded class text queries.
    Text,
    /// A kernel-1 temporal convolution classifier (the ablation baseline).
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsmConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub att_hidden: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub prompt_len: usize,
    pub word_dim: usize,
    pub kernel: usize,
    pub dropout: f64,
    /// Top-k pooling keeps `max(1, ⌈T / topk_divisor⌉)` segments.
    pub topk_divisor: usize,
    pub head: ScoreHead,
    pub coact_weight: f64,
    pub norm_weight: f64,
    pub guide_weight: f64,
}

impl Default for TsmConfig {
    fn default() -> Self {
        Self {
            input_dim: 2048,
            embed_dim: 2048,
            att_hidden: 512,
            text_heads: 8,
            text_ff: 2048,
            prompt_len: 10,
            word_dim: 300,
            kernel: 3,
            dropout: 0.5,
            topk_divisor: 8,
            head: ScoreHead::Text,
            coact_weight: 1.0,
            norm_weight: 0.1,
            guide_weight: 1.0,
        }
    }
}

impl TsmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("att_hidden", self.att_hidden),
            ("text_heads", self.text_heads),
            ("text_ff", self.text_ff),
            ("prompt_len", self.prompt_len),
            ("word_dim", self.word_dim),
            ("topk_divisor", self.topk_divisor),
        ] {
            if v == 0 {
                return Err(invalid!("{name} must be positive"));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid!("kernel must be odd, got {}", self.kernel));
        }
        if !self.embed_dim.is_multiple_of(self.text_heads) {
            return Err(invalid!(
                "embed_dim {} is not divisible by text_heads {}",
                self.embed_dim,
                self.text_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        for (name, w) in [
            ("coact_weight", self.coact_weight),
            ("norm_weight", self.norm_weight),
            ("guide_weight", self.guide_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid!("{name} must be a nonnegative number, got {w}"));
            }
        }
        Ok(())
    }
}

pub fn topk_count(t: usize, divisor: usize) -> usize {
    t.div_ceil(divisor).max(1)
}

/// Mean of the `k` largest entries of `values`.
pub fn topk_pool(values: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > values.len() {
        return Err(invalid!("k={k} outside 1..={}", values.len()));
    }
    let idx = crate::autograd::topk_indices(values, k);
    Ok(idx.iter().map(|&i| values[i]).sum::<f64>() / k as f64)
}

/// Stacked temporal convolutions ending in a sigmoid: `T×C_in → T×1` in (0, 1).
#[derive(Clone, Debug)]
pub struct AttentionNet {
    pub hidden: Conv1d,
    pub output: Conv1d,
}

impl AttentionNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Conv1d::new(store, &format!("{name}.hidden"), input, hidden, kernel, rng),
            output: Conv1d::new(store, &format!("{name}.output"), hidden, 1, kernel, rng),
        }
    }

    /// `cols` is the input unfolded with the hidden layer's kernel.
    pub fn forward_unfolded(&self, g: &mut Graph, cols: Var) -> Var {
        let h = self.hidden.forward_unfolded(g, cols);
        let h = g.relu(h);
        let logits = self.output.forward(g, h);
        g.sigmoid(logits)
    }
}

/// One self-attention block with feed-forward, residual connections around both.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub attention: MultiHeadSelfAttention,
    pub feed_forward: FeedForward,
}

impl TextEncoder {
    /// Encodes `count` equal-length sequences stacked row-wise; a block-diagonal
    /// mask keeps them independent. Returns all output rows.
    pub fn forward(&self, g: &mut Graph, stacked: Var, count: usize) -> Var {
        let rows = g.shape(stacked).0;
        let len = rows / count;
        let mask = Array2::from_shape_fn(
            (rows, rows),
            |(i, j)| if i / len == j / len { 0.0 } else { -1e9 },
        );
        let a = self.attention.forward(g, stacked, Some(&mask));
        let h = g.add(stacked, a);
        let f = self.feed_forward.forward(g, h);
        g.add(h, f)
    }
}

#[derive(Clone, Debug)]
pub enum HeadParams {
    Text {
        prompt: PromptParams,
        encoder: TextEncoder,
    },
    Conv(Conv1d),
}

#[derive(Clone, Debug)]
pub struct TsmModel {
    pub config: TsmConfig,
    pub embed: [Conv1d; 2],
    pub attention: AttentionNet,
    pub head: HeadParams,
    /// `C×D` label word embeddings.
    labels: Mat,
}

/// Graph handles for one video's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TsmOutput {
    pub x_e: Var,
    /// `T×1` foreground attention.
    pub att: Var,
    pub s: Var,
    pub s_bar: Var,
    pub v: Var,
    pub v_bar: Var,
    pub p: Var,
    pub p_bar: Var,
}

impl TsmModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: TsmConfig,
        labels: Mat,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if labels.nrows() == 0 || labels.ncols() != config.word_dim {
            return Err(invalid!(
                "label embeddings must be C×{} with C ≥ 1, got {:?}",
                config.word_dim,
                labels.dim()
            ));
        }
        let c = &config;
        let embed = [
            Conv1d::new(store, "tsm.embed1", c.input_dim, c.embed_dim, c.kernel, rng),
            Conv1d::new(store, "tsm.embed2", c.embed_dim, c.embed_dim, c.kernel, rng),
        ];
        let attention = AttentionNet::new(
            store,
            "tsm.attention",
            c.input_dim,
            c.att_hidden,
            c.kernel,
            rng,
        );
        let head = match c.head {
            ScoreHead::Text => HeadParams::Text {
                prompt: PromptParams::new(
                    store,
                    "tsm.prompt",
                    c.prompt_len,
                    c.word_dim,
                    c.embed_dim,
                    rng,
                ),
                encoder: TextEncoder {
                    attention: MultiHeadSelfAttention::new(
                        store,
                        "tsm.text.attention",
                        c.embed_dim,
                        c.text_heads,
                        rng,
                    ),
                    feed_forward: FeedForward::new(
                        store,
                        "tsm.text.ffn",
                        c.embed_dim,
                        c.text_ff,
                        rng,
                    ),
                },
            },
            ScoreHead::Conv => HeadParams::Conv(Conv1d::new(
                store,
                "tsm.head",
                c.embed_dim,
                labels.nrows() + 1,
                1,
                rng,
            )),
        };
        Ok(Self {
            config,
            embed,
            attention,
            head,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.nrows()
    }

    pub fn labels(&self) -> &Mat {
        &self.labels
    }

    /// `X_e = emb(X)`; `cols` is `X` unfolded with the configured kernel.
    /// Dropout applies only when `rng` is given.
    pub fn video_embed(&self, g: &mut Graph, cols: Var, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let mut h = self.embed[0].forward_unfolded(g, cols);
        h = g.relu(h);
        if let Some(r) = rng.as_deref_mut() {
            h = dropout(g, h, self.config.dropout, r);
        }
        h = self.embed[1].forward(g, h);
        h = g.relu(h);
        if let Some(r) = rng {
            h = dropout(g, h, self.config.dropout, r);
        }
        h
    }

    pub fn attention(&self, g: &mut Graph, cols: Var) -> Var {
        self.attention.forward_unfolded(g, cols)
    }

    /// Class queries `X_q`, `(C+1)×E`, read at each sequence's `[START]` position;
    /// `None` for the convolution head.
    pub fn text_encode(&self, g: &mut Graph) -> Result<Option<Var>> {
        let HeadParams::Text { prompt, encoder } = &self.head else {
            return Ok(None);
        };
        let count = self.num_classes() + 1;
        let seqs = (0..count)
            .map(|c| prompt.build_query_tokens(g, c, &self.labels))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&seqs);
        let encoded = encoder.forward(g, stacked, count);
        let len = self.config.prompt_len + 2;
        let starts: Vec<Var> = (0..count)
            .map(|c| g.slice_rows(encoded, c * len, c * len + 1))
            .collect();
        Ok(Some(g.concat_rows(&starts)))
    }

    /// Segment-level scores `T×(C+1)`: `X_e X_qᵀ`, or the convolution head.
    pub fn segment_scores(&self, g: &mut Graph, x_e: Var, queries: Option<Var>) -> Var {
        match (&self.head, queries) {
            (HeadParams::Conv(conv), _) => conv.forward_unfolded(g, x_e),
            (HeadParams::Text { .. }, Some(q)) => match_queries(g, x_e, q),
            (HeadParams::Text { .. }, None) => panic!("text head needs encoded queries"),
        }
    }

    pub fn forward_video(
        &self,
        g: &mut Graph,
        cols: Var,
        queries: Option<Var>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> TsmOutput {
        let x_e = self.video_embed(g, cols, rng);
        let att = self.attention(g, cols);
        let s = self.segment_scores(g, x_e, queries);
        let s_bar = suppress(g, s, att);
        let k = topk_count(g.shape(s).0, self.config.topk_divisor);
        let v = g.topk_mean_cols(s, k);
        let v_bar = g.topk_mean_cols(s_bar, k);
        let p = g.softmax_rows(v);
        let p_bar = g.softmax_rows(v_bar);
        TsmOutput {
            x_e,
            att,
            s,
            s_bar,
            v,
            v_bar,
            p,
            p_bar,
        }
    }

    /// `w_coact·L_coact + w_norm·L_norm + w_guide·L_guide`.
    pub fn weighted_aux(&self, g: &mut Graph, aux: &AuxLosses) -> Var {
        let c = &self.config;
        let a = g.scale(aux.coact, c.coact_weight);
        let b = g.scale(aux.norm, c.norm_weight);
        let d = g.scale(aux.guide, c.guide_weight);
        let ab = g.add(a, b);
        g.add(ab, d)
    }
}

/// `S = X_e X_qᵀ`.
pub fn match_queries(g: &mut Graph, x_e: Var, queries: Var) -> Var {
    let qt = g.transpose(queries);
    g.matmul(x_e, qt)
}

/// `S̄ = att ⊙ S`, broadcasting the `T×1` attention across classes.
pub fn suppress(g: &mut Graph, s: Var, att: Var) -> Var {
    g.mul(s, att)
}

/// ℓ1-normalized MIL targets `(y, ŷ)`, each `1×(C+1)`: the background entry is
/// 1 in `y` and 0 in `ŷ`.
pub fn mil_targets(label: &[bool]) -> Result<(Mat, Mat)> {
    let positives = label.iter().filter(|&&b| b).count();
    if positives == 0 {
        return Err(invalid!("video has no positive action label"));
    }
    let c = label.len();
    let y = Array2::from_shape_fn((1, c + 1), |(_, j)| {
        if j == c || label[j] {
            1.0 / (positives + 1) as f64
        } else {
            0.0
        }
    });
    let y_hat = Array2::from_shape_fn((1, c + 1), |(_, j)| {
        if j < c && label[j] {
            1.0 / positives as f64
        } else {
            0.0
        }
    });
    Ok((y, y_hat))
}

pub const LOG_FLOOR: f64 = 1e-8;

/// `−Σ y log p − Σ ŷ log p̄` with the logarithm clamped at `LOG_FLOOR`.
pub fn mil_loss(g: &mut Graph, p: Var, p_bar: Var, y: &Mat, y_hat: &Mat) -> Var {
    let a = cross_entropy(g, p, y);
    let b = cross_entropy(g, p_bar, y_hat);
    g.add(a, b)
}

fn cross_entropy(g: &mut Graph, p: Var, target: &Mat) -> Var {
    let lp = g.ln_clamped(p, LOG_FLOOR);
    let t = g.constant(target.clone());
    let prod = g.mul(lp, t);
    let total = g.sum(prod);
    g.scale(total, -1.0)
}

#[derive(Clone, Copy, Debug)]
pub struct AuxLosses {
    pub coact: Var,
    pub norm: Var,
    pub guide: Var,
}

/// Co-activity, attention-sparsity and background-guide losses over a batch.
pub fn aux_losses(g: &mut Graph, outputs: &[TsmOutput], labels: &[&[bool]]) -> AuxLosses {
    assert_eq!(outputs.len(), labels.len());
    let n = outputs.len().max(1) as f64;
    let mut norms = Vec::new();
    let mut guides = Vec::new();
    for o in outputs {
        norms.push(g.mean(o.att));
        let c = g.shape(o.s).1 - 1;
        let probs = g.softmax_rows(o.s);
        let bg = g.slice_cols(probs, c, c + 1);
        let target = g.affine(bg, -1.0, 1.0);
        let diff = g.sub(o.att, target);
        let diff = g.abs(diff);
        guides.push(g.mean(diff));
    }
    let norm = sum_all(g, &norms);
    let norm = g.scale(norm, 1.0 / n);
    let guide = sum_all(g, &guides);
    let guide = g.scale(guide, 1.0 / n);

    let mut pairs = Vec::new();
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            for (c, (&a, &b)) in labels[i].iter().zip(labels[j]).enumerate() {
                if a && b {
                    pairs.push(coact_pair(g, &outputs[i], &outputs[j], c));
                }
            }
        }
    }
    let coact = if pairs.is_empty() {
        g.scalar_const(0.0)
    } else {
        let total = sum_all(g, &pairs);
        g.scale(total, 1.0 / pairs.len() as f64)
    };
    AuxLosses { coact, norm, guide }
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms
        .first()
        .copied()
        .unwrap_or_else(|| g.scalar_const(0.0));
    for &t in terms.iter().skip(1) {
        acc = g.add(acc, t);
    }
    acc
}

/// Foreground and background descriptors of class `c` for one video.
fn descriptors(g: &mut Graph, o: &TsmOutput, c: usize) -> (Var, Var) {
    let fg_scores = g.slice_cols(o.s_bar, c, c + 1);
    let fg = temporal_pool(g, fg_scores, o.x_e);
    let inv = g.affine(o.att, -1.0, 1.0);
    let col = g.slice_cols(o.s, c, c + 1);
    let bg_scores = g.mul(inv, col);
    let bg = temporal_pool(g, bg_scores, o.x_e);
    (fg, bg)
}

fn temporal_pool(g: &mut Graph, scores: Var, x_e: Var) -> Var {
    let row = g.transpose(scores);
    let w = g.softmax_rows(row);
    g.matmul(w, x_e)
}

fn cosine(g: &mut Graph, a: Var, b: Var) -> Var {
    let ab = g.mul(a, b);
    let dot = g.sum(ab);
    let aa = g.mul(a, a);
    let na = g.sum(aa);
    let bb = g.mul(b, b);
    let nb = g.sum(bb);
    let prod = g.mul(na, nb);
    let prod = g.affine(prod, 1.0, 1e-12);
    let denom = g.sqrt(prod);
    g.div(dot, denom)
}

const COACT_MARGIN: f64 = 0.5;

fn coact_pair(g: &mut Graph, a: &TsmOutput, b: &TsmOutput, c: usize) -> Var {
    let (fa, ga) = descriptors(g, a, c);
    let (fb, gb) = descriptors(g, b, c);
    let pos = cosine(g, fa, fb);
    let neg_a = cosine(g, fa, gb);
    let neg_b = cosine(g, fb, ga);
    let ha = g.sub(neg_a, pos);
    let ha = g.affine(ha, 1.0, COACT_MARGIN);
    let ha = g.relu(ha);
    let hb = g.sub(neg_b, pos);
    let hb = g.affine(hb, 1.0, COACT_MARGIN);
    let hb = g.relu(hb);
    let sum = g.add(ha, hb);
    g.scale(sum, 0.5)
}
