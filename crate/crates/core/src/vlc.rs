//! Video-text language completion: reconstruct a masked class description
//! from attention-modulated video context.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{invalid, Result};
use crate::nn::{
    causal_mask, sinusoidal_positions, FeedForward, Linear, MultiHeadSelfAttention, Recurrent,
    RecurrentKind,
};
use crate::params::{ParamId, ParamStore};
use crate::text::MaskedSentence;
use crate::tsm::{AttentionNet, LOG_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reconstructor {
    /// Attention-modulated transformer encoder and decoder.
    Transformer,
    Gru,
    Lstm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VlcConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub att_hidden: usize,
    pub kernel: usize,
    pub word_dim: usize,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub reconstructor: Reconstructor,
    /// Score only masked positions instead of the whole sentence.
    pub masked_only: bool,
    /// Reuse the mining branch's attention instead of a separate network.
    pub share_attention: bool,
}

impl Default for VlcConfig {
    fn default() -> Self {
        Self {
            input_dim: 2048,
            hidden: 512,
            att_hidden: 512,
            kernel: 3,
            word_dim: 300,
            decoder_heads: 8,
            decoder_ff: 512,
            encoder_depth: 1,
            decoder_depth: 1,
            reconstructor: Reconstructor::Transformer,
            masked_only: false,
            share_attention: false,
        }
    }
}

impl VlcConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("vlc_hidden", self.hidden),
            ("att_hidden", self.att_hidden),
            ("word_dim", self.word_dim),
            ("decoder_heads", self.decoder_heads),
            ("decoder_ff", self.decoder_ff),
            ("encoder_depth", self.encoder_depth),
            ("decoder_depth", self.decoder_depth),
        ] {
            if v == 0 {
                return Err(invalid!("{name} must be positive"));
            }
        }
        if !self.hidden.is_multiple_of(self.decoder_heads) {
            return Err(invalid!(
                "vlc_hidden {} is not divisible by decoder_heads {}",
                self.hidden,
                self.decoder_heads
            ));
        }
        Ok(())
    }
}

/// Query/key/value projections of one attention-modulated layer.
#[derive(Clone, Debug)]
pub struct ModulatedAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

impl ModulatedAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        let mut w =
            |suffix: &str| store.uniform(format!("{name}.{suffix}"), (width, width), width, rng);
        Self {
            query: w("query"),
            key: w("key"),
            value: w("value"),
        }
    }

    /// `softmax_rows((Q_in W_q (K_in W_k)ᵀ / √D) ⊙ attᵀ) K_in W_v`. The `T×1`
    /// attention scales each key column's logit; `None` leaves logits unscaled.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, att: Option<Var>) -> Var {
        let probs = self.weights(g, queries, keys, att);
        let wv = g.param(self.value);
        let v = g.matmul(keys, wv);
        g.matmul(probs, v)
    }

    /// The row-stochastic attention matrix alone.
    pub fn weights(&self, g: &mut Graph, queries: Var, keys: Var, att: Option<Var>) -> Var {
        let wq = g.param(self.query);
        let wk = g.param(self.key);
        let q = g.matmul(queries, wq);
        let k = g.matmul(keys, wk);
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt);
        let width = g.shape(q).1 as f64;
        let mut logits = g.scale(logits, 1.0 / width.sqrt());
        if let Some(a) = att {
            let at = g.transpose(a);
            logits = g.mul(logits, at);
        }
        g.softmax_rows(logits)
    }
}

/// Causal self-attention, modulated cross-attention and feed-forward, each with a residual.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadSelfAttention,
    pub cross: ModulatedAttention,
    pub feed_forward: FeedForward,
}

#[derive(Clone, Debug)]
pub enum Body {
    Transformer {
        encoder: Vec<ModulatedAttention>,
        decoder: Vec<DecoderLayer>,
    },
    Recurrent {
        encoder: Recurrent,
        decoder: Recurrent,
    },
}

#[derive(Clone, Debug)]
pub struct VlcModel {
    pub config: VlcConfig,
    pub projection: Linear,
    pub attention: Option<AttentionNet>,
    pub sentence_projection: Linear,
    pub body: Body,
    pub output: Linear,
    /// `N_v×D` word vectors in vocabulary order.
    words: Mat,
}

/// The three reconstruction losses of one video and their contrastive combination.
#[derive(Clone, Copy, Debug)]
pub struct VlcLosses {
    pub rec: Var,
    pub rec_fg: Var,
    pub rec_bg: Var,
    pub contrastive: Var,
}

impl VlcModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: VlcConfig,
        words: Mat,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if words.nrows() == 0 || words.ncols() != config.word_dim {
            return Err(invalid!(
                "word vectors must be N_v×{}, got {:?}",
                config.word_dim,
                words.dim()
            ));
        }
        let c = &config;
        let h = c.hidden;
        let projection = Linear::new(store, "vlc.projection", c.input_dim, h, true, rng);
        let attention = (!c.share_attention).then(|| {
            AttentionNet::new(
                store,
                "vlc.attention",
                c.input_dim,
                c.att_hidden,
                c.kernel,
                rng,
            )
        });
        let sentence_projection = Linear::new(store, "vlc.sentence", c.word_dim, h, true, rng);
        let body = match c.reconstructor {
            Reconstructor::Transformer => Body::Transformer {
                encoder: (0..c.encoder_depth)
                    .map(|i| ModulatedAttention::new(store, &format!("vlc.encoder{i}"), h, rng))
                    .collect(),
                decoder: (0..c.decoder_depth)
                    .map(|i| DecoderLayer {
                        self_attention: MultiHeadSelfAttention::new(
                            store,
                            &format!("vlc.decoder{i}.self"),
                            h,
                            c.decoder_heads,
                            rng,
                        ),
                        cross: ModulatedAttention::new(
                            store,
                            &format!("vlc.decoder{i}.cross"),
                            h,
                            rng,
                        ),
                        feed_forward: FeedForward::new(
                            store,
                            &format!("vlc.decoder{i}.ffn"),
                            h,
                            c.decoder_ff,
                            rng,
                        ),
                    })
                    .collect(),
            },
            Reconstructor::Gru | Reconstructor::Lstm => {
                let kind = if c.reconstructor == Reconstructor::Gru {
                    RecurrentKind::Gru
                } else {
                    RecurrentKind::Lstm
                };
                Body::Recurrent {
                    encoder: Recurrent::new(store, "vlc.rnn_encoder", kind, h, h, rng),
                    decoder: Recurrent::new(store, "vlc.rnn_decoder", kind, 2 * h, h, rng),
                }
            }
        };
        let output = Linear::new(store, "vlc.output", h, words.nrows(), true, rng);
        Ok(Self {
            config,
            projection,
            attention,
            sentence_projection,
            body,
            output,
            words,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.nrows()
    }

    /// `X_v = X W + b + PE`.
    pub fn video_embed(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.projection.forward(g, x);
        let t = g.shape(y).0;
        let pe = g.constant(sinusoidal_positions(t, self.config.hidden));
        g.add(y, pe)
    }

    /// Separate completion attention `att_r` (`T×1`); `None` when shared with the mining branch.
    pub fn attention(&self, g: &mut Graph, cols: Var) -> Option<Var> {
        self.attention.as_ref().map(|a| a.forward_unfolded(g, cols))
    }

    /// Projected word vectors of `tokens` plus positional encoding, `M×D_h`.
    pub fn sentence_embed(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let n = self.vocab_size();
        if let Some(bad) = tokens.iter().find(|&&t| t >= n) {
            return Err(invalid!("token {bad} outside vocabulary of {n}"));
        }
        let rows = Array2::from_shape_fn((tokens.len(), self.words.ncols()), |(i, j)| {
            self.words[[tokens[i], j]]
        });
        let rows = g.constant(rows);
        let y = self.sentence_projection.forward(g, rows);
        let pe = g.constant(sinusoidal_positions(tokens.len(), self.config.hidden));
        Ok(g.add(y, pe))
    }

    /// Encoded video `F`, `T×D_h`.
    pub fn encode_video(&self, g: &mut Graph, x_v: Var, att: Option<Var>) -> Var {
        match &self.body {
            Body::Transformer { encoder, .. } => {
                let mut f = x_v;
                for layer in encoder {
                    f = layer.forward(g, f, f, att);
                }
                f
            }
            Body::Recurrent { encoder, .. } => encoder.forward(g, x_v),
        }
    }

    /// Multimodal states `H`, `M×D_h`, from the embedded masked sentence and `F`.
    pub fn decode(&self, g: &mut Graph, sentence: Var, f: Var, att: Option<Var>) -> Var {
        match &self.body {
            Body::Transformer { decoder, .. } => {
                let m = g.shape(sentence).0;
                let mask = causal_mask(m);
                let mut h = sentence;
                for layer in decoder {
                    let s = layer.self_attention.forward(g, h, Some(&mask));
                    h = g.add(h, s);
                    let c = layer.cross.forward(g, h, f, att);
                    h = g.add(h, c);
                    let ff = layer.feed_forward.forward(g, h);
                    h = g.add(h, ff);
                }
                h
            }
            Body::Recurrent { decoder, .. } => {
                let t = g.shape(f).0;
                let weights = match att {
                    Some(a) => {
                        let total = g.sum(a);
                        let total = g.affine(total, 1.0, 1e-12);
                        g.div(a, total)
                    }
                    None => g.constant(Array2::from_elem((t, 1), 1.0 / t as f64)),
                };
                let wt = g.transpose(weights);
                let context = g.matmul(wt, f);
                let m = g.shape(sentence).0;
                let ones = g.constant(Array2::ones((m, 1)));
                let context = g.matmul(ones, context);
                let input = g.concat_cols(&[sentence, context]);
                decoder.forward(g, input)
            }
        }
    }

    /// `P = softmax_rows(H W_o + b)`, `M×N_v`.
    pub fn word_distribution(&self, g: &mut Graph, h: Var) -> Var {
        let logits = self.output.forward(g, h);
        g.softmax_rows(logits)
    }

    pub fn reconstruct(&self, g: &mut Graph, x_v: Var, sentence: Var, att: Option<Var>) -> Var {
        let f = self.encode_video(g, x_v, att);
        let h = self.decode(g, sentence, f, att);
        self.word_distribution(g, h)
    }

    /// Reconstruction under `att`, all-ones and `1 − att`, with the contrastive hinge.
    pub fn losses(
        &self,
        g: &mut Graph,
        x_v: Var,
        att: Var,
        sentence: &MaskedSentence,
        gamma1: f64,
        gamma2: f64,
    ) -> Result<VlcLosses> {
        let embedded = self.sentence_embed(g, &sentence.tokens)?;
        let t = g.shape(att).0;
        let ones = g.constant(Array2::ones((t, 1)));
        let inverse = g.affine(att, -1.0, 1.0);
        let run = |g: &mut Graph, a: Var| {
            let p = self.reconstruct(g, x_v, embedded, Some(a));
            completion_loss(g, p, sentence, self.config.masked_only)
        };
        let rec = run(g, att);
        let rec_fg = run(g, ones);
        let rec_bg = run(g, inverse);
        let contrastive = contrastive_loss(g, rec, rec_fg, rec_bg, gamma1, gamma2);
        Ok(VlcLosses {
            rec,
            rec_fg,
            rec_bg,
            contrastive,
        })
    }
}

/// `−Σ_i log P[i, original_i]`, over all positions or only the masked ones.
pub fn completion_loss(g: &mut Graph, p: Var, sentence: &MaskedSentence, masked_only: bool) -> Var {
    let (m, n) = g.shape(p);
    assert_eq!(
        m,
        sentence.original_tokens.len(),
        "sentence length does not match P"
    );
    let mut target = Array2::zeros((m, n));
    for (i, &tok) in sentence.original_tokens.iter().enumerate() {
        if !masked_only || sentence.mask_positions.contains(&i) {
            target[[i, tok]] = 1.0;
        }
    }
    let lp = g.ln_clamped(p, LOG_FLOOR);
    let t = g.constant(target);
    let picked = g.mul(lp, t);
    let total = g.sum(picked);
    g.scale(total, -1.0)
}

/// `max(L_rec − L_fg + γ1, 0) + max(L_rec − L_bg + γ2, 0)`.
pub fn contrastive_loss(
    g: &mut Graph,
    rec: Var,
    rec_fg: Var,
    rec_bg: Var,
    gamma1: f64,
    gamma2: f64,
) -> Var {
    let a = g.sub(rec, rec_fg);
    let a = g.affine(a, 1.0, gamma1);
    let a = g.relu(a);
    let b = g.sub(rec, rec_bg);
    let b = g.affine(b, 1.0, gamma2);
    let b = g.relu(b);
    g.add(a, b)
}
