//! Both branches assembled from a training configuration.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{im2col, Graph, Mat, Var};
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::text::{
    build_vocabulary, label_embedding_matrix, load_word_vectors, mask_sentence, render_sentence,
    MaskedSentence, Vocabulary,
};
use crate::training::{consistency_loss, Consistency, TrainConfig};
use crate::tsm::{aux_losses, mil_loss, mil_targets, TsmConfig, TsmModel};
use crate::vlc::{VlcConfig, VlcModel};

/// Seed offset separating parameter initialisation from the data stream.
const INIT_STREAM: u64 = 0x5eed_1417;

#[derive(Clone, Debug)]
pub struct Framework {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub tsm: TsmModel,
    pub vlc: Option<VlcModel>,
    /// Encoded description and class-word span, per class.
    sentences: Vec<(Vec<usize>, Range<usize>)>,
}

/// One training video: resampled features `T×input_dim` and its labels.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub x: &'a Mat,
    pub label: &'a [bool],
}

/// Scalar loss nodes of one batch; each is a batch mean.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// MIL loss plus weighted auxiliary losses.
    pub mil: Var,
    pub rec: Var,
    pub contrastive: Var,
    pub consistency: Var,
    pub total: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub mil: f64,
    pub rec: f64,
    pub contrastive: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossParts {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            mil: g.scalar(self.mil),
            rec: g.scalar(self.rec),
            contrastive: g.scalar(self.contrastive),
            consistency: g.scalar(self.consistency),
            total: g.scalar(self.total),
        }
    }
}

impl LossValues {
    /// Fails on the first non-finite component, naming it.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("L_mil", self.mil),
            ("L_rec", self.rec),
            ("L_c", self.contrastive),
            ("L_con", self.consistency),
            ("L_total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("{name} is {v}")));
            }
        }
        Ok(())
    }
}

/// `L = L_mil + α L_rec + β L_c + λ L_con`.
pub fn total_loss(
    g: &mut Graph,
    mil: Var,
    rec: Var,
    contrastive: Var,
    consistency: Var,
    weights: (f64, f64, f64),
) -> Var {
    let (alpha, beta, lambda) = weights;
    let a = g.scale(rec, alpha);
    let b = g.scale(contrastive, beta);
    let c = g.scale(consistency, lambda);
    let l = g.add(mil, a);
    let l = g.add(l, b);
    g.add(l, c)
}

/// Per-video inference outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoInference {
    pub att: Vec<f64>,
    pub att_r: Option<Vec<f64>>,
    /// `T×(C+1)` suppressed segment scores.
    pub s_bar: Mat,
    pub p_bar: Vec<f64>,
}

impl Framework {
    pub fn new(config: TrainConfig, class_names: Vec<String>) -> Result<Self> {
        config.validate()?;
        if class_names.is_empty() {
            return Err(invalid!("no classes"));
        }
        let table = load_word_vectors(&config.word_vectors)?;
        let labels = label_embedding_matrix(&class_names, &table)?;
        let vocab = build_vocabulary(&class_names, &[config.vlc_template.as_str()])?;
        let sentences = class_names
            .iter()
            .map(|name| {
                let s = render_sentence(name, &config.vlc_template)?;
                Ok((vocab.encode(&s.words)?, s.label_span))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_STREAM);
        let mut store = ParamStore::default();
        let input_dim = 2 * config.feature_dim;
        let tsm_config = TsmConfig {
            input_dim,
            embed_dim: config.embed_dim,
            att_hidden: config.att_hidden,
            text_heads: config.text_heads,
            text_ff: config.text_ff,
            prompt_len: config.prompt_len,
            word_dim: table.dim(),
            kernel: 3,
            dropout: config.dropout,
            topk_divisor: config.topk_divisor,
            head: config.head,
            coact_weight: config.coact_weight,
            norm_weight: config.norm_weight,
            guide_weight: config.guide_weight,
        };
        let tsm = TsmModel::new(&mut store, tsm_config, labels, &mut rng)?;
        let vlc = if config.use_vlc {
            let vlc_config = VlcConfig {
                input_dim,
                hidden: config.vlc_hidden,
                att_hidden: config.att_hidden,
                kernel: 3,
                word_dim: table.dim(),
                decoder_heads: config.decoder_heads,
                decoder_ff: config.decoder_ff,
                encoder_depth: config.encoder_depth,
                decoder_depth: config.decoder_depth,
                reconstructor: config.reconstructor,
                masked_only: config.masked_only,
                share_attention: config.consistency == Consistency::Share,
            };
            Some(VlcModel::new(
                &mut store,
                vlc_config,
                vocab.embedding_matrix(&table),
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            class_names,
            vocab,
            store,
            tsm,
            vlc,
            sentences,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_dim(&self) -> usize {
        2 * self.config.feature_dim
    }

    /// A freshly masked description of one of the video's positive classes.
    pub fn sample_sentence(&self, label: &[bool], rng: &mut ChaCha8Rng) -> Result<MaskedSentence> {
        let positives: Vec<usize> = (0..label.len()).filter(|&c| label[c]).collect();
        let &class = positives
            .choose(rng)
            .ok_or_else(|| invalid!("video has no positive action label"))?;
        let (tokens, span) = &self.sentences[class];
        Ok(mask_sentence(
            tokens,
            &self.vocab,
            class,
            span.clone(),
            1.0,
            rng,
        ))
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.input_dim() || x.nrows() == 0 {
            return Err(invalid!(
                "features must be T×{} with T ≥ 1, got {:?}",
                self.input_dim(),
                x.dim()
            ));
        }
        Ok(())
    }

    /// Builds the batch objective. `rng` drives dropout and masking; pass
    /// `train = false` to disable dropout (masking still draws from `rng`).
    pub fn batch_losses(
        &self,
        g: &mut Graph,
        batch: &[BatchItem],
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let n = batch.len() as f64;
        let queries = self.tsm.text_encode(g)?;
        let mut outputs = Vec::with_capacity(batch.len());
        let mut mils = Vec::new();
        let mut recs = Vec::new();
        let mut cons = Vec::new();
        let mut conts = Vec::new();
        for item in batch {
            self.check_input(item.x)?;
            if item.label.len() != self.num_classes() {
                return Err(invalid!(
                    "label has {} entries for {} classes",
                    item.label.len(),
                    self.num_classes()
                ));
            }
            let x = g.constant(item.x.clone());
            let cols = g.im2col(x, 3);
            let o = self
                .tsm
                .forward_video(g, cols, queries, train.then_some(&mut *rng));
            let (y, y_hat) = mil_targets(item.label)?;
            mils.push(mil_loss(g, o.p, o.p_bar, &y, &y_hat));
            if let Some(vlc) = &self.vlc {
                let att_r = vlc.attention(g, cols).unwrap_or(o.att);
                let x_v = vlc.video_embed(g, x);
                let sentence = self.sample_sentence(item.label, rng)?;
                let l = vlc.losses(
                    g,
                    x_v,
                    att_r,
                    &sentence,
                    self.config.gamma1,
                    self.config.gamma2,
                )?;
                recs.push(l.rec);
                conts.push(l.contrastive);
                if let Some(c) = consistency_loss(g, o.att, att_r, self.config.consistency)? {
                    cons.push(c);
                }
            }
            outputs.push(o);
        }
        let labels: Vec<&[bool]> = batch.iter().map(|b| b.label).collect();
        let aux = aux_losses(g, &outputs, &labels);
        let aux = self.tsm.weighted_aux(g, &aux);
        let mil = mean_of(g, &mils, n);
        let mil = g.add(mil, aux);
        let rec = mean_of(g, &recs, n);
        let contrastive = mean_of(g, &conts, n);
        let consistency = mean_of(g, &cons, n);
        let total = total_loss(
            g,
            mil,
            rec,
            contrastive,
            consistency,
            self.config.effective_weights(),
        );
        Ok(LossParts {
            mil,
            rec,
            contrastive,
            consistency,
            total,
        })
    }

    /// Encoded class queries as a plain matrix, for reuse across videos.
    pub fn query_matrix(&self) -> Result<Option<Mat>> {
        let mut g = Graph::new(&self.store);
        Ok(self.tsm.text_encode(&mut g)?.map(|q| g.value(q).clone()))
    }

    pub fn infer(&self, x: &Mat, queries: Option<&Mat>) -> Result<VideoInference> {
        self.check_input(x)?;
        let mut g = Graph::new(&self.store);
        let q = queries.map(|q| g.constant(q.clone()));
        let q = match q {
            Some(q) => Some(q),
            None => self.tsm.text_encode(&mut g)?,
        };
        let cols = g.constant(im2col(x, 3));
        let o = self.tsm.forward_video(&mut g, cols, q, None);
        let att_r = self
            .vlc
            .as_ref()
            .and_then(|v| v.attention(&mut g, cols))
            .map(|a| g.value(a).column(0).to_vec());
        Ok(VideoInference {
            att: g.value(o.att).column(0).to_vec(),
            att_r,
            s_bar: g.value(o.s_bar).clone(),
            p_bar: g.value(o.p_bar).row(0).to_vec(),
        })
    }
}

fn mean_of(g: &mut Graph, terms: &[Var], n: f64) -> Var {
    let Some(&first) = terms.first() else {
        return g.scalar_const(0.0);
    };
    let mut acc = first;
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / n)
}
