//! Joint objective and the optimization loop.

mod checkpoint;
mod config;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::dataset::{sample_segments, FusedFeatures, SampleMode};
use crate::error::{invalid, Error, Result};
use crate::framework::{BatchItem, Framework, LossValues};
use crate::params::Adam;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use config::{parse_pairs, Consistency, Profile, TrainConfig, KEYS};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Ties the two attentions together. Each half compares one attention with a
/// stop-gradient copy of the other, so its gradient reaches only one branch.
/// Returns `None` for the variants without a consistency term.
pub fn consistency_loss(
    g: &mut Graph,
    att_m: Var,
    att_r: Var,
    kind: Consistency,
) -> Result<Option<Var>> {
    Ok(consistency_terms(g, att_m, att_r, kind)?.map(|(a, b)| g.add(a, b)))
}

/// The two halves of [`consistency_loss`]: `d(att_m, ψ(att_r))` and
/// `d(att_r, ψ(att_m))`, with `ψ` the stop-gradient.
pub fn consistency_terms(
    g: &mut Graph,
    att_m: Var,
    att_r: Var,
    kind: Consistency,
) -> Result<Option<(Var, Var)>> {
    if g.shape(att_m) != g.shape(att_r) {
        return Err(invalid!(
            "attention shapes differ: {:?} vs {:?}",
            g.shape(att_m),
            g.shape(att_r)
        ));
    }
    if matches!(kind, Consistency::Share | Consistency::None) {
        return Ok(None);
    }
    let fixed_r = g.detach(att_r);
    let fixed_m = g.detach(att_m);
    let pair = |g: &mut Graph, live: Var, fixed: Var| -> Var {
        match kind {
            Consistency::Mse => {
                let d = g.sub(live, fixed);
                let sq = g.mul(d, d);
                g.mean(sq)
            }
            Consistency::Mae => {
                let d = g.sub(live, fixed);
                let a = g.abs(d);
                g.mean(a)
            }
            Consistency::Kl => {
                // Symmetric Bernoulli KL: (p − q)(logit p − logit q).
                let lp = logit(g, live);
                let lq = logit(g, fixed);
                let d = g.sub(live, fixed);
                let dl = g.sub(lp, lq);
                let prod = g.mul(d, dl);
                g.mean(prod)
            }
            Consistency::Share | Consistency::None => unreachable!(),
        }
    };
    let a = pair(g, att_m, fixed_r);
    let b = pair(g, att_r, fixed_m);
    Ok(Some((a, b)))
}

fn logit(g: &mut Graph, p: Var) -> Var {
    let a = g.ln_clamped(p, 1e-8);
    let q = g.affine(p, -1.0, 1.0);
    let b = g.ln_clamped(q, 1e-8);
    g.sub(a, b)
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub losses: LossValues,
}

pub const METRICS_HEADER: &str = "iteration,L_mil,L_rec,L_c,L_con,L_total";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{}",
            self.iteration, l.mil, l.rec, l.contrastive, l.consistency, l.total
        )
    }
}

pub fn write_metrics<W: Write>(out: &mut W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

/// A training video held in memory: fused features `T×2D` and its labels.
#[derive(Clone, Debug)]
pub struct TrainVideo {
    pub id: String,
    pub features: FusedFeatures,
    pub label: Vec<bool>,
}

/// Model, optimizer and data-stream state of a run.
pub struct TrainState {
    pub framework: Framework,
    pub adam: Adam,
    pub iteration: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl TrainState {
    pub fn new(framework: Framework) -> Self {
        let c = &framework.config;
        let adam = Adam::new(&framework.store, c.learning_rate, c.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(c.seed);
        Self {
            framework,
            adam,
            iteration: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// Resumes from a checkpoint's parameters and optimizer state. The data
    /// stream restarts from the configured seed.
    pub fn resume(framework: Framework, adam: Adam, iteration: usize) -> Self {
        Self {
            adam,
            iteration,
            ..Self::new(framework)
        }
    }

    fn next_batch(&mut self, videos: usize, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size.min(videos));
        while batch.len() < size.min(videos) {
            if self.cursor >= self.order.len() {
                self.order = (0..videos).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimization step on a freshly drawn batch.
    pub fn step(&mut self, videos: &[TrainVideo]) -> Result<MetricsRow> {
        if videos.is_empty() {
            return Err(invalid!("training split is empty"));
        }
        let picks = self.next_batch(videos.len(), self.framework.config.batch_size);
        let target = self.framework.config.t_target;
        let xs: Vec<Mat> = picks
            .iter()
            .map(|&i| {
                sample_segments(
                    &videos[i].features,
                    target,
                    SampleMode::Random,
                    &mut self.rng,
                )
                .0
            })
            .collect();
        let batch: Vec<BatchItem> = picks
            .iter()
            .zip(&xs)
            .map(|(&i, x)| BatchItem {
                x,
                label: &videos[i].label,
            })
            .collect();
        let (values, grads) = {
            let mut g = Graph::new(&self.framework.store);
            let parts = self
                .framework
                .batch_losses(&mut g, &batch, &mut self.rng, true)?;
            let values = parts.values(&g);
            values.check_finite()?;
            if values.total > DIVERGENCE_LIMIT {
                return Err(Error::Numerical(format!(
                    "training diverged at iteration {}: L_total = {}",
                    self.iteration + 1,
                    values.total
                )));
            }
            (values, g.backward(parts.total).into_params())
        };
        if let Some((id, _)) = grads.iter().find(|(_, m)| !m.iter().all(|v| v.is_finite())) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {} at iteration {}",
                self.framework.store.name(*id),
                self.iteration + 1
            )));
        }
        self.adam.update(&mut self.framework.store, &grads);
        self.iteration += 1;
        Ok(MetricsRow {
            iteration: self.iteration,
            losses: values,
        })
    }

    /// Runs until `config.iterations` steps are done, reporting each row.
    /// On failure the state keeps the last finite parameters.
    pub fn run(
        &mut self,
        videos: &[TrainVideo],
        mut log: impl FnMut(&MetricsRow),
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.iteration < self.framework.config.iterations {
            let row = self.step(videos)?;
            log(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.framework.config.clone(),
            class_names: self.framework.class_names.clone(),
            iteration: self.iteration,
            store: self.framework.store.clone(),
            adam: self.adam.clone(),
        }
    }
}
