//! End-to-end operations over manifests: training, inference, evaluation
//! and the ablation grids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    fuse_modalities, load_features_with_dim, DatasetManifest, FusedFeatures, Fusion,
};
use crate::error::{invalid, Result};
use crate::evaluation::{
    map_at_ious, occupancy, Confusion, DetectionFile, EvalReport, ANET_IOUS, THUMOS_IOUS,
};
use crate::framework::Framework;
use crate::localization::{localize, to_detections, InferenceConfig};
use crate::training::{Consistency, MetricsRow, Profile, TrainConfig, TrainState, TrainVideo};
use crate::tsm::ScoreHead;
use crate::vlc::Reconstructor;

/// A manifest video with its fused features loaded.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub id: String,
    pub features: FusedFeatures,
    pub label: Vec<bool>,
    pub seconds_per_segment: f64,
}

pub fn load_videos(manifest: &DatasetManifest, feature_dim: usize) -> Result<Vec<LoadedVideo>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let f = load_features_with_dim(manifest, e, feature_dim)?;
            Ok(LoadedVideo {
                id: e.id.clone(),
                features: fuse_modalities(&f, Fusion::Concat),
                label: e.label.clone(),
                seconds_per_segment: e.seconds_per_segment(),
            })
        })
        .collect()
}

/// Trains from scratch. Every row is passed to `log` as it is produced.
/// On failure the returned error carries the diagnostic and `state` holds the
/// last finite parameters.
pub fn train(
    config: TrainConfig,
    manifest: &DatasetManifest,
    log: impl FnMut(&MetricsRow),
) -> Result<(TrainState, Vec<MetricsRow>)> {
    let videos = load_videos(manifest, config.feature_dim)?;
    train_loaded(config, &manifest.class_names, &videos, log)
}

pub fn train_loaded(
    config: TrainConfig,
    class_names: &[String],
    videos: &[LoadedVideo],
    log: impl FnMut(&MetricsRow),
) -> Result<(TrainState, Vec<MetricsRow>)> {
    if videos.is_empty() {
        return Err(invalid!("training split is empty"));
    }
    let train: Vec<TrainVideo> = videos
        .iter()
        .map(|v| TrainVideo {
            id: v.id.clone(),
            features: v.features.clone(),
            label: v.label.clone(),
        })
        .collect();
    let mut state = TrainState::new(Framework::new(config, class_names.to_vec())?);
    let rows = state.run(&train, log)?;
    Ok((state, rows))
}

/// Per-video attention sequences written alongside detections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub seconds_per_segment: BTreeMap<String, f64>,
    pub att_m: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub att_r: BTreeMap<String, Vec<f64>>,
}

/// Runs the model over every video at its full length.
pub fn infer(fw: &Framework, videos: &[LoadedVideo]) -> Result<(DetectionFile, AttentionDump)> {
    let config = InferenceConfig::from_train(&fw.config);
    config.validate()?;
    let queries = fw.query_matrix()?;
    let mut detections = DetectionFile::default();
    let mut dump = AttentionDump::default();
    for v in videos {
        let inf = fw.infer(&v.features.0, queries.as_ref())?;
        let proposals = localize(&inf, &config, v.seconds_per_segment);
        detections
            .results
            .insert(v.id.clone(), to_detections(&proposals, &fw.class_names));
        dump.seconds_per_segment
            .insert(v.id.clone(), v.seconds_per_segment);
        if let Some(r) = inf.att_r {
            dump.att_r.insert(v.id.clone(), r);
        }
        dump.att_m.insert(v.id.clone(), inf.att);
    }
    Ok((detections, dump))
}

pub fn profile_ious(profile: Profile) -> Vec<f64> {
    match profile {
        Profile::Anet => ANET_IOUS.to_vec(),
        Profile::Thumos | Profile::Synthetic => THUMOS_IOUS.to_vec(),
    }
}

/// mAP report, plus frame-level FPR/FNR when attentions are supplied.
pub fn evaluate(
    detections: &DetectionFile,
    manifest: &DatasetManifest,
    ious: &[f64],
    attention: Option<(&AttentionDump, f64)>,
) -> Result<EvalReport> {
    let mut report = map_at_ious(detections, manifest, ious)?;
    if let Some((dump, threshold)) = attention {
        let mut c = Confusion::default();
        for e in &manifest.entries {
            let att = dump
                .att_m
                .get(&e.id)
                .ok_or_else(|| invalid!("attention dump has no entry for video {}", e.id))?;
            let gt = occupancy(&e.ground_truth, att.len(), e.seconds_per_segment());
            c.add(att, &gt, threshold);
        }
        report.frame_fpr = Some(c.fpr());
        report.frame_fnr = Some(c.fnr());
    }
    Ok(report)
}

/// Named ablation grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Components,
    Consistency,
    Reconstructor,
    Prompt,
}

impl std::str::FromStr for Grid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "components" => Ok(Grid::Components),
            "consistency" => Ok(Grid::Consistency),
            "reconstructor" => Ok(Grid::Reconstructor),
            "prompt" => Ok(Grid::Prompt),
            _ => Err(format!(
                "unknown grid {s:?} (expected components, consistency, reconstructor or prompt)"
            )),
        }
    }
}

impl Grid {
    pub fn name(self) -> &'static str {
        match self {
            Grid::Components => "components",
            Grid::Consistency => "consistency",
            Grid::Reconstructor => "reconstructor",
            Grid::Prompt => "prompt",
        }
    }
}

pub const PROMPT_TEMPLATES: [&str; 3] =
    ["a [CLS]", "a video of action [CLS]", "a video of the [CLS]"];

/// Configs of every cell of `grid`, derived from `base`.
pub fn grid_cells(grid: Grid, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match grid {
        Grid::Components => vec![
            (
                "baseline".into(),
                with(&|c| {
                    c.head = ScoreHead::Conv;
                    c.use_vlc = false;
                }),
            ),
            (
                "baseline+VLC".into(),
                with(&|c| {
                    c.head = ScoreHead::Conv;
                    c.beta = 0.0;
                }),
            ),
            (
                "baseline+VLC+Lc".into(),
                with(&|c| c.head = ScoreHead::Conv),
            ),
            ("TSM+VLC+Lc".into(), base.clone()),
        ],
        Grid::Consistency => [
            ("w/o", None),
            ("share", Some(Consistency::Share)),
            ("kl", Some(Consistency::Kl)),
            ("mae", Some(Consistency::Mae)),
            ("mse", Some(Consistency::Mse)),
        ]
        .into_iter()
        .map(|(name, kind)| {
            let c = with(&|c| match kind {
                Some(k) => c.consistency = k,
                None => c.use_vlc = false,
            });
            (name.to_string(), c)
        })
        .collect(),
        Grid::Reconstructor => [
            ("w/o", None),
            ("gru", Some(Reconstructor::Gru)),
            ("lstm", Some(Reconstructor::Lstm)),
            ("transformer", Some(Reconstructor::Transformer)),
        ]
        .into_iter()
        .map(|(name, kind)| {
            let c = with(&|c| match kind {
                Some(k) => c.reconstructor = k,
                None => c.use_vlc = false,
            });
            (name.to_string(), c)
        })
        .collect(),
        Grid::Prompt => PROMPT_TEMPLATES
            .iter()
            .map(|t| (t.to_string(), with(&|c| c.vlc_template = t.to_string())))
            .collect(),
    }
}

/// Result of training and evaluating one cell with one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub grid: String,
    pub cell: String,
    pub seed: u64,
    pub report: EvalReport,
    pub final_loss: f64,
}

pub fn ablation_header(ious: &[f64]) -> String {
    let mut s = String::from("grid,cell,seed");
    for t in ious {
        s += &format!(",map@{t}");
    }
    s + ",avg,fpr,fnr,final_L_total"
}

impl CellResult {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{}", self.grid, csv_field(&self.cell), self.seed);
        for m in &self.report.map {
            s += &format!(",{m}");
        }
        s += &format!(
            ",{},{},{},{}",
            self.report.average,
            self.report.frame_fpr.unwrap_or(f64::NAN),
            self.report.frame_fnr.unwrap_or(f64::NAN),
            self.final_loss
        );
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Trains `config` on `train` and scores it on `eval_manifest`.
pub fn run_cell(
    config: TrainConfig,
    class_names: &[String],
    train_videos: &[LoadedVideo],
    eval_manifest: &DatasetManifest,
    eval_videos: &[LoadedVideo],
) -> Result<(EvalReport, f64)> {
    let threshold = config.frame_threshold;
    let ious = profile_ious(config.profile);
    let (state, rows) = train_loaded(config, class_names, train_videos, |_| {})?;
    let (detections, dump) = infer(&state.framework, eval_videos)?;
    let report = evaluate(&detections, eval_manifest, &ious, Some((&dump, threshold)))?;
    Ok((report, rows.last().map_or(f64::NAN, |r| r.losses.total)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_grid_structure() {
        let base = TrainConfig::for_profile(Profile::Synthetic);
        let cells = grid_cells(Grid::Components, &base);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].1.head, ScoreHead::Conv);
        assert!(!cells[0].1.use_vlc);
        assert_eq!(cells[1].1.beta, 0.0);
        assert!(cells[2].1.use_vlc && cells[2].1.beta > 0.0);
        assert_eq!(cells[3].1, base);
    }

    #[test]
    fn mse_cell_equals_default() {
        let base = TrainConfig::for_profile(Profile::Synthetic);
        let cells = grid_cells(Grid::Consistency, &base);
        let mse = cells.iter().find(|(n, _)| n == "mse").unwrap();
        assert_eq!(mse.1, base);
        assert_eq!(grid_cells(Grid::Reconstructor, &base).len(), 4);
        assert_eq!(grid_cells(Grid::Prompt, &base).len(), 3);
    }

    #[test]
    fn ablation_csv_quotes_commas() {
        assert_eq!(csv_field("a, b"), "\"a, b\"");
        assert_eq!(
            ablation_header(&[0.5]),
            "grid,cell,seed,map@0.5,avg,fpr,fnr,final_L_total"
        );
    }
}
