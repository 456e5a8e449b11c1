//! Feature streams, manifests and synthetic data.
//!
//! A manifest is UTF-8 JSON:
//!
//! ```json
//! {"classes": ["HighJump", "LongJump"],
//!  "split": "train",
//!  "videos": [{"id": "v0", "rgb": "features/v0_rgb.wtal", "flow": "features/v0_flow.wtal",
//!              "label": [1, 0], "fps": 25.0,
//!              "gt": [{"class": "HighJump", "start": 1.28, "end": 3.2}]}]}
//! ```
//!
//! Feature paths are resolved relative to the manifest's directory.

mod features;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use features::{
    fuse_modalities, read_feature_file, sample_segments, split_modalities, write_feature_file,
    FusedFeatures, Fusion, GateParams, SampleMode, VideoFeatures, FEATURE_DIM,
};
pub use synthetic::{generate_synthetic, SharedSubAction, SyntheticDataset, SyntheticSpec};

/// Frames covered by one feature row.
pub const FRAMES_PER_SEGMENT: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Ground-truth action interval in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub flow: PathBuf,
    pub label: Vec<bool>,
    pub fps: f64,
    pub ground_truth: Vec<GroundTruth>,
}

impl ManifestEntry {
    pub fn seconds_per_segment(&self) -> f64 {
        FRAMES_PER_SEGMENT / self.fps
    }

    pub fn positive_classes(&self) -> Vec<usize> {
        self.label
            .iter()
            .enumerate()
            .filter_map(|(c, &on)| on.then_some(c))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    /// Directory relative feature paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if c == 0 {
            return Err(invalid!("manifest has no classes"));
        }
        for e in &self.entries {
            if e.label.len() != c {
                return Err(invalid!(
                    "video {}: label length {} does not match {} classes",
                    e.id,
                    e.label.len(),
                    c
                ));
            }
            if !(e.fps.is_finite() && e.fps > 0.0) {
                return Err(invalid!("video {}: fps must be positive", e.id));
            }
            if self.split == Split::Train && !e.label.iter().any(|&b| b) {
                return Err(invalid!(
                    "video {}: training video has no positive label",
                    e.id
                ));
            }
            for gt in &e.ground_truth {
                if gt.class_id >= c {
                    return Err(invalid!(
                        "video {}: ground-truth class {} out of range",
                        e.id,
                        gt.class_id
                    ));
                }
                if !(gt.start >= 0.0 && gt.start < gt.end) {
                    return Err(invalid!(
                        "video {}: invalid ground-truth interval [{}, {}]",
                        e.id,
                        gt.start,
                        gt.end
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let raw = RawManifest {
            classes: self.class_names.clone(),
            split: self.split,
            videos: self
                .entries
                .iter()
                .map(|e| RawVideo {
                    id: e.id.clone(),
                    rgb: e.rgb.to_string_lossy().into_owned(),
                    flow: e.flow.to_string_lossy().into_owned(),
                    label: e.label.iter().map(|&b| b as u8).collect(),
                    fps: e.fps,
                    gt: e
                        .ground_truth
                        .iter()
                        .map(|g| RawGroundTruth {
                            class: ClassRef::Name(self.class_names[g.class_id].clone()),
                            start: g.start,
                            end: g.end,
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct RawManifest {
    classes: Vec<String>,
    videos: Vec<RawVideo>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct RawVideo {
    id: String,
    rgb: String,
    flow: String,
    label: Vec<u8>,
    #[serde(default = "default_fps")]
    fps: f64,
    #[serde(default)]
    gt: Vec<RawGroundTruth>,
}

fn default_fps() -> f64 {
    25.0
}

#[derive(Serialize, Deserialize)]
struct RawGroundTruth {
    class: ClassRef,
    start: f64,
    end: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ClassRef {
    Index(usize),
    Name(String),
}

/// Parses manifest JSON; `root` anchors relative feature paths.
pub fn parse_manifest(text: &str, root: &Path) -> Result<DatasetManifest> {
    let raw: RawManifest = serde_json::from_str(text).map_err(|e| Error::parse("manifest", e))?;
    let mut entries = Vec::with_capacity(raw.videos.len());
    for v in raw.videos {
        let mut ground_truth = Vec::with_capacity(v.gt.len());
        for g in v.gt {
            let class_id = match g.class {
                ClassRef::Index(i) => i,
                ClassRef::Name(name) => {
                    raw.classes.iter().position(|c| *c == name).ok_or_else(|| {
                        invalid!("video {}: unknown ground-truth class {name:?}", v.id)
                    })?
                }
            };
            ground_truth.push(GroundTruth {
                class_id,
                start: g.start,
                end: g.end,
            });
        }
        let label = v
            .label
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(invalid!(
                    "video {}: label entries must be 0 or 1, got {other}",
                    v.id
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(ManifestEntry {
            id: v.id,
            rgb: PathBuf::from(v.rgb),
            flow: PathBuf::from(v.flow),
            label,
            fps: v.fps,
            ground_truth,
        });
    }
    let manifest = DatasetManifest {
        class_names: raw.classes,
        entries,
        split: raw.split,
        root: root.to_path_buf(),
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &root)
}

/// Reads both modality files of an entry and checks their shapes.
pub fn load_features(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<VideoFeatures> {
    load_features_with_dim(manifest, entry, FEATURE_DIM)
}

pub fn load_features_with_dim(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    dim: usize,
) -> Result<VideoFeatures> {
    let rgb = read_feature_file(&manifest.resolve(&entry.rgb))?;
    let flow = read_feature_file(&manifest.resolve(&entry.flow))?;
    for (name, m) in [("rgb", &rgb), ("flow", &flow)] {
        if m.ncols() != dim {
            return Err(invalid!(
                "video {}: {name} feature width {} (expected {dim})",
                entry.id,
                m.ncols()
            ));
        }
    }
    VideoFeatures::new(entry.id.clone(), rgb, flow, entry.seconds_per_segment())
}
