//! Seeded synthetic datasets with known action intervals.
//!
//! Each class owns a random unit "signature" per modality. Action rows are the
//! class signature plus isotropic Gaussian noise; background rows are noise
//! alone. The noise standard deviation per coordinate is `1 / (snr·√D)`, so the
//! expected noise norm is `1/snr` against a unit signal.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    write_feature_file, DatasetManifest, GroundTruth, ManifestEntry, Split, FEATURE_DIM,
    FRAMES_PER_SEGMENT,
};
use crate::error::{invalid, Error, Result};

const THUMOS_CLASSES: [&str; 20] = [
    "BaseballPitch",
    "BasketballDunk",
    "Billiards",
    "CleanAndJerk",
    "CliffDiving",
    "CricketBowling",
    "CricketShot",
    "Diving",
    "FrisbeeCatch",
    "GolfSwing",
    "HammerThrow",
    "HighJump",
    "JavelinThrow",
    "LongJump",
    "PoleVault",
    "Shotput",
    "SoccerPenalty",
    "TennisSwing",
    "ThrowDiscus",
    "VolleyballSpiking",
];

/// A sub-action shared by pairs of classes: the first `head_fraction` of every
/// instance of a paired class shows one common signature instead of its own.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedSubAction {
    pub pairs: Vec<(usize, usize)>,
    pub head_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    pub train_videos_per_class: usize,
    pub test_videos_per_class: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub feature_dim: usize,
    pub snr: f64,
    pub max_instances: usize,
    pub fps: f64,
    pub shared: Option<SharedSubAction>,
}

impl SyntheticSpec {
    /// THUMOS class names (cycled with a numeric suffix beyond 20).
    pub fn class_names(count: usize) -> Vec<String> {
        (0..count)
            .map(|i| {
                let base = THUMOS_CLASSES[i % THUMOS_CLASSES.len()];
                match i / THUMOS_CLASSES.len() {
                    0 => base.to_string(),
                    n => format!("{base} {n}"),
                }
            })
            .collect()
    }

    pub fn with_classes(count: usize) -> Self {
        Self {
            class_names: Self::class_names(count),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(invalid!("synthetic dataset needs at least one class"));
        }
        if self.t_min > self.t_max {
            return Err(invalid!(
                "t_min {} exceeds t_max {}",
                self.t_min,
                self.t_max
            ));
        }
        if self.max_instances == 0 || self.t_min < 6 * self.max_instances {
            return Err(invalid!(
                "t_min {} too short for up to {} instances",
                self.t_min,
                self.max_instances
            ));
        }
        if self.feature_dim == 0 {
            return Err(invalid!("feature_dim must be positive"));
        }
        if !(self.snr > 0.0) {
            return Err(invalid!("snr must be positive"));
        }
        if !(self.fps > 0.0) {
            return Err(invalid!("fps must be positive"));
        }
        if let Some(shared) = &self.shared {
            let c = self.class_names.len();
            if shared
                .pairs
                .iter()
                .any(|&(a, b)| a >= c || b >= c || a == b)
            {
                return Err(invalid!(
                    "shared sub-action pairs must name two distinct classes"
                ));
            }
            if !(0.0..1.0).contains(&shared.head_fraction) {
                return Err(invalid!("shared head fraction must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    fn noise_std(&self) -> f64 {
        if self.snr.is_infinite() {
            0.0
        } else {
            1.0 / (self.snr * (self.feature_dim as f64).sqrt())
        }
    }

    fn shares_head(&self, class: usize) -> bool {
        self.shared
            .as_ref()
            .is_some_and(|s| s.pairs.iter().any(|&(a, b)| a == class || b == class))
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_names: Self::class_names(3),
            train_videos_per_class: 10,
            test_videos_per_class: 5,
            t_min: 40,
            t_max: 80,
            feature_dim: FEATURE_DIM,
            snr: 3.0,
            max_instances: 3,
            fps: 25.0,
            shared: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

struct Signatures {
    rgb: Vec<Vec<f64>>,
    flow: Vec<Vec<f64>>,
    shared_rgb: Vec<f64>,
    shared_flow: Vec<f64>,
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Writes `train.json`, `test.json` and `features/*.wtal` under `out_dir`.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    let feature_dir = out_dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.class_names.len();
    let d = spec.feature_dim;
    let signatures = Signatures {
        rgb: (0..c).map(|_| unit_vector(d, &mut rng)).collect(),
        flow: (0..c).map(|_| unit_vector(d, &mut rng)).collect(),
        shared_rgb: unit_vector(d, &mut rng),
        shared_flow: unit_vector(d, &mut rng),
    };

    let build = |split: Split, per_class: usize, rng: &mut ChaCha8Rng| -> Result<DatasetManifest> {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let mut entries = Vec::with_capacity(per_class * c);
        for i in 0..per_class {
            for class in 0..c {
                let id = format!("{tag}_{:04}", i * c + class);
                let (rgb, flow, intervals) = synth_video(spec, &signatures, class, rng);
                let rgb_rel = PathBuf::from("features").join(format!("{id}_rgb.wtal"));
                let flow_rel = PathBuf::from("features").join(format!("{id}_flow.wtal"));
                write_feature_file(&out_dir.join(&rgb_rel), &rgb)?;
                write_feature_file(&out_dir.join(&flow_rel), &flow)?;
                let delta = FRAMES_PER_SEGMENT / spec.fps;
                entries.push(ManifestEntry {
                    id,
                    rgb: rgb_rel,
                    flow: flow_rel,
                    label: (0..c).map(|k| k == class).collect(),
                    fps: spec.fps,
                    ground_truth: intervals
                        .into_iter()
                        .map(|(s, e)| GroundTruth {
                            class_id: class,
                            start: s as f64 * delta,
                            end: (e + 1) as f64 * delta,
                        })
                        .collect(),
                });
            }
        }
        Ok(DatasetManifest {
            class_names: spec.class_names.clone(),
            entries,
            split,
            root: out_dir.to_path_buf(),
        })
    };

    let train = build(Split::Train, spec.train_videos_per_class, &mut rng)?;
    let test = build(Split::Test, spec.test_videos_per_class, &mut rng)?;
    let train_path = out_dir.join("train.json");
    let test_path = out_dir.join("test.json");
    train.save(&train_path)?;
    test.save(&test_path)?;
    Ok(SyntheticDataset {
        train,
        test,
        train_path,
        test_path,
    })
}

/// Non-overlapping inclusive segment intervals, one per equal slot of the
/// timeline, each separated from its neighbours by at least one background row.
fn place_instances<R: Rng>(t: usize, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let slot = t / count;
    (0..count)
        .map(|k| {
            let base = k * slot;
            let max_len = (slot * 2 / 3).max(3).min(slot - 2);
            let min_len = (slot / 4).max(3).min(max_len);
            let len = rng.gen_range(min_len..=max_len);
            let start = base + rng.gen_range(1..=slot - 1 - len);
            (start, start + len - 1)
        })
        .collect()
}

fn synth_video<R: Rng>(
    spec: &SyntheticSpec,
    sig: &Signatures,
    class: usize,
    rng: &mut R,
) -> (Array2<f32>, Array2<f32>, Vec<(usize, usize)>) {
    let t = rng.gen_range(spec.t_min..=spec.t_max);
    let count = rng.gen_range(1..=spec.max_instances);
    let intervals = place_instances(t, count, rng);
    let d = spec.feature_dim;
    let std = spec.noise_std();
    let mut rgb = Array2::<f32>::zeros((t, d));
    let mut flow = Array2::<f32>::zeros((t, d));
    let head = spec.shared.as_ref().map_or(0.0, |s| s.head_fraction);
    for row in 0..t {
        let active = intervals.iter().find(|(s, e)| (*s..=*e).contains(&row));
        let source = active.map(|&(s, e)| {
            let len = (e - s + 1) as f64;
            let shared_rows = (head * len).round() as usize;
            if spec.shares_head(class) && row - s < shared_rows {
                (&sig.shared_rgb, &sig.shared_flow)
            } else {
                (&sig.rgb[class], &sig.flow[class])
            }
        });
        for j in 0..d {
            let (nr, nf): (f64, f64) = if std > 0.0 {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                (a * std, b * std)
            } else {
                (0.0, 0.0)
            };
            let (sr, sf) = source.map_or((0.0, 0.0), |(r, f)| (r[j], f[j]));
            rgb[[row, j]] = (sr + nr) as f32;
            flow[[row, j]] = (sf + nf) as f32;
        }
    }
    (rgb, flow, intervals)
}
