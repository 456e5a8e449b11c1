use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use crate::autograd::sigmoid;
use crate::error::{invalid, Error, Result};

/// Per-modality feature width produced by the two-stream backbone.
pub const FEATURE_DIM: usize = 1024;

const MAGIC: &[u8; 5] = b"WTAL1";

/// RGB and optical-flow streams of one video, `T×D` each.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub rgb: Array2<f32>,
    pub flow: Array2<f32>,
    pub seconds_per_segment: f64,
}

impl VideoFeatures {
    pub fn new(
        video_id: String,
        rgb: Array2<f32>,
        flow: Array2<f32>,
        seconds_per_segment: f64,
    ) -> Result<Self> {
        if rgb.nrows() != flow.nrows() {
            return Err(invalid!(
                "video {video_id}: modality length mismatch (rgb T={}, flow T={})",
                rgb.nrows(),
                flow.nrows()
            ));
        }
        if rgb.nrows() == 0 {
            return Err(invalid!("video {video_id}: no segments"));
        }
        if !(seconds_per_segment.is_finite() && seconds_per_segment > 0.0) {
            return Err(invalid!(
                "video {video_id}: seconds_per_segment must be positive"
            ));
        }
        if rgb.iter().chain(flow.iter()).any(|x| !x.is_finite()) {
            return Err(invalid!("video {video_id}: non-finite feature value"));
        }
        Ok(Self {
            video_id,
            rgb,
            flow,
            seconds_per_segment,
        })
    }

    pub fn len(&self) -> usize {
        self.rgb.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.nrows() == 0
    }
}

/// Fused `T×2D` video representation fed to both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures(pub Array2<f64>);

impl FusedFeatures {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

/// Cross-modal channel gates: each modality is scaled by
/// `sigmoid(mean_t(other) · W + b)` before concatenation.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub rgb_weight: Array2<f64>,
    pub rgb_bias: Array2<f64>,
    pub flow_weight: Array2<f64>,
    pub flow_bias: Array2<f64>,
}

impl GateParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            rgb_weight: Array2::zeros((dim, dim)),
            rgb_bias: Array2::zeros((1, dim)),
            flow_weight: Array2::zeros((dim, dim)),
            flow_bias: Array2::zeros((1, dim)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Fusion<'a> {
    Concat,
    Gated(&'a GateParams),
}

pub fn fuse_modalities(v: &VideoFeatures, mode: Fusion<'_>) -> FusedFeatures {
    let rgb = v.rgb.mapv(f64::from);
    let flow = v.flow.mapv(f64::from);
    let (rgb, flow) = match mode {
        Fusion::Concat => (rgb, flow),
        Fusion::Gated(p) => {
            let rgb_mean = rgb.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
            let flow_mean = flow.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
            let rgb_gate = (flow_mean.dot(&p.rgb_weight) + &p.rgb_bias).mapv(sigmoid);
            let flow_gate = (rgb_mean.dot(&p.flow_weight) + &p.flow_bias).mapv(sigmoid);
            (rgb * &rgb_gate, flow * &flow_gate)
        }
    };
    FusedFeatures(concatenate![Axis(1), rgb, flow])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Uniform,
    Random,
}

/// Resamples to exactly `target` rows. Uniform picks `⌊i·T/target⌋`; random
/// draws one index from each stratum `[⌊i·T/target⌋, ⌊(i+1)·T/target⌋)`,
/// falling back to the stratum start when it is empty (stretching).
pub fn sample_segments<R: Rng>(
    x: &FusedFeatures,
    target: usize,
    mode: SampleMode,
    rng: &mut R,
) -> FusedFeatures {
    assert!(target >= 1, "sample_segments: target must be positive");
    let t = x.len();
    let idx: Vec<usize> = (0..target)
        .map(|i| {
            let lo = i * t / target;
            let hi = (i + 1) * t / target;
            match mode {
                SampleMode::Random if hi > lo + 1 => rng.gen_range(lo..hi),
                _ => lo,
            }
        })
        .collect();
    FusedFeatures(x.0.select(Axis(0), &idx))
}

pub fn write_feature_file(path: &Path, m: &Array2<f32>) -> Result<()> {
    let (t, d) = m.dim();
    let mut buf = Vec::with_capacity(13 + 4 * t * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for x in m.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    if bytes.len() < 13 || &bytes[..5] != MAGIC {
        return Err(Error::parse(ctx, "missing WTAL1 header"));
    }
    let t = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if body.len() != 4 * t * d {
        return Err(Error::parse(
            ctx,
            format!(
                "expected {} payload bytes for {t}x{d}, found {}",
                4 * t * d,
                body.len()
            ),
        ));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::parse(
            ctx,
            format!("non-finite value at row {}", pos / d.max(1)),
        ));
    }
    Ok(Array2::from_shape_vec((t, d), values).expect("shape checked"))
}

/// Splits a concat-fused matrix back into its two modality halves.
pub fn split_modalities(x: &FusedFeatures) -> (Array2<f64>, Array2<f64>) {
    let d = x.0.ncols() / 2;
    (
        x.0.slice(s![.., ..d]).to_owned(),
        x.0.slice(s![.., d..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(
        t: usize,
        d: usize,
        f: impl Fn(usize, usize) -> f32,
        g: impl Fn(usize, usize) -> f32,
    ) -> VideoFeatures {
        VideoFeatures::new(
            "v".into(),
            Array2::from_shape_fn((t, d), |(i, j)| f(i, j)),
            Array2::from_shape_fn((t, d), |(i, j)| g(i, j)),
            0.64,
        )
        .unwrap()
    }

    #[test]
    fn concat_layout() {
        let v = video(3, FEATURE_DIM, |_, _| 1.0, |_, _| 0.0);
        let x = fuse_modalities(&v, Fusion::Concat).0;
        assert_eq!(x.dim(), (3, 2 * FEATURE_DIM));
        assert!(x.slice(s![.., ..FEATURE_DIM]).iter().all(|&a| a == 1.0));
        assert!(x.slice(s![.., FEATURE_DIM..]).iter().all(|&a| a == 0.0));

        let v = video(
            4,
            8,
            |i, j| (i * 8 + j) as f32,
            |i, j| -((i * 8 + j) as f32),
        );
        let x = fuse_modalities(&v, Fusion::Concat).0;
        for t in 0..4 {
            assert_eq!(x[[t, 8]], f64::from(v.flow[[t, 0]]));
        }
    }

    #[test]
    fn gated_with_zero_params_halves() {
        let v = video(
            5,
            6,
            |i, j| (i + j) as f32 * 0.3,
            |i, j| (i * j) as f32 - 2.0,
        );
        let plain = fuse_modalities(&v, Fusion::Concat).0;
        let gates = GateParams::zeros(6);
        let gated = fuse_modalities(&v, Fusion::Gated(&gates)).0;
        assert_eq!(gated, plain * 0.5);
    }

    #[test]
    fn modality_length_mismatch() {
        let err = VideoFeatures::new(
            "v".into(),
            Array2::zeros((75, 4)),
            Array2::zeros((74, 4)),
            0.64,
        )
        .unwrap_err();
        assert!(err.to_string().contains("modality length mismatch"));
    }

    #[test]
    fn uniform_sampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = FusedFeatures(Array2::from_shape_fn((4, 2), |(i, _)| i as f64));
        let down = sample_segments(&x, 2, SampleMode::Uniform, &mut rng);
        assert_eq!(down.0.column(0).to_vec(), vec![0.0, 2.0]);
        let x2 = FusedFeatures(Array2::from_shape_fn((2, 2), |(i, _)| i as f64));
        let up = sample_segments(&x2, 4, SampleMode::Uniform, &mut rng);
        assert_eq!(up.0.column(0).to_vec(), vec![0.0, 0.0, 1.0, 1.0]);
        let x3 = FusedFeatures(Array2::from_shape_fn((100, 3), |(i, j)| (i * 3 + j) as f64));
        assert_eq!(sample_segments(&x3, 100, SampleMode::Uniform, &mut rng), x3);
    }

    #[test]
    fn random_sampling_stays_in_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = FusedFeatures(Array2::from_shape_fn((50, 1), |(i, _)| i as f64));
        for _ in 0..20 {
            let s = sample_segments(&x, 7, SampleMode::Random, &mut rng);
            for (i, v) in s.0.column(0).iter().enumerate() {
                let (lo, hi) = (i * 50 / 7, (i + 1) * 50 / 7);
                assert!((lo as f64) <= *v && *v < hi as f64);
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wtal");
        write_feature_file(&p, &Array2::from_elem((3, 4), 1.5f32)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Parse { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn feature_file_round_trips_bits(t in 1usize..12, d in 1usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((t, d), |_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff) * if rng.gen() { 1.0 } else { -1.0 });
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.wtal");
            write_feature_file(&p, &m).unwrap();
            let back = read_feature_file(&p).unwrap();
            prop_assert_eq!(m.mapv(f32::to_bits), back.mapv(f32::to_bits));
        }

        #[test]
        fn concat_split_recovers_inputs(t in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = video(t, d, |_, _| 0.0, |_, _| 0.0);
            let v = VideoFeatures { rgb: v.rgb.mapv(|_| rng.gen::<f32>()), flow: v.flow.mapv(|_| rng.gen::<f32>() - 0.5), ..v };
            let x = fuse_modalities(&v, Fusion::Concat);
            let (r, f) = split_modalities(&x);
            prop_assert_eq!(r, v.rgb.mapv(f64::from));
            prop_assert_eq!(f, v.flow.mapv(f64::from));
        }
    }
}
