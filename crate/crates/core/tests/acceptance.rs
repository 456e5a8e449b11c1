//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use wtal::autograd::{Graph, Mat};
use wtal::dataset::{
    generate_synthetic, DatasetManifest, GroundTruth, ManifestEntry, SharedSubAction, Split,
    SyntheticDataset, SyntheticSpec,
};
use wtal::evaluation::{iou_1d, map_at_ious, Detection, DetectionFile};
use wtal::framework::{BatchItem, Framework};
use wtal::gradcheck::check_parameters;
use wtal::localization::{soft_nms, Proposal};
use wtal::params::ParamStore;
use wtal::pipeline::{evaluate, grid_cells, infer, load_videos, train_loaded, Grid, LoadedVideo};
use wtal::text::{build_vocabulary, mask_sentence, render_sentence, DEFAULT_TEMPLATE};
use wtal::training::{
    consistency_loss, consistency_terms, write_metrics, Consistency, Profile, TrainConfig,
    TrainState,
};
use wtal::tsm::{suppress, topk_pool};
use wtal::vlc::{ModulatedAttention, Reconstructor};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn miniature_config() -> TrainConfig {
    let mut c = TrainConfig::for_profile(Profile::Synthetic);
    c.feature_dim = 8;
    c.embed_dim = 16;
    c.att_hidden = 16;
    c.text_heads = 4;
    c.text_ff = 16;
    c.vlc_hidden = 16;
    c.decoder_heads = 2;
    c.decoder_ff = 16;
    c.prompt_len = 3;
    c.word_vectors = "hash:8".to_string();
    c.vlc_template = "a [CLS]".to_string();
    c.dropout = 0.0;
    c.t_target = 8;
    c
}

fn miniature_classes() -> Vec<String> {
    ["Jump", "Run", "Swim"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

// 1. Analytic gradients of the total objective against central differences.
fn gradient_integrity() -> Check {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut groups = 0;
    for (consistency, reconstructor) in [
        (Consistency::Mse, Reconstructor::Transformer),
        (Consistency::Kl, Reconstructor::Gru),
        (Consistency::Mae, Reconstructor::Lstm),
    ] {
        let mut config = miniature_config();
        config.consistency = consistency;
        config.reconstructor = reconstructor;
        let mut fw = Framework::new(config, miniature_classes()).map_err(|e| e.to_string())?;
        if fw.vocab.len() != 8 {
            return Err(format!(
                "miniature vocabulary has {} tokens",
                fw.vocab.len()
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = [randn(8, 16, &mut rng), randn(8, 16, &mut rng)];
        let labels = [vec![true, false, true], vec![true, true, false]];
        let batch: Vec<BatchItem> = xs
            .iter()
            .zip(&labels)
            .map(|(x, l)| BatchItem { x, label: l })
            .collect();
        let model = fw.clone();
        let report = check_parameters(&mut fw.store, 6, 1e-6, |g| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            model
                .batch_losses(g, &batch, &mut rng, false)
                .expect("finite batch")
                .total
        });
        groups += report.len();
        for e in report {
            if e.relative > worst.1 {
                worst = (
                    format!("{consistency}/{reconstructor:?} {}", e.group),
                    e.relative,
                );
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst.1 < 1e-4 && secs < 60.0,
        format!(
            "{groups} groups, worst {} = {:.2e}, {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

// 2. Each consistency half reaches only its own branch's attention parameters.
fn stop_gradient_contract() -> Check {
    let fw = Framework::new(miniature_config(), miniature_classes()).map_err(|e| e.to_string())?;
    let vlc = fw.vlc.as_ref().ok_or("VLC branch missing")?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(8, 16, &mut rng);
    let tsm_ids = fw.store.group("tsm.attention");
    let vlc_ids = fw.store.group("vlc.attention");
    for kind in [Consistency::Mse, Consistency::Mae, Consistency::Kl] {
        let mut g = Graph::new(&fw.store);
        let xv = g.constant(x.clone());
        let cols = g.im2col(xv, 3);
        let att_m = fw.tsm.attention(&mut g, cols);
        let att_r = vlc.attention(&mut g, cols).ok_or("VLC attention missing")?;
        let (first, second) = consistency_terms(&mut g, att_m, att_r, kind)
            .map_err(|e| e.to_string())?
            .ok_or("no consistency terms")?;
        let g1 = g.backward(first);
        let g2 = g.backward(second);
        let zero = |grads: &wtal::autograd::Grads, ids: &[_]| {
            ids.iter()
                .all(|&id| grads.param(id).is_none_or(|m| m.iter().all(|&v| v == 0.0)))
        };
        let live = |grads: &wtal::autograd::Grads, ids: &[_]| {
            ids.iter()
                .any(|&id| grads.param(id).is_some_and(|m| m.iter().any(|&v| v != 0.0)))
        };
        if !zero(&g1, &vlc_ids) || !zero(&g2, &tsm_ids) {
            return Err(format!("{kind}: gradient leaked across the stop-gradient"));
        }
        if !live(&g1, &tsm_ids) || !live(&g2, &vlc_ids) {
            return Err(format!("{kind}: a half has no gradient on its own branch"));
        }
    }
    Ok(format!(
        "mse/mae/kl: first half 0 on {} VLC tensors, second half 0 on {} TSM tensors",
        vlc_ids.len(),
        tsm_ids.len()
    ))
}

fn brute_topk(values: &[f64], k: usize) -> f64 {
    let n = values.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let sum: f64 = (0..n)
            .filter(|&i| mask & (1 << i) != 0)
            .map(|i| values[i])
            .sum();
        best = best.max(sum / k as f64);
    }
    best
}

/// Greedy decay written out step by step on parallel arrays.
fn hand_soft_nms(extents: &[(f64, f64)], scores: &[f64], sigma: f64) -> Vec<(f64, f64, f64)> {
    let mut conf = scores.to_vec();
    let mut done = vec![false; conf.len()];
    let mut out = Vec::new();
    for _ in 0..conf.len() {
        let mut pick = usize::MAX;
        for i in 0..conf.len() {
            if !done[i] && (pick == usize::MAX || conf[i] > conf[pick]) {
                pick = i;
            }
        }
        done[pick] = true;
        out.push((extents[pick].0, extents[pick].1, conf[pick]));
        for i in 0..conf.len() {
            if !done[i] {
                let (a, b) = (extents[pick], extents[i]);
                let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
                let iou = inter / ((a.1 - a.0) + (b.1 - b.0) - inter);
                conf[i] *= (-(iou * iou) / sigma).exp();
            }
        }
    }
    out.into_iter().filter(|p| p.2 >= 1e-4).collect()
}

struct Scenario {
    manifest: DatasetManifest,
    detections: DetectionFile,
}

fn random_scenario(rng: &mut ChaCha8Rng) -> Scenario {
    let classes = vec!["A".to_string(), "B".to_string()];
    let mut entries = Vec::new();
    let mut detections = DetectionFile::default();
    for v in 0..3 {
        let id = format!("v{v}");
        let mut gts = Vec::new();
        for c in 0..2 {
            for _ in 0..rng.gen_range(0..3) {
                let s = rng.gen_range(0..16) as f64 * 0.5;
                let len = rng.gen_range(1..8) as f64 * 0.5;
                gts.push(GroundTruth {
                    class_id: c,
                    start: s,
                    end: s + len,
                });
            }
        }
        let mut dets = Vec::new();
        for _ in 0..rng.gen_range(0..7) {
            let c = rng.gen_range(0..2);
            let (s, e) = if !gts.is_empty() && rng.gen_bool(0.5) {
                let g = &gts[rng.gen_range(0..gts.len())];
                let jitter = rng.gen_range(-2..=2) as f64 * 0.25;
                (
                    g.start + jitter,
                    g.end + rng.gen_range(-2..=2) as f64 * 0.25,
                )
            } else {
                let s = rng.gen_range(0..16) as f64 * 0.5;
                (s, s + rng.gen_range(1..8) as f64 * 0.5)
            };
            let (s, e) = (s.min(e), s.max(e) + 0.25);
            // Coarse scores force ties.
            let score = rng.gen_range(1..6) as f64 / 5.0;
            dets.push(Detection {
                label: classes[c].clone(),
                score,
                segment: [s, e],
            });
        }
        detections.results.insert(id.clone(), dets);
        let label = (0..2)
            .map(|c| gts.iter().any(|g| g.class_id == c))
            .collect();
        entries.push(ManifestEntry {
            id,
            rgb: "r".into(),
            flow: "f".into(),
            label,
            fps: 25.0,
            ground_truth: gts,
        });
    }
    Scenario {
        manifest: DatasetManifest {
            class_names: classes,
            entries,
            split: Split::Test,
            root: Default::default(),
        },
        detections,
    }
}

/// Second implementation of the detection scorer. `None` when no class has ground truth.
fn brute_map(s: &Scenario, iou_thr: f64) -> Option<f64> {
    let mut aps = Vec::new();
    for (c, name) in s.manifest.class_names.iter().enumerate() {
        let mut gts: Vec<(String, f64, f64)> = Vec::new();
        for e in &s.manifest.entries {
            for g in e.ground_truth.iter().filter(|g| g.class_id == c) {
                gts.push((e.id.clone(), g.start, g.end));
            }
        }
        if gts.is_empty() {
            continue;
        }
        let mut dets: Vec<(f64, f64, String, f64)> = Vec::new();
        for (v, list) in &s.detections.results {
            for d in list.iter().filter(|d| &d.label == name) {
                dets.push((d.score, d.segment[0], v.clone(), d.segment[1]));
            }
        }
        // Score descending, then start ascending, then video id.
        for i in 0..dets.len() {
            for j in 0..dets.len() - 1 - i {
                let (a, b) = (&dets[j], &dets[j + 1]);
                let swap = a.0 < b.0 || (a.0 == b.0 && (a.1 > b.1 || (a.1 == b.1 && a.2 > b.2)));
                if swap {
                    dets.swap(j, j + 1);
                }
            }
        }
        let mut used = vec![false; gts.len()];
        let mut tp = Vec::new();
        for d in &dets {
            let mut best = None;
            let mut best_iou = -1.0;
            for (k, g) in gts.iter().enumerate() {
                if used[k] || g.0 != d.2 {
                    continue;
                }
                let iou = iou_1d((d.1, d.3), (g.1, g.2));
                if iou >= iou_thr && iou > best_iou {
                    best = Some(k);
                    best_iou = iou;
                }
            }
            if let Some(k) = best {
                used[k] = true;
            }
            tp.push(best.is_some());
        }
        let precision: Vec<f64> = (0..tp.len())
            .map(|i| tp[..=i].iter().filter(|&&t| t).count() as f64 / (i + 1) as f64)
            .collect();
        let mut ap = 0.0;
        for i in 0..tp.len() {
            if tp[i] {
                let envelope = precision[i..].iter().cloned().fold(0.0, f64::max);
                ap += envelope / gts.len() as f64;
            }
        }
        aps.push(ap);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn naive_attention(qin: &Mat, kin: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, att: &[f64]) -> Mat {
    let d = wq.ncols();
    let proj = |x: &Mat, w: &Mat, r: usize, c: usize| {
        (0..x.ncols()).map(|k| x[[r, k]] * w[[k, c]]).sum::<f64>()
    };
    let mut out = Array2::zeros((qin.nrows(), d));
    for i in 0..qin.nrows() {
        let logits: Vec<f64> = (0..kin.nrows())
            .map(|j| {
                let dot: f64 = (0..d)
                    .map(|c| proj(qin, wq, i, c) * proj(kin, wk, j, c))
                    .sum();
                dot / (d as f64).sqrt() * att[j]
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for c in 0..d {
            out[[i, c]] = (0..kin.nrows())
                .map(|j| (logits[j] - max).exp() / z * proj(kin, wv, j, c))
                .sum();
        }
    }
    out
}

// 3. Oracle equivalence of top-k pooling, soft-NMS, AP/mAP and modulated attention.
fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut topk_cases = 0;
    for t in 1..=10 {
        for _ in 0..5 {
            let values: Vec<f64> = (0..t)
                .map(|_| (rng.gen_range(-8..8) as f64) / 4.0)
                .collect();
            for k in 1..=t {
                let got = topk_pool(&values, k).map_err(|e| e.to_string())?;
                let want = brute_topk(&values, k);
                if (got - want).abs() > 1e-12 {
                    return Err(format!("top-k {values:?} k={k}: {got} vs {want}"));
                }
                topk_cases += 1;
            }
        }
    }

    for case in 0..100 {
        let n = rng.gen_range(1..9);
        let extents: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let s = rng.gen_range(0..20) as f64 * 0.5;
                (s, s + rng.gen_range(1..10) as f64 * 0.5)
            })
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sigma = rng.gen_range(0.1..1.0);
        let proposals = extents
            .iter()
            .zip(&scores)
            .map(|(&(s, e), &c)| Proposal {
                class_id: 0,
                start_s: s,
                end_s: e,
                confidence: c,
            })
            .collect();
        let got = soft_nms(proposals, sigma);
        let want = hand_soft_nms(&extents, &scores, sigma);
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(p, w)| {
                p.start_s == w.0 && p.end_s == w.1 && (p.confidence - w.2).abs() <= 1e-9
            });
        if !same {
            return Err(format!(
                "soft-NMS case {case} differs from the hand simulation"
            ));
        }
    }

    let mut scenarios = 0;
    let ious = [0.1, 0.3, 0.5, 0.7, 0.9];
    while scenarios < 100 {
        let s = random_scenario(&mut rng);
        let Some(_) = brute_map(&s, 0.5) else {
            continue;
        };
        let report = map_at_ious(&s.detections, &s.manifest, &ious).map_err(|e| e.to_string())?;
        for (i, &t) in ious.iter().enumerate() {
            let want = brute_map(&s, t).expect("ground truth present");
            if (report.map[i] - want).abs() > 1e-9 {
                return Err(format!(
                    "mAP@{t} scenario {scenarios}: {} vs {want}",
                    report.map[i]
                ));
            }
        }
        scenarios += 1;
    }

    let mut store = ParamStore::default();
    let layer = ModulatedAttention::new(&mut store, "probe", 4, &mut rng);
    let mut worst: f64 = 0.0;
    for (m, t) in [(3, 5), (5, 5), (1, 2)] {
        let q = randn(m, 4, &mut rng);
        let k = if m == t {
            q.clone()
        } else {
            randn(t, 4, &mut rng)
        };
        let att: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut g = Graph::new(&store);
        let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
        let a = g.constant(Array2::from_shape_vec((t, 1), att.clone()).expect("column"));
        let out = layer.forward(&mut g, qv, kv, Some(a));
        let want = naive_attention(
            &q,
            &k,
            store.get(layer.query),
            store.get(layer.key),
            store.get(layer.value),
            &att,
        );
        for (x, y) in g.value(out).iter().zip(want.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(
        worst < 1e-9,
        format!("top-k {topk_cases} cases, soft-NMS 100, mAP 100 scenarios x 5 IoUs, attention max dev {worst:.1e}"),
    )
}

// 4. Reduction identities.
fn reduction_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::default();
    let layer = ModulatedAttention::new(&mut store, "probe", 6, &mut rng);
    let mut g = Graph::new(&store);
    let q = g.constant(randn(4, 6, &mut rng));
    let k = g.constant(randn(7, 6, &mut rng));
    let ones = g.constant(Array2::ones((7, 1)));
    let modulated = layer.forward(&mut g, q, k, Some(ones));
    let plain = layer.forward(&mut g, q, k, None);
    let self_mod = layer.forward(&mut g, k, k, Some(ones));
    let self_plain = layer.forward(&mut g, k, k, None);
    let dev = |a: &Mat, b: &Mat| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let attention_dev =
        dev(g.value(modulated), g.value(plain)).max(dev(g.value(self_mod), g.value(self_plain)));

    let s = g.constant(randn(7, 4, &mut rng));
    let s_bar = suppress(&mut g, s, ones);
    let suppress_dev = dev(g.value(s_bar), g.value(s));

    let att = g.constant(Array2::from_shape_fn((7, 1), |(i, _)| {
        0.05 + 0.13 * i as f64
    }));
    let mut con = Vec::new();
    for kind in [Consistency::Mse, Consistency::Mae, Consistency::Kl] {
        let l = consistency_loss(&mut g, att, att, kind)
            .map_err(|e| e.to_string())?
            .ok_or("no term")?;
        con.push(g.scalar(l));
    }
    ensure(
        attention_dev == 0.0 && suppress_dev == 0.0 && con.iter().all(|&v| v == 0.0),
        format!("att=1 deviation {attention_dev}, S̄−S {suppress_dev}, L_con(att, att) {con:?}"),
    )
}

struct Runs {
    datasets: HashMap<(u64, bool), (tempfile::TempDir, SyntheticDataset)>,
    trained: HashMap<(String, u64, bool), Framework>,
}

impl Runs {
    fn new() -> Self {
        Self {
            datasets: HashMap::new(),
            trained: HashMap::new(),
        }
    }

    fn dataset(&mut self, seed: u64, shared: bool) -> Result<&SyntheticDataset, String> {
        if let std::collections::hash_map::Entry::Vacant(e) = self.datasets.entry((seed, shared)) {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let spec = SyntheticSpec {
                shared: shared.then(|| SharedSubAction {
                    pairs: vec![(0, 1)],
                    head_fraction: 0.5,
                }),
                ..SyntheticSpec::default()
            };
            let ds = generate_synthetic(&spec, seed, dir.path()).map_err(|e| e.to_string())?;
            e.insert((dir, ds));
        }
        Ok(&self.datasets[&(seed, shared)].1)
    }

    /// Trains (or reuses) one component variant on the synthetic training split.
    fn model(&mut self, variant: &str, seed: u64, shared: bool) -> Result<&Framework, String> {
        let key = (variant.to_string(), seed, shared);
        if !self.trained.contains_key(&key) {
            let base = TrainConfig {
                seed,
                ..TrainConfig::for_profile(Profile::Synthetic)
            };
            let config = match variant {
                "TSM-only" => TrainConfig {
                    use_vlc: false,
                    ..base.clone()
                },
                _ => {
                    grid_cells(Grid::Components, &base)
                        .into_iter()
                        .find(|(name, _)| name == variant)
                        .ok_or(format!("unknown variant {variant}"))?
                        .1
                }
            };
            let ds = self.dataset(seed, shared)?;
            let videos = load_videos(&ds.train, config.feature_dim).map_err(|e| e.to_string())?;
            let classes = ds.train.class_names.clone();
            let (state, _) =
                train_loaded(config, &classes, &videos, |_| {}).map_err(|e| e.to_string())?;
            self.trained.insert(key.clone(), state.framework);
        }
        Ok(&self.trained[&key])
    }

    fn score(
        &mut self,
        variant: &str,
        seed: u64,
        shared: bool,
        split: Split,
    ) -> Result<wtal::evaluation::EvalReport, String> {
        self.model(variant, seed, shared)?;
        let ds = &self.datasets[&(seed, shared)].1;
        let manifest = match split {
            Split::Train => &ds.train,
            Split::Test => &ds.test,
        };
        let fw = &self.trained[&(variant.to_string(), seed, shared)];
        let videos: Vec<LoadedVideo> =
            load_videos(manifest, fw.config.feature_dim).map_err(|e| e.to_string())?;
        let (detections, dump) = infer(fw, &videos).map_err(|e| e.to_string())?;
        evaluate(
            &detections,
            manifest,
            &[0.3, 0.5, 0.7],
            Some((&dump, fw.config.frame_threshold)),
        )
        .map_err(|e| e.to_string())
    }
}

// 5. Overfit smoke test on the synthetic training split.
fn overfit_smoke(runs: &mut Runs) -> Check {
    let start = Instant::now();
    let ds = runs.dataset(0, false)?;
    if ds.train.entries.len() != 30 || ds.train.num_classes() != 3 {
        return Err("synthetic training split is not 3 classes x 10 videos".into());
    }
    let report = runs.score("TSM+VLC+Lc", 0, false, Split::Train)?;
    let secs = start.elapsed().as_secs_f64();
    let (fpr, fnr) = (
        report.frame_fpr.unwrap_or(1.0),
        report.frame_fnr.unwrap_or(1.0),
    );
    ensure(
        report.average >= 0.80 && fpr <= 0.05 && fnr <= 0.10 && secs < 600.0,
        format!(
            "train avg mAP@{{0.3,0.5,0.7}} {:.3}, FPR {:.3}, FNR {:.3}, {secs:.0}s",
            report.average, fpr, fnr
        ),
    )
}

const SEEDS: [u64; 3] = [0, 1, 2];

// 6. Component ordering on held-out synthetic videos, mean of three seeds.
fn component_ordering(runs: &mut Runs) -> Check {
    let mut means = Vec::new();
    for variant in ["baseline", "baseline+VLC", "TSM+VLC+Lc"] {
        let mut sum = 0.0;
        for seed in SEEDS {
            sum += runs.score(variant, seed, false, Split::Test)?.average;
        }
        means.push(sum / SEEDS.len() as f64);
    }
    ensure(
        means[2] >= means[1] && means[1] >= means[0],
        format!(
            "avg mAP baseline {:.4}, baseline+VLC {:.4}, full {:.4}",
            means[0], means[1], means[2]
        ),
    )
}

// 7. Shared sub-action probe: the full model misses no more action segments than TSM alone.
fn shared_sub_action(runs: &mut Runs) -> Check {
    let mut fnr = [0.0; 2];
    for (i, variant) in ["TSM-only", "TSM+VLC+Lc"].into_iter().enumerate() {
        for seed in SEEDS {
            fnr[i] += runs
                .score(variant, seed, true, Split::Test)?
                .frame_fnr
                .unwrap_or(1.0)
                / SEEDS.len() as f64;
        }
    }
    ensure(
        fnr[1] <= fnr[0],
        format!("mean FNR TSM-only {:.4}, full {:.4}", fnr[0], fnr[1]),
    )
}

fn training_artifacts(ds: &SyntheticDataset, seed: u64) -> Result<(Vec<u8>, String), String> {
    let config = TrainConfig {
        seed,
        iterations: 40,
        ..TrainConfig::for_profile(Profile::Synthetic)
    };
    let videos = load_videos(&ds.train, config.feature_dim).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(
        Framework::new(config, ds.train.class_names.clone()).map_err(|e| e.to_string())?,
    );
    let train: Vec<_> = videos
        .iter()
        .map(|v| wtal::training::TrainVideo {
            id: v.id.clone(),
            features: v.features.clone(),
            label: v.label.clone(),
        })
        .collect();
    let rows = state.run(&train, |_| {}).map_err(|e| e.to_string())?;
    let mut csv = Vec::new();
    write_metrics(&mut csv, &rows).map_err(|e| e.to_string())?;
    let test =
        load_videos(&ds.test, state.framework.config.feature_dim).map_err(|e| e.to_string())?;
    let (detections, _) = infer(&state.framework, &test).map_err(|e| e.to_string())?;
    Ok((
        csv,
        serde_json::to_string_pretty(&detections).map_err(|e| e.to_string())?,
    ))
}

// 8. Same seed, byte-identical metrics CSV and detection JSON.
fn determinism(runs: &mut Runs) -> Check {
    let ds = runs.dataset(0, false)?.clone();
    let (csv_a, json_a) = training_artifacts(&ds, 5)?;
    let (csv_b, json_b) = training_artifacts(&ds, 5)?;
    let (csv_c, _) = training_artifacts(&ds, 6)?;
    ensure(
        csv_a == csv_b && json_a == json_b && csv_a != csv_c,
        format!(
            "metrics {} bytes, detections {} bytes identical across runs; other seed differs: {}",
            csv_a.len(),
            json_a.len(),
            csv_a != csv_c
        ),
    )
}

// 9. Uniform masking frequency per content word.
fn masking_statistics() -> Check {
    let classes = vec!["HighJump".to_string()];
    let vocab = build_vocabulary(&classes, &[DEFAULT_TEMPLATE]).map_err(|e| e.to_string())?;
    let sentence = render_sentence("HighJump", DEFAULT_TEMPLATE).map_err(|e| e.to_string())?;
    let tokens = vocab.encode(&sentence.words).map_err(|e| e.to_string())?;
    let content: Vec<usize> = (0..tokens.len())
        .filter(|&i| !vocab.is_special(tokens[i]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let trials = 10_000;
    let mut hits = vec![0usize; tokens.len()];
    for _ in 0..trials {
        let m = mask_sentence(
            &tokens,
            &vocab,
            0,
            sentence.label_span.clone(),
            1.0,
            &mut rng,
        );
        for p in m.mask_positions {
            hits[p] += 1;
        }
    }
    let freqs: Vec<f64> = content
        .iter()
        .map(|&i| hits[i] as f64 / trials as f64)
        .collect();
    let worst = freqs
        .iter()
        .map(|f| (f - 1.0 / 3.0).abs())
        .fold(0.0, f64::max);
    ensure(
        content.len() == 6 && worst <= 0.02,
        format!(
            "{} content words, frequencies {freqs:.4?}, max deviation {worst:.4}",
            content.len()
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut runs = Runs::new();
    type Criterion<'a> = (usize, &'a str, Box<dyn FnMut(&mut Runs) -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "gradient integrity", Box::new(|_| gradient_integrity())),
        (
            2,
            "stop-gradient contract",
            Box::new(|_| stop_gradient_contract()),
        ),
        (3, "oracle equivalence", Box::new(|_| oracle_equivalence())),
        (
            4,
            "reduction identities",
            Box::new(|_| reduction_identities()),
        ),
        (5, "overfit smoke test", Box::new(overfit_smoke)),
        (6, "component ordering", Box::new(component_ordering)),
        (7, "shared sub-action FNR", Box::new(shared_sub_action)),
        (8, "determinism", Box::new(determinism)),
        (9, "masking statistics", Box::new(|_| masking_statistics())),
    ];
    let mut failed = 0;
    for (n, name, mut check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut runs))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
