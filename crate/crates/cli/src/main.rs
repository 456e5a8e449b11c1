use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wtal::dataset::{
    generate_synthetic, load_manifest, SharedSubAction, SyntheticSpec, FEATURE_DIM,
};
use wtal::evaluation::DetectionFile;
use wtal::pipeline::{
    ablation_header, evaluate, grid_cells, infer, load_videos, profile_ious, run_cell, train,
    AttentionDump, CellResult, Grid,
};
use wtal::plot::{loss_curves_svg, timeline_svg, TimelineRow};
use wtal::training::{
    load_checkpoint, save_checkpoint, write_metrics, MetricsRow, Profile, TrainConfig,
};
use wtal::{Error, Result};

/// Weakly-supervised temporal action localization with text-segment mining
/// and video-text language completion.
#[derive(Parser)]
#[command(name = "wtal", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Training config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed for data generation, initialisation and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Default profile: thumos, anet or synthetic.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Weight of the completion loss.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Weight of the contrastive loss.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Weight of the attention consistency loss.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Foreground margin of the contrastive loss.
    #[arg(long, global = true)]
    gamma1: Option<f64>,
    /// Background margin of the contrastive loss.
    #[arg(long, global = true)]
    gamma2: Option<f64>,
    /// Extra config overrides, `key=value`; may repeat.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (train.json, test.json, features/).
    PrepareSynthetic {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        train_per_class: usize,
        #[arg(long, default_value_t = 5)]
        test_per_class: usize,
        #[arg(long, default_value_t = 3.0)]
        snr: f64,
        #[arg(long, default_value_t = 40)]
        t_min: usize,
        #[arg(long, default_value_t = 80)]
        t_max: usize,
        #[arg(long, default_value_t = 3)]
        max_instances: usize,
        /// Give classes 0 and 1 a common signature over this head fraction of every instance.
        #[arg(long)]
        shared_head: Option<f64>,
    },
    /// Train on a manifest; writes checkpoint.wtal, metrics.csv and config.txt to --out.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Localize actions; writes the detection JSON to --out.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write per-segment attentions here.
        #[arg(long)]
        attention: Option<PathBuf>,
    },
    /// Score detections; prints a table and writes the JSON report to --out.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Attention dump from `infer`, for frame-level FPR/FNR.
        #[arg(long)]
        attention: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and score every cell of an ablation grid; writes CSV rows to --out.
    Ablate {
        /// components, consistency, reconstructor or prompt.
        #[arg(long)]
        grid: Grid,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Comma-separated seeds; defaults to --seed or the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Render loss curves from a metrics CSV, or attention timelines, as SVG into --out.
    Plot {
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Manifest with ground truth for timelines.
        #[arg(long, requires_all = ["baseline", "tsm", "full"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        tsm: Option<PathBuf>,
        #[arg(long)]
        full: Option<PathBuf>,
    },
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = self
            .set
            .iter()
            .map(|kv| match kv.split_once('=') {
                Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
                None => (kv.clone(), String::new()),
            })
            .collect();
        let named = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("gamma1", self.gamma1.map(|v| v.to_string())),
            ("gamma2", self.gamma2.map(|v| v.to_string())),
        ];
        pairs.extend(
            named
                .into_iter()
                .filter_map(|(k, v)| Some((k.to_string(), v?))),
        );
        pairs
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let profile = self.profile.unwrap_or(Profile::Thumos);
        let mut overrides = self.overrides();
        if let Some(p) = self.profile {
            overrides.insert(0, ("profile".to_string(), p.to_string()));
        }
        match &self.config {
            Some(path) => TrainConfig::load(path, &overrides, profile),
            None => TrainConfig::from_sources(None, &overrides, profile),
        }
    }

    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::PrepareSynthetic {
            classes,
            train_per_class,
            test_per_class,
            snr,
            t_min,
            t_max,
            max_instances,
            shared_head,
        } => {
            let spec = SyntheticSpec {
                class_names: SyntheticSpec::class_names(classes),
                train_videos_per_class: train_per_class,
                test_videos_per_class: test_per_class,
                t_min,
                t_max,
                feature_dim: FEATURE_DIM,
                snr,
                max_instances,
                shared: shared_head.map(|head_fraction| SharedSubAction {
                    pairs: vec![(0, 1)],
                    head_fraction,
                }),
                ..SyntheticSpec::default()
            };
            if classes == 0 {
                return Err(Error::Validation(
                    "synthetic dataset needs at least one class".into(),
                ));
            }
            let ds = generate_synthetic(&spec, common.seed.unwrap_or(0), &common.out("synthetic"))?;
            println!("{}", ds.train_path.display());
            println!("{}", ds.test_path.display());
        }
        Command::Train { manifest } => {
            let config = common.train_config()?;
            let manifest = load_manifest(&manifest)?;
            let out = common.out("run");
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write(&out.join("config.txt"), config.to_text())?;
            let mut rows: Vec<MetricsRow> = Vec::new();
            let total = config.iterations;
            let result = train(config, &manifest, |r| {
                if r.iteration % 50 == 0 || r.iteration == total {
                    log::info!("iteration {} L_total {:.5}", r.iteration, r.losses.total);
                }
                rows.push(r.clone());
            });
            let mut csv = Vec::new();
            write_metrics(&mut csv, &rows).map_err(|e| Error::io(out.join("metrics.csv"), e))?;
            write(&out.join("metrics.csv"), csv)?;
            let (state, _) = result?;
            let ckpt = out.join("checkpoint.wtal");
            save_checkpoint(&state.checkpoint(), &ckpt)?;
            println!("{}", ckpt.display());
        }
        Command::Infer {
            checkpoint,
            manifest,
            attention,
        } => {
            let manifest = load_manifest(&manifest)?;
            let (ckpt, _warnings) = load_checkpoint(&checkpoint, None)?;
            ckpt.check_classes(&manifest.class_names)?;
            let fw = ckpt.to_framework()?;
            let videos = load_videos(&manifest, fw.config.feature_dim)?;
            let (detections, dump) = infer(&fw, &videos)?;
            write(&common.out("detections.json"), to_json(&detections))?;
            if let Some(path) = attention {
                write(&path, to_json(&dump))?;
            }
        }
        Command::Eval {
            detections,
            manifest,
            attention,
            csv,
        } => {
            let manifest = load_manifest(&manifest)?;
            let detections: DetectionFile = read_json(&detections)?;
            let dump: Option<AttentionDump> = attention.as_deref().map(read_json).transpose()?;
            let config = common.train_config()?;
            let ious = profile_ious(config.profile);
            let report = evaluate(
                &detections,
                &manifest,
                &ious,
                dump.as_ref().map(|d| (d, config.frame_threshold)),
            )?;
            print!("{}", report.to_table());
            if let Some(out) = &common.out {
                write(out, to_json(&report))?;
            }
            if let Some(path) = csv {
                write(&path, report.to_csv())?;
            }
        }
        Command::Ablate {
            grid,
            train,
            test,
            seeds,
        } => {
            let base = common.train_config()?;
            let seeds = if seeds.is_empty() {
                vec![base.seed]
            } else {
                seeds
            };
            let train_manifest = load_manifest(&train)?;
            let test_manifest = load_manifest(&test)?;
            let train_videos = load_videos(&train_manifest, base.feature_dim)?;
            let test_videos = load_videos(&test_manifest, base.feature_dim)?;
            let mut csv = ablation_header(&profile_ious(base.profile)) + "\n";
            for (name, config) in grid_cells(grid, &base) {
                for &seed in &seeds {
                    let config = TrainConfig {
                        seed,
                        ..config.clone()
                    };
                    let (report, final_loss) = run_cell(
                        config,
                        &train_manifest.class_names,
                        &train_videos,
                        &test_manifest,
                        &test_videos,
                    )?;
                    let row = CellResult {
                        grid: grid.name().to_string(),
                        cell: name.clone(),
                        seed,
                        report,
                        final_loss,
                    };
                    log::info!(
                        "{} / {} / seed {}: avg mAP {:.4}",
                        grid.name(),
                        name,
                        seed,
                        row.report.average
                    );
                    csv += &(row.to_csv() + "\n");
                }
            }
            write(&common.out("ablation.csv"), csv)?;
        }
        Command::Plot {
            metrics,
            manifest,
            baseline,
            tsm,
            full,
        } => {
            let out = common.out("plots");
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            if metrics.is_none() && manifest.is_none() {
                return Err(Error::Validation(
                    "plot needs --metrics or --manifest with attention dumps".into(),
                ));
            }
            if let Some(path) = metrics {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                write(&out.join("losses.svg"), loss_curves_svg(&text)?)?;
            }
            if let (Some(m), Some(b), Some(t), Some(f)) = (manifest, baseline, tsm, full) {
                plot_timelines(
                    &m,
                    [&b, &t, &f],
                    common.train_config()?.frame_threshold,
                    &out,
                )?;
            }
        }
    }
    Ok(())
}

fn plot_timelines(manifest: &Path, dumps: [&PathBuf; 3], threshold: f64, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest)?;
    let dumps: Vec<AttentionDump> = dumps.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    for e in &manifest.entries {
        let atts: Vec<&Vec<f64>> = dumps
            .iter()
            .map(|d| {
                d.att_m.get(&e.id).ok_or_else(|| {
                    Error::Validation(format!("attention dump has no entry for video {}", e.id))
                })
            })
            .collect::<Result<_>>()?;
        let len = atts[0].len();
        let gt = wtal::evaluation::occupancy(&e.ground_truth, len, e.seconds_per_segment());
        let mut rows = vec![TimelineRow {
            label: "ground truth",
            active: gt,
        }];
        for (label, att) in ["baseline", "TSM", "full"].into_iter().zip(atts) {
            rows.push(TimelineRow {
                label,
                active: att.iter().map(|&a| a >= threshold).collect(),
            });
        }
        write(
            &out.join(format!("timeline_{}.svg", e.id)),
            timeline_svg(&e.id, &rows),
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
