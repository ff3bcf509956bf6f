use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use fusiondet_core::pipeline::constructed::constructed_weights;
use fusiondet_core::pipeline::detect::check_compatible;
use fusiondet_core::pipeline::kitti::list_frames;
use fusiondet_core::pipeline::*;
use fusiondet_core::rng::derive_seed;
use fusiondet_core::weights::TensorStore;
use fusiondet_core::Real;

#[derive(Parser)]
#[command(name = "fusiondet", version, about = "Camera/LiDAR fusion 3D detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Early,
    Late,
    Gated,
}

impl From<Fusion> for FusionMode {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::Early => FusionMode::Early,
            Fusion::Late => FusionMode::Late,
            Fusion::Gated => FusionMode::Gated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Flat `key = value` pipeline configuration.
    #[arg(long)]
    config: PathBuf,
    /// Weights file written by `init-weights`.
    #[arg(long)]
    weights: PathBuf,
    /// Overrides `fusion` from the config.
    #[arg(long, value_enum)]
    fusion: Option<Fusion>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Subcommand)]
enum Command {
    /// Run the detector over every frame of a KITTI-style directory.
    Detect {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        frames: PathBuf,
        /// Receives one `ID.txt` per frame in KITTI label format.
        #[arg(long)]
        out: PathBuf,
    },
    /// AP and AOS for detection files against label files.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, default_value = "Car")]
        class: String,
    },
    /// Render synthetic frames from a scene description.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of frames; frame `i` reseeds the sensor noise.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Write the BEV score map of one frame as a binary PGM.
    ExportHeatmap {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a weights file for a config: seeded random, or hand-set to
    /// fire on one box.
    InitWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `X,Y` box center in the LiDAR frame for constructed weights.
        #[arg(long, value_parser = parse_pair)]
        constructed: Option<[f64; 2]>,
        /// Ground height used by constructed weights.
        #[arg(long, default_value_t = -1.73, allow_hyphen_values = true)]
        ground_z: f64,
    },
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("bad number `{x}`")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected `X,Y`".to_string())
}

/// Failure split by phase: bad inputs exit 2, pipeline stages exit 3.
enum Fail {
    Input(anyhow::Error),
    Run(anyhow::Error),
}

trait Phase<T> {
    fn input(self) -> Result<T, Fail>;
    fn run(self) -> Result<T, Fail>;
}

impl<T, E: Into<anyhow::Error>> Phase<T> for Result<T, E> {
    fn input(self) -> Result<T, Fail> {
        self.map_err(|e| Fail::Input(e.into()))
    }
    fn run(self) -> Result<T, Fail> {
        self.map_err(|e| Fail::Run(e.into()))
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig, Fail> {
    let mut cfg = PipelineConfig::load(path).input()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

struct Model<T> {
    cfg: PipelineConfig,
    mode: FusionMode,
    weights: DetectorWeights<T>,
}

fn load_model<T: Real>(args: &ModelArgs) -> Result<Model<T>, Fail> {
    let cfg = load_config(&args.config, args.seed)?;
    let weights = load_weights::<T>(&args.weights, &cfg)
        .with_context(|| format!("loading weights {}", args.weights.display()))
        .input()?;
    check_compatible(&weights, &cfg).input()?;
    Ok(Model {
        mode: args.fusion.map_or(cfg.fusion, FusionMode::from),
        cfg,
        weights,
    })
}

fn load<T: Real>(frames: &Path, id: &str) -> Result<FrameBundle<T>, Fail> {
    load_frame(id, &FramePaths::in_dir(frames, id))
        .with_context(|| format!("frame {id}"))
        .input()
}

fn detect<T: Real>(model: &ModelArgs, frames: &Path, out: &Path) -> Result<(), Fail> {
    let m = load_model::<T>(model)?;
    let ids = list_frames(frames).input()?;
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .input()?;
    for id in &ids {
        let frame = load::<T>(frames, id)?;
        let res = run_detect(&frame, &m.cfg, m.mode, &m.weights)
            .with_context(|| format!("frame {id}"))
            .run()?;
        let size = (frame.image.width(), frame.image.height());
        export_detections(&res.detections, &frame.calib, size, &out.join(format!("{id}.txt"))).run()?;
        println!(
            "{id}: {} real, {} virtual, {} seeds, {} detections",
            res.n_real,
            res.n_virtual,
            res.n_seeds,
            res.detections.len()
        );
    }
    Ok(())
}

fn heatmap<T: Real>(model: &ModelArgs, frames: &Path, id: &str, out: &Path) -> Result<(), Fail> {
    let m = load_model::<T>(model)?;
    let frame = load::<T>(frames, id)?;
    let (real, virt) = fusiondet_core::pipeline::detect::build_points(&frame, &m.cfg).run()?;
    let (heat, _) = fusiondet_core::pipeline::detect::run_bev(&real, &virt, &m.cfg, m.mode, &m.weights).run()?;
    export_heatmap(&heat, out).run()?;
    println!("{}x{} heatmap -> {}", heat.width, heat.height, out.display());
    Ok(())
}

fn execute(cmd: Command) -> Result<(), Fail> {
    match cmd {
        Command::Detect { model, frames, out } => match model.precision {
            Precision::F32 => detect::<f32>(&model, &frames, &out),
            Precision::F64 => detect::<f64>(&model, &frames, &out),
        },
        Command::ExportHeatmap {
            model,
            frames,
            frame,
            out,
        } => match model.precision {
            Precision::F32 => heatmap::<f32>(&model, &frames, &frame, &out),
            Precision::F64 => heatmap::<f64>(&model, &frames, &frame, &out),
        },
        Command::Eval {
            dets,
            labels,
            iou,
            class,
        } => {
            if !(0.0..=1.0).contains(&iou) {
                return Err(Fail::Input(anyhow!("--iou must lie in [0, 1], got {iou}")));
            }
            let frames = load_eval_dirs::<f64>(&dets, &labels).input()?;
            let r = evaluate(&frames, &class, iou).run()?;
            println!("{class} AP@{iou} over {} frames", frames.len());
            print!("{r}");
            Ok(())
        }
        Command::Synth { spec, out, count } => {
            let spec = SceneSpec::load(&spec).input()?;
            for i in 0..count {
                let s = SceneSpec {
                    seed: if i == 0 { spec.seed } else { derive_seed(spec.seed, i as u64) },
                    ..spec.clone()
                };
                let frame = synth_scene::<f64>(&s, &format!("{i:06}")).run()?;
                write_frame(&out, &frame).run()?;
                println!("{}: {} points, {} objects", frame.id, frame.cloud.len(), frame.labels.len());
            }
            Ok(())
        }
        Command::InitWeights {
            config,
            out,
            seed,
            constructed,
            ground_z,
        } => {
            let cfg = load_config(&config, seed)?;
            let weights: DetectorWeights<f32> = match constructed {
                Some(c) => {
                    if cfg.backbone_channels[0] < 5 {
                        return Err(Fail::Input(anyhow!("constructed weights need backbone_channels[0] >= 5")));
                    }
                    constructed_weights(&cfg, c, ground_z)
                }
                None => DetectorWeights::init(&cfg, cfg.seed),
            };
            TensorStore::from_params(&weights).save(&out).run()?;
            println!("weights -> {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Fail::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
