//! `volseg`: synthetic data, architecture analysis, training, inference and
//! evaluation for multi-resolution 3D segmentation networks.

mod analyze;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use volseg::archspec::{build_architecture, single_resolution_variant, ArchKind, ArchitectureGraph};
use volseg::inference::{dense_segment, segment_report};
use volseg::metrics::region_report;
use volseg::netexec::{init_weights, load_checkpoint, save_checkpoint, Checkpoint, Mode, Network};
use volseg::phantom::{generate_phantom, load_dataset, make_phantom_dataset, PhantomConfig};
use volseg::sampling::{realized_training_distribution, SamplerConfig, Strategy};
use volseg::training::{split_dataset, train, write_curves, Optimizer, TrainConfig, TrainOptions};
use volseg::volume::{class_histogram, load_image, load_label, save_image, save_label, Dims, LabelVolume};

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "volseg", version, about = "Multi-resolution 3D CNN segmentation toolkit")]
struct Cli {
    /// Worker threads for parallel kernels (0 = one per core). Outputs do
    /// not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (VSEG1 volumes + manifest.json).
    Phantom(PhantomArgs),
    /// Receptive fields, parameter counts and memory of an architecture.
    #[command(long_about = analyze::HELP)]
    Analyze(analyze::AnalyzeArgs),
    /// True vs realized training class distribution per sampling strategy.
    #[command(long_about = SAMPLE_STATS_HELP)]
    SampleStats(SampleStatsArgs),
    /// Train a network on a phantom dataset.
    #[command(long_about = TRAIN_HELP)]
    Train(TrainArgs),
    /// Segment a volume with a trained checkpoint.
    Predict(PredictArgs),
    /// Compare a predicted label volume against ground truth.
    #[command(long_about = EVALUATE_HELP)]
    Evaluate(EvaluateArgs),
}

/// Parses `64` or `64,64,48` into extents.
fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [v] => Ok([v; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected 1 or 3 comma-separated extents, got {s:?}")),
    }
}

fn out_dir(dir: &Path) -> AnyResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(dir.to_path_buf())
}

fn write_file(path: &Path, text: &str) -> AnyResult<()> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

#[derive(Args)]
struct PhantomArgs {
    /// Number of subjects.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Volume extent, `N` or `X,Y,Z`.
    #[arg(long, default_value = "64", value_parser = parse_dims)]
    size: Dims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target fraction of voxels inside the tumor, in (0, 0.2].
    #[arg(long, default_value_t = 0.05)]
    tumor_fraction: f64,
    /// Noise scale (Gaussian truncated at ±noise).
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, env = "VOLSEG_OUT", default_value = "volseg_out")]
    out_dir: PathBuf,
}

fn run_phantom(a: PhantomArgs) -> AnyResult<()> {
    let dir = out_dir(&a.out_dir)?;
    let cfg = PhantomConfig {
        size: a.size,
        tumor_fraction: a.tumor_fraction,
        noise_sigma: a.noise,
    };
    let m = make_phantom_dataset(&dir, a.n, a.seed, &cfg)?;
    println!("wrote {} subjects to {}", m.subjects.len(), dir.display());
    Ok(())
}

const SAMPLE_STATS_HELP: &str = "\
True vs realized training class distribution per sampling strategy.

Writes sample_stats.csv with columns
  class,true,fg_bg_balanced,uniform,equiprobable_classes
where `true` is the class fraction over all voxels of all subjects and each
strategy column is the class fraction over the voxels of the sampled
patches (zero padding beyond volume borders is not counted).";

#[derive(Args)]
struct SampleStatsArgs {
    /// Dataset directory; a fresh phantom is generated when omitted.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Phantom extent when no dataset is given.
    #[arg(long, default_value = "64", value_parser = parse_dims)]
    size: Dims,
    #[arg(long, default_value = "32", value_parser = parse_dims)]
    patch_size: Dims,
    #[arg(long, default_value_t = 1000)]
    n_patches: usize,
    #[arg(long, default_value_t = 0.5)]
    foreground_probability: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "VOLSEG_OUT", default_value = "volseg_out")]
    out_dir: PathBuf,
}

fn run_sample_stats(a: SampleStatsArgs) -> AnyResult<()> {
    let labels: Vec<LabelVolume> = match &a.data_dir {
        Some(d) => load_dataset(d)?.into_iter().map(|s| s.labels).collect(),
        None => vec![generate_phantom(a.seed, a.size, 0.05, 0.1)?.1],
    };
    let refs: Vec<&LabelVolume> = labels.iter().collect();
    let mut truth = [0u64; volseg::NUM_CLASSES];
    for l in &labels {
        for (t, c) in truth.iter_mut().zip(class_histogram(l).counts) {
            *t += c;
        }
    }
    let total: u64 = truth.iter().sum();
    let strategies = [Strategy::FgBgBalanced, Strategy::Uniform, Strategy::EquiprobableClasses];
    let mut columns = Vec::new();
    for strategy in strategies {
        let cfg = SamplerConfig {
            patch_size: a.patch_size,
            foreground_probability: a.foreground_probability,
            strategy,
            seed: a.seed,
        };
        columns.push(realized_training_distribution(&refs, &cfg, a.n_patches)?.fractions());
    }
    let mut csv = String::from("class,true,fg_bg_balanced,uniform,equiprobable_classes\n");
    for c in 0..volseg::NUM_CLASSES {
        csv.push_str(&format!("{c},{:.6}", truth[c] as f64 / total as f64));
        for col in &columns {
            csv.push_str(&format!(",{:.6}", col[c]));
        }
        csv.push('\n');
    }
    let dir = out_dir(&a.out_dir)?;
    write_file(&dir.join("sample_stats.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

const TRAIN_HELP: &str = "\
Train a network on a phantom dataset.

The dataset is split into training and validation subjects with the
configured ratio and seed; a single-subject dataset is used for training
only. Outputs in --out-dir:
  curves.csv      epoch,train_loss,val_loss,voxels (identical across
                  repeated runs with the same seed)
  timing.csv      epoch,seconds
  epoch_NNN.ckpt  checkpoint after every epoch (resumable with --resume)
  model.ckpt      final weights in inference mode
  split.json      subject ids of both sets

--config reads a JSON document {\"arch\", \"single_res\", \"filter_base\",
\"train\": {batch_size, patches_per_epoch, epochs, learning_rate, optimizer,
class_weights, seed, split_ratio, patch_size, foreground_probability,
validation_patches}}; command-line flags override it.";

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<ArchKind>,
    #[arg(long)]
    single_res: bool,
    #[arg(long)]
    filter_base: Option<usize>,
    #[arg(long, value_parser = parse_dims)]
    patch_size: Option<Dims>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patches_per_epoch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, env = "VOLSEG_OUT", default_value = "volseg_out")]
    out_dir: PathBuf,
    /// Continue from an epoch checkpoint of an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    arch: Option<ArchKind>,
    single_res: bool,
    filter_base: Option<usize>,
    train: TrainConfig,
}

fn model_graph(arch: ArchKind, single: bool, filter_base: usize) -> AnyResult<ArchitectureGraph> {
    let g = build_architecture(arch, filter_base)?;
    Ok(if single { single_resolution_variant(&g, arch)? } else { g })
}

fn run_train(a: TrainArgs) -> AnyResult<()> {
    let mut file = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str::<TrainFile>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => TrainFile::default(),
    };
    let c = &mut file.train;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.patch_size, c.patch_size);
    set!(a.batch_size, c.batch_size);
    set!(a.patches_per_epoch, c.patches_per_epoch);
    set!(a.epochs, c.epochs);
    set!(a.lr, c.learning_rate);
    set!(a.optimizer, c.optimizer);
    set!(a.split_ratio, c.split_ratio);
    set!(a.seed, c.seed);
    let arch = a.arch.or(file.arch).unwrap_or(ArchKind::Net3);
    let single = a.single_res || file.single_res;
    let filter_base = a.filter_base.or(file.filter_base).unwrap_or(8);
    let config = file.train;
    config.validate()?;

    let graph = model_graph(arch, single, filter_base)?;
    let net = Network::new(&graph)?;
    let subjects = load_dataset(&a.data_dir)?;
    let ids: Vec<usize> = (0..subjects.len()).collect();
    let (train_ids, val_ids) = if ids.len() == 1 {
        eprintln!("single subject: training without a validation set");
        (ids, Vec::new())
    } else {
        split_dataset(&ids, config.split_ratio, config.seed)?
    };
    let pick = |ids: &[usize]| ids.iter().map(|&i| subjects[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&train_ids), pick(&val_ids));

    let dir = out_dir(&a.out_dir)?;
    let split = serde_json::json!({
        "train": train_set.iter().map(|s| &s.id).collect::<Vec<_>>(),
        "validation": val_set.iter().map(|s| &s.id).collect::<Vec<_>>(),
    });
    write_file(&dir.join("split.json"), &(serde_json::to_string_pretty(&split)? + "\n"))?;
    let resume = a.resume.as_ref().map(load_checkpoint::<f32>).transpose()?;
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.clone()),
        resume,
        on_epoch: Some(Box::new(|r| {
            eprintln!(
                "epoch {:>4}  train {:.5}  val {}  {:.1}s",
                r.epoch,
                r.train_loss,
                r.val_loss.map_or("NA".into(), |v| format!("{v:.5}")),
                r.seconds
            )
        })),
    };
    let weights = init_weights::<f32>(&net, config.seed);
    let out = train(&net, weights, &train_set, &val_set, &config, opts)?;
    write_curves(&dir, &out.curves)?;
    let model = Checkpoint {
        graph,
        weights: out.weights.with_mode(Mode::Inference),
        step: out.steps,
        epoch: out.curves.epochs.len() as u64,
        extra: Vec::new(),
        meta: Default::default(),
    };
    save_checkpoint(dir.join("model.ckpt"), &model)?;
    println!("trained {} for {} epochs; outputs in {}", net.graph.name, model.epoch, dir.display());
    Ok(())
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// VSEG1 image volume.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "64", value_parser = parse_dims)]
    tile_size: Dims,
    /// Context voxels around each tile; use at least (rf - 1) / 2 for
    /// results identical to a whole-volume pass.
    #[arg(long, default_value_t = 0)]
    halo: usize,
    /// Output VSEG1 label volume.
    #[arg(long)]
    out: PathBuf,
    /// Optional VSEG1 volume of per-class probabilities.
    #[arg(long)]
    probabilities: Option<PathBuf>,
}

fn run_predict(a: PredictArgs) -> AnyResult<()> {
    let ck = load_checkpoint::<f32>(&a.checkpoint)?;
    let net = Network::new(&ck.graph)?;
    let img = load_image(&a.input)?;
    let seg = dense_segment(&net, &ck.weights, &img, a.tile_size, a.halo)?;
    save_label(&a.out, &seg.labels)?;
    if let Some(p) = &a.probabilities {
        save_image(p, &seg.probabilities)?;
    }
    let r = segment_report(&seg.labels);
    println!("class,voxels,components");
    for c in 0..r.voxels.len() {
        println!("{c},{},{}", r.voxels[c], r.components[c]);
    }
    Ok(())
}

const EVALUATE_HELP: &str = "\
Compare a predicted label volume against ground truth.

Writes evaluation.csv with columns
  section,name,dice,precision,recall,accuracy,predicted,truth,overlap
(one row per region whole/core/enhancing, one per class, and an overall
accuracy row; undefined ratios are written as NA) and evaluation.txt with
the same numbers as aligned text.";

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, env = "VOLSEG_OUT", default_value = "volseg_out")]
    out_dir: PathBuf,
}

fn run_evaluate(a: EvaluateArgs) -> AnyResult<()> {
    let report = region_report(&load_label(&a.pred)?, &load_label(&a.truth)?)?;
    let dir = out_dir(&a.out_dir)?;
    write_file(&dir.join("evaluation.csv"), &report.to_csv())?;
    let text = report.to_text();
    write_file(&dir.join("evaluation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = volseg::configure_workers(cli.workers) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Phantom(a) => run_phantom(a),
        Command::Analyze(a) => analyze::run(a),
        Command::SampleStats(a) => run_sample_stats(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Evaluate(a) => run_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
