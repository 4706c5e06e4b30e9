//! `salg` — batch command-line surface for the SALG backbone: region
//! segmentation maps, forward passes, gradient checks, parameter counts and
//! toy training.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or I/O error.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use salg_core::backbone::{count_params, param_breakdown, Model};
use salg_core::config::ModelConfig;
use salg_core::image;
use salg_core::oracle::numeric_grad;
use salg_core::segmentation::region_map_pgm;
use salg_core::tensor::{
    finite_diff_check, load_checkpoint, save_checkpoint, CoordinateSample, Graph, ParamStore,
    Value,
};
use salg_core::train::{argmax, random_image, synthetic_shapes, toy_train, LabeledImage, TrainSettings};

#[derive(Parser)]
#[command(name = "salg", about = "Semantic-aware local-global vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: st, t, s, or micro.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Override the propagation mode (msa | ap | none).
    #[arg(long)]
    propagation: Option<String>,
    /// Override semantic segmentation (true | false).
    #[arg(long)]
    segmentation: Option<bool>,
    /// Override the square input size in pixels.
    #[arg(long)]
    input_size: Option<usize>,
    /// Override the number of classes.
    #[arg(long)]
    num_classes: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ModelConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ModelConfig::from_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            (None, Some(name)) if name.eq_ignore_ascii_case("micro") => ModelConfig::micro(),
            (None, Some(name)) => ModelConfig::preset(name)?,
            (None, None) => bail!("pass --config PATH or --preset NAME"),
            (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        };
        if let Some(p) = &self.propagation {
            cfg.propagation = p.parse()?;
        }
        if let Some(s) = self.segmentation {
            cfg.segmentation = s;
        }
        if let Some(n) = self.input_size {
            cfg.input_size = n;
        }
        if let Some(n) = self.num_classes {
            cfg.num_classes = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Segment an image and write the region map as a PGM file.
    Segment {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input image (binary PPM, P6).
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// SALG stage to visualize (0, 1 or 2).
        #[arg(long, default_value_t = 0)]
        stage: usize,
        /// Output PGM path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Weight initialization seed (ignored with --checkpoint).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Load weights from a checkpoint instead of random init.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Print the learnable parameter count of a configuration.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference gradient check over all parameters.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Pass/fail threshold on the max relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train on a directory of class-labeled PPM images.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root: one subdirectory per class, PPM files inside.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 20)]
        batch_size: usize,
        /// Curve CSV output path (rows: epoch,loss,train_acc).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Final checkpoint path.
        #[arg(long, value_name = "PATH", default_value = "salg-checkpoint.bin")]
        checkpoint_out: PathBuf,
    },
    /// Run a forward pass and print the top logits.
    Forward {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// How many top classes to print.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Write a synthetic shape/color dataset as PPM files (test fixture).
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 112)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    salg_core::par::configure_threads_from_env();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn build_model(
    cfg: &ModelConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> anyhow::Result<(Model, ParamStore)> {
    let (model, mut store) = Model::init(cfg, seed)?;
    if let Some(path) = checkpoint {
        let file = std::fs::File::open(path)
            .with_context(|| format!("opening checkpoint {}", path.display()))?;
        load_checkpoint(&mut store, std::io::BufReader::new(file))?;
    }
    Ok((model, store))
}

fn run(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Segment { config, image: image_path, stage, out, seed, checkpoint } => {
            let cfg = config.resolve()?;
            if stage > 2 {
                bail!("--stage must be 0, 1 or 2");
            }
            let img = image::read_ppm_file(&image_path)
                .with_context(|| format!("reading {}", image_path.display()))?;
            let (model, store) = build_model(&cfg, seed, checkpoint.as_deref())?;
            let assignment = model.segment(&store, &img.to_tensor(), stage)?;
            let upscale = 4 << stage;
            std::fs::write(&out, region_map_pgm(&assignment, upscale))
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "stage {stage}: {} regions ({} in use) over {}x{} tokens -> {}",
                assignment.regions(),
                assignment.distinct_used(),
                assignment.valid_height,
                assignment.valid_width,
                out.display()
            );
            Ok(0)
        }
        Command::Params { config } => {
            let cfg = config.resolve()?;
            let total = count_params(&cfg)?;
            let (_, store) = Model::init(&cfg, 0)?;
            println!("total parameters: {total} ({:.1}M)", total as f64 / 1e6);
            for (group, count) in param_breakdown(&store) {
                println!("  {group:<10} {count:>12}");
            }
            Ok(0)
        }
        Command::Gradcheck { config, seed, samples, tolerance } => {
            let cfg = config.resolve()?;
            let tokens = (cfg.input_size / 4) * (cfg.input_size / 4);
            if tokens > 1024 {
                bail!(
                    "gradcheck needs a micro-scale config: {} stage-1 tokens exceed 1024 \
                     (use --input-size 32)",
                    tokens
                );
            }
            let (model, mut store) = Model::init(&cfg, seed)?;
            let image = random_image(cfg.input_size, seed ^ 0x5a17);
            let build = |g: &mut Graph, store: &ParamStore| -> salg_core::Result<Value> {
                let fwd = model.forward(g, store, &image)?;
                let sq = g.mul(fwd.logits, fwd.logits)?;
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            };
            let report = finite_diff_check(
                &mut store,
                build,
                1e-5,
                CoordinateSample::PerParam { count: samples, seed },
            )?;
            println!(
                "finite_diff_check: max rel err {:.3e} over {} coordinates",
                report.max_rel_err, report.coords_checked
            );
            println!(
                "worst parameter: {} [{}] analytic {:.6e} numeric {:.6e}",
                report.worst_param, report.worst_coord, report.worst_analytic, report.worst_numeric
            );
            let oracle = numeric_grad(&mut store, build, 1e-5, tolerance, Some(samples), seed ^ 1)?;
            println!(
                "numeric_grad oracle: max rel err {:.3e} ({} mismatches)",
                oracle.max_rel_err,
                oracle.mismatches.len()
            );
            if report.max_rel_err < tolerance && oracle.mismatches.is_empty() {
                println!("PASS (< {tolerance:.1e})");
                Ok(0)
            } else {
                println!("FAIL (>= {tolerance:.1e})");
                Ok(1)
            }
        }
        Command::Train {
            config,
            data,
            epochs,
            seed,
            lr,
            momentum,
            batch_size,
            out,
            checkpoint_out,
        } => {
            let cfg = config.resolve()?;
            let dataset = load_dataset(&data, cfg.input_size, cfg.num_classes)?;
            let (model, mut store) = Model::init(&cfg, seed)?;
            let settings = TrainSettings {
                epochs,
                learning_rate: lr,
                momentum,
                batch_size,
                stop_at_accuracy: None,
            };
            let curve = toy_train(&model, &mut store, &dataset, &settings, seed)?;
            let mut csv = String::new();
            for r in &curve {
                csv.push_str(&format!("{},{:.6},{:.4}\n", r.epoch, r.loss, r.accuracy));
            }
            std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            let file = std::fs::File::create(&checkpoint_out)
                .with_context(|| format!("writing {}", checkpoint_out.display()))?;
            save_checkpoint(&store, std::io::BufWriter::new(file))?;
            let last = curve.last().expect("at least one epoch");
            println!(
                "trained {} examples for {} epochs: loss {:.4}, accuracy {:.2}% -> {}, {}",
                dataset.len(),
                curve.len(),
                last.loss,
                100.0 * last.accuracy,
                out.display(),
                checkpoint_out.display()
            );
            Ok(0)
        }
        Command::Forward { config, image: image_path, seed, checkpoint, top } => {
            let cfg = config.resolve()?;
            let img = image::read_ppm_file(&image_path)
                .with_context(|| format!("reading {}", image_path.display()))?;
            let (model, store) = build_model(&cfg, seed, checkpoint.as_deref())?;
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &store, &img.to_tensor())?;
            let logits = g.data(fwd.logits).data().to_vec();
            let mut ranked: Vec<usize> = (0..logits.len()).collect();
            ranked.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).expect("finite logits"));
            println!("prediction: class {}", argmax(&logits));
            for &i in ranked.iter().take(top.min(logits.len())) {
                println!("  class {i:>4}: {:+.6}", logits[i]);
            }
            Ok(0)
        }
        Command::Synth { out, classes, per_class, size, seed } => {
            let data = synthetic_shapes(classes, per_class, size, seed);
            for (i, ex) in data.iter().enumerate() {
                let dir = out.join(format!("class{:02}", ex.label));
                std::fs::create_dir_all(&dir)?;
                let img = image::ImageFile {
                    width: size,
                    height: size,
                    pixels: ex.image.data().to_vec(),
                };
                image::write_ppm_file(&dir.join(format!("{i:05}.ppm")), &img)?;
            }
            println!("wrote {} images under {}", data.len(), out.display());
            Ok(0)
        }
    }
}

/// Loads `root/<class>/*.ppm`, one label per subdirectory (sorted order).
fn load_dataset(root: &Path, size: usize, num_classes: usize) -> anyhow::Result<Vec<LabeledImage>> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading dataset dir {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        bail!("dataset {} has no class subdirectories", root.display());
    }
    if class_dirs.len() > num_classes {
        bail!(
            "dataset has {} classes but the config only allows {num_classes}",
            class_dirs.len()
        );
    }
    let mut out = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        files.sort();
        for f in files {
            let img = image::read_ppm_file(&f)
                .with_context(|| format!("reading {}", f.display()))?;
            if img.width != size || img.height != size {
                bail!(
                    "{}: {}x{} does not match configured input {size}x{size}",
                    f.display(),
                    img.width,
                    img.height
                );
            }
            out.push(LabeledImage { image: img.to_tensor(), label });
        }
    }
    if out.is_empty() {
        bail!("dataset {} contains no .ppm files", root.display());
    }
    Ok(out)
}
