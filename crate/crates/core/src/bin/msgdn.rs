use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use msgdn::alloc::{allocate_with, AllocateOptions, AllocationPlan, BudgetMode, CandidateSet};
use msgdn::data::codec::{stub_decode_file, stub_encode_file};
use msgdn::data::{build_manifest, CodecSpec, DatasetManifest};
use msgdn::eval::{self, PsnrMode};
use msgdn::exec::{self, Mode};
use msgdn::model::{InitOptions, ModelConfig, Msgdn};
use msgdn::train::{self, TrainPlan};

#[derive(Parser)]
#[command(name = "msgdn", version, about = "Post-processing network for codec-compressed images")]
struct Cli {
    /// Run every data-parallel kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Code every PNG in a directory at each QP and write a dataset manifest.
    Prepare {
        #[arg(long)]
        images: PathBuf,
        /// Comma-separated QPs.
        #[arg(long, value_delimiter = ',', required = true)]
        qps: Vec<i32>,
        /// Codec config (TOML with encode/decode command templates).
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate bits and PSNR of every manifest pair for the allocator.
    Candidates {
        #[arg(long)]
        manifest: PathBuf,
        /// Also measure PSNR after post-processing with this model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        psnr: PsnrArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose one QP per image to meet a rate target.
    Allocate {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        target_bpp: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "mean")]
        budget: Budget,
        /// Candidate column holding the quality to maximise.
        #[arg(long, default_value = "quality_db")]
        quality_column: String,
    },
    /// Train the generator according to a plan.
    Train {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Post-process one PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// PSNR and bpp of the plan-selected images, with and without post-processing.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        psnr: PsnrArgs,
        /// Per-image CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also write the RD table here.
        #[arg(long)]
        rd_csv: Option<PathBuf>,
        /// Also write the RD plot (SVG) here.
        #[arg(long)]
        rd_plot: Option<PathBuf>,
        /// Prefix for the RD curve labels.
        #[arg(long, default_value = "")]
        label: String,
    },
    /// Merge RD tables and draw them.
    RdPlot {
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_plot: PathBuf,
    },
    /// Write a freshly initialised generator.
    Init {
        /// Model config TOML; defaults to the standard architecture.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// The bundled stub codec.
    StubCodec {
        #[command(subcommand)]
        op: StubOp,
    },
}

#[derive(Subcommand)]
enum StubOp {
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        qp: i32,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
    },
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a codec config that runs this executable's stub codec.
    Config {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PsnrArgs {
    /// Measure PSNR on luma instead of RGB.
    #[arg(long)]
    y_psnr: bool,
}

impl PsnrArgs {
    fn mode(&self) -> PsnrMode {
        if self.y_psnr {
            PsnrMode::Y
        } else {
            PsnrMode::Rgb
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Budget {
    Mean,
    Total,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Option<PathBuf>) -> Result<Option<Msgdn>> {
    Ok(match path {
        Some(p) => Some(Msgdn::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mode = if cli.sequential { Mode::Sequential } else { exec::default_mode() };
    if let Err(e) = exec::with_mode(mode, || dispatch(cli.cmd)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Prepare { images, qps, codec, out } => {
            let spec = CodecSpec::load(&codec)?;
            let m = build_manifest(&images, &qps, &spec, &out)?;
            println!(
                "{} pairs, {} failures -> {}",
                m.pairs.len(),
                m.failures.len(),
                out.display()
            );
        }
        Cmd::Candidates {
            manifest,
            checkpoint,
            psnr,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let model = load_model(&checkpoint)?;
            write(&out, &eval::candidates_csv(&m, model.as_ref(), psnr.mode())?)?;
        }
        Cmd::Allocate {
            candidates,
            target_bpp,
            out,
            budget,
            quality_column,
        } => {
            let set = CandidateSet::read_csv(&candidates, &quality_column)?;
            let opts = AllocateOptions {
                mode: match budget {
                    Budget::Mean => BudgetMode::Mean,
                    Budget::Total => BudgetMode::Total,
                },
                ..Default::default()
            };
            let plan = allocate_with(&set, target_bpp, opts)?;
            write(&out, &plan.to_csv(&set)?)?;
            println!(
                "{} images: mean bpp {:.6}, mean quality {:.4} dB",
                plan.choices.len(),
                plan.mean_bpp,
                plan.mean_quality_db
            );
        }
        Cmd::Train {
            plan,
            manifest,
            out,
            resume,
        } => {
            let p = TrainPlan::load(&plan)?;
            let m = DatasetManifest::load(&manifest)?;
            let ck = train::run(&p, &m, &out, resume)?;
            println!(
                "trained {} epochs / {} steps -> {}",
                ck.progress.epochs_done,
                ck.progress.global_step,
                out.display()
            );
        }
        Cmd::Infer {
            checkpoint,
            input,
            output,
        } => eval::infer_with_checkpoint(&checkpoint, &input, &output)?,
        Cmd::Evaluate {
            manifest,
            plan,
            checkpoint,
            psnr,
            out,
            rd_csv,
            rd_plot,
            label,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let p = AllocationPlan::load(&plan)?;
            let model = load_model(&checkpoint)?;
            let report = eval::evaluate(&m, model.as_ref(), &p, psnr.mode(), &label)?;
            write(&out, &report.to_csv())?;
            for pt in report.points() {
                println!("{}: {:.6} bpp, {:.4} dB over {} images", pt.label, pt.bpp, pt.psnr_db, pt.n_images);
            }
            match (rd_csv, rd_plot) {
                (Some(c), Some(s)) => eval::emit_rd(&report.points(), &c, &s)?,
                (None, None) => {}
                _ => bail!("--rd-csv and --rd-plot go together"),
            }
        }
        Cmd::RdPlot {
            inputs,
            out_csv,
            out_plot,
        } => {
            let mut points = Vec::new();
            for p in &inputs {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                points.extend(eval::parse_rd_csv(&text)?);
            }
            eval::emit_rd(&points, &out_csv, &out_plot)?;
        }
        Cmd::Init { config, seed, out } => {
            let cfg: ModelConfig = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => ModelConfig::default(),
            };
            let net = Msgdn::init(cfg, seed, InitOptions::default())?;
            net.save(&out)?;
            println!("{} parameters -> {}", net.config.param_count(), out.display());
        }
        Cmd::StubCodec { op } => match op {
            StubOp::Encode {
                input,
                output,
                qp,
                width,
                height,
            } => stub_encode_file(&input, &output, width, height, qp)?,
            StubOp::Decode { input, output } => stub_decode_file(&input, &output)?,
            StubOp::Config { out } => {
                let exe = std::env::current_exe().context("locating this executable")?;
                write(&out, &CodecSpec::stub(&exe).to_toml())?;
            }
        },
    }
    Ok(())
}
