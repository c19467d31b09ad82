use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mmgen_core::datapipe::{manifest_record, ResolutionMode, StagePlan};
use mmgen_core::diffusion::{source_conditions, Condition, DiffusionDecoder};
use mmgen_core::dualvitok::{evaluate, DualTokenizer, NoiseKind, NoiseSpec};
use mmgen_core::harness::ablation::{run_ablation, AblationAxis};
use mmgen_core::harness::config::{RunConfig, StageId};
use mmgen_core::harness::reconstruct::{divisible_dims, reconstruct_file};
use mmgen_core::harness::stages::{run_layout, run_stage};
use mmgen_core::harness::toydata::{parse_words, toy_dataset};
use mmgen_core::seqcodec::{parse, read_token_stream, serialize, write_token_stream, ImageTokenBlock, VocabLayout};
use mmgen_core::unilm::{FeatureTables, GenerationParams, UniLm};
use mmgen_core::Image;

#[derive(Parser)]
#[command(name = "mmgen", version, about = "Toy dual-tokenizer multimodal generator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a starter run configuration.
    Init {
        #[arg(long, default_value = "run.toml")]
        out: PathBuf,
        /// Output directory recorded in the configuration.
        #[arg(long, default_value = "runs/toy")]
        out_dir: PathBuf,
    },
    /// Run every stage listed in the configuration, skipping finished ones.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train, evaluate and ablate the dual-branch tokenizer
    #[command(subcommand)]
    Tok(TokCmd),
    /// Train the unified generator, sample images and edit them
    #[command(subcommand)]
    Lm(LmCmd),
    /// Train the token-conditioned decoder and decode at twice the size
    #[command(subcommand)]
    Diffusion(DiffusionCmd),
    /// Plan aspect-ratio crops and write data manifests
    #[command(subcommand)]
    Data(DataCmd),
    /// Inspect and validate token-stream files
    #[command(subcommand)]
    Seq(SeqCmd),
}

#[derive(Subcommand)]
enum TokCmd {
    /// Train the tokenizer stage.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a tokenizer checkpoint on held-out toy images or PNG files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG files to evaluate; toy images are used when none are given.
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 32)]
        toy: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train every variant along one design axis and print a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// quantizer_kind, codebook_dim, noise, width, dc_block, branch or input_mode.
        #[arg(long)]
        axis: String,
        /// Override the tokenizer training steps (for quick runs).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode, optionally perturb, and decode one PNG.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
    },
}

#[derive(Args)]
struct NoiseArgs {
    /// Perturb tokens before decoding.
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Random,
    Zero,
}

#[derive(Subcommand)]
enum LmCmd {
    /// Train the language-model stages (all of them unless one is named).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: Option<String>,
    },
    /// Generate an image from a caption.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Caption words, e.g. "red disc dark".
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long, default_value_t = 4)]
        sem_h: usize,
        #[arg(long, default_value_t = 4)]
        sem_w: usize,
        /// Token-stream output.
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// Decoded PNG output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Edit a PNG with an instruction.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "invert")]
        instruction: String,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = 2.0)]
    cfg: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplingArgs {
    fn params(&self, sem_h: usize, sem_w: usize) -> GenerationParams {
        GenerationParams {
            cfg_scale: self.cfg,
            temperature: self.temperature,
            top_k: self.top_k,
            sem_h,
            sem_w,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum DiffusionCmd {
    /// Train the diffusion stage.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode a token stream, or a tokenized PNG, at twice its source size.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Token-stream file holding one image block.
        #[arg(long, conflicts_with = "input", requires = "config")]
        tokens: Option<PathBuf>,
        /// Run configuration giving the token layout of `--tokens`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// PNG to tokenize and decode instead of a token stream.
        #[arg(long, required_unless_present = "tokens")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Print crop plans for images as newline-delimited JSON.
    Plan {
        /// PNG paths or literal WIDTHxHEIGHT sizes.
        items: Vec<String>,
        /// Resolution policy: fixed:SIZE or anyres:PIXELS.
        #[arg(long, conflicts_with = "budget")]
        mode: Option<String>,
        /// Pixel budget for aspect-preserving targets; short for --mode anyres:PIXELS.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, default_value_t = 8)]
        multiple: u32,
        /// Write the manifest here instead of standard output.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SeqCmd {
    /// Print a token-stream file one token per line.
    Dump {
        #[arg(long)]
        config: PathBuf,
        file: PathBuf,
    },
    /// Check that a token-stream file holds one well-formed image block.
    Check {
        #[arg(long)]
        config: PathBuf,
        file: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Command::Init { out, out_dir } => {
            std::fs::write(&out, RunConfig::toy(out_dir).to_toml()?)?;
            println!("wrote {}", out.display());
        }
        Command::Run { config } => {
            let cfg = RunConfig::from_file(&config)?;
            for &id in &cfg.stages {
                stage(&cfg, id)?;
            }
        }
        Command::Tok(c) => tok(c)?,
        Command::Lm(c) => lm(c)?,
        Command::Diffusion(c) => diffusion(c)?,
        Command::Data(c) => data(c)?,
        Command::Seq(c) => seq(c)?,
    }
    Ok(())
}

fn stage(cfg: &RunConfig, id: StageId) -> Result<()> {
    let out = run_stage(cfg, id)?;
    if out.resumed {
        eprintln!("{id}: already finished at {}", out.checkpoint.display());
    } else {
        for r in &out.metrics {
            println!("{}", serde_json::to_string(r)?);
        }
        eprintln!("{id}: wrote {}", out.checkpoint.display());
    }
    Ok(())
}

fn tok(c: TokCmd) -> Result<()> {
    match c {
        TokCmd::Train { config } => stage(&RunConfig::from_file(&config)?, StageId::Tokenizer)?,
        TokCmd::Eval {
            checkpoint,
            images,
            toy,
            size,
            seed,
        } => {
            let t = DualTokenizer::from_checkpoint(&checkpoint)?;
            let imgs: Vec<Image> = if images.is_empty() {
                toy_dataset(seed, toy, size, size).into_iter().map(|s| s.image).collect()
            } else {
                let m = t.config().multiple();
                images
                    .iter()
                    .map(|p| {
                        let img = Image::load_png(p)?;
                        let (h, w) = divisible_dims(img.height, img.width, m);
                        Ok(img.resize_bicubic(h, w))
                    })
                    .collect::<Result<_>>()?
            };
            // Mixed sizes cannot share a batch.
            let report = evaluate(&t, &imgs, if images.is_empty() { 8 } else { 1 })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        TokCmd::Ablate {
            config,
            axis,
            steps,
            out,
        } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(s) = steps {
                cfg.tokenizer_train.steps = s;
            }
            let table = run_ablation(&cfg, axis.parse::<AblationAxis>()?)?;
            let text = serde_json::to_string_pretty(&table)?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
        }
        TokCmd::Reconstruct {
            checkpoint,
            input,
            output,
            noise,
        } => {
            let t = DualTokenizer::from_checkpoint(&checkpoint)?;
            let spec = noise
                .noise
                .map(|k| {
                    let kind = match k {
                        NoiseArg::Random => NoiseKind::Random,
                        NoiseArg::Zero => NoiseKind::Zero,
                    };
                    NoiseSpec::new(kind, noise.alpha, noise.beta)
                })
                .transpose()?;
            let rec = reconstruct_file(&t, &input, &output, spec.as_ref().map(|s| (s, noise.noise_seed)))
                .with_context(|| format!("reconstructing {}", input.display()))?;
            println!("{}", serde_json::to_string(&rec)?);
        }
    }
    Ok(())
}

fn load_lm(checkpoint: &Path, tokenizer: &Path) -> Result<(UniLm, DualTokenizer)> {
    let t = DualTokenizer::from_checkpoint(tokenizer)?;
    let mut m = UniLm::from_checkpoint(checkpoint)?;
    m.set_feature_tables(FeatureTables::from_tokenizer(&t)?);
    Ok((m, t))
}

fn lm(c: LmCmd) -> Result<()> {
    match c {
        LmCmd::Train { config, stage: only } => {
            let cfg = RunConfig::from_file(&config)?;
            let ids: Vec<StageId> = match only {
                Some(s) => vec![s.parse()?],
                None => cfg.stages.iter().copied().filter(|s| s.is_lm()).collect(),
            };
            for id in ids {
                if !id.is_lm() {
                    bail!("{id} is not a language-model stage");
                }
                stage(&cfg, id)?;
            }
        }
        LmCmd::Generate {
            checkpoint,
            tokenizer,
            prompt,
            sampling,
            sem_h,
            sem_w,
            tokens,
            out,
        } => {
            let (m, t) = load_lm(&checkpoint, &tokenizer)?;
            let block = m.generate_image(&parse_words(&prompt)?, &sampling.params(sem_h, sem_w))?;
            let layout = *m.layout();
            if let Some(p) = tokens {
                write_token_stream(BufWriter::new(File::create(&p)?), layout.hash(), &serialize(&block, &layout)?)?;
            }
            if let Some(p) = out {
                t.decode_block(&block)?.save_png(&p)?;
            }
            println!(
                "{}",
                serde_json::json!({ "sem_dims": block.sem_dims(), "pix_dims": block.pix_dims() })
            );
        }
        LmCmd::Edit {
            checkpoint,
            tokenizer,
            input,
            instruction,
            sampling,
            out,
        } => {
            let (m, t) = load_lm(&checkpoint, &tokenizer)?;
            let img = Image::load_png(&input)?;
            let (h, w) = divisible_dims(img.height, img.width, t.config().multiple());
            let src = t.encode(&img.resize_bicubic(h, w))?;
            let block = m.edit_image(&src, &parse_words(&instruction)?, &sampling.params(0, 0))?;
            t.decode_block(&block)?.resize_bicubic(img.height, img.width).save_png(&out)?;
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn diffusion(c: DiffusionCmd) -> Result<()> {
    match c {
        DiffusionCmd::Train { config } => stage(&RunConfig::from_file(&config)?, StageId::Diffusion)?,
        DiffusionCmd::Decode {
            checkpoint,
            tokenizer,
            tokens,
            config,
            input,
            out,
            seed,
        } => {
            let t = DualTokenizer::from_checkpoint(&tokenizer)?;
            let cfg = DiffusionDecoder::config_from_checkpoint(&checkpoint)?;
            let d = DiffusionDecoder::new(cfg, &t, 0)?;
            d.load(&checkpoint, false)?;
            let cond = match (tokens, input) {
                (Some(file), _) => {
                    let layout = run_layout(&RunConfig::from_file(&config.context("--tokens needs --config")?)?)?;
                    let block = read_block(&file, &layout)?;
                    Condition::new(block.sem_indices, block.pix_indices)
                }
                (None, Some(input)) => {
                    // The decoder conditions on tokens of a half-size source, so
                    // the input is treated as the high-resolution frame of reference.
                    let img = Image::load_png(&input)?;
                    let (h, w) = divisible_dims(img.height, img.width, t.config().multiple());
                    let big = img.resize_bicubic(2 * h, 2 * w);
                    source_conditions(&t, std::slice::from_ref(&big))?.remove(0)
                }
                (None, None) => bail!("give --tokens or --input"),
            };
            let result = d.sample(&cond, seed)?;
            result.save_png(&out)?;
            println!("{}", serde_json::json!({ "height": result.height, "width": result.width }));
        }
    }
    Ok(())
}

/// Reads a token-stream file and parses its single image block.
fn read_block(file: &Path, layout: &VocabLayout) -> Result<ImageTokenBlock> {
    let (hash, tokens) = read_token_stream(BufReader::new(File::open(file)?))?;
    if hash != layout.hash() {
        bail!(
            "stream was written for layout {hash:08x}, configuration gives {:08x}",
            layout.hash()
        );
    }
    parse(&tokens, layout).map_err(|e| anyhow::anyhow!("{}: {e}", file.display()))
}

fn parse_mode(s: &str) -> Result<ResolutionMode> {
    let (kind, value) = s.split_once(':').context("mode must look like fixed:SIZE or anyres:PIXELS")?;
    Ok(match kind {
        "fixed" => ResolutionMode::Fixed { size: value.parse()? },
        "anyres" => ResolutionMode::Anyres { budget: value.parse()? },
        other => bail!("unknown resolution mode {other:?}"),
    })
}

fn item_dims(item: &str) -> Result<(u32, u32)> {
    if let Some((w, h)) = item.split_once('x') {
        if let (Ok(w), Ok(h)) = (w.parse(), h.parse()) {
            return Ok((w, h));
        }
    }
    image::image_dimensions(item).with_context(|| format!("reading dimensions of {item}"))
}

fn data(c: DataCmd) -> Result<()> {
    let DataCmd::Plan {
        items,
        mode,
        budget,
        multiple,
        manifest,
    } = c;
    let mode = match (mode, budget) {
        (Some(m), _) => Some(parse_mode(&m)?),
        (None, Some(b)) => Some(ResolutionMode::Anyres { budget: b }),
        (None, None) => None,
    };
    let plan = mode.map(|mode| StagePlan {
        id: "plan".into(),
        mode,
        trainable: Vec::new(),
    });
    let mut w: Box<dyn Write> = match &manifest {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for item in &items {
        let (width, height) = item_dims(item)?;
        let rec = manifest_record(item, width, height, plan.as_ref().map(|p| (p, multiple)))?;
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(())
}

fn seq(c: SeqCmd) -> Result<()> {
    let (config, file, check) = match c {
        SeqCmd::Dump { config, file } => (config, file, false),
        SeqCmd::Check { config, file } => (config, file, true),
    };
    let layout = run_layout(&RunConfig::from_file(&config)?)?;
    if check {
        let block = read_block(&file, &layout)?;
        println!(
            "{}",
            serde_json::json!({ "ok": true, "sem_dims": block.sem_dims(), "pix_dims": block.pix_dims() })
        );
        return Ok(());
    }
    let (hash, tokens) = read_token_stream(BufReader::new(File::open(&file)?))?;
    if hash != layout.hash() {
        bail!(
            "stream was written for layout {hash:08x}, configuration gives {:08x}",
            layout.hash()
        );
    }
    for (i, &t) in tokens.iter().enumerate() {
        println!("{i}\t{t}\t{}", layout.describe(t));
    }
    Ok(())
}
