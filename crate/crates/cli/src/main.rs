use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use segmote_core::decoder::{expert_attention_maps, write_grid_csv, write_pgm};
use segmote_core::harness::checkpoint;
use segmote_core::harness::data::{eval_batch, Prepared};
use segmote_core::harness::gradcheck::{grad_check_model, GroupStatus, Probes, TOLERANCE};
use segmote_core::harness::stats::{dominant_share, route_stats};
use segmote_core::harness::train::{evaluate, train};
use segmote_core::harness::{count_params, SegMote, TrainConfig};
use segmote_core::nn::Ctx;
use segmote_core::synth::{Corpus, CorpusSpec, PromptKind};
use segmote_core::{DType, Scalar, Tape};

#[derive(Parser)]
#[command(name = "segmote", about = "Token-expert mask decoder on synthetic multi-modality data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prompt {
    Point,
    Box,
    Mask,
    None,
}

impl From<Prompt> for PromptKind {
    fn from(p: Prompt) -> Self {
        match p {
            Prompt::Point => PromptKind::Point,
            Prompt::Box => PromptKind::Box,
            Prompt::Mask => PromptKind::Mask,
            Prompt::None => PromptKind::None,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus on disk.
    GenData {
        #[arg(long, default_value_t = 4)]
        modalities: usize,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0.9)]
        split: f64,
        /// Label each shape with its own class.
        #[arg(long)]
        multiclass: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the checkpoint and reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice per modality on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Prompt::Box)]
        prompt: Prompt,
    },
    /// Winner-token histograms per modality.
    RouteStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        prompt: Option<Prompt>,
        /// Also write routes.csv and winners.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter counts per module.
    Params {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of the training objective.
    GradCheck {
        /// Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random unit directions per group and batch.
        #[arg(long, default_value_t = 2)]
        directions: usize,
        /// Largest-gradient coordinates per tensor and batch.
        #[arg(long, default_value_t = 1)]
        top: usize,
    },
    /// Export expert-token attention maps of test images.
    AttnMaps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        limit: usize,
        #[arg(long, value_enum)]
        prompt: Option<Prompt>,
    },
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::read(dir).with_context(|| format!("reading corpus {}", dir.display()))
}

fn default_prompt(cfg: &TrainConfig) -> PromptKind {
    segmote_core::harness::train::eval_prompt(cfg)
}

fn run_train<T: Scalar>(cfg: TrainConfig, out: &Path) -> Result<()> {
    let corpus = match &cfg.data {
        Some(d) => load_corpus(d)?,
        None => Corpus::generate(cfg.corpus.clone())?,
    };
    let mut cfg = cfg;
    cfg.corpus = corpus.spec.clone();
    std::fs::create_dir_all(out)?;
    let (model, report) = train::<T>(cfg, &corpus, |l| println!("{l}"))?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    report.write(out)?;
    println!("test dice ({}) {:.4}", report.eval.prompt.name(), report.eval.overall);
    for (m, n, d) in &report.eval.per_modality {
        println!("  modality {m}: {d:.4} over {n} samples");
    }
    println!("token mutual information {:.4} bits", report.routes.token_mi_bits);
    println!("wall clock {:.1} s", report.wall_clock_secs);
    Ok(())
}

fn run_eval<T: Scalar>(bytes: &[u8], data: &Path, prompt: PromptKind) -> Result<()> {
    let model = checkpoint::from_bytes::<T>(bytes)?;
    let corpus = load_corpus(data)?;
    let prep = Prepared::new(&model, &corpus)?;
    let r = evaluate(&model, &corpus, &prep, false, prompt)?;
    println!("prompt {}", prompt.name());
    for (m, n, d) in &r.per_modality {
        println!("modality {m}: dice {d:.6} over {n} samples");
    }
    println!("overall: dice {:.6} over {} samples", r.overall, r.samples.len());
    Ok(())
}

fn run_route_stats<T: Scalar>(bytes: &[u8], data: &Path, prompt: Option<PromptKind>, out: Option<&Path>) -> Result<()> {
    let model = checkpoint::from_bytes::<T>(bytes)?;
    let corpus = load_corpus(data)?;
    let prep = Prepared::new(&model, &corpus)?;
    let kind = prompt.unwrap_or_else(|| default_prompt(&model.config));
    let r = evaluate(&model, &corpus, &prep, false, kind)?;
    let stats = route_stats(&r.samples, corpus.spec.modalities, model.config.num_expert_tokens, model.config.mote.num_experts);
    print!("{}", stats.winners_csv());
    print!("{}", stats.experts_csv());
    print!("{}", stats.assignments_csv());
    for (m, s) in dominant_share(&stats.token_hist).iter().enumerate() {
        println!("modality {m}: dominant winner-token share {s:.3}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("winners.csv"), stats.winners_csv())?;
        std::fs::write(dir.join("experts.csv"), stats.experts_csv())?;
        std::fs::write(dir.join("assignments.csv"), stats.assignments_csv())?;
        let mut routes = String::from(segmote_core::mote::ROUTE_CSV_HEADER);
        routes.push('\n');
        for rec in r.route_records() {
            routes.push_str(&rec.csv_row());
            routes.push('\n');
        }
        std::fs::write(dir.join("routes.csv"), routes)?;
    }
    Ok(())
}

fn print_params<T: Scalar>(model: &SegMote<T>) {
    let c = count_params(model);
    for (g, n) in &c.groups {
        println!("{g:<14} {n:>10}");
    }
    println!("{:<14} {:>10}", "trainable", c.trainable_total);
    println!("{:<14} {:>10} (frozen)", "encoder", c.frozen_encoder);
}

fn run_attn_maps<T: Scalar>(bytes: &[u8], data: &Path, out: &Path, limit: usize, prompt: Option<PromptKind>) -> Result<()> {
    let model = checkpoint::from_bytes::<T>(bytes)?;
    let corpus = load_corpus(data)?;
    let prep = Prepared::new(&model, &corpus)?;
    let kind = prompt.unwrap_or_else(|| default_prompt(&model.config));
    let idx: Vec<usize> = corpus.split(false).into_iter().take(limit).collect();
    std::fs::create_dir_all(out)?;
    let g = model.grid();
    let mut index = String::from("sample_id,modality,winner_token,expert_token,pgm,csv\n");
    for &i in &idx {
        let input = eval_batch(&model, &corpus, &prep, &[i], kind)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.store, false);
        let fwd = model.forward(&mut ctx, &input, None)?;
        let maps = expert_attention_maps(tape.value(fwd.attention), model.config.heads, &fwd.layout, 0);
        let id = corpus.entries[i].id;
        for (t, map) in maps.iter().enumerate() {
            let stem = format!("sample{id}_token{t}");
            write_pgm(&out.join(format!("{stem}.pgm")), map, g, g)?;
            write_grid_csv(&out.join(format!("{stem}.csv")), map, g)?;
            index.push_str(&format!("{id},{},{},{t},{stem}.pgm,{stem}.csv\n", corpus.entries[i].modality, fwd.winner[0]));
        }
    }
    std::fs::write(out.join("index.csv"), index)?;
    println!("wrote maps for {} samples to {}", idx.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData { modalities, samples, seed, image_size, split, multiclass, out } => {
            let spec = CorpusSpec {
                modalities,
                samples_per_modality: samples,
                split_ratio: split,
                seed,
                image_size,
                multiclass,
                ..CorpusSpec::default()
            };
            let corpus = Corpus::generate(spec)?;
            corpus.write(&out)?;
            let train = corpus.split(true).len();
            println!("wrote {} train and {} test samples to {}", train, corpus.entries.len() - train, out.display());
        }
        Cmd::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            match cfg.dtype {
                DType::F32 => run_train::<f32>(cfg, &out)?,
                DType::F64 => run_train::<f64>(cfg, &out)?,
            }
        }
        Cmd::Eval { ckpt, data, prompt } => {
            let bytes = std::fs::read(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            match checkpoint::stored_dtype(&bytes)? {
                DType::F32 => run_eval::<f32>(&bytes, &data, prompt.into())?,
                DType::F64 => run_eval::<f64>(&bytes, &data, prompt.into())?,
            }
        }
        Cmd::RouteStats { ckpt, data, prompt, out } => {
            let bytes = std::fs::read(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let p = prompt.map(PromptKind::from);
            match checkpoint::stored_dtype(&bytes)? {
                DType::F32 => run_route_stats::<f32>(&bytes, &data, p, out.as_deref())?,
                DType::F64 => run_route_stats::<f64>(&bytes, &data, p, out.as_deref())?,
            }
        }
        Cmd::Params { ckpt, config } => match (ckpt, config) {
            (Some(ckpt), _) => {
                let bytes = std::fs::read(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
                match checkpoint::stored_dtype(&bytes)? {
                    DType::F32 => print_params(&checkpoint::from_bytes::<f32>(&bytes)?),
                    DType::F64 => print_params(&checkpoint::from_bytes::<f64>(&bytes)?),
                }
            }
            (None, Some(config)) => print_params(&SegMote::<f32>::new(TrainConfig::load(&config)?)?),
            (None, None) => bail!("pass --ckpt or --config"),
        },
        Cmd::GradCheck { config, directions, top } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let report = grad_check_model(&cfg, Probes { directions, top_per_tensor: top })?;
            let mut ok = true;
            for g in &report.groups {
                match g.status {
                    GroupStatus::NoGradient => println!("{:<28} no gradient (frozen)", g.group),
                    GroupStatus::Checked { probes, max_rel_error } => {
                        let pass = max_rel_error < TOLERANCE;
                        ok &= pass;
                        println!(
                            "{:<28} {:>3} probes  max rel error {:.3e}  {}",
                            g.group,
                            probes,
                            max_rel_error,
                            if pass { "ok" } else { "FAIL" }
                        );
                    }
                }
            }
            println!("overall max rel error {:.3e}", report.max_error());
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::AttnMaps { ckpt, data, out, limit, prompt } => {
            let bytes = std::fs::read(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let p = prompt.map(PromptKind::from);
            match checkpoint::stored_dtype(&bytes)? {
                DType::F32 => run_attn_maps::<f32>(&bytes, &data, &out, limit, p)?,
                DType::F64 => run_attn_maps::<f64>(&bytes, &data, &out, limit, p)?,
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
