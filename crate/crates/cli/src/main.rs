use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use cdmm_core::aggregation::EmbeddingProvider;
use cdmm_core::data::{generate_synthetic_domains, write_dataset, TextVariant};
use cdmm_core::exec::ExecMode;
use cdmm_core::harness::{
    checkpoint, evaluate_novel, fine_tune, infer_novel, meta_train, record_eval, run_ablation, AblationKind, Metrics,
    RunConfig, Workspace,
};
use cdmm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cdmm", version, about = "Cross-domain multi-modal few-shot detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic base/novel datasets, registries, vocabulary,
    /// embeddings and a config that points at them.
    GenSynth(Common),
    /// Meta-train on base episodes and write a checkpoint.
    MetaTrain(Common),
    /// Fine-tune a checkpoint on the k-shot novel pool.
    FineTune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Novel-class mAP of a checkpoint on the held-out images, as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one ablation over the configured seeds and write a CSV table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// modules, text-variants, shared-vs-decoupled or modality-only.
        #[arg(long)]
        kind: String,
    },
    /// Detections above the score threshold on the held-out novel images,
    /// one JSON object per line.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    lambda_rectify: Option<f64>,
    /// Class description file replacing the configured one.
    #[arg(long)]
    text_registry: Option<PathBuf>,
    /// Output file, or directory for gen-synth. Printed to stdout when
    /// omitted, where that makes sense.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append metrics records (JSON lines) to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Disable the data-parallel episode map.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.k_shot {
            cfg.episode.k_shot = k;
        }
        if let Some(l) = self.lambda_rectify {
            cfg.loss.lambda_rectify = l;
        }
        if let Some(r) = &self.text_registry {
            cfg.data.registry = Some(r.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn metrics(&self) -> Result<Metrics> {
        match &self.metrics {
            Some(p) => Metrics::to_file(p),
            None => Ok(Metrics::in_memory()),
        }
    }

    fn mode(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::default()
        }
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required for this command".into()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_synth(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let dir = c.out()?;
    let doms = generate_synthetic_domains(&cfg.synthetic, cfg.seed)?;
    write_dataset(&doms.base, dir, "base")?;
    write_dataset(&doms.novel, dir, "novel")?;
    for v in TextVariant::ALL {
        doms.registry(v).save(dir.join(format!("registry_{}.tsv", v.label())))?;
    }
    doms.vocab.save(dir.join("vocab.txt"))?;
    EmbeddingProvider::Table(doms.embeddings).save_table(dir.join("embeddings.bin"))?;

    let mut run = cfg.clone();
    run.data.base = Some("base.json".into());
    run.data.novel = Some("novel.json".into());
    run.data.registry = Some(format!("registry_{}.tsv", cfg.data.text_variant.label()).into());
    run.data.vocab = Some("vocab.txt".into());
    run.data.embeddings = Some("embeddings.bin".into());
    write_text(&dir.join("config.toml"), &run.to_toml())?;
    info!("wrote synthetic domains to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(c) => gen_synth(&c),
        Command::MetaTrain(c) => {
            let cfg = c.config()?;
            let out = c.out()?;
            let ws = Workspace::load(&cfg)?;
            let ckpt = meta_train(&cfg, &ws, c.mode(), &mut c.metrics()?)?;
            checkpoint::save(&ckpt, out)
        }
        Command::FineTune { common: c, checkpoint: from } => {
            let cfg = c.config()?;
            let out = c.out()?;
            let ws = Workspace::load(&cfg)?;
            let ckpt = checkpoint::load(&from)?;
            let ckpt = fine_tune(ckpt, &ws, &cfg, c.mode(), &mut c.metrics()?)?;
            checkpoint::save(&ckpt, out)
        }
        Command::Eval { common: c, checkpoint: from } => {
            let start = Instant::now();
            let cfg = c.config()?;
            let ws = Workspace::load(&cfg)?;
            let ckpt = checkpoint::load(&from)?;
            let report = evaluate_novel(&ckpt.model, &ws, &cfg, c.mode())?;
            record_eval(&mut c.metrics()?, "eval", ckpt.step, &report, start.elapsed().as_secs_f64())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            emit(c.out.as_deref(), &format!("{json}\n"))
        }
        Command::Ablate { common: c, kind } => {
            let kind: AblationKind = kind.parse()?;
            let cfg = c.config()?;
            let table = run_ablation(kind, &cfg, c.mode(), &mut c.metrics()?)?;
            emit(c.out.as_deref(), &table.to_csv())
        }
        Command::Infer { common: c, checkpoint: from } => {
            let cfg = c.config()?;
            let ws = Workspace::load(&cfg)?;
            let ckpt = checkpoint::load(&from)?;
            let dets = infer_novel(&ckpt.model, &ws, &cfg, c.mode())?;
            let mut text = String::new();
            for d in &dets {
                text.push_str(&serde_json::to_string(d).expect("detection serializes"));
                text.push('\n');
            }
            emit(c.out.as_deref(), &text)
        }
    }
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
