use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use arsr_core::config::AppConfig;
use arsr_core::imaging::{read_png, write_png};
use arsr_core::model::write_loss_csv;
use arsr_core::pipeline::{
    ablate_guidance, ablation_name, build_vocabulary, evaluate, load_labeled, restore, train_restorer,
    train_tokenizer, write_ablation_csv, Artifacts, ABLATION_ORDER, CODEBOOK_FILE, LOSS_FILE, VOCAB_FILE,
};
use arsr_core::sampler::{entropy_heatmap, Strategy};
use arsr_core::scene::{make_dataset, read_manifest, MANIFEST_NAME};
use arsr_core::vocab::SequenceLayout;
use arsr_core::vq::Codebook;

#[derive(Parser)]
#[command(name = "arsr", version, about = "Token-based image restoration with a small autoregressive transformer")]
struct Cli {
    /// TOML config; missing sections and keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config (data, tokenizer, training, sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Full,
    Perception,
    Understanding,
    None,
}

impl From<Layout> for SequenceLayout {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Full => SequenceLayout::FULL,
            Layout::Perception => SequenceLayout::PERCEPTION,
            Layout::Understanding => SequenceLayout::UNDERSTANDING,
            Layout::None => SequenceLayout::NONE,
        }
    }
}

#[derive(Args)]
struct SamplerFlags {
    /// Use fixed Top-k with this k instead of the configured strategy.
    #[arg(long)]
    top_k: Option<usize>,
    /// Use the entropy-adaptive strategy.
    #[arg(long, conflicts_with = "top_k")]
    dynamic: bool,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes, degrade them and write PNGs plus a manifest.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
    /// Fit the k-means patch codebook on the HQ and LQ images of a dataset.
    TrainCodebook {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a restorer for one sequence layout; writes a model directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Codebook file or the directory written by `train-codebook`.
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        layout: Layout,
    },
    /// Restore one LQ image.
    Restore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Restore every pair of a dataset and write per-image metrics as CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Compare the four layout variants found under `models/{none,perception,understanding,full}`.
    AblateGuidance {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Restore one image and export its token entropy map (PNG) and trace (CSV).
    EntropyMap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => AppConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.sampler.seed = s;
    }
    Ok(cfg)
}

fn apply_sampler_flags(cfg: &mut AppConfig, f: &SamplerFlags) -> Result<()> {
    if let Some(k) = f.top_k {
        cfg.sampler.strategy = Strategy::FixedTopK(k);
    }
    if f.dynamic {
        cfg.sampler.strategy = Strategy::Dynamic;
    }
    if let Some(w) = f.guidance {
        cfg.sampler.guidance_weight = w;
    }
    if let Some(t) = f.temperature {
        cfg.sampler.temperature = t;
    }
    cfg.sampler.validate()?;
    Ok(())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_NAME)
    } else {
        p.to_path_buf()
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    match &cli.cmd {
        Command::MakeData { out, count } => {
            let entries = make_dataset(*count, cfg.seed, out, &cfg.dataset)?;
            log::info!("wrote {} pairs to {}", entries.len(), out.display());
        }
        Command::TrainCodebook { data, out } => {
            let pairs = load_labeled(&read_manifest(manifest_path(data))?)?;
            let cb = train_tokenizer(&pairs, cfg.vq, cfg.codebook.iters, cfg.seed)?;
            std::fs::create_dir_all(out)?;
            cb.save(out.join(CODEBOOK_FILE))?;
            std::fs::write(out.join(VOCAB_FILE), build_vocabulary(cb.len())?.to_json()?)?;
            log::info!("codebook of {} entries written to {}", cb.len(), out.display());
        }
        Command::Train { data, codebook, out, layout } => {
            let cb_path = if codebook.is_dir() { codebook.join(CODEBOOK_FILE) } else { codebook.clone() };
            let cb = Codebook::load(&cb_path).with_context(|| format!("loading {}", cb_path.display()))?;
            let pairs = load_labeled(&read_manifest(manifest_path(data))?)?;
            let (artifacts, outcome) = train_restorer(&pairs, &cb, (*layout).into(), &cfg.model, &cfg.train)?;
            artifacts.save(out)?;
            write_loss_csv(&out.join(LOSS_FILE), &outcome.curve)?;
            let last = outcome.curve.last().map_or(f64::NAN, |r| r.loss);
            log::info!("{} steps, final batch loss {last:.4}; model in {}", outcome.steps, out.display());
        }
        Command::Restore { model, input, output, sampler } => {
            apply_sampler_flags(&mut cfg, sampler)?;
            let a = Artifacts::load(model)?;
            let r = restore(&read_png(input)?, &a, &cfg.sampler)?;
            write_png(&r.restored, output)?;
            if let Some((n, b)) = r.perceived {
                println!("noise: {n}\nblur: {b}");
            }
            if let Some(c) = &r.caption {
                println!("caption: {c}");
            }
        }
        Command::Eval { model, data, out, sampler } => {
            apply_sampler_flags(&mut cfg, sampler)?;
            let a = Artifacts::load(model)?;
            let pairs = load_labeled(&read_manifest(manifest_path(data))?)?;
            let report = evaluate(&pairs, &a, &cfg.sampler)?;
            report.write_csv(out)?;
            println!("psnr {:.4}  ssim {:.4}", report.mean_psnr, report.mean_ssim);
        }
        Command::AblateGuidance { models, data, out, sampler } => {
            apply_sampler_flags(&mut cfg, sampler)?;
            let pairs = load_labeled(&read_manifest(manifest_path(data))?)?;
            let mut variants = Vec::new();
            for layout in ABLATION_ORDER {
                let dir = models.join(layout.name());
                let a = Artifacts::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
                if a.layout != layout {
                    bail!("{} holds a {} model", dir.display(), a.layout.name());
                }
                variants.push(a);
            }
            let rows = ablate_guidance(&pairs, &variants, &cfg.sampler)?;
            write_ablation_csv(out, &rows)?;
            for r in &rows {
                println!("{:<20} psnr {:.4}  ssim {:.4}", ablation_name(r.layout), r.report.mean_psnr, r.report.mean_ssim);
            }
        }
        Command::EntropyMap { model, input, output, trace, sampler } => {
            apply_sampler_flags(&mut cfg, sampler)?;
            let a = Artifacts::load(model)?;
            let r = restore(&read_png(input)?, &a, &cfg.sampler)?;
            let (rows, cols) = r.tokens.shape();
            write_png(&entropy_heatmap(&r.trace, rows, cols, a.codebook.config().f)?, output)?;
            if let Some(t) = trace {
                r.trace.write_csv(t)?;
            }
        }
    }
    Ok(())
}
