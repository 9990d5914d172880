//! End-to-end orchestration: tokenizer and model training, restoration,
//! evaluation and the guidance ablation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degradation::Level;
use crate::error::{Error, Result};
use crate::imaging::{psnr, ssim, Image};
use crate::model::{
    load_checkpoint, save_checkpoint, train, ModelConfig, ModelParams, TrainConfig, TrainExample, TrainOutcome,
};
use crate::sampler::{generate, EntropyTrace, SamplerConfig};
use crate::scene::{load_pairs, vocabulary_words, ManifestEntry, Sample};
use crate::vocab::{
    normalize_text, pack_prefix, pack_sequence, pack_uncond, unpack, SequenceLayout, Vocabulary, INSTRUCTION,
};
use crate::vq::{train_codebook, Codebook, TokenGrid, VQConfig};

pub const CODEBOOK_FILE: &str = "codebook.vqcb";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LAYOUT_FILE: &str = "layout.json";
pub const LOSS_FILE: &str = "loss.csv";

/// An LQ/HQ pair with its generator-truth labels.
#[derive(Clone, Debug)]
pub struct LabeledPair {
    pub lq: Image,
    pub hq: Image,
    pub caption: String,
    pub noise_level: Level,
    pub blur_level: Level,
}

impl From<&Sample> for LabeledPair {
    fn from(s: &Sample) -> Self {
        Self {
            lq: s.lq.clone(),
            hq: s.hq.clone(),
            caption: s.caption.clone(),
            noise_level: s.noise_level,
            blur_level: s.blur_level,
        }
    }
}

/// Reads every pair listed in a manifest (all missing files are reported together).
pub fn load_labeled(entries: &[ManifestEntry]) -> Result<Vec<LabeledPair>> {
    let images = load_pairs(entries)?;
    Ok(entries
        .iter()
        .zip(images)
        .map(|(e, (lq, hq))| LabeledPair {
            lq,
            hq,
            caption: e.caption.clone(),
            noise_level: e.noise_level,
            blur_level: e.blur_level,
        })
        .collect())
}

/// Vocabulary over the closed caption grammar plus the instruction words.
pub fn build_vocabulary(codebook_size: usize) -> Result<Vocabulary> {
    Vocabulary::build(&vocabulary_words(), codebook_size)
}

pub fn instruction_ids(v: &Vocabulary) -> Result<Vec<usize>> {
    v.tokenize_text(INSTRUCTION)
}

/// k-means codebook over the patches of both the HQ and the LQ images, so the
/// model sees degradation-specific tokens in its conditioning.
pub fn train_tokenizer(pairs: &[LabeledPair], vq: VQConfig, iters: usize, seed: u64) -> Result<Codebook> {
    let images: Vec<Image> = pairs.iter().flat_map(|p| [p.hq.clone(), p.lq.clone()]).collect();
    train_codebook(&images, vq, iters, seed)
}

pub fn build_examples(
    pairs: &[LabeledPair],
    cb: &Codebook,
    v: &Vocabulary,
    layout: SequenceLayout,
) -> Result<Vec<TrainExample>> {
    let instr = instruction_ids(v)?;
    pairs
        .iter()
        .map(|p| {
            let lq = cb.encode(&p.lq)?;
            let hq = cb.encode(&p.hq)?;
            let caption = v.tokenize_text(&p.caption)?;
            let cond = pack_sequence(
                &instr,
                &lq,
                layout.degradation.then_some((p.noise_level, p.blur_level)),
                layout.caption.then_some(caption.as_slice()),
                &hq,
                v,
            )?;
            Ok(TrainExample { cond, uncond: pack_uncond(&hq, v)? })
        })
        .collect()
}

/// Everything needed to restore an image.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub codebook: Codebook,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub layout: SequenceLayout,
}

impl Artifacts {
    pub fn check(&self) -> Result<()> {
        if self.vocab.size() != self.params.config().vocab_size {
            return Err(Error::ArtifactMismatch(format!(
                "vocabulary has {} tokens but the model head has {}",
                self.vocab.size(),
                self.params.config().vocab_size
            )));
        }
        if self.vocab.codebook_size() != self.codebook.len() {
            return Err(Error::ArtifactMismatch(format!(
                "vocabulary reserves {} image ids but the codebook has {} entries",
                self.vocab.codebook_size(),
                self.codebook.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.codebook.save(dir.join(CODEBOOK_FILE))?;
        std::fs::write(dir.join(VOCAB_FILE), self.vocab.to_json()?)?;
        save_checkpoint(&dir.join(MODEL_FILE), &self.params)?;
        std::fs::write(dir.join(LAYOUT_FILE), serde_json::to_string(&self.layout)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let needed = [CODEBOOK_FILE, VOCAB_FILE, MODEL_FILE, LAYOUT_FILE].map(|f| dir.join(f));
        let missing: Vec<_> = needed.iter().filter(|p| !p.exists()).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let a = Self {
            codebook: Codebook::load(dir.join(CODEBOOK_FILE))?,
            vocab: Vocabulary::from_json(&std::fs::read_to_string(dir.join(VOCAB_FILE))?)?,
            params: load_checkpoint(&dir.join(MODEL_FILE))?,
            layout: serde_json::from_str(&std::fs::read_to_string(dir.join(LAYOUT_FILE))?)?,
        };
        a.check()?;
        Ok(a)
    }
}

/// Trains a restorer for `layout` on top of a fixed tokenizer. The returned
/// parameters are rounded through the 32-bit checkpoint format so in-memory and
/// reloaded artifacts behave identically.
pub fn train_restorer(
    pairs: &[LabeledPair],
    codebook: &Codebook,
    layout: SequenceLayout,
    model: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(Artifacts, TrainOutcome)> {
    let vocab = build_vocabulary(codebook.len())?;
    let examples = build_examples(pairs, codebook, &vocab, layout)?;
    let longest = examples.iter().map(|e| e.cond.len()).max().unwrap_or(0);
    if longest > model.max_seq_len {
        return Err(Error::SequenceTooLong { len: longest, max: model.max_seq_len });
    }
    let cfg = ModelConfig { vocab_size: vocab.size(), ..model.clone() };
    let mut params = ModelParams::init(&cfg, tc.seed)?;
    let outcome = train(&mut params, &examples, tc)?;
    let rounded: Vec<f64> = params.data().iter().map(|&x| x as f32 as f64).collect();
    params.set_data(rounded)?;
    Ok((Artifacts { codebook: codebook.clone(), vocab, params, layout }, outcome))
}

#[derive(Clone, Debug)]
pub struct RestoreResult {
    pub restored: Image,
    pub tokens: TokenGrid,
    pub perceived: Option<(Level, Level)>,
    pub caption: Option<String>,
    pub trace: EntropyTrace,
}

pub fn restore(lq: &Image, a: &Artifacts, sc: &SamplerConfig) -> Result<RestoreResult> {
    a.check()?;
    let f = a.codebook.config().f;
    if lq.channels() != a.codebook.config().channels {
        return Err(Error::ArtifactMismatch(format!(
            "image has {} channels, codebook expects {}",
            lq.channels(),
            a.codebook.config().channels
        )));
    }
    let lq_grid = a.codebook.encode(lq)?;
    let (rows, cols) = lq_grid.shape();
    let prefix = pack_prefix(&instruction_ids(&a.vocab)?, &lq_grid, &a.vocab)?;
    let g = generate(&a.params, &a.vocab, &prefix, (rows, cols), a.layout, sc)?;
    let u = unpack(&g.sequence.ids, rows, cols, &a.vocab)?;
    let caption = u.caption.as_deref().map(|c| a.vocab.detokenize(c)).transpose()?;
    let restored = a.codebook.decode(&u.hq)?;
    debug_assert_eq!(restored.shape(), (rows * f, cols * f, lq.channels()));
    Ok(RestoreResult { restored, tokens: u.hq, perceived: u.degradation, caption, trace: g.trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub noise_match: Option<bool>,
    pub blur_match: Option<bool>,
    pub caption_match: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub noise_accuracy: Option<f64>,
    pub blur_accuracy: Option<f64>,
    pub caption_accuracy: Option<f64>,
}

fn rate(values: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let v: Vec<bool> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.6}"))
}

fn fmt_flag(x: Option<bool>) -> &'static str {
    match x {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("nothing was evaluated".into()));
        }
        let n = rows.len() as f64;
        Ok(Self {
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            noise_accuracy: rate(rows.iter().map(|r| r.noise_match)),
            blur_accuracy: rate(rows.iter().map(|r| r.blur_match)),
            caption_accuracy: rate(rows.iter().map(|r| r.caption_match)),
            rows,
        })
    }

    /// Per-image rows followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "index,psnr,ssim,noise_match,blur_match,caption_match")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{:.6},{:.6},{},{},{}",
                r.index,
                r.psnr,
                r.ssim,
                fmt_flag(r.noise_match),
                fmt_flag(r.blur_match),
                fmt_flag(r.caption_match)
            )?;
        }
        writeln!(
            f,
            "mean,{:.6},{:.6},{},{},{}",
            self.mean_psnr,
            self.mean_ssim,
            fmt_opt(self.noise_accuracy),
            fmt_opt(self.blur_accuracy),
            fmt_opt(self.caption_accuracy)
        )?;
        f.flush()?;
        Ok(())
    }
}

/// Scores any restorer against the HQ references and the generator labels.
pub fn evaluate_with(
    pairs: &[LabeledPair],
    mut restorer: impl FnMut(usize, &Image) -> Result<RestoreResult>,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (index, p) in pairs.iter().enumerate() {
        let r = restorer(index, &p.lq)?;
        rows.push(EvalRow {
            index,
            psnr: psnr(&r.restored, &p.hq)?,
            ssim: ssim(&r.restored, &p.hq)?,
            noise_match: r.perceived.map(|(n, _)| n == p.noise_level),
            blur_match: r.perceived.map(|(_, b)| b == p.blur_level),
            caption_match: r.caption.as_deref().map(|c| normalize_text(c) == normalize_text(&p.caption)),
        });
    }
    EvalReport::from_rows(rows)
}

/// Sampler seed for the `index`-th image of an evaluation run.
pub fn image_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

pub fn evaluate(pairs: &[LabeledPair], a: &Artifacts, sc: &SamplerConfig) -> Result<EvalReport> {
    evaluate_with(pairs, |i, lq| restore(lq, a, &SamplerConfig { seed: image_seed(sc.seed, i), ..sc.clone() }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub layout: SequenceLayout,
    pub report: EvalReport,
}

pub const ABLATION_ORDER: [SequenceLayout; 4] =
    [SequenceLayout::NONE, SequenceLayout::PERCEPTION, SequenceLayout::UNDERSTANDING, SequenceLayout::FULL];

pub fn ablation_name(layout: SequenceLayout) -> &'static str {
    match (layout.degradation, layout.caption) {
        (false, false) => "no_guidance",
        (true, false) => "perception_only",
        (false, true) => "understanding_only",
        (true, true) => "full_guidance",
    }
}

/// Evaluates one separately trained restorer per sequence layout.
pub fn ablate_guidance(pairs: &[LabeledPair], variants: &[Artifacts], sc: &SamplerConfig) -> Result<Vec<AblationRow>> {
    ABLATION_ORDER
        .iter()
        .map(|&layout| {
            let a = variants
                .iter()
                .find(|a| a.layout == layout)
                .ok_or_else(|| Error::InvalidInput(format!("missing {} variant", ablation_name(layout))))?;
            Ok(AblationRow { variant: ablation_name(layout), layout, report: evaluate(pairs, a, sc)? })
        })
        .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "variant,psnr,ssim,noise_accuracy,blur_accuracy,caption_accuracy")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{},{},{}",
            r.variant,
            r.report.mean_psnr,
            r.report.mean_ssim,
            fmt_opt(r.report.noise_accuracy),
            fmt_opt(r.report.blur_accuracy),
            fmt_opt(r.report.caption_accuracy)
        )?;
    }
    f.flush()?;
    Ok(())
}
