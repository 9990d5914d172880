//! Synthetic scenes with canonical captions, and LQ/HQ dataset generation.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{degrade, DegradationConfig, Level};
use crate::error::{Error, Result};
use crate::imaging::{read_png, write_png, Image};
use crate::vocab::{normalize_words, INSTRUCTION};

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }
    };
}

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Cyan => "cyan",
    Magenta => "magenta",
    White => "white",
    Black => "black",
});

word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });

word_enum!(Size { Small => "small", Large => "large" });

word_enum!(Pattern { Solid => "solid", Stripes => "stripes", Checker => "checker", Gradient => "gradient" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    /// Quadrant center as `(y, x)` fractions of the image edge.
    fn center(self) -> (f64, f64) {
        match self {
            Quadrant::TopLeft => (0.25, 0.25),
            Quadrant::TopRight => (0.25, 0.75),
            Quadrant::BottomLeft => (0.75, 0.25),
            Quadrant::BottomRight => (0.75, 0.75),
        }
    }

    pub fn contains(self, y: f64, x: f64, size: f64) -> bool {
        let top = y < size / 2.0;
        let left = x < size / 2.0;
        match self {
            Quadrant::TopLeft => top && left,
            Quadrant::TopRight => top && !left,
            Quadrant::BottomLeft => !top && left,
            Quadrant::BottomRight => !top && !left,
        }
    }
}

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.75, 0.2],
            Color::Blue => [0.15, 0.25, 0.9],
            Color::Yellow => [0.95, 0.85, 0.1],
            Color::Cyan => [0.1, 0.8, 0.85],
            Color::Magenta => [0.85, 0.15, 0.8],
            Color::White => [0.95, 0.95, 0.95],
            Color::Black => [0.05, 0.05, 0.05],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Background {
    pub pattern: Pattern,
    pub color: Color,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub quadrant: Quadrant,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Background,
    /// At most three; random scenes always carry at least one.
    pub objects: Vec<SceneObject>,
    /// Drives the sub-quadrant placement jitter.
    pub seed: u64,
}

pub const MAX_OBJECTS: usize = 3;

impl SceneSpec {
    /// 1-3 objects in distinct quadrants, each colored differently from the background.
    pub fn random(rng: &mut impl Rng) -> SceneSpec {
        let background = Background {
            pattern: *Pattern::ALL.choose(rng).unwrap(),
            color: *Color::ALL.choose(rng).unwrap(),
        };
        let count = rng.random_range(1..=MAX_OBJECTS);
        let quadrants: Vec<Quadrant> = Quadrant::ALL.choose_multiple(rng, count).copied().collect();
        let palette: Vec<Color> = Color::ALL.iter().copied().filter(|&c| c != background.color).collect();
        let objects = quadrants
            .into_iter()
            .map(|quadrant| SceneObject {
                shape: *Shape::ALL.choose(rng).unwrap(),
                color: *palette.choose(rng).unwrap(),
                size: *Size::ALL.choose(rng).unwrap(),
                quadrant,
            })
            .collect();
        SceneSpec { background, objects, seed: rng.next_u64() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.len() > MAX_OBJECTS {
            return Err(Error::InvalidInput(format!("{} objects; at most {MAX_OBJECTS}", self.objects.len())));
        }
        Ok(())
    }

    /// Object centers `(y, x)` in pixels for an image of edge `size`.
    pub fn object_centers(&self, size: usize) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = size as f64;
        let jitter = s / 16.0;
        self.objects
            .iter()
            .map(|o| {
                let (cy, cx) = o.quadrant.center();
                let jy = rng.random_range(-jitter..=jitter);
                let jx = rng.random_range(-jitter..=jitter);
                (cy * s + jy, cx * s + jx)
            })
            .collect()
    }
}

fn shade(c: [f64; 3]) -> [f64; 3] {
    c.map(|v| 0.55 * v + 0.2)
}

fn background_at(bg: &Background, y: f64, x: f64, size: f64) -> [f64; 3] {
    let base = bg.color.rgb();
    let period = size / 4.0;
    match bg.pattern {
        Pattern::Solid => base,
        Pattern::Stripes => {
            if ((x / period).floor() as i64) % 2 == 0 {
                base
            } else {
                shade(base)
            }
        }
        Pattern::Checker => {
            if ((x / period).floor() as i64 + (y / period).floor() as i64) % 2 == 0 {
                base
            } else {
                shade(base)
            }
        }
        Pattern::Gradient => {
            let t = (x / size).clamp(0.0, 1.0);
            let dark = shade(base);
            [0, 1, 2].map(|i| dark[i] + (base[i] - dark[i]) * t)
        }
    }
}

fn inside(shape: Shape, dy: f64, dx: f64, half: f64) -> bool {
    match shape {
        Shape::Circle => dy * dy + dx * dx <= half * half,
        Shape::Square => dy.abs() <= half && dx.abs() <= half,
        // apex up, base at +half
        Shape::Triangle => dy <= half && dy >= -half && dx.abs() <= (dy + half) / 2.0,
    }
}

fn half_extent(size: Size, edge: f64) -> f64 {
    match size {
        Size::Small => edge * 3.5 / 32.0,
        Size::Large => edge * 6.0 / 32.0,
    }
}

/// Rasterizes the scene at `size x size` with 2x2 supersampling.
pub fn render(spec: &SceneSpec, size: usize) -> Result<Image> {
    spec.validate()?;
    let s = size as f64;
    let centers = spec.object_centers(size);
    let mut data = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in [0.25, 0.75] {
                for sx in [0.25, 0.75] {
                    let (y, x) = (py as f64 + sy, px as f64 + sx);
                    let mut col = background_at(&spec.background, y, x, s);
                    for (o, &(cy, cx)) in spec.objects.iter().zip(&centers) {
                        if inside(o.shape, y - cy, x - cx, half_extent(o.size, s)) {
                            col = o.color.rgb();
                        }
                    }
                    for c in 0..3 {
                        acc[c] += col[c] / 4.0;
                    }
                }
            }
            data.extend(acc);
        }
    }
    Image::from_clamped(size, size, 3, data)
}

/// `a {size} {color} {shape} [and a ...] on {pattern} background`.
pub fn caption(spec: &SceneSpec) -> String {
    let bg = format!("{} background", spec.background.pattern.word());
    if spec.objects.is_empty() {
        return format!("empty {bg}");
    }
    let objs: Vec<String> = spec
        .objects
        .iter()
        .map(|o| format!("a {} {} {}", o.size.word(), o.color.word(), o.shape.word()))
        .collect();
    format!("{} on {bg}", objs.join(" and "))
}

/// Closed word list of the caption grammar, sorted.
pub fn caption_words() -> Vec<String> {
    let mut w: BTreeSet<String> = ["a", "and", "on", "background", "empty"].iter().map(|s| s.to_string()).collect();
    w.extend(Color::ALL.iter().map(|c| c.word().to_string()));
    w.extend(Shape::ALL.iter().map(|c| c.word().to_string()));
    w.extend(Size::ALL.iter().map(|c| c.word().to_string()));
    w.extend(Pattern::ALL.iter().map(|c| c.word().to_string()));
    w.into_iter().collect()
}

/// Caption words plus the words of the fixed instruction.
pub fn vocabulary_words() -> Vec<String> {
    let mut w: BTreeSet<String> = caption_words().into_iter().collect();
    w.extend(normalize_words(INSTRUCTION));
    w.into_iter().collect()
}

/// How `make_dataset` draws degradations. Each sample picks a noise and a blur
/// level uniformly, then a sigma uniformly inside that level's range. The level
/// stored in the manifest is the sigma bucketed by the `*_bounds` thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub downscale: usize,
    pub noise_sigma_ranges: [[f64; 2]; 3],
    pub blur_sigma_ranges: [[f64; 2]; 3],
    pub noise_sigma_bounds: [f64; 2],
    pub blur_sigma_bounds: [f64; 2],
    pub quality_range: [u32; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downscale: 2,
            noise_sigma_ranges: [[0.0, 0.006], [0.022, 0.035], [0.055, 0.07]],
            blur_sigma_ranges: [[0.0, 0.3], [1.3, 1.6], [2.6, 3.0]],
            noise_sigma_bounds: [0.014, 0.045],
            blur_sigma_bounds: [0.7, 2.0],
            quality_range: [85, 95],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ranges: &[[f64; 2]; 3], bounds: [f64; 2], what: &str| -> Result<()> {
            for (level, r) in Level::ALL.iter().zip(ranges) {
                if r[0] > r[1]
                    || Level::from_thresholds(r[0], bounds) != *level
                    || Level::from_thresholds(r[1], bounds) != *level
                {
                    return Err(Error::Config(format!("{what} range {r:?} does not sit inside the {level} bucket")));
                }
            }
            Ok(())
        };
        check(&self.noise_sigma_ranges, self.noise_sigma_bounds, "noise")?;
        check(&self.blur_sigma_ranges, self.blur_sigma_bounds, "blur")?;
        if self.quality_range[0] > self.quality_range[1] {
            return Err(Error::Config("quality_range is reversed".into()));
        }
        if self.image_size % self.downscale != 0 {
            return Err(Error::Config("image_size must be divisible by downscale".into()));
        }
        Ok(())
    }

    /// Draws a degradation and its generator-truth levels.
    pub fn sample_degradation(&self, rng: &mut impl Rng) -> (DegradationConfig, Level, Level) {
        let noise_level = *Level::ALL.choose(rng).unwrap();
        let blur_level = *Level::ALL.choose(rng).unwrap();
        let pick = |r: [f64; 2], rng: &mut dyn RngCore| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..=r[1])
            }
        };
        let noise_sigma = pick(self.noise_sigma_ranges[noise_level.index()], rng);
        let blur_sigma = pick(self.blur_sigma_ranges[blur_level.index()], rng);
        let compression_quality = rng.random_range(self.quality_range[0]..=self.quality_range[1]);
        let cfg = DegradationConfig { blur_sigma, noise_sigma, downscale: self.downscale, compression_quality, seed: rng.next_u64() };
        (
            cfg,
            Level::from_thresholds(noise_sigma, self.noise_sigma_bounds),
            Level::from_thresholds(blur_sigma, self.blur_sigma_bounds),
        )
    }
}

/// One LQ/HQ training pair as recorded in `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub hq_path: PathBuf,
    pub lq_path: PathBuf,
    pub caption: String,
    pub noise_level: Level,
    pub blur_level: Level,
    pub seed: u64,
    pub degradation: DegradationConfig,
}

/// A generated sample, held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub spec: SceneSpec,
    pub hq: Image,
    pub lq: Image,
    pub caption: String,
    pub noise_level: Level,
    pub blur_level: Level,
    pub degradation: DegradationConfig,
    pub seed: u64,
}

/// Generates sample `i` of the stream defined by `seed`; independent of other indices.
pub fn generate_sample(seed: u64, index: u64, cfg: &DatasetConfig) -> Result<Sample> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    master.set_stream(index);
    let sample_seed = master.next_u64();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let spec = SceneSpec::random(&mut rng);
    let hq = render(&spec, cfg.image_size)?.quantized_8bit();
    let (degradation, noise_level, blur_level) = cfg.sample_degradation(&mut rng);
    let lq = degrade(&hq, &degradation)?.quantized_8bit();
    Ok(Sample { caption: caption(&spec), spec, hq, lq, noise_level, blur_level, degradation, seed: sample_seed })
}

pub fn generate_samples(count: usize, seed: u64, cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..count as u64).map(|i| generate_sample(seed, i, cfg)).collect()
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes `hq/`, `lq/` PNGs and `manifest.jsonl` under `out_dir`. Paths in the
/// manifest are relative to `out_dir`.
pub fn make_dataset(count: usize, seed: u64, out_dir: impl AsRef<Path>, cfg: &DatasetConfig) -> Result<Vec<ManifestEntry>> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out.join("hq"))?;
    fs::create_dir_all(out.join("lq"))?;
    let samples = generate_samples(count, seed, cfg)?;
    let mut entries = Vec::with_capacity(count);
    let mut manifest = BufWriter::new(File::create(out.join(MANIFEST_NAME))?);
    for (i, s) in samples.iter().enumerate() {
        let hq_path = PathBuf::from(format!("hq/{i:06}.png"));
        let lq_path = PathBuf::from(format!("lq/{i:06}.png"));
        write_png(&s.hq, out.join(&hq_path))?;
        write_png(&s.lq, out.join(&lq_path))?;
        let e = ManifestEntry {
            hq_path,
            lq_path,
            caption: s.caption.clone(),
            noise_level: s.noise_level,
            blur_level: s.blur_level,
            seed: s.seed,
            degradation: s.degradation,
        };
        serde_json::to_writer(&mut manifest, &e)?;
        manifest.write_all(b"\n")?;
        entries.push(e);
    }
    manifest.flush()?;
    Ok(entries)
}

/// Reads a manifest; entry paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(&line)?;
        e.hq_path = root.join(&e.hq_path);
        e.lq_path = root.join(&e.lq_path);
        out.push(e);
    }
    Ok(out)
}

/// Loads `(lq, hq)` for every entry, reporting all missing files at once.
pub fn load_pairs(entries: &[ManifestEntry]) -> Result<Vec<(Image, Image)>> {
    let missing: Vec<PathBuf> = entries
        .iter()
        .flat_map(|e| [&e.lq_path, &e.hq_path])
        .filter(|p| !p.exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    entries.iter().map(|e| Ok((read_png(&e.lq_path)?, read_png(&e.hq_path)?))).collect()
}
