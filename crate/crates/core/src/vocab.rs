//! Unified text + image vocabulary and three-phase sequence packing.
//!
//! Id space: the 16 special tokens, then the sorted word list, then one id per
//! codebook entry starting at `image_offset`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::degradation::Level;
use crate::error::{Error, Result};
use crate::vq::TokenGrid;

/// Fixed instruction prepended to every conditional sequence.
pub const INSTRUCTION: &str =
    "Perceive the degradation level, understand the image content, and restore the high-quality image.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    Uncond,
    ImgStart,
    ImgEnd,
    DegStart,
    DegEnd,
    CapStart,
    CapEnd,
    Noise(Level),
    Blur(Level),
}

pub const NUM_SPECIALS: usize = 16;

impl Special {
    pub const ALL: [Special; NUM_SPECIALS] = [
        Special::Bos,
        Special::Eos,
        Special::Pad,
        Special::Uncond,
        Special::ImgStart,
        Special::ImgEnd,
        Special::DegStart,
        Special::DegEnd,
        Special::CapStart,
        Special::CapEnd,
        Special::Noise(Level::Small),
        Special::Noise(Level::Medium),
        Special::Noise(Level::Large),
        Special::Blur(Level::Small),
        Special::Blur(Level::Medium),
        Special::Blur(Level::Large),
    ];

    pub const fn id(self) -> usize {
        match self {
            Special::Bos => 0,
            Special::Eos => 1,
            Special::Pad => 2,
            Special::Uncond => 3,
            Special::ImgStart => 4,
            Special::ImgEnd => 5,
            Special::DegStart => 6,
            Special::DegEnd => 7,
            Special::CapStart => 8,
            Special::CapEnd => 9,
            Special::Noise(l) => 10 + l as usize,
            Special::Blur(l) => 13 + l as usize,
        }
    }

    pub fn from_id(id: usize) -> Option<Special> {
        Special::ALL.get(id).copied()
    }

    pub fn name(self) -> String {
        match self {
            Special::Bos => "<bos>".into(),
            Special::Eos => "<eos>".into(),
            Special::Pad => "<pad>".into(),
            Special::Uncond => "<uncond>".into(),
            Special::ImgStart => "<img_start>".into(),
            Special::ImgEnd => "<img_end>".into(),
            Special::DegStart => "<deg_start>".into(),
            Special::DegEnd => "<deg_end>".into(),
            Special::CapStart => "<cap_start>".into(),
            Special::CapEnd => "<cap_end>".into(),
            Special::Noise(l) => format!("<noise_{l}>"),
            Special::Blur(l) => format!("<blur_{l}>"),
        }
    }
}

/// Lowercases, splits on whitespace and strips non-alphanumeric characters.
pub fn normalize_words(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn normalize_text(s: &str) -> String {
    normalize_words(s).join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    codebook_size: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    image_offset: usize,
    codebook_size: usize,
    size: usize,
}

impl Vocabulary {
    /// Specials first, then the sorted words, then `codebook_size` image ids.
    pub fn build<S: AsRef<str>>(words: &[S], codebook_size: usize) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::InvalidInput("word list is empty".into()));
        }
        if codebook_size < 2 {
            return Err(Error::InvalidInput("codebook size must be at least 2".into()));
        }
        let mut sorted: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|p| p[0] == p[1]) {
            return Err(Error::DuplicateWord(w[0].clone()));
        }
        if let Some(w) = sorted.iter().find(|w| normalize_text(w) != **w) {
            return Err(Error::InvalidInput(format!("word {w:?} is not normalized")));
        }
        let word_ids = sorted.iter().enumerate().map(|(i, w)| (w.clone(), NUM_SPECIALS + i)).collect();
        Ok(Self { words: sorted, word_ids, codebook_size })
    }

    pub fn text_count(&self) -> usize {
        NUM_SPECIALS + self.words.len()
    }

    pub fn image_offset(&self) -> usize {
        self.text_count()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn size(&self) -> usize {
        self.text_count() + self.codebook_size
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Id range of plain words.
    pub fn word_range(&self) -> std::ops::Range<usize> {
        NUM_SPECIALS..self.text_count()
    }

    pub fn image_range(&self) -> std::ops::Range<usize> {
        self.image_offset()..self.size()
    }

    pub fn image_id(&self, code: usize) -> usize {
        self.image_offset() + code
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.word_ids.get(w).copied()
    }

    pub fn token_name(&self, id: usize) -> Option<String> {
        if let Some(s) = Special::from_id(id) {
            Some(s.name())
        } else if self.word_range().contains(&id) {
            Some(self.words[id - NUM_SPECIALS].clone())
        } else if self.image_range().contains(&id) {
            Some(format!("<img_{}>", id - self.image_offset()))
        } else {
            None
        }
    }

    pub fn tokenize_text(&self, s: &str) -> Result<Vec<usize>> {
        normalize_words(s)
            .into_iter()
            .map(|w| self.word_id(&w).ok_or(Error::OutOfVocabulary(w)))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                if self.word_range().contains(&id) {
                    Ok(self.words[id - NUM_SPECIALS].as_str())
                } else {
                    Err(Error::TokenOutOfRange { id, limit: self.text_count() })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut tokens: Vec<String> = Special::ALL.iter().map(|s| s.name()).collect();
        tokens.extend(self.words.iter().cloned());
        let file = VocabularyFile {
            tokens,
            image_offset: self.image_offset(),
            codebook_size: self.codebook_size,
            size: self.size(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(s)?;
        let specials: Vec<String> = Special::ALL.iter().map(|s| s.name()).collect();
        if file.tokens.len() < NUM_SPECIALS || file.tokens[..NUM_SPECIALS] != specials[..] {
            return Err(Error::Format("vocabulary file does not start with the special tokens".into()));
        }
        let v = Self::build(&file.tokens[NUM_SPECIALS..], file.codebook_size)?;
        if v.image_offset() != file.image_offset || v.size() != file.size {
            return Err(Error::Format("vocabulary offsets are inconsistent".into()));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Instruction,
    LqImage,
    Degradation,
    Caption,
    HqImage,
    Structural,
}

/// Packed ids with per-token segment labels. `loss_mask[t]` marks token `t` as a
/// supervised target (predicted from position `t - 1`).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<Segment>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: usize, seg: Segment, supervised: bool) {
        self.ids.push(id);
        self.segments.push(seg);
        self.loss_mask.push(supervised);
    }

    fn push_special(&mut self, s: Special, supervised: bool) {
        self.push(s.id(), Segment::Structural, supervised);
    }

    fn push_grid(&mut self, grid: &TokenGrid, v: &Vocabulary, seg: Segment, supervised: bool) -> Result<()> {
        for &code in grid.ids() {
            if code >= v.codebook_size() {
                return Err(Error::TokenOutOfRange { id: code, limit: v.codebook_size() });
            }
            self.push(v.image_id(code), seg, supervised);
        }
        Ok(())
    }
}

/// Which optional phases a sequence carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub degradation: bool,
    pub caption: bool,
}

impl SequenceLayout {
    pub const FULL: SequenceLayout = SequenceLayout { degradation: true, caption: true };
    pub const PERCEPTION: SequenceLayout = SequenceLayout { degradation: true, caption: false };
    pub const UNDERSTANDING: SequenceLayout = SequenceLayout { degradation: false, caption: true };
    pub const NONE: SequenceLayout = SequenceLayout { degradation: false, caption: false };

    pub fn name(self) -> &'static str {
        match (self.degradation, self.caption) {
            (true, true) => "full",
            (true, false) => "perception",
            (false, true) => "understanding",
            (false, false) => "none",
        }
    }
}

impl Default for SequenceLayout {
    fn default() -> Self {
        Self::FULL
    }
}

/// Conditioning prefix: `<bos> instr <img_start> LQ <img_end>`, all unsupervised.
pub fn pack_prefix(instruction_ids: &[usize], lq: &TokenGrid, v: &Vocabulary) -> Result<TokenSequence> {
    let mut s = TokenSequence::default();
    s.push_special(Special::Bos, false);
    for &id in instruction_ids {
        if !v.word_range().contains(&id) {
            return Err(Error::TokenOutOfRange { id, limit: v.text_count() });
        }
        s.push(id, Segment::Instruction, false);
    }
    s.push_special(Special::ImgStart, false);
    s.push_grid(lq, v, Segment::LqImage, false)?;
    s.push_special(Special::ImgEnd, false);
    Ok(s)
}

/// Packs a training sequence. `deg` and `caption` are omitted from the layout
/// when `None`; with both present the layout is
/// `<bos> instr <img_start> LQ <img_end> <deg_start> n b <deg_end> <cap_start> cap <cap_end> <img_start> HQ <img_end> <eos>`.
pub fn pack_sequence(
    instruction_ids: &[usize],
    lq: &TokenGrid,
    deg: Option<(Level, Level)>,
    caption_ids: Option<&[usize]>,
    hq: &TokenGrid,
    v: &Vocabulary,
) -> Result<TokenSequence> {
    if lq.shape() != hq.shape() {
        return Err(Error::Shape(format!("LQ grid {:?} vs HQ grid {:?}", lq.shape(), hq.shape())));
    }
    let mut s = pack_prefix(instruction_ids, lq, v)?;
    if let Some((noise, blur)) = deg {
        s.push_special(Special::DegStart, true);
        s.push(Special::Noise(noise).id(), Segment::Degradation, true);
        s.push(Special::Blur(blur).id(), Segment::Degradation, true);
        s.push_special(Special::DegEnd, true);
    }
    if let Some(cap) = caption_ids {
        s.push_special(Special::CapStart, true);
        for &id in cap {
            if !v.word_range().contains(&id) {
                return Err(Error::TokenOutOfRange { id, limit: v.text_count() });
            }
            s.push(id, Segment::Caption, true);
        }
        s.push_special(Special::CapEnd, true);
    }
    s.push_special(Special::ImgStart, true);
    s.push_grid(hq, v, Segment::HqImage, true)?;
    s.push_special(Special::ImgEnd, true);
    s.push_special(Special::Eos, true);
    Ok(s)
}

/// Prefix of the unconditional branch: `<bos> <uncond> <img_start>`.
pub fn uncond_prefix() -> TokenSequence {
    let mut s = TokenSequence::default();
    s.push_special(Special::Bos, false);
    s.push_special(Special::Uncond, false);
    s.push_special(Special::ImgStart, true);
    s
}

/// `<bos> <uncond> <img_start> HQ <img_end> <eos>`, supervised from `<img_start>` on.
pub fn pack_uncond(hq: &TokenGrid, v: &Vocabulary) -> Result<TokenSequence> {
    let mut s = uncond_prefix();
    s.push_grid(hq, v, Segment::HqImage, true)?;
    s.push_special(Special::ImgEnd, true);
    s.push_special(Special::Eos, true);
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unpacked {
    pub instruction: Vec<usize>,
    /// `None` for unconditional sequences.
    pub lq: Option<TokenGrid>,
    pub degradation: Option<(Level, Level)>,
    pub caption: Option<Vec<usize>>,
    pub hq: TokenGrid,
}

struct Cursor<'a> {
    ids: &'a [usize],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<usize> {
        self.ids.get(self.pos).copied()
    }

    fn expect(&mut self, s: Special) -> Result<()> {
        match self.peek() {
            Some(id) if id == s.id() => {
                self.pos += 1;
                Ok(())
            }
            other => Err(Error::Malformed(format!("expected {} at {}, found {other:?}", s.name(), self.pos))),
        }
    }

    fn grid(&mut self, rows: usize, cols: usize, v: &Vocabulary) -> Result<TokenGrid> {
        let n = rows * cols;
        let slice = self
            .ids
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Malformed("truncated image segment".into()))?;
        let codes = slice
            .iter()
            .map(|&id| {
                if v.image_range().contains(&id) {
                    Ok(id - v.image_offset())
                } else {
                    Err(Error::Malformed(format!("non-image id {id} inside image segment")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.pos += n;
        TokenGrid::new(rows, cols, codes, v.codebook_size())
    }
}

/// Inverse of [`pack_sequence`] / [`pack_uncond`] for grids of `rows x cols`.
pub fn unpack(ids: &[usize], rows: usize, cols: usize, v: &Vocabulary) -> Result<Unpacked> {
    let mut c = Cursor { ids, pos: 0 };
    c.expect(Special::Bos)?;
    if c.peek() == Some(Special::Uncond.id()) {
        c.pos += 1;
        c.expect(Special::ImgStart)?;
        let hq = c.grid(rows, cols, v)?;
        c.expect(Special::ImgEnd)?;
        c.expect(Special::Eos)?;
        if c.pos != ids.len() {
            return Err(Error::Malformed("trailing tokens".into()));
        }
        return Ok(Unpacked { instruction: vec![], lq: None, degradation: None, caption: None, hq });
    }
    let mut instruction = Vec::new();
    while let Some(id) = c.peek().filter(|id| v.word_range().contains(id)) {
        instruction.push(id);
        c.pos += 1;
    }
    c.expect(Special::ImgStart)?;
    let lq = c.grid(rows, cols, v)?;
    c.expect(Special::ImgEnd)?;
    let mut degradation = None;
    if c.peek() == Some(Special::DegStart.id()) {
        c.pos += 1;
        let noise = match c.peek().and_then(Special::from_id) {
            Some(Special::Noise(l)) => l,
            other => return Err(Error::Malformed(format!("expected noise level token, found {other:?}"))),
        };
        c.pos += 1;
        let blur = match c.peek().and_then(Special::from_id) {
            Some(Special::Blur(l)) => l,
            other => return Err(Error::Malformed(format!("expected blur level token, found {other:?}"))),
        };
        c.pos += 1;
        c.expect(Special::DegEnd)?;
        degradation = Some((noise, blur));
    }
    let mut caption = None;
    if c.peek() == Some(Special::CapStart.id()) {
        c.pos += 1;
        let mut words = Vec::new();
        while let Some(id) = c.peek().filter(|id| v.word_range().contains(id)) {
            words.push(id);
            c.pos += 1;
        }
        c.expect(Special::CapEnd)?;
        caption = Some(words);
    }
    c.expect(Special::ImgStart)?;
    let hq = c.grid(rows, cols, v)?;
    c.expect(Special::ImgEnd)?;
    c.expect(Special::Eos)?;
    if c.pos != ids.len() {
        return Err(Error::Malformed("trailing tokens".into()));
    }
    Ok(Unpacked { instruction, lq: Some(lq), degradation, caption, hq })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i:03}")).collect()
    }

    fn grid(rows: usize, cols: usize, seed: usize, n: usize) -> TokenGrid {
        TokenGrid::new(rows, cols, (0..rows * cols).map(|i| (i * 31 + seed * 7) % n).collect(), n).unwrap()
    }

    #[test]
    fn vocabulary_arithmetic() {
        let v = Vocabulary::build(&words(100), 512).unwrap();
        assert_eq!(v.size(), 628);
        assert_eq!(v.image_offset(), 116);
        assert_eq!(v.image_id(0), 116);
        assert_eq!(v, Vocabulary::build(&words(100), 512).unwrap());
        assert!(v.word_range().end <= v.image_range().start);
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        let err = Vocabulary::build(&["red", "blue", "red"], 8).unwrap_err();
        assert!(matches!(err, Error::DuplicateWord(w) if w == "red"));
    }

    #[test]
    fn specials_are_distinct_and_dense() {
        let ids: Vec<usize> = Special::ALL.iter().map(|s| s.id()).collect();
        assert_eq!(ids, (0..NUM_SPECIALS).collect::<Vec<_>>());
        for s in Special::ALL {
            assert_eq!(Special::from_id(s.id()), Some(s));
        }
    }

    #[test]
    fn tokenize_round_trip_and_oov() {
        let v = Vocabulary::build(&["a", "red", "circle", "on", "solid", "background"], 4).unwrap();
        assert!(v.tokenize_text("").unwrap().is_empty());
        let s = "A red  circle, on SOLID background.";
        let ids = v.tokenize_text(s).unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), normalize_text(s));
        let err = v.tokenize_text("a blue circle").unwrap_err();
        assert!(err.to_string().contains("blue"));
    }

    #[test]
    fn instruction_normalizes_hyphen() {
        assert_eq!(
            normalize_text(INSTRUCTION),
            "perceive the degradation level understand the image content and restore the highquality image"
        );
    }

    #[test]
    fn pack_layout_lengths_and_mask() {
        let v = Vocabulary::build(&words(20), 16).unwrap();
        let instr: Vec<usize> = (16..21).collect();
        let cap: Vec<usize> = (21..27).collect();
        let (lq, hq) = (grid(8, 8, 1, 16), grid(8, 8, 2, 16));
        let s = pack_sequence(&instr, &lq, Some((Level::Large, Level::Medium)), Some(&cap), &hq, &v).unwrap();
        // 1 + 5 + (1+64+1) + (1+2+1) + (1+6+1) + (1+64+1) + 1
        assert_eq!(s.len(), 151);
        assert!(s.loss_mask[..72].iter().all(|m| !m));
        assert!(s.loss_mask[72..].iter().all(|m| *m));
        assert_eq!(s.loss_mask[72..].len(), 79);
        assert_eq!(s.segments.len(), 151);

        let u = unpack(&s.ids, 8, 8, &v).unwrap();
        assert_eq!(u.instruction, instr);
        assert_eq!(u.lq.as_ref(), Some(&lq));
        assert_eq!(u.degradation, Some((Level::Large, Level::Medium)));
        assert_eq!(u.caption.as_deref(), Some(&cap[..]));
        assert_eq!(u.hq, hq);
    }

    #[test]
    fn variants_omit_segments() {
        let v = Vocabulary::build(&words(20), 16).unwrap();
        let instr: Vec<usize> = (16..21).collect();
        let cap: Vec<usize> = (21..27).collect();
        let (lq, hq) = (grid(8, 8, 1, 16), grid(8, 8, 2, 16));
        let deg = Some((Level::Small, Level::Small));
        let full = pack_sequence(&instr, &lq, deg, Some(&cap), &hq, &v).unwrap();
        let perception = pack_sequence(&instr, &lq, deg, None, &hq, &v).unwrap();
        let understanding = pack_sequence(&instr, &lq, None, Some(&cap), &hq, &v).unwrap();
        let none = pack_sequence(&instr, &lq, None, None, &hq, &v).unwrap();
        assert_eq!(full.len(), 151);
        assert_eq!(perception.len(), 151 - 8);
        assert_eq!(understanding.len(), 151 - 4);
        assert_eq!(none.len(), 151 - 12);
        let u = unpack(&none.ids, 8, 8, &v).unwrap();
        assert_eq!((u.degradation, u.caption), (None, None));
    }

    #[test]
    fn grid_shape_mismatch_rejected() {
        let v = Vocabulary::build(&words(3), 16).unwrap();
        let err = pack_sequence(&[], &grid(8, 8, 0, 16), None, None, &grid(4, 8, 0, 16), &v).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn uncond_layout() {
        let v = Vocabulary::build(&words(3), 16).unwrap();
        let hq = grid(8, 8, 3, 16);
        let s = pack_uncond(&hq, &v).unwrap();
        assert_eq!(s.len(), 69);
        assert_eq!(s.loss_mask.iter().filter(|m| **m).count(), 67);
        assert!(!s.loss_mask[0] && !s.loss_mask[1] && s.loss_mask[2]);
        let u = unpack(&s.ids, 8, 8, &v).unwrap();
        assert_eq!(u.hq, hq);
        assert!(u.lq.is_none());

        let cond = pack_sequence(&[16], &hq, Some((Level::Small, Level::Large)), Some(&[17]), &hq, &v).unwrap();
        assert!(!cond.ids.contains(&Special::Uncond.id()));
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::build(&words(10), 32).unwrap();
        assert_eq!(Vocabulary::from_json(&v.to_json().unwrap()).unwrap(), v);
    }
}
