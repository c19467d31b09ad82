//! Unified token-id space and the coarse-to-fine image grammar.
//!
//! One image serializes as
//!
//! ```text
//! <soi> H W <sos> (s s … s <eol>)×H <eos> <sop> (p p … p <eol>)×(H·r) <eop> <eoi>
//! ```
//!
//! where `H`/`W` are the semantic grid size as dedicated indicator tokens, each
//! semantic row holds `W` ids, each pixel row `W·r` ids and `r` is the fixed
//! pixel-per-semantic ratio. Both [`parse`] and [`next_legal_mask`] run the
//! same [`GrammarState`] machine, so a mask-guided sampler can only emit
//! sequences that parse.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::grid::IndexGrid;

pub const NUM_MARKERS: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Marker {
    StartOfImage,
    EndOfImage,
    StartOfSemantic,
    EndOfSemantic,
    StartOfPixel,
    EndOfPixel,
    EndOfLine,
}

impl Marker {
    const ALL: [Marker; 7] = [
        Marker::StartOfImage,
        Marker::EndOfImage,
        Marker::StartOfSemantic,
        Marker::EndOfSemantic,
        Marker::StartOfPixel,
        Marker::EndOfPixel,
        Marker::EndOfLine,
    ];

    fn offset(self) -> u32 {
        Self::ALL.iter().position(|&m| m == self).unwrap() as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Marker::StartOfImage => "<start_of_image>",
            Marker::EndOfImage => "<end_of_image>",
            Marker::StartOfSemantic => "<start_of_semantic>",
            Marker::EndOfSemantic => "<end_of_semantic>",
            Marker::StartOfPixel => "<start_of_pixel>",
            Marker::EndOfPixel => "<end_of_pixel>",
            Marker::EndOfLine => "<end_of_line>",
        }
    }
}

/// Decoded meaning of a global token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Text(u32),
    Marker(Marker),
    /// Semantic-grid height, 1-based.
    Height(u32),
    /// Semantic-grid width, 1-based.
    Width(u32),
    Semantic(u32),
    Pixel(u32),
}

/// Contiguous id layout: text, markers, height indicators, width indicators,
/// semantic codes, pixel codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_vocab: u32,
    pub sem_codes: u32,
    pub pix_codes: u32,
    pub max_height: u32,
    pub max_width: u32,
    /// Pixel-grid cells per semantic-grid cell along each axis, as an exact
    /// fraction `num/den`.
    pub pix_ratio_num: u32,
    pub pix_ratio_den: u32,
}

impl VocabLayout {
    /// Builds a layout with the desk-preset pixel-per-semantic ratio of 2.
    pub fn build(
        text_vocab: u32,
        sem_codes: u32,
        pix_codes: u32,
        max_height: u32,
        max_width: u32,
    ) -> Result<Self> {
        Self::with_ratio(text_vocab, sem_codes, pix_codes, max_height, max_width, (2, 1))
    }

    pub fn with_ratio(
        text_vocab: u32,
        sem_codes: u32,
        pix_codes: u32,
        max_height: u32,
        max_width: u32,
        (num, den): (u32, u32),
    ) -> Result<Self> {
        if sem_codes == 0 || pix_codes == 0 || max_height == 0 || max_width == 0 || num == 0 || den == 0
        {
            return domain("codebook sizes, size limits and ratio must be positive");
        }
        let total = text_vocab as u64
            + NUM_MARKERS as u64
            + max_height as u64
            + max_width as u64
            + sem_codes as u64
            + pix_codes as u64;
        if total > u32::MAX as u64 {
            return domain(format!("vocabulary of {total} ids overflows 32-bit token ids"));
        }
        Ok(Self {
            text_vocab,
            sem_codes,
            pix_codes,
            max_height,
            max_width,
            pix_ratio_num: num,
            pix_ratio_den: den,
        })
    }

    /// Pixel-grid length for a semantic-grid length, if it is integral.
    pub fn pix_len(&self, sem_len: usize) -> Option<usize> {
        let scaled = sem_len * self.pix_ratio_num as usize;
        (scaled % self.pix_ratio_den as usize == 0).then(|| scaled / self.pix_ratio_den as usize)
    }

    /// Grid sizes that have an integral pixel counterpart.
    fn sizes(&self, max: u32) -> impl Iterator<Item = u32> + '_ {
        (1..=max).filter(|&n| self.pix_len(n as usize).is_some())
    }

    pub fn marker(&self, m: Marker) -> u32 {
        self.text_vocab + m.offset()
    }

    fn height_offset(&self) -> u32 {
        self.text_vocab + NUM_MARKERS
    }

    fn width_offset(&self) -> u32 {
        self.height_offset() + self.max_height
    }

    pub fn sem_offset(&self) -> u32 {
        self.width_offset() + self.max_width
    }

    pub fn pix_offset(&self) -> u32 {
        self.sem_offset() + self.sem_codes
    }

    pub fn vocab_size(&self) -> u32 {
        self.pix_offset() + self.pix_codes
    }

    pub fn to_global(&self, t: Token) -> Result<u32> {
        let id = match t {
            Token::Text(i) if i < self.text_vocab => i,
            Token::Marker(m) => self.marker(m),
            Token::Height(h) if (1..=self.max_height).contains(&h) => self.height_offset() + h - 1,
            Token::Width(w) if (1..=self.max_width).contains(&w) => self.width_offset() + w - 1,
            Token::Semantic(i) if i < self.sem_codes => self.sem_offset() + i,
            Token::Pixel(i) if i < self.pix_codes => self.pix_offset() + i,
            other => return domain(format!("{other:?} outside layout")),
        };
        Ok(id)
    }

    pub fn from_global(&self, id: u32) -> Result<Token> {
        let t = if id < self.text_vocab {
            Token::Text(id)
        } else if id < self.height_offset() {
            Token::Marker(Marker::ALL[(id - self.text_vocab) as usize])
        } else if id < self.width_offset() {
            Token::Height(id - self.height_offset() + 1)
        } else if id < self.sem_offset() {
            Token::Width(id - self.width_offset() + 1)
        } else if id < self.pix_offset() {
            Token::Semantic(id - self.sem_offset())
        } else if id < self.vocab_size() {
            Token::Pixel(id - self.pix_offset())
        } else {
            return domain(format!("id {id} outside vocabulary of {}", self.vocab_size()));
        };
        Ok(t)
    }

    pub fn is_sem_code(&self, id: u32) -> bool {
        (self.sem_offset()..self.pix_offset()).contains(&id)
    }

    pub fn is_pix_code(&self, id: u32) -> bool {
        (self.pix_offset()..self.vocab_size()).contains(&id)
    }

    /// Ids that carry image content rather than text.
    pub fn is_vision(&self, id: u32) -> bool {
        id >= self.text_vocab && id < self.vocab_size()
    }

    /// 32-bit fingerprint written into token-stream files.
    pub fn hash(&self) -> u32 {
        let mut h = Sha256::new();
        for v in [
            self.text_vocab,
            self.sem_codes,
            self.pix_codes,
            self.max_height,
            self.max_width,
            self.pix_ratio_num,
            self.pix_ratio_den,
        ] {
            h.update(v.to_le_bytes());
        }
        let d = h.finalize();
        u32::from_le_bytes([d[0], d[1], d[2], d[3]])
    }

    /// Human-readable name of a token id.
    pub fn describe(&self, id: u32) -> String {
        match self.from_global(id) {
            Ok(Token::Text(i)) => format!("text:{i}"),
            Ok(Token::Marker(m)) => m.name().to_string(),
            Ok(Token::Height(h)) => format!("<h={h}>"),
            Ok(Token::Width(w)) => format!("<w={w}>"),
            Ok(Token::Semantic(i)) => format!("s{i}"),
            Ok(Token::Pixel(i)) => format!("p{i}"),
            Err(_) => format!("?{id}"),
        }
    }
}

/// Semantic and pixel code grids of one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageTokenBlock {
    pub sem_indices: IndexGrid,
    pub pix_indices: IndexGrid,
}

impl ImageTokenBlock {
    pub fn new(sem_indices: IndexGrid, pix_indices: IndexGrid) -> Self {
        Self {
            sem_indices,
            pix_indices,
        }
    }

    pub fn sem_dims(&self) -> (usize, usize) {
        (self.sem_indices.h, self.sem_indices.w)
    }

    pub fn pix_dims(&self) -> (usize, usize) {
        (self.pix_indices.h, self.pix_indices.w)
    }

    pub fn validate(&self, layout: &VocabLayout) -> Result<()> {
        let (sh, sw) = self.sem_dims();
        let (ph, pw) = self.pix_dims();
        if sh == 0 || sw == 0 {
            return domain("semantic grid must be non-empty");
        }
        if sh > layout.max_height as usize || sw > layout.max_width as usize {
            return domain(format!(
                "semantic grid {sh}x{sw} exceeds limit {}x{}",
                layout.max_height, layout.max_width
            ));
        }
        if layout.pix_len(sh) != Some(ph) || layout.pix_len(sw) != Some(pw) {
            return domain(format!(
                "pixel grid {ph}x{pw} inconsistent with semantic grid {sh}x{sw} at ratio {}/{}",
                layout.pix_ratio_num, layout.pix_ratio_den
            ));
        }
        if let Some(&i) = self.sem_indices.data.iter().find(|&&i| i >= layout.sem_codes) {
            return domain(format!("semantic code {i} out of range 0..{}", layout.sem_codes));
        }
        if let Some(&i) = self.pix_indices.data.iter().find(|&&i| i >= layout.pix_codes) {
            return domain(format!("pixel code {i} out of range 0..{}", layout.pix_codes));
        }
        Ok(())
    }
}

/// Number of ids [`serialize`] emits for a block of the given grid sizes.
pub fn serialized_len(sem_h: usize, sem_w: usize, pix_h: usize, pix_w: usize) -> usize {
    8 + sem_h * (sem_w + 1) + pix_h * (pix_w + 1)
}

pub fn serialize(block: &ImageTokenBlock, layout: &VocabLayout) -> Result<Vec<u32>> {
    block.validate(layout)?;
    let (sh, sw) = block.sem_dims();
    let (ph, pw) = block.pix_dims();
    let eol = layout.marker(Marker::EndOfLine);
    let mut out = Vec::with_capacity(serialized_len(sh, sw, ph, pw));
    out.push(layout.marker(Marker::StartOfImage));
    out.push(layout.to_global(Token::Height(sh as u32))?);
    out.push(layout.to_global(Token::Width(sw as u32))?);
    out.push(layout.marker(Marker::StartOfSemantic));
    for row in block.sem_indices.rows() {
        out.extend(row.iter().map(|&i| layout.sem_offset() + i));
        out.push(eol);
    }
    out.push(layout.marker(Marker::EndOfSemantic));
    out.push(layout.marker(Marker::StartOfPixel));
    for row in block.pix_indices.rows() {
        out.extend(row.iter().map(|&i| layout.pix_offset() + i));
        out.push(eol);
    }
    out.push(layout.marker(Marker::EndOfPixel));
    out.push(layout.marker(Marker::EndOfImage));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Semantic,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnknownId(u32),
    UnexpectedToken { expected: &'static str, found: String },
    RowLengthMismatch { section: Section, row: usize },
    RowCountMismatch { expected: usize },
    PixelGridInconsistent { expected: (usize, usize) },
    CodeOutOfRange { section: Section, found: String },
    Truncated { expected: &'static str },
    TrailingTokens,
}

/// First grammar violation in a token stream.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind} at position {position}")]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::UnknownId(id) => write!(f, "unknown token id {id}"),
            Self::UnexpectedToken { expected, found } => {
                write!(f, "expected {expected}, found {found}")
            }
            Self::RowLengthMismatch { section, row } => {
                write!(f, "row length mismatch at row {row} ({section:?} grid)")
            }
            Self::RowCountMismatch { expected } => {
                write!(f, "semantic row count mismatch, expected {expected} rows")
            }
            Self::PixelGridInconsistent { expected } => write!(
                f,
                "pixel grid inconsistent with semantic grid, expected {}x{}",
                expected.0, expected.1
            ),
            Self::CodeOutOfRange { section, found } => {
                write!(f, "{found} is not a {section:?} code")
            }
            Self::Truncated { expected } => write!(f, "stream truncated, expected {expected}"),
            Self::TrailingTokens => write!(f, "tokens after <end_of_image>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Start,
    Height,
    Width,
    SemStart,
    Body { section: Section, row: usize, col: usize },
    PixStart,
    End,
    Done,
}

/// Incremental grammar recognizer.
#[derive(Debug, Clone)]
pub struct GrammarState {
    layout: VocabLayout,
    phase: Phase,
    dims: (usize, usize),
    target: Option<(usize, usize)>,
    consumed: usize,
    sem: Vec<u32>,
    pix: Vec<u32>,
}

/// What may come next, as id ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Legal {
    pub ranges: Vec<std::ops::Range<u32>>,
}

impl Legal {
    /// Coalesces ascending ids into ranges.
    fn from_ids(ids: impl Iterator<Item = u32>) -> Self {
        let mut ranges: Vec<std::ops::Range<u32>> = Vec::new();
        for id in ids {
            match ranges.last_mut() {
                Some(r) if r.end == id => r.end += 1,
                _ => ranges.push(id..id + 1),
            }
        }
        Self { ranges }
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ranges.iter().any(|r| r.contains(&id))
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.iter().all(|r| r.is_empty())
    }

    pub fn to_mask(&self, vocab: usize) -> Vec<bool> {
        let mut mask = vec![false; vocab];
        for r in &self.ranges {
            for id in r.clone() {
                mask[id as usize] = true;
            }
        }
        mask
    }
}

impl GrammarState {
    pub fn new(layout: VocabLayout) -> Self {
        Self {
            layout,
            phase: Phase::Start,
            dims: (0, 0),
            target: None,
            consumed: 0,
            sem: Vec::new(),
            pix: Vec::new(),
        }
    }

    /// A recognizer that only admits the given semantic grid size.
    pub fn with_target(layout: VocabLayout, sem_h: usize, sem_w: usize) -> Result<Self> {
        if sem_h == 0
            || sem_w == 0
            || sem_h > layout.max_height as usize
            || sem_w > layout.max_width as usize
            || layout.pix_len(sem_h).is_none()
            || layout.pix_len(sem_w).is_none()
        {
            return domain(format!(
                "target grid {sem_h}x{sem_w} outside 1..={}x1..={}",
                layout.max_height, layout.max_width
            ));
        }
        let mut s = Self::new(layout);
        s.target = Some((sem_h, sem_w));
        Ok(s)
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    fn single(id: u32) -> Legal {
        Legal {
            ranges: vec![id..id + 1],
        }
    }

    fn pix_dims(&self) -> (usize, usize) {
        // Only sizes with integral pixel lengths are ever admitted.
        (
            self.layout.pix_len(self.dims.0).unwrap_or(0),
            self.layout.pix_len(self.dims.1).unwrap_or(0),
        )
    }

    fn section_dims(&self, section: Section) -> (usize, usize) {
        match section {
            Section::Semantic => self.dims,
            Section::Pixel => self.pix_dims(),
        }
    }

    pub fn legal(&self) -> Legal {
        let l = &self.layout;
        match self.phase {
            Phase::Start => Self::single(l.marker(Marker::StartOfImage)),
            Phase::Height => match self.target {
                Some((h, _)) => Self::single(l.height_offset() + h as u32 - 1),
                None => Legal::from_ids(l.sizes(l.max_height).map(|h| l.height_offset() + h - 1)),
            },
            Phase::Width => match self.target {
                Some((_, w)) => Self::single(l.width_offset() + w as u32 - 1),
                None => Legal::from_ids(l.sizes(l.max_width).map(|w| l.width_offset() + w - 1)),
            },
            Phase::SemStart => Self::single(l.marker(Marker::StartOfSemantic)),
            Phase::PixStart => Self::single(l.marker(Marker::StartOfPixel)),
            Phase::Body { section, row, col } => {
                let (h, w) = self.section_dims(section);
                if row == h {
                    Self::single(match section {
                        Section::Semantic => l.marker(Marker::EndOfSemantic),
                        Section::Pixel => l.marker(Marker::EndOfPixel),
                    })
                } else if col == w {
                    Self::single(l.marker(Marker::EndOfLine))
                } else {
                    Legal {
                        ranges: vec![match section {
                            Section::Semantic => l.sem_offset()..l.pix_offset(),
                            Section::Pixel => l.pix_offset()..l.vocab_size(),
                        }],
                    }
                }
            }
            Phase::End => Self::single(l.marker(Marker::EndOfImage)),
            Phase::Done => Legal { ranges: vec![] },
        }
    }

    fn expected_name(&self) -> &'static str {
        match self.phase {
            Phase::Start => "<start_of_image>",
            Phase::Height => "height indicator",
            Phase::Width => "width indicator",
            Phase::SemStart => "<start_of_semantic>",
            Phase::PixStart => "<start_of_pixel>",
            Phase::Body { section, row, col } => {
                let (h, w) = self.section_dims(section);
                match (row == h, col == w, section) {
                    (true, _, Section::Semantic) => "<end_of_semantic>",
                    (true, _, Section::Pixel) => "<end_of_pixel>",
                    (false, true, _) => "<end_of_line>",
                    (false, false, Section::Semantic) => "semantic code",
                    (false, false, Section::Pixel) => "pixel code",
                }
            }
            Phase::End => "<end_of_image>",
            Phase::Done => "end of stream",
        }
    }

    /// Consumes one id, or reports why it cannot follow the current prefix.
    pub fn push(&mut self, id: u32) -> std::result::Result<(), ParseError> {
        let err = |kind| ParseError {
            position: self.consumed,
            kind,
        };
        let tok = match self.layout.from_global(id) {
            Ok(t) => t,
            Err(_) => return Err(err(ParseErrorKind::UnknownId(id))),
        };
        if self.phase == Phase::Done {
            return Err(err(ParseErrorKind::TrailingTokens));
        }
        if !self.legal().contains(id) {
            let found = self.layout.describe(id);
            let kind = match self.phase {
                Phase::Body { section, row, col } => {
                    let (h, w) = self.section_dims(section);
                    let is_code = matches!(tok, Token::Semantic(_) | Token::Pixel(_));
                    let is_eol = tok == Token::Marker(Marker::EndOfLine);
                    let closes = match section {
                        Section::Semantic => tok == Token::Marker(Marker::EndOfSemantic),
                        Section::Pixel => tok == Token::Marker(Marker::EndOfPixel),
                    };
                    let row_count_error = || match section {
                        Section::Semantic => ParseErrorKind::RowCountMismatch { expected: h },
                        Section::Pixel => ParseErrorKind::PixelGridInconsistent {
                            expected: (h, w),
                        },
                    };
                    if row == h && (is_code || is_eol) {
                        row_count_error()
                    } else if row < h && col == 0 && closes {
                        row_count_error()
                    } else if row < h && ((col == w && is_code) || (col < w && (is_eol || closes))) {
                        ParseErrorKind::RowLengthMismatch { section, row }
                    } else if col < w && is_code {
                        ParseErrorKind::CodeOutOfRange { section, found }
                    } else {
                        ParseErrorKind::UnexpectedToken {
                            expected: self.expected_name(),
                            found,
                        }
                    }
                }
                _ => ParseErrorKind::UnexpectedToken {
                    expected: self.expected_name(),
                    found,
                },
            };
            return Err(err(kind));
        }
        self.phase = match (self.phase, tok) {
            (Phase::Start, _) => Phase::Height,
            (Phase::Height, Token::Height(h)) => {
                self.dims.0 = h as usize;
                Phase::Width
            }
            (Phase::Width, Token::Width(w)) => {
                self.dims.1 = w as usize;
                Phase::SemStart
            }
            (Phase::SemStart, _) => Phase::Body {
                section: Section::Semantic,
                row: 0,
                col: 0,
            },
            (Phase::PixStart, _) => Phase::Body {
                section: Section::Pixel,
                row: 0,
                col: 0,
            },
            (Phase::Body { section, row, col }, t) => {
                let (h, w) = self.section_dims(section);
                match t {
                    Token::Semantic(i) => {
                        self.sem.push(i);
                        Phase::Body { section, row, col: col + 1 }
                    }
                    Token::Pixel(i) => {
                        self.pix.push(i);
                        Phase::Body { section, row, col: col + 1 }
                    }
                    Token::Marker(Marker::EndOfLine) => Phase::Body {
                        section,
                        row: row + 1,
                        col: 0,
                    },
                    _ => {
                        debug_assert!(row == h && col == 0 || w == 0);
                        match section {
                            Section::Semantic => Phase::PixStart,
                            Section::Pixel => Phase::End,
                        }
                    }
                }
            }
            (Phase::End, _) => Phase::Done,
            (p, t) => unreachable!("legal token {t:?} in phase {p:?}"),
        };
        self.consumed += 1;
        Ok(())
    }

    fn finish(self) -> std::result::Result<ImageTokenBlock, ParseError> {
        if self.phase != Phase::Done {
            return Err(ParseError {
                position: self.consumed,
                kind: ParseErrorKind::Truncated {
                    expected: self.expected_name(),
                },
            });
        }
        let (sh, sw) = self.dims;
        let (ph, pw) = self.pix_dims();
        Ok(ImageTokenBlock {
            sem_indices: IndexGrid {
                h: sh,
                w: sw,
                data: self.sem,
            },
            pix_indices: IndexGrid {
                h: ph,
                w: pw,
                data: self.pix,
            },
        })
    }
}

/// Strictly parses one serialized image block.
pub fn parse(tokens: &[u32], layout: &VocabLayout) -> std::result::Result<ImageTokenBlock, ParseError> {
    let mut state = GrammarState::new(*layout);
    for &id in tokens {
        state.push(id)?;
    }
    state.finish()
}

/// Feeds `prefix` through a recognizer, failing on a dead prefix.
pub fn advance(mut state: GrammarState, prefix: &[u32]) -> Result<GrammarState> {
    for &id in prefix {
        state
            .push(id)
            .map_err(|e| Error::Domain(format!("dead prefix: {e}")))?;
    }
    Ok(state)
}

/// Boolean mask over the whole vocabulary of ids that may extend `prefix`.
pub fn next_legal_mask(prefix: &[u32], layout: &VocabLayout) -> Result<Vec<bool>> {
    let state = advance(GrammarState::new(*layout), prefix)?;
    Ok(state.legal().to_mask(layout.vocab_size() as usize))
}

const MAGIC: &[u8; 4] = b"UTG1";

/// Writes a token-stream file: `UTG1`, u32 layout hash, u32 count, ids (all LE).
pub fn write_token_stream<W: Write>(mut w: W, layout_hash: u32, tokens: &[u32]) -> Result<()> {
    let count = u32::try_from(tokens.len())
        .map_err(|_| Error::Domain("token stream longer than u32::MAX".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&layout_hash.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for &t in tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a token-stream file, returning `(layout_hash, tokens)`.
pub fn read_token_stream<R: Read>(mut r: R) -> Result<(u32, Vec<u32>)> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| Error::Domain("token stream shorter than its 12-byte header".into()))?;
    if &head[..4] != MAGIC {
        return domain(format!("bad magic {:?}, expected UTG1", &head[..4]));
    }
    let hash = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != count * 4 {
        return domain(format!(
            "header announces {count} tokens, body holds {} bytes",
            body.len()
        ));
    }
    let tokens = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((hash, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> VocabLayout {
        VocabLayout::build(10, 5, 6, 4, 4).unwrap()
    }

    fn block(sh: usize, sw: usize, r: usize) -> ImageTokenBlock {
        let sem = (0..sh * sw).map(|i| (i % 5) as u32).collect();
        let pix = (0..sh * sw * r * r).map(|i| (i % 6) as u32).collect();
        ImageTokenBlock::new(
            IndexGrid::new(sh, sw, sem).unwrap(),
            IndexGrid::new(sh * r, sw * r, pix).unwrap(),
        )
    }

    #[test]
    fn vocab_size_example() {
        let l = VocabLayout::build(1000, 1024, 4096, 64, 64).unwrap();
        assert_eq!(l.vocab_size(), 6255);
        let l = VocabLayout::build(0, 4, 4, 2, 2).unwrap();
        assert_eq!(l.marker(Marker::StartOfImage), 0);
        assert_eq!(l.from_global(l.pix_offset()).unwrap(), Token::Pixel(0));
    }

    #[test]
    fn layout_overflow_rejected() {
        assert!(VocabLayout::build(u32::MAX - 10, 8, 8, 4, 4).is_err());
    }

    #[test]
    fn bijection_over_whole_vocab() {
        let l = layout();
        for id in 0..l.vocab_size() {
            assert_eq!(l.to_global(l.from_global(id).unwrap()).unwrap(), id);
        }
        assert!(l.from_global(l.vocab_size()).is_err());
    }

    #[test]
    fn serialized_lengths() {
        let l = VocabLayout::build(0, 8, 8, 8, 8).unwrap();
        assert_eq!(serialize(&block(4, 4, 2), &l).unwrap().len(), 100);
        assert_eq!(serialize(&block(1, 1, 2), &l).unwrap().len(), 16);
    }

    #[test]
    fn parse_round_trip() {
        let l = layout();
        let b = block(3, 2, 2);
        let s = serialize(&b, &l).unwrap();
        assert_eq!(parse(&s, &l).unwrap(), b);
    }

    #[test]
    fn missing_eol_is_row_length_mismatch() {
        let l = layout();
        let mut s = serialize(&block(2, 2, 2), &l).unwrap();
        // <soi> h w <sos> s s <eol> ...; drop the first EOL.
        assert_eq!(s[6], l.marker(Marker::EndOfLine));
        s.remove(6);
        let e = parse(&s, &l).unwrap_err();
        assert_eq!(
            e.kind,
            ParseErrorKind::RowLengthMismatch {
                section: Section::Semantic,
                row: 0
            }
        );
        assert_eq!(e.position, 6);
        assert!(e.to_string().contains("row length mismatch at row 0"));
    }

    #[test]
    fn short_pixel_grid_is_inconsistent() {
        let l = VocabLayout::build(0, 8, 8, 8, 8).unwrap();
        let mut s = serialize(&block(4, 4, 2), &l).unwrap();
        // Remove the last pixel row (8 codes + EOL) to get a 7x8 pixel grid.
        let eop = s.len() - 2;
        s.drain(eop - 9..eop);
        let e = parse(&s, &l).unwrap_err();
        assert_eq!(
            e.kind,
            ParseErrorKind::PixelGridInconsistent { expected: (8, 8) }
        );
    }

    #[test]
    fn distinct_error_kinds() {
        let l = layout();
        let s = serialize(&block(1, 1, 2), &l).unwrap();
        let e = parse(&s[..s.len() - 1], &l).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Truncated { .. }));
        let mut bad = s.clone();
        bad[4] = l.pix_offset();
        assert!(matches!(
            parse(&bad, &l).unwrap_err().kind,
            ParseErrorKind::CodeOutOfRange { .. }
        ));
        let mut long = s.clone();
        long.push(0);
        assert_eq!(parse(&long, &l).unwrap_err().kind, ParseErrorKind::TrailingTokens);
        let mut unk = s;
        unk[0] = 9999;
        assert_eq!(parse(&unk, &l).unwrap_err().kind, ParseErrorKind::UnknownId(9999));
    }

    #[test]
    fn mask_examples() {
        let l = layout();
        let m = next_legal_mask(&[], &l).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[l.marker(Marker::StartOfImage) as usize]);

        let s = serialize(&block(2, 2, 2), &l).unwrap();
        // Prefix ends with one semantic cell left in row 0.
        let m = next_legal_mask(&s[..5], &l).unwrap();
        let legal: Vec<u32> = (0..l.vocab_size()).filter(|&i| m[i as usize]).collect();
        assert_eq!(legal, (l.sem_offset()..l.pix_offset()).collect::<Vec<_>>());
        // Prefix ends a completed semantic row.
        let m = next_legal_mask(&s[..6], &l).unwrap();
        let legal: Vec<u32> = (0..l.vocab_size()).filter(|&i| m[i as usize]).collect();
        assert_eq!(legal, vec![l.marker(Marker::EndOfLine)]);

        assert!(next_legal_mask(&[l.sem_offset()], &l).is_err());
        assert!(next_legal_mask(&s, &l).unwrap().iter().all(|&b| !b));
    }

    #[test]
    fn pinned_target_fixes_indicators() {
        let l = layout();
        let st = GrammarState::with_target(l, 3, 2).unwrap();
        let st = advance(st, &[l.marker(Marker::StartOfImage)]).unwrap();
        assert_eq!(
            st.legal().ranges,
            vec![l.to_global(Token::Height(3)).unwrap()..l.to_global(Token::Height(3)).unwrap() + 1]
        );
        assert!(GrammarState::with_target(l, 5, 1).is_err());
    }

    #[test]
    fn fractional_ratio_restricts_sizes() {
        // 28x semantic vs 16x pixel downsampling: 7 pixel cells per 4 semantic cells.
        let l = VocabLayout::with_ratio(0, 4, 4, 8, 8, (7, 4)).unwrap();
        let legal = advance(GrammarState::new(l), &[l.marker(Marker::StartOfImage)])
            .unwrap()
            .legal();
        let heights: Vec<Token> = (0..l.vocab_size())
            .filter(|&i| legal.contains(i))
            .map(|i| l.from_global(i).unwrap())
            .collect();
        assert_eq!(heights, vec![Token::Height(4), Token::Height(8)]);
        let b = ImageTokenBlock::new(IndexGrid::filled(8, 4, 1), IndexGrid::filled(14, 7, 2));
        let s = serialize(&b, &l).unwrap();
        assert_eq!(parse(&s, &l).unwrap(), b);
    }

    #[test]
    fn token_stream_round_trip_and_errors() {
        let mut buf = Vec::new();
        write_token_stream(&mut buf, 0xdead_beef, &[1, 2, 3]).unwrap();
        assert_eq!(&buf[..4], b"UTG1");
        assert_eq!(buf.len(), 12 + 12);
        assert_eq!(read_token_stream(&buf[..]).unwrap(), (0xdead_beef, vec![1, 2, 3]));
        assert!(read_token_stream(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_token_stream(&bad[..]).is_err());
    }
}
