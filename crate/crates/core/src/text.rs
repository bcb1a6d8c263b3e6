//! Tokenization, vocabularies, sparse token features and the BILOU codec.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Characters removed by the tokenizer. They act as token separators.
pub const PUNCTUATION: [char; 6] = [',', '.', ';', ':', '!', '?'];

/// The single entity label of the task.
pub const PRODUCT_LABEL: &str = "product";

/// Default maximum character n-gram length.
pub const DEFAULT_N_MAX: usize = 4;

/// Lowercases, splits on whitespace and drops the [`PUNCTUATION`] characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || PUNCTUATION.contains(&c))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// All contiguous character substrings of length `1..=n_max`, shortest
/// first, with multiplicity.
pub fn char_ngrams(token: &str, n_max: usize) -> Vec<String> {
    let chars: Vec<char> = token.chars().collect();
    let mut out = Vec::new();
    for n in 1..=n_max.min(chars.len()) {
        for window in chars.windows(n) {
            out.push(window.iter().collect());
        }
    }
    out
}

/// Half-open token range `[start, end)` carrying an entity label.
#[derive(
    Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl EntitySpan {
    pub fn product(start: usize, end: usize) -> Self {
        EntitySpan {
            start,
            end,
            label: PRODUCT_LABEL.to_owned(),
        }
    }
}

/// Checks that spans are non-empty, in `[0, len]`, sorted and disjoint.
pub fn validate_spans(spans: &[EntitySpan], len: usize) -> Result<()> {
    let mut prev_end = 0;
    for span in spans {
        if span.start >= span.end || span.end > len {
            return Err(Error::InvalidSpans(format!(
                "span ({}, {}) out of range for length {len}",
                span.start, span.end
            )));
        }
        if span.start < prev_end {
            return Err(Error::InvalidSpans(format!(
                "span ({}, {}) overlaps or is out of order",
                span.start, span.end
            )));
        }
        prev_end = span.end;
    }
    Ok(())
}

/// BILOU tags for the product label. The discriminant is the tag id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    O = 0,
    B = 1,
    I = 2,
    L = 3,
    U = 4,
}

impl Tag {
    pub const COUNT: usize = 5;
    pub const ALL: [Tag; 5] = [Tag::O, Tag::B, Tag::I, Tag::L, Tag::U];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Tag> {
        Tag::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::O => "O",
            Tag::B => "B-product",
            Tag::I => "I-product",
            Tag::L => "L-product",
            Tag::U => "U-product",
        }
    }
}

pub fn bilou_encode(spans: &[EntitySpan], len: usize) -> Result<Vec<Tag>> {
    validate_spans(spans, len)?;
    let mut tags = vec![Tag::O; len];
    for span in spans {
        if span.end - span.start == 1 {
            tags[span.start] = Tag::U;
        } else {
            tags[span.start] = Tag::B;
            for t in &mut tags[span.start + 1..span.end - 1] {
                *t = Tag::I;
            }
            tags[span.end - 1] = Tag::L;
        }
    }
    Ok(tags)
}

/// Parses a run of non-`O` tags starting at `offset` into spans, or returns
/// the position of the first violation.
fn parse_run(
    run: &[Tag],
    offset: usize,
    out: &mut Vec<EntitySpan>,
) -> std::result::Result<(), usize> {
    let mut open: Option<usize> = None;
    for (i, &tag) in run.iter().enumerate() {
        let pos = offset + i;
        match (tag, open) {
            (Tag::U, None) => out.push(EntitySpan::product(pos, pos + 1)),
            (Tag::B, None) => open = Some(pos),
            (Tag::I, Some(_)) => {}
            (Tag::L, Some(start)) => {
                out.push(EntitySpan::product(start, pos + 1));
                open = None;
            }
            _ => return Err(pos),
        }
    }
    match open {
        Some(_) => Err(offset + run.len()),
        None => Ok(()),
    }
}

/// Converts tags back into spans.
///
/// Strict mode rejects any sequence `bilou_encode` cannot produce. Lenient
/// mode keeps well-formed runs of entity tags as they are and turns each
/// ill-formed maximal run of non-`O` tags into a single span.
pub fn bilou_decode(tags: &[Tag], strict: bool) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut pos = 0;
    while pos < tags.len() {
        if tags[pos] == Tag::O {
            pos += 1;
            continue;
        }
        let run_end = tags[pos..]
            .iter()
            .position(|&t| t == Tag::O)
            .map_or(tags.len(), |p| pos + p);
        let mut parsed = Vec::new();
        match parse_run(&tags[pos..run_end], pos, &mut parsed) {
            Ok(()) => spans.extend(parsed),
            Err(position) if strict => return Err(Error::IllFormedBilou { position }),
            Err(_) => spans.push(EntitySpan::product(pos, run_end)),
        }
        pos = run_end;
    }
    Ok(spans)
}

/// Word and character n-gram index built from a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_index: HashMap<String, usize>,
    ngrams: Vec<String>,
    ngram_index: HashMap<String, usize>,
    pub min_freq: usize,
    pub n_max: usize,
}

fn ranked(counts: HashMap<String, usize>, min_freq: usize) -> Vec<String> {
    let mut items: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.into_iter().map(|(s, _)| s).collect()
}

fn index_of(items: &[String]) -> HashMap<String, usize> {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect()
}

impl Vocabulary {
    /// Keeps words and n-grams seen at least `min_freq` times; ids go by
    /// frequency (descending) then surface (ascending).
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize, n_max: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if min_freq == 0 || n_max == 0 {
            return Err(Error::Config(
                "min_freq and n_max must be at least 1".into(),
            ));
        }
        let mut word_counts: HashMap<String, usize> = HashMap::new();
        let mut ngram_counts: HashMap<String, usize> = HashMap::new();
        for seq in corpus {
            for token in seq {
                let token = token.as_ref();
                *word_counts.entry(token.to_owned()).or_default() += 1;
                for g in char_ngrams(token, n_max) {
                    *ngram_counts.entry(g).or_default() += 1;
                }
            }
        }
        let words = ranked(word_counts, min_freq);
        let ngrams = ranked(ngram_counts, min_freq);
        Ok(Vocabulary {
            word_index: index_of(&words),
            ngram_index: index_of(&ngrams),
            words,
            ngrams,
            min_freq,
            n_max,
        })
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.word_index.get(word).copied()
    }

    pub fn ngram_id(&self, ngram: &str) -> Option<usize> {
        self.ngram_index.get(ngram).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn ngrams(&self) -> &[String] {
        &self.ngrams
    }

    /// Writes `kind<TAB>surface<TAB>id` lines, words then n-grams, by id.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, w) in self.words.iter().enumerate() {
            writeln!(out, "word\t{w}\t{id}")?;
        }
        for (id, g) in self.ngrams.iter().enumerate() {
            writeln!(out, "ngram\t{g}\t{id}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R, min_freq: usize, n_max: usize) -> Result<Self> {
        let mut words = Vec::new();
        let mut ngrams = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            let line =
                line.map_err(|e| Error::format(format!("vocabulary read error: {e}"), line_no))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [kind, surface, id] = fields[..] else {
                return Err(Error::format("vocabulary entry needs 3 fields", line_no));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::format(format!("bad vocabulary id {id:?}"), line_no))?;
            let target = match kind {
                "word" => &mut words,
                "ngram" => &mut ngrams,
                other => {
                    return Err(Error::format(
                        format!("unknown vocabulary kind {other:?}"),
                        line_no,
                    ))
                }
            };
            if id != target.len() {
                return Err(Error::format(
                    "vocabulary ids must be dense and sorted",
                    line_no,
                ));
            }
            target.push(surface.to_owned());
        }
        Ok(Vocabulary {
            word_index: index_of(&words),
            ngram_index: index_of(&ngrams),
            words,
            ngrams,
            min_freq,
            n_max,
        })
    }
}

pub const NUMBER_WORDS: [&str; 24] = [
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
    "thirty",
    "forty",
    "fifty",
    "hundred",
];

pub const UNIT_WORDS: [&str; 10] = [
    "gallon", "gallons", "bag", "bags", "pound", "pounds", "oz", "pack", "packs", "dozen",
];

/// Token shape flags: digit, number word, unit word, and three length buckets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LexicalFlags(pub [bool; LexicalFlags::WIDTH]);

impl LexicalFlags {
    pub const WIDTH: usize = 6;
    pub const IS_DIGIT: usize = 0;
    pub const IS_NUMBER_WORD: usize = 1;
    pub const IS_UNIT_WORD: usize = 2;
    pub const SHORT: usize = 3;
    pub const MEDIUM: usize = 4;
    pub const LONG: usize = 5;

    pub fn of(token: &str) -> Self {
        let len = token.chars().count();
        let mut flags = [false; Self::WIDTH];
        flags[Self::IS_DIGIT] = !token.is_empty() && token.chars().all(|c| c.is_ascii_digit());
        flags[Self::IS_NUMBER_WORD] = NUMBER_WORDS.contains(&token);
        flags[Self::IS_UNIT_WORD] = UNIT_WORDS.contains(&token);
        flags[Self::SHORT] = len <= 3;
        flags[Self::MEDIUM] = (4..=6).contains(&len);
        flags[Self::LONG] = len >= 7;
        LexicalFlags(flags)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseTokenFeatures {
    /// Vocabulary id of the word, `None` when out of vocabulary.
    pub word: Option<usize>,
    /// `(ngram id, count)` pairs sorted by id.
    pub ngrams: Vec<(usize, u32)>,
    pub lexical: Option<LexicalFlags>,
}

impl SparseTokenFeatures {
    /// Active coordinates in the concatenated input space
    /// `[words | ngrams | lexical]` of widths given by the vocabulary.
    pub fn active(&self, n_words: usize, n_ngrams: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(1 + self.ngrams.len() + LexicalFlags::WIDTH);
        if let Some(w) = self.word {
            out.push((w, 1.0));
        }
        out.extend(
            self.ngrams
                .iter()
                .map(|&(g, c)| (n_words + g, f64::from(c))),
        );
        if let Some(flags) = self.lexical {
            for (i, _) in flags.0.iter().enumerate().filter(|(_, on)| **on) {
                out.push((n_words + n_ngrams + i, 1.0));
            }
        }
        out
    }
}

pub fn featurize<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    use_lexical: bool,
) -> Vec<SparseTokenFeatures> {
    tokens
        .iter()
        .map(|token| {
            let token = token.as_ref();
            let mut counts: HashMap<usize, u32> = HashMap::new();
            for g in char_ngrams(token, vocab.n_max) {
                if let Some(id) = vocab.ngram_id(&g) {
                    *counts.entry(id).or_default() += 1;
                }
            }
            let mut ngrams: Vec<(usize, u32)> = counts.into_iter().collect();
            ngrams.sort_unstable();
            SparseTokenFeatures {
                word: vocab.word_id(token),
                ngrams,
                lexical: use_lexical.then(|| LexicalFlags::of(token)),
            }
        })
        .collect()
}
