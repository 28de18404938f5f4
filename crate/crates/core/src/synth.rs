//! Synthetic attribute corpora with exactly computable ground truth.
//!
//! The vocabulary is fixed at 64 ids: three reserved tokens, the lowercase
//! letters as filler, and multi-character word tokens grouped into attribute
//! lexicons. A record's tokens are drawn from a mixture of its attributes'
//! lexicons and filler, with the lexicon share set by the separability knob;
//! an exclusive-lexicon token count oracle then recovers the attribute.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::bank::AspectSchema;
use crate::error::{Error, Result};
use crate::model::{BOS_ID, MASK_ID, PAD_ID};
use crate::rng::SeededRng;

pub const VOCAB_SIZE: usize = 64;
const CHAR_BASE: u32 = 3;
const NUM_CHARS: u32 = 26;
const WORD_BASE: u32 = CHAR_BASE + NUM_CHARS; // 29

/// Word tokens, ids WORD_BASE..64 in this order.
const WORDS: [&str; 35] = [
    // polarity: negative, positive
    "awful", "bleak", "dismal", "dreary", "grim",
    "bright", "cheerful", "glad", "sunny", "vivid",
    // topic: world, sports, business, science
    "border", "embassy", "nation", "treaty",
    "coach", "goal", "league", "match",
    "market", "profit", "shares", "trade",
    "atom", "data", "orbit", "quantum",
    // toxicity: toxic, clean
    "curse", "insult", "slur", "venom",
    "calm", "gentle", "kind", "polite",
    // neutral spare
    "plain",
];

pub fn token_to_string(id: u32) -> Result<String> {
    match id {
        PAD_ID => Ok("<pad>".into()),
        MASK_ID => Ok("<mask>".into()),
        BOS_ID => Ok("<bos>".into()),
        _ if (CHAR_BASE..WORD_BASE).contains(&id) => {
            Ok(((b'a' + (id - CHAR_BASE) as u8) as char).to_string())
        }
        _ if (id as usize) < VOCAB_SIZE => Ok(WORDS[(id - WORD_BASE) as usize].into()),
        _ => Err(Error::InvalidInput(format!("token id {id} outside vocab"))),
    }
}

fn piece_to_tokens(piece: &str, out: &mut Vec<u32>) -> Result<()> {
    match piece {
        "<pad>" => {
            out.push(PAD_ID);
            return Ok(());
        }
        "<mask>" => {
            out.push(MASK_ID);
            return Ok(());
        }
        "<bos>" => {
            out.push(BOS_ID);
            return Ok(());
        }
        _ => {}
    }
    if let Some(w) = WORDS.iter().position(|&w| w == piece) {
        out.push(WORD_BASE + w as u32);
        return Ok(());
    }
    for c in piece.chars() {
        if c.is_ascii_lowercase() {
            out.push(CHAR_BASE + (c as u8 - b'a') as u32);
        } else {
            return Err(Error::InvalidInput(format!("symbol `{c}` outside vocab")));
        }
    }
    Ok(())
}

/// Whitespace-separated pieces: known words map to word ids, everything else
/// decomposes into letter ids.
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        piece_to_tokens(piece, &mut out)?;
    }
    Ok(out)
}

/// Inverse of [`tokenize`] for generated corpora: pieces joined by spaces.
pub fn detokenize(tokens: &[u32]) -> Result<String> {
    let pieces: Vec<String> = tokens.iter().map(|&t| token_to_string(t)).collect::<Result<_>>()?;
    Ok(pieces.join(" "))
}

/// A generative aspect: schema, per-attribute lexicon token sets, sequence
/// length range, and the probability mass placed on attribute-exclusive
/// tokens.
#[derive(Clone, Debug)]
pub struct AspectSpec {
    pub schema: AspectSchema,
    pub lexicons: Vec<Vec<u32>>,
    pub separability: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl AspectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lexicons.len() != self.schema.n() {
            return Err(Error::Config("one lexicon per attribute required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (a, lex) in self.lexicons.iter().enumerate() {
            if lex.is_empty() {
                return Err(Error::Config(format!(
                    "empty lexicon for {}",
                    self.schema.attributes[a]
                )));
            }
            for &t in lex {
                if t as usize >= VOCAB_SIZE || t < WORD_BASE {
                    return Err(Error::Config(format!("lexicon id {t} is not a word token")));
                }
                if !seen.insert(t) {
                    return Err(Error::Config(format!(
                        "token {} appears in two lexicons of {}",
                        token_to_string(t)?,
                        self.schema.aspect_name
                    )));
                }
            }
        }
        if !(self.separability > 0.0 && self.separability <= 1.0) {
            return Err(Error::Config(format!(
                "separability {} outside (0, 1]",
                self.separability
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("bad sequence length range".into()));
        }
        Ok(())
    }

    fn word_ids(names: &[&str]) -> Vec<u32> {
        names
            .iter()
            .map(|n| WORD_BASE + WORDS.iter().position(|w| w == n).expect("stock word") as u32)
            .collect()
    }

    /// Two-attribute sentiment stand-in.
    pub fn polarity(separability: f64) -> Self {
        Self {
            schema: AspectSchema::new("polarity", vec!["negative".into(), "positive".into()])
                .unwrap(),
            lexicons: vec![
                Self::word_ids(&["awful", "bleak", "dismal", "dreary", "grim"]),
                Self::word_ids(&["bright", "cheerful", "glad", "sunny", "vivid"]),
            ],
            separability,
            min_len: 12,
            max_len: 24,
        }
    }

    /// Four-attribute news-topic stand-in.
    pub fn topic(separability: f64) -> Self {
        Self {
            schema: AspectSchema::new(
                "topic",
                vec!["world".into(), "sports".into(), "business".into(), "science".into()],
            )
            .unwrap(),
            lexicons: vec![
                Self::word_ids(&["border", "embassy", "nation", "treaty"]),
                Self::word_ids(&["coach", "goal", "league", "match"]),
                Self::word_ids(&["market", "profit", "shares", "trade"]),
                Self::word_ids(&["atom", "data", "orbit", "quantum"]),
            ],
            separability,
            min_len: 12,
            max_len: 24,
        }
    }

    /// Detoxification stand-in: success means suppressing the toxic lexicon.
    pub fn toxicity(separability: f64) -> Self {
        Self {
            schema: AspectSchema::new("toxicity", vec!["toxic".into(), "clean".into()]).unwrap(),
            lexicons: vec![
                Self::word_ids(&["curse", "insult", "slur", "venom"]),
                Self::word_ids(&["calm", "gentle", "kind", "polite"]),
            ],
            separability,
            min_len: 12,
            max_len: 24,
        }
    }

    pub fn stock(name: &str, separability: f64) -> Result<Self> {
        match name {
            "polarity" => Ok(Self::polarity(separability)),
            "topic" => Ok(Self::topic(separability)),
            "toxicity" => Ok(Self::toxicity(separability)),
            _ => Err(Error::Config(format!("no stock aspect named {name}"))),
        }
    }

    /// Parse from a flat key = value spec file.
    pub fn from_kv(kv: &crate::config::KvReader) -> Result<Self> {
        let aspect = kv.require_str("aspect")?;
        let attributes = kv
            .get_list("attributes")
            .ok_or_else(|| Error::Config("missing `attributes`".into()))?;
        let schema = AspectSchema::new(aspect, attributes)?;
        let mut lexicons = Vec::new();
        for attr in &schema.attributes {
            let words = kv
                .get_list(&format!("lexicon.{attr}"))
                .ok_or_else(|| Error::Config(format!("missing `lexicon.{attr}`")))?;
            let mut ids = Vec::new();
            for w in &words {
                let toks = tokenize(w)?;
                if toks.len() != 1 || toks[0] < WORD_BASE {
                    return Err(Error::Config(format!("`{w}` is not a vocabulary word token")));
                }
                ids.push(toks[0]);
            }
            lexicons.push(ids);
        }
        let spec = Self {
            schema,
            lexicons,
            separability: kv.require("separability")?,
            min_len: kv.get_or("min_len", 12)?,
            max_len: kv.get_or("max_len", 24)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("aspect = {}\n", self.schema.aspect_name));
        s.push_str(&format!("attributes = {}\n", self.schema.attributes.join(", ")));
        s.push_str(&format!("separability = {}\n", self.separability));
        s.push_str(&format!("min_len = {}\n", self.min_len));
        s.push_str(&format!("max_len = {}\n", self.max_len));
        for (attr, lex) in self.schema.attributes.iter().zip(&self.lexicons) {
            let words: Vec<String> =
                lex.iter().map(|&t| token_to_string(t).unwrap()).collect();
            s.push_str(&format!("lexicon.{attr} = {}\n", words.join(", ")));
        }
        s
    }
}

/// Lexicons must be disjoint across co-generated aspects too.
pub fn validate_specs(specs: &[AspectSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("at least one aspect spec required".into()));
    }
    let mut seen: BTreeMap<u32, String> = BTreeMap::new();
    for spec in specs {
        spec.validate()?;
        for lex in &spec.lexicons {
            for &t in lex {
                if let Some(owner) = seen.insert(t, spec.schema.aspect_name.clone()) {
                    return Err(Error::Config(format!(
                        "lexicon token {} shared by aspects {} and {}",
                        token_to_string(t)?,
                        owner,
                        spec.schema.aspect_name
                    )));
                }
            }
        }
    }
    let mut names: Vec<&str> = specs.iter().map(|s| s.schema.aspect_name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != specs.len() {
        return Err(Error::Config("duplicate aspect names".into()));
    }
    Ok(())
}

/// One synthetic example: tokens plus whatever labels were emitted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusRecord {
    pub tokens: Vec<u32>,
    /// aspect name -> attribute name; possibly empty.
    pub labels: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    Full,
    /// Exactly one aspect labeled, chosen uniformly.
    Partial,
    None,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "partial" => Ok(Self::Partial),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("label mode `{s}` not one of full|partial|none"))),
        }
    }
}

/// Seed-deterministic corpus generation. Each record samples one attribute
/// per aspect, then draws tokens from the mixed conditional distribution:
/// every token picks an aspect uniformly, emits from that attribute's
/// lexicon with probability `separability`, otherwise a filler letter.
pub fn generate_corpus(
    specs: &[AspectSpec],
    count: usize,
    label_mode: LabelMode,
    seed: u64,
) -> Result<Vec<CorpusRecord>> {
    validate_specs(specs)?;
    if count == 0 {
        return Err(Error::InvalidInput("count must be at least 1".into()));
    }
    let lo = specs.iter().map(|s| s.min_len).max().unwrap();
    let hi = specs.iter().map(|s| s.max_len).min().unwrap();
    if lo > hi {
        return Err(Error::Config("aspect length ranges do not intersect".into()));
    }
    let mut out = Vec::with_capacity(count);
    for rec in 0..count {
        let mut rng = SeededRng::derive(seed, "corpus-record", &[rec as u64]);
        let attrs: Vec<usize> = specs.iter().map(|s| rng.below(s.schema.n())).collect();
        let len = lo + rng.below(hi - lo + 1);
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let k = rng.below(specs.len());
            let spec = &specs[k];
            if rng.uniform() < spec.separability {
                let lex = &spec.lexicons[attrs[k]];
                tokens.push(lex[rng.below(lex.len())]);
            } else {
                tokens.push(CHAR_BASE + rng.below(NUM_CHARS as usize) as u32);
            }
        }
        let mut labels = BTreeMap::new();
        match label_mode {
            LabelMode::Full => {
                for (spec, &a) in specs.iter().zip(&attrs) {
                    labels.insert(
                        spec.schema.aspect_name.clone(),
                        spec.schema.attributes[a].clone(),
                    );
                }
            }
            LabelMode::Partial => {
                let k = rng.below(specs.len());
                labels.insert(
                    specs[k].schema.aspect_name.clone(),
                    specs[k].schema.attributes[attrs[k]].clone(),
                );
            }
            LabelMode::None => {}
        }
        out.push(CorpusRecord { tokens, labels });
    }
    Ok(out)
}

/// Neutral prompts: filler letters only, no attribute-exclusive tokens.
pub fn neutral_prompts(seed: u64, count: usize, min_len: usize, max_len: usize) -> Vec<Vec<u32>> {
    (0..count)
        .map(|i| {
            let mut rng = SeededRng::derive(seed, "neutral-prompt", &[i as u64]);
            let len = min_len + rng.below(max_len - min_len + 1);
            (0..len).map(|_| CHAR_BASE + rng.below(NUM_CHARS as usize) as u32).collect()
        })
        .collect()
}

/// Count-based exact classifier: argmax over attributes of exclusive-lexicon
/// token counts; ties (including all-zero) are undecided.
pub fn oracle_classify(tokens: &[u32], spec: &AspectSpec) -> Option<usize> {
    let counts = lexicon_counts(tokens, spec);
    let best = *counts.iter().max().unwrap();
    if best == 0 {
        return None;
    }
    let winners: Vec<usize> =
        (0..counts.len()).filter(|&i| counts[i] == best).collect();
    if winners.len() == 1 {
        Some(winners[0])
    } else {
        None
    }
}

pub fn lexicon_counts(tokens: &[u32], spec: &AspectSpec) -> Vec<usize> {
    spec.lexicons
        .iter()
        .map(|lex| tokens.iter().filter(|t| lex.contains(t)).count())
        .collect()
}

/// Share of tokens that fall in the given lexicon, as (hits, total).
pub fn lexicon_emission(tokens: &[u32], lexicon: &[u32]) -> (usize, usize) {
    (tokens.iter().filter(|t| lexicon.contains(t)).count(), tokens.len())
}

/// Serialize records as newline-delimited JSON.
pub fn write_corpus(w: &mut impl Write, records: &[CorpusRecord]) -> Result<()> {
    for rec in records {
        let text = detokenize(&rec.tokens)?;
        let mut map = serde_json::Map::new();
        map.insert("text".into(), serde_json::Value::String(text));
        if !rec.labels.is_empty() {
            let labels: serde_json::Map<String, serde_json::Value> = rec
                .labels
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect();
            map.insert("labels".into(), serde_json::Value::Object(labels));
        }
        serde_json::to_writer(&mut *w, &serde_json::Value::Object(map))
            .map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut f, records)?;
    f.flush()?;
    Ok(())
}

/// Parse newline-delimited JSON records, validating labels against the given
/// aspect specs. Malformed lines are rejected with their line numbers.
pub fn read_corpus(r: impl BufRead, specs: &[AspectSpec]) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, msg: format!("malformed JSON: {e}") })?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Parse { line: line_no, msg: "record is not an object".into() })?;
        let text = obj
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| Error::Parse { line: line_no, msg: "missing `text` string".into() })?;
        let tokens = tokenize(text)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let mut labels = BTreeMap::new();
        if let Some(lv) = obj.get("labels") {
            let lobj = lv.as_object().ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "`labels` is not an object".into(),
            })?;
            for (aspect, attr) in lobj {
                let attr = attr.as_str().ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("label for `{aspect}` is not a string"),
                })?;
                let spec = specs
                    .iter()
                    .find(|s| s.schema.aspect_name == *aspect)
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("unknown aspect `{aspect}`"),
                    })?;
                spec.schema.index_of(attr).map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("unknown attribute `{attr}` for aspect `{aspect}`"),
                })?;
                labels.insert(aspect.clone(), attr.to_string());
            }
        }
        out.push(CorpusRecord { tokens, labels });
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>, specs: &[AspectSpec]) -> Result<Vec<CorpusRecord>> {
    let f = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(f), specs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_exactly_64_and_round_trips() {
        for id in 0..VOCAB_SIZE as u32 {
            let s = token_to_string(id).unwrap();
            let back = tokenize(&s).unwrap();
            assert_eq!(back, vec![id], "token {id} `{s}`");
        }
        assert!(token_to_string(64).is_err());
    }

    #[test]
    fn unknown_multichar_piece_decomposes_to_letters() {
        assert_eq!(tokenize("ab").unwrap(), vec![CHAR_BASE, CHAR_BASE + 1]);
        assert!(tokenize("Qx!").is_err());
    }

    #[test]
    fn fully_separable_single_aspect_is_pure_lexicon() {
        let spec = AspectSpec::polarity(1.0);
        let recs = generate_corpus(&[spec.clone()], 50, LabelMode::Full, 1).unwrap();
        for rec in &recs {
            let label = &rec.labels["polarity"];
            let li = spec.schema.index_of(label).unwrap();
            for t in &rec.tokens {
                assert!(spec.lexicons[li].contains(t), "non-lexicon token at separability 1");
            }
            assert_eq!(oracle_classify(&rec.tokens, &spec), Some(li));
        }
    }

    #[test]
    fn label_modes() {
        let specs = [AspectSpec::polarity(0.7), AspectSpec::topic(0.7)];
        let none = generate_corpus(&specs, 20, LabelMode::None, 2).unwrap();
        assert!(none.iter().all(|r| r.labels.is_empty()));
        let partial = generate_corpus(&specs, 20, LabelMode::Partial, 2).unwrap();
        assert!(partial.iter().all(|r| r.labels.len() == 1));
        let full = generate_corpus(&specs, 20, LabelMode::Full, 2).unwrap();
        assert!(full.iter().all(|r| r.labels.len() == 2));
    }

    #[test]
    fn attribute_frequency_is_balanced() {
        let spec = AspectSpec::polarity(0.7);
        let recs = generate_corpus(&[spec], 10_000, LabelMode::Full, 3).unwrap();
        let pos = recs.iter().filter(|r| r.labels["polarity"] == "positive").count();
        let share = pos as f64 / recs.len() as f64;
        assert!((share - 0.5).abs() < 0.02, "positive share {share}");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let specs = [AspectSpec::topic(0.8)];
        let a = generate_corpus(&specs, 30, LabelMode::Full, 9).unwrap();
        let b = generate_corpus(&specs, 30, LabelMode::Full, 9).unwrap();
        let c = generate_corpus(&specs, 30, LabelMode::Full, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn oracle_trivial_cases() {
        let spec = AspectSpec::polarity(0.9);
        let neg = &spec.lexicons[0];
        assert_eq!(oracle_classify(&[neg[0], neg[1]], &spec), Some(0));
        // filler only: undecided
        assert_eq!(oracle_classify(&[3, 4, 5], &spec), None);
        // tie: undecided
        let pos = &spec.lexicons[1];
        assert_eq!(oracle_classify(&[neg[0], pos[0]], &spec), None);
    }

    #[test]
    fn oracle_agrees_with_generating_label_at_high_separability() {
        let spec = AspectSpec { min_len: 20, max_len: 28, ..AspectSpec::polarity(0.9) };
        let recs = generate_corpus(&[spec.clone()], 2000, LabelMode::Full, 4).unwrap();
        let mut agree = 0;
        for rec in &recs {
            let li = spec.schema.index_of(&rec.labels["polarity"]).unwrap();
            if oracle_classify(&rec.tokens, &spec) == Some(li) {
                agree += 1;
            }
        }
        let rate = agree as f64 / recs.len() as f64;
        assert!(rate >= 0.99, "agreement {rate}");
    }

    #[test]
    fn oracle_equals_label_exhaustively_at_full_separability() {
        // all sequences up to length 4 over the two polarity lexicons
        let spec = AspectSpec::polarity(1.0);
        for li in 0..2usize {
            let lex = &spec.lexicons[li];
            for len in 1..=4usize {
                let mut idx = vec![0usize; len];
                loop {
                    let toks: Vec<u32> = idx.iter().map(|&i| lex[i % lex.len()]).collect();
                    assert_eq!(oracle_classify(&toks, &spec), Some(li));
                    // advance odometer
                    let mut j = 0;
                    loop {
                        idx[j] += 1;
                        if idx[j] < lex.len() {
                            break;
                        }
                        idx[j] = 0;
                        j += 1;
                        if j == len {
                            break;
                        }
                    }
                    if j == len {
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_is_order_invariant() {
        let spec = AspectSpec::topic(0.8);
        let mut toks = vec![spec.lexicons[2][0], 5, spec.lexicons[2][1], spec.lexicons[0][0], 9];
        let before = oracle_classify(&toks, &spec);
        toks.reverse();
        assert_eq!(oracle_classify(&toks, &spec), before);
    }

    #[test]
    fn corpus_round_trip_is_identical() {
        let specs = [AspectSpec::polarity(0.7), AspectSpec::topic(0.7)];
        let recs = generate_corpus(&specs, 40, LabelMode::Partial, 5).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &recs).unwrap();
        let back = read_corpus(std::io::Cursor::new(&buf), &specs).unwrap();
        assert_eq!(recs, back);
        // and byte-level: re-serializing gives identical bytes
        let mut buf2 = Vec::new();
        write_corpus(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn ingest_errors_name_line_and_cause() {
        let specs = [AspectSpec::polarity(0.7)];
        let empty = read_corpus(std::io::Cursor::new(b"" as &[u8]), &specs).unwrap();
        assert!(empty.is_empty());

        let bad_json = b"{\"text\": \"a b\"}\nnot json\n" as &[u8];
        let err = read_corpus(std::io::Cursor::new(bad_json), &specs).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        let bad_aspect = b"{\"text\": \"a\", \"labels\": {\"mood\": \"positive\"}}\n" as &[u8];
        let err = read_corpus(std::io::Cursor::new(bad_aspect), &specs).unwrap_err().to_string();
        assert!(err.contains("mood"), "{err}");

        let bad_attr = b"{\"text\": \"a\", \"labels\": {\"polarity\": \"angry\"}}\n" as &[u8];
        let err = read_corpus(std::io::Cursor::new(bad_attr), &specs).unwrap_err().to_string();
        assert!(err.contains("angry"), "{err}");
    }

    #[test]
    fn spec_kv_round_trip() {
        let spec = AspectSpec::topic(0.85);
        let text = spec.to_kv_string();
        let kv = crate::config::KvReader::parse(&text).unwrap();
        let back = AspectSpec::from_kv(&kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back.schema, spec.schema);
        assert_eq!(back.lexicons, spec.lexicons);
        assert_eq!(back.separability, spec.separability);
    }

    #[test]
    fn overlapping_lexicons_across_aspects_rejected() {
        let a = AspectSpec::polarity(0.7);
        let mut b = AspectSpec::topic(0.7);
        b.lexicons[0] = a.lexicons[0].clone();
        let err = validate_specs(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("shared"), "{err}");
    }

    #[test]
    fn neutral_prompts_have_no_lexicon_tokens() {
        let prompts = neutral_prompts(7, 15, 4, 8);
        assert_eq!(prompts.len(), 15);
        for p in &prompts {
            assert!(p.iter().all(|&t| (CHAR_BASE..WORD_BASE).contains(&t)));
        }
    }
}
