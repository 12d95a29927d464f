//! Synthetic extractive QA: key-value lookup with distractor passages.
//!
//! The ordinary vocabulary is split into four disjoint classes: topic,
//! key, value, and filler tokens. Every passage opens with its topic token
//! and holds one `key value...` fact (two for multi-occurrence examples)
//! padded with fillers. A question is `[topic, key]`; the answer is the
//! value that follows `key` inside the passage whose topic matches.
//! Distractor passages carry other topics and a wrong value, under the
//! question key at `p_distractor_key` and under another key otherwise, so
//! the answer cannot be found by key matching or token class alone.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XaqaError};
use crate::model::{Token, FIRST_WORD};

/// One gold answer occurrence; `end` is inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoldSpan {
    pub passage: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: Vec<Token>,
    pub passages: Vec<Vec<Token>>,
    pub answer: Vec<Token>,
    pub occurrences: Vec<GoldSpan>,
    pub answerable: bool,
}

impl QaExample {
    /// Checks the slicing and ordering invariants.
    pub fn validate(&self) -> Result<()> {
        if self.answer.is_empty() {
            return Err(XaqaError::contract(format!("{}: empty answer", self.id)));
        }
        if self.answerable == self.occurrences.is_empty() {
            return Err(XaqaError::contract(format!(
                "{}: answerable flag disagrees with occurrences",
                self.id
            )));
        }
        if !self.occurrences.windows(2).all(|w| w[0] < w[1]) {
            return Err(XaqaError::contract(format!("{}: occurrences not sorted", self.id)));
        }
        for s in &self.occurrences {
            let ok = self
                .passages
                .get(s.passage)
                .and_then(|p| p.get(s.start..=s.end))
                .is_some_and(|slice| slice == self.answer.as_slice());
            if !ok {
                return Err(XaqaError::contract(format!(
                    "{}: span {s:?} does not slice to the answer",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Passages that contain a gold occurrence.
    pub fn relevant_passages(&self) -> Vec<bool> {
        let mut rel = vec![false; self.passages.len()];
        for s in &self.occurrences {
            rel[s.passage] = true;
        }
        rel
    }
}

/// All contiguous exact matches of `answer`, sorted by (passage, start).
/// Overlapping matches are all reported.
pub fn find_occurrences(answer: &[Token], passages: &[Vec<Token>]) -> Vec<GoldSpan> {
    if answer.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (pi, p) in passages.iter().enumerate() {
        for (start, w) in p.windows(answer.len()).enumerate() {
            if w == answer {
                out.push(GoldSpan {
                    passage: pi,
                    start,
                    end: start + answer.len() - 1,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub vocab_size: usize,
    pub n_passages: usize,
    pub passage_len: usize,
    pub answer_len_min: usize,
    pub answer_len_max: usize,
    /// Probability that the answer fact appears twice in the gold passage.
    pub p_multi_occurrence: f64,
    /// Probability that no passage contains the answer.
    pub p_unanswerable: f64,
    /// Probability that a distractor passage files its wrong value under
    /// the question key rather than another key.
    pub p_distractor_key: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            vocab_size: 200,
            n_passages: 3,
            passage_len: 16,
            answer_len_min: 1,
            answer_len_max: 3,
            p_multi_occurrence: 0.0,
            p_unanswerable: 0.0,
            p_distractor_key: 0.5,
            seed: 0,
        }
    }
}

/// Token classes carved out of the ordinary vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub topics: std::ops::Range<Token>,
    pub keys: std::ops::Range<Token>,
    pub values: std::ops::Range<Token>,
    pub fillers: std::ops::Range<Token>,
}

impl Vocab {
    pub fn new(vocab_size: usize) -> Self {
        let first = FIRST_WORD;
        let rest = (vocab_size as Token).saturating_sub(first);
        let n_topics = (rest / 8).max(1);
        let n_keys = (rest / 8).max(1);
        let n_values = rest / 2;
        let topics = first..first + n_topics;
        let keys = topics.end..topics.end + n_keys;
        let values = keys.end..keys.end + n_values;
        let fillers = values.end..(vocab_size as Token).max(values.end);
        Vocab {
            topics,
            keys,
            values,
            fillers,
        }
    }
}

fn class_len(r: &std::ops::Range<Token>) -> usize {
    (r.end - r.start) as usize
}

impl GenSpec {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }

    /// Tokens a fact `key value... filler` occupies at most.
    fn max_fact_len(&self) -> usize {
        self.answer_len_max + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XaqaError::contract(format!("generation spec: {m}")));
        for (name, p) in [
            ("p_multi_occurrence", self.p_multi_occurrence),
            ("p_unanswerable", self.p_unanswerable),
            ("p_distractor_key", self.p_distractor_key),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.n_passages == 0 {
            return bad("n_passages must be >= 1".into());
        }
        if self.answer_len_min == 0 || self.answer_len_min > self.answer_len_max {
            return bad(format!(
                "answer length range {}..={} is empty or starts at 0",
                self.answer_len_min, self.answer_len_max
            ));
        }
        let v = self.vocab();
        if class_len(&v.topics) < self.n_passages {
            return bad(format!(
                "vocab_size {} leaves {} topic tokens for {} passages",
                self.vocab_size,
                class_len(&v.topics),
                self.n_passages
            ));
        }
        if class_len(&v.keys) < 3 || class_len(&v.values) < 2 * self.answer_len_max + 2 || class_len(&v.fillers) < 1 {
            return bad(format!("vocab_size {} too small for the token classes", self.vocab_size));
        }
        // topic + two answer facts in the gold passage
        let need = 1 + 2 * self.max_fact_len();
        if self.passage_len < need {
            return bad(format!("passage_len {} below the minimum {need}", self.passage_len));
        }
        Ok(())
    }

    /// Passage length plus the two-token question and separator.
    pub fn segment_len(&self) -> usize {
        self.passage_len + 3
    }
}

/// Question length produced by the generator: `[topic, key]`.
pub const QUESTION_LEN: usize = 2;

const MAX_ATTEMPTS: usize = 10_000;

/// Generates `count` examples. Example `i` draws only from its own stream,
/// so it can be regenerated alone with [`generate_example`].
pub fn generate_dataset(spec: &GenSpec, count: usize) -> Result<Vec<QaExample>> {
    spec.validate()?;
    (0..count).map(|i| generate_example(spec, i)).collect()
}

pub fn generate_example(spec: &GenSpec, index: usize) -> Result<QaExample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let vocab = spec.vocab();
    let answerable = !rng.random_bool(spec.p_unanswerable);
    let multi = answerable && rng.random_bool(spec.p_multi_occurrence);
    let expected = match (answerable, multi) {
        (false, _) => 0,
        (true, false) => 1,
        (true, true) => 2,
    };
    for _ in 0..MAX_ATTEMPTS {
        let ex = draw(spec, &vocab, &mut rng, index, answerable, multi);
        if ex.occurrences.len() == expected {
            return Ok(ex);
        }
    }
    Err(XaqaError::contract(format!(
        "could not place example {index} after {MAX_ATTEMPTS} attempts; vocabulary too small?"
    )))
}

fn pick(rng: &mut ChaCha8Rng, r: &std::ops::Range<Token>) -> Token {
    rng.random_range(r.clone())
}

fn value_seq(rng: &mut ChaCha8Rng, vocab: &Vocab, len: usize) -> Vec<Token> {
    let mut all: Vec<Token> = vocab.values.clone().collect();
    all.partial_shuffle(rng, len).0.to_vec()
}

/// Lays out `topic`, then the facts in random order separated by random
/// filler runs; every value is followed by at least one filler.
fn build_passage(rng: &mut ChaCha8Rng, vocab: &Vocab, len: usize, topic: Token, mut facts: Vec<(Token, Vec<Token>)>) -> Vec<Token> {
    facts.shuffle(rng);
    let used: usize = facts.iter().map(|(_, v)| v.len() + 2).sum();
    let free = len - 1 - used;
    let mut gaps = vec![0usize; facts.len() + 1];
    for _ in 0..free {
        let g = rng.random_range(0..gaps.len());
        gaps[g] += 1;
    }
    let mut out = Vec::with_capacity(len);
    out.push(topic);
    for (i, (key, value)) in facts.into_iter().enumerate() {
        out.extend((0..gaps[i]).map(|_| pick(rng, &vocab.fillers)));
        out.push(key);
        out.extend(value);
        out.push(pick(rng, &vocab.fillers));
    }
    out.extend((0..gaps[gaps.len() - 1]).map(|_| pick(rng, &vocab.fillers)));
    debug_assert_eq!(out.len(), len);
    out
}

fn draw(spec: &GenSpec, vocab: &Vocab, rng: &mut ChaCha8Rng, index: usize, answerable: bool, multi: bool) -> QaExample {
    let mut topics: Vec<Token> = vocab.topics.clone().collect();
    let topics = topics.partial_shuffle(rng, spec.n_passages).0.to_vec();
    let gold = rng.random_range(0..spec.n_passages);
    let key = pick(rng, &vocab.keys);
    let other_key = |rng: &mut ChaCha8Rng| loop {
        let k = pick(rng, &vocab.keys);
        if k != key {
            break k;
        }
    };
    let answer_len = |rng: &mut ChaCha8Rng| rng.random_range(spec.answer_len_min..=spec.answer_len_max);
    let alen = answer_len(rng);
    let answer = value_seq(rng, vocab, alen);

    let mut passages = Vec::with_capacity(spec.n_passages);
    for (pi, &topic) in topics.iter().enumerate() {
        let mut facts = Vec::new();
        if pi == gold {
            if answerable {
                facts.push((key, answer.clone()));
                if multi {
                    facts.push((key, answer.clone()));
                }
            }
        } else {
            // a wrong value, under the question key or another one
            let k = if rng.random_bool(spec.p_distractor_key) { key } else { other_key(rng) };
            let l = answer_len(rng);
            let wrong = loop {
                let w = value_seq(rng, vocab, l);
                if w != answer {
                    break w;
                }
            };
            facts.push((k, wrong));
        }
        passages.push(build_passage(rng, vocab, spec.passage_len, topic, facts));
    }
    let occurrences = find_occurrences(&answer, &passages);
    QaExample {
        id: format!("q{index:06}"),
        question: vec![topics[gold], key],
        passages,
        answerable: !occurrences.is_empty(),
        answer,
        occurrences,
    }
}

/// One JSON record per line.
pub fn serialize_dataset(examples: &[QaExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample = serde_json::from_str(line).map_err(|e| XaqaError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|e| XaqaError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_dataset(examples: &[QaExample], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| XaqaError::io(path, e))?;
    f.write_all(serialize_dataset(examples).as_bytes())
        .map_err(|e| XaqaError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<QaExample>> {
    let f = fs::File::open(path).map_err(|e| XaqaError::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| XaqaError::io(path, e))?);
        text.push('\n');
    }
    parse_dataset(&text)
}
