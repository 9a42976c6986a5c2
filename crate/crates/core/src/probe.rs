//! Antecedent-selection probing of attention heads, plus a synthetic
//! coreference dataset generator with distractor sentences.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    template_words, ADJECTIVES, DISTRACTOR_PLURALS, FEM_NOUNS, MASC_NOUNS, OBJECTS, PREFIXES,
    VERBS,
};
use crate::data::{encode_sequence, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{encode, ModelConfig, ParameterStore, TapedParams};
use crate::tape::Tape;
use crate::tensor::Scalar;

/// One coreference probe case over whitespace words (no <s>/</s>; the prober
/// offsets by one internally).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub words: Vec<String>,
    /// Word index of the mention (a pronoun).
    pub mention: usize,
    /// Antecedent span [start, end) in word indices.
    pub start: usize,
    pub end: usize,
}

impl ProbeExample {
    pub fn validate(&self) -> Result<()> {
        let n = self.words.len();
        if self.start >= self.end || self.end > n || self.mention >= n {
            return Err(Error::Config(format!(
                "probe span [{}, {}) / mention {} invalid for {} words",
                self.start, self.end, self.mention, n
            )));
        }
        if self.mention >= self.start && self.mention < self.end {
            return Err(Error::Config("mention lies inside the antecedent span".into()));
        }
        // The antecedent must not be the word directly before the mention.
        if self.end == self.mention {
            return Err(Error::Config("antecedent ends directly before the mention".into()));
        }
        Ok(())
    }
}

/// Per-(layer, head) antecedent-selection accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub layers: usize,
    pub heads: usize,
    /// accuracy[layer][head] in [0, 1].
    pub accuracy: Vec<Vec<f64>>,
    pub examples_scored: usize,
    /// Examples dropped for exceeding the model's sequence length.
    pub skipped: usize,
}

impl ProbeReport {
    pub fn best(&self) -> f64 {
        self.accuracy.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        let n = (self.layers * self.heads) as f64;
        self.accuracy.iter().flatten().sum::<f64>() / n
    }
}

/// Template-filled coreference examples: an antecedent subject, at least one
/// full clause in between (plus a distractor-entity sentence when asked),
/// then a gender-matched pronoun mention. The layout guarantees the
/// antecedent never ends directly before the mention.
pub fn generate_synthetic(
    count: usize,
    with_distractor: bool,
    seed: u64,
    vocab: &Vocab,
) -> Result<Vec<ProbeExample>> {
    let missing: Vec<String> = template_words()
        .into_iter()
        .filter(|w| !vocab.contains(w))
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTemplateTokens(missing));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut words: Vec<String> = Vec::new();
        let prefix = PREFIXES[rng.gen_range(0..PREFIXES.len())];
        words.extend(prefix.split_whitespace().map(String::from));

        let (noun, pronoun) = if rng.gen_bool(0.5) {
            (FEM_NOUNS[rng.gen_range(0..FEM_NOUNS.len())], "she")
        } else {
            (MASC_NOUNS[rng.gen_range(0..MASC_NOUNS.len())], "he")
        };
        words.push("the".into());
        let start = words.len();
        words.push(noun.into());
        let end = words.len();
        words.push(VERBS[rng.gen_range(0..VERBS.len())].into());
        words.push("the".into());
        words.push(OBJECTS[rng.gen_range(0..OBJECTS.len())].into());
        words.push(".".into());

        if with_distractor {
            words.push("the".into());
            words.push(DISTRACTOR_PLURALS[rng.gen_range(0..DISTRACTOR_PLURALS.len())].into());
            words.push("were".into());
            words.push(ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())].into());
            words.push(".".into());
        }

        let mention = words.len();
        words.push(pronoun.into());
        words.push(VERBS[rng.gen_range(0..VERBS.len())].into());
        words.push("the".into());
        words.push(OBJECTS[rng.gen_range(0..OBJECTS.len())].into());
        words.push(".".into());

        let example = ProbeExample { words, mention, start, end };
        example.validate()?;
        examples.push(example);
    }
    Ok(examples)
}

/// Index of the largest value among allowed positions; ties go to the lower
/// index. None when nothing is allowed.
pub fn argmax_candidate<F: Scalar>(row: &[F], allowed: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, (&v, &ok)) in row.iter().zip(allowed).enumerate() {
        if ok && best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Scores one attention row: 1 iff its candidate argmax lands in the span.
pub fn row_hits_span<F: Scalar>(row: &[F], allowed: &[bool], start: usize, end: usize) -> bool {
    matches!(argmax_candidate(row, allowed), Some(i) if i >= start && i < end)
}

/// Runs every example through the encoder with trace capture and scores each
/// head on whether the mention row's argmax (special tokens excluded) lies
/// inside the antecedent span. Deterministic: no randomness in scoring.
pub fn probe_heads(
    model: &ModelConfig,
    params: &ParameterStore<f32>,
    vocab: &Vocab,
    examples: &[ProbeExample],
) -> Result<ProbeReport> {
    let mut hits = vec![vec![0usize; model.heads]; model.layers];
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for example in examples {
        example.validate()?;
        if example.words.len() + 2 > model.max_seq_len {
            skipped += 1;
            continue;
        }
        let sentence = example.words.join(" ");
        let (ids, valid_len) = encode_sequence(&sentence, vocab, model.max_seq_len);
        // candidates: valid positions that are real words
        let allowed: Vec<bool> = ids
            .iter()
            .enumerate()
            .map(|(p, &id)| p < valid_len && id != PAD && id != BOS && id != EOS)
            .collect();
        let mut tape = Tape::<f32>::new();
        let taped = TapedParams::stage(&mut tape, params);
        let out = encode(&mut tape, &taped, model, &[ids], &[valid_len], true, None)?;
        let trace = out.extract_trace(&tape).expect("trace requested");
        // +1 offsets word indices past the leading <s>
        let row_idx = example.mention + 1;
        let (span_lo, span_hi) = (example.start + 1, example.end + 1);
        for (l, layer) in trace.h.iter().enumerate() {
            for (h, head) in layer.iter().enumerate() {
                let matrix = &head[0];
                let n = matrix.dims2().0;
                let row = &matrix.data[row_idx * n..(row_idx + 1) * n];
                if row_hits_span(row, &allowed, span_lo, span_hi) {
                    hits[l][h] += 1;
                }
            }
        }
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Config("no probe example fits the model's sequence length".into()));
    }
    let accuracy = hits
        .into_iter()
        .map(|row| row.into_iter().map(|h| h as f64 / scored as f64).collect())
        .collect();
    Ok(ProbeReport {
        layers: model.layers,
        heads: model.heads,
        accuracy,
        examples_scored: scored,
        skipped,
    })
}

/// CSV: header, one (layer, head, accuracy) row per head, then `best` and
/// `mean` summary lines.
pub fn emit_probe_report<W: Write>(report: &ProbeReport, sink: &mut W) -> Result<()> {
    writeln!(sink, "layer,head,accuracy")?;
    for l in 0..report.layers {
        for h in 0..report.heads {
            writeln!(sink, "{},{},{:.6}", l, h, report.accuracy[l][h])?;
        }
    }
    writeln!(sink, "best,{:.6}", report.best())?;
    writeln!(sink, "mean,{:.6}", report.mean())?;
    Ok(())
}

/// One example per line: `sentence<TAB>mention<TAB>start<TAB>end`, indices
/// 0-based over the whitespace words.
pub fn parse_probe_tsv<R: BufRead>(source: R) -> Result<Vec<ProbeExample>> {
    let mut examples = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::ProbeParse {
                line: lineno + 1,
                detail: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_idx = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::ProbeParse {
                line: lineno + 1,
                detail: format!("{} '{}' is not a non-negative integer", what, s),
            })
        };
        let example = ProbeExample {
            words: fields[0].split_whitespace().map(String::from).collect(),
            mention: parse_idx(fields[1], "mention index")?,
            start: parse_idx(fields[2], "antecedent start")?,
            end: parse_idx(fields[3], "antecedent end")?,
        };
        example.validate().map_err(|e| Error::ProbeParse {
            line: lineno + 1,
            detail: e.to_string(),
        })?;
        examples.push(example);
    }
    Ok(examples)
}
