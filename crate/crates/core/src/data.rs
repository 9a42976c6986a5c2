//! Corpus ingestion, word-level vocabulary, sequence packing, and MLM masking.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

/// Mixes a base seed with a stream tag and index into an independent seed.
/// splitmix64 finalizer; used to derive per-epoch and per-step RNG streams.
pub fn derive_seed(base: u64, tag: u64, idx: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(idx.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Word-level vocabulary with fixed reserved ids 0-4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Frequency-ranked vocabulary (ties broken by first occurrence),
    /// truncated to `max_size` entries including the reserved tokens.
    pub fn build<R: BufRead>(corpus: R, max_size: usize) -> Result<Vocab> {
        if max_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab max_size {} must exceed the {} reserved ids",
                max_size,
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new(); // word -> (count, first_pos)
        let mut seen = 0usize;
        for line in corpus.lines() {
            let line = line?;
            for word in line.split_whitespace() {
                let entry = counts.entry(word.to_string()).or_insert((0, seen));
                entry.0 += 1;
                seen += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Ingestion("empty corpus".into()));
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (word, _) in ranked.into_iter().take(max_size - RESERVED.len()) {
            tokens.push(word);
        }
        Ok(Vocab::from_tokens_unchecked(tokens))
    }

    fn from_tokens_unchecked(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Rebuilds a vocabulary from an ordered token list, checking the
    /// reserved block.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::Ingestion("token list shorter than the reserved block".into()));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Ingestion(format!(
                    "vocab id {} is '{}', expected reserved token '{}'",
                    i, tokens[i], want
                )));
            }
        }
        Ok(Vocab::from_tokens_unchecked(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of the period token, or usize::MAX when '.' is out of vocabulary
    /// (the Period pattern then falls back to uniform rows).
    pub fn period_id(&self) -> usize {
        self.index.get(".").copied().unwrap_or(usize::MAX)
    }

    /// Sequence delimiters added by the tokenizer: <s> and </s>.
    pub fn delim_set(&self) -> std::collections::HashSet<usize> {
        [BOS, EOS].into_iter().collect()
    }

    /// One token per line, line number = id.
    pub fn save<W: Write>(&self, sink: &mut W) -> Result<()> {
        for t in &self.tokens {
            writeln!(sink, "{}", t)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(source: R) -> Result<Vocab> {
        let tokens: Vec<String> = source.lines().collect::<std::io::Result<_>>()?;
        if tokens.len() < RESERVED.len() {
            return Err(Error::Ingestion("vocab file shorter than the reserved block".into()));
        }
        Vocab::from_tokens(tokens)
    }
}

/// <s> + words (truncated to n-2) + </s>, padded to n. Returns (ids, valid_len).
pub fn encode_sequence(text: &str, vocab: &Vocab, n: usize) -> (Vec<usize>, usize) {
    assert!(n >= 3, "sequence length must leave room for <s>, one token, </s>");
    let mut ids = Vec::with_capacity(n);
    ids.push(BOS);
    for word in text.split_whitespace().take(n - 2) {
        ids.push(vocab.id(word));
    }
    ids.push(EOS);
    let valid_len = ids.len();
    ids.resize(n, PAD);
    (ids, valid_len)
}

/// One masked training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// b x n token ids with masked positions replaced.
    pub input_ids: Vec<Vec<usize>>,
    /// b x n original ids.
    pub labels: Vec<Vec<usize>>,
    /// Per-sequence masked index sets, ascending.
    pub mask_sets: Vec<Vec<usize>>,
    /// Per-sequence valid lengths (including <s> and </s>).
    pub valid_len: Vec<usize>,
}

impl MaskedBatch {
    pub fn total_masked(&self) -> usize {
        self.mask_sets.iter().map(|s| s.len()).sum()
    }
}

/// Masks a fraction `k` of the content tokens of every sequence, uniformly
/// without replacement, never touching <s>, </s>, or <pad>. With
/// `bert_style`, each chosen position gets the 80/10/10 mask/random/keep
/// treatment instead of plain <mask> replacement.
pub fn mask_batch(
    ids: &[Vec<usize>],
    valid_len: &[usize],
    k: f64,
    seed: u64,
    bert_style: bool,
    vocab_size: usize,
) -> Result<MaskedBatch> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::Config(format!("mask fraction {} outside (0, 1)", k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_ids = Vec::with_capacity(ids.len());
    let mut mask_sets = Vec::with_capacity(ids.len());
    for (seq, &vl) in ids.iter().zip(valid_len) {
        let content = vl.saturating_sub(2); // exclude <s> and </s>
        let mut masked = seq.clone();
        let mut chosen: Vec<usize> = Vec::new();
        if content > 0 {
            let count = ((k * content as f64).round() as usize).clamp(1, content);
            // partial Fisher-Yates over the content positions 1..=content
            let mut positions: Vec<usize> = (1..=content).collect();
            for i in 0..count {
                let j = rng.gen_range(i..positions.len());
                positions.swap(i, j);
            }
            chosen = positions[..count].to_vec();
            chosen.sort_unstable();
            for &p in &chosen {
                if bert_style {
                    let roll: f64 = rng.gen();
                    if roll < 0.8 {
                        masked[p] = MASK;
                    } else if roll < 0.9 {
                        masked[p] = rng.gen_range(RESERVED.len()..vocab_size.max(RESERVED.len() + 1));
                    } // else: keep original
                } else {
                    masked[p] = MASK;
                }
            }
        }
        input_ids.push(masked);
        mask_sets.push(chosen);
    }
    Ok(MaskedBatch {
        input_ids,
        labels: ids.to_vec(),
        mask_sets,
        valid_len: valid_len.to_vec(),
    })
}

/// Seed-deterministic stream of fixed-shape b x n id batches. Line order is
/// reshuffled every epoch with a seed-derived permutation; the final partial
/// batch of each epoch is dropped.
pub struct BatchStream {
    encoded: Vec<(Vec<usize>, usize)>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(lines: &[String], vocab: &Vocab, n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if lines.len() < batch_size {
            return Err(Error::Ingestion(format!(
                "corpus has {} lines, need at least one full batch of {}",
                lines.len(),
                batch_size
            )));
        }
        let encoded = lines.iter().map(|l| encode_sequence(l, vocab, n)).collect();
        let mut stream = BatchStream { encoded, batch_size, seed, epoch: 0, order: Vec::new(), cursor: 0 };
        stream.reshuffle();
        Ok(stream)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0xE70C, self.epoch));
        let mut order: Vec<usize> = (0..self.encoded.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        self.order = order;
        self.cursor = 0;
    }

    /// Next (ids, valid_len) batch, advancing epochs as needed.
    pub fn next_batch(&mut self) -> (Vec<Vec<usize>>, Vec<usize>) {
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let mut ids = Vec::with_capacity(self.batch_size);
        let mut valid = Vec::with_capacity(self.batch_size);
        for &line in &self.order[self.cursor..self.cursor + self.batch_size] {
            ids.push(self.encoded[line].0.clone());
            valid.push(self.encoded[line].1);
        }
        self.cursor += self.batch_size;
        (ids, valid)
    }

    /// Number of full batches per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.encoded.len() / self.batch_size
    }

    /// Random access to the batch seen at global step `t`. Epoch and offset
    /// derive from t alone, so a resumed run needs no replay; the mapping
    /// agrees with repeated `next_batch` calls from a fresh stream.
    pub fn batch_at(&mut self, t: u64) -> (Vec<Vec<usize>>, Vec<usize>) {
        let bpe = self.batches_per_epoch() as u64;
        let epoch = t / bpe;
        if epoch != self.epoch || self.order.is_empty() {
            self.epoch = epoch;
            self.reshuffle();
        }
        let start = (t % bpe) as usize * self.batch_size;
        let mut ids = Vec::with_capacity(self.batch_size);
        let mut valid = Vec::with_capacity(self.batch_size);
        for &line in &self.order[start..start + self.batch_size] {
            ids.push(self.encoded[line].0.clone());
            valid.push(self.encoded[line].1);
        }
        (ids, valid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn build_vocab_frequency_order() {
        let v = Vocab::build(Cursor::new("a a b"), 8).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn truncated_words_map_to_unk() {
        // max 6 leaves room for exactly one content token
        let v = Vocab::build(Cursor::new("x x y"), 6).unwrap();
        assert_eq!(v.id("x"), 5);
        assert_eq!(v.id("y"), UNK);
    }

    #[test]
    fn rebuild_is_identical() {
        let text = "the cat sat on the mat . the dog ran";
        let a = Vocab::build(Cursor::new(text), 32).unwrap();
        let b = Vocab::build(Cursor::new(text), 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(Vocab::build(Cursor::new(""), 8), Err(Error::Ingestion(_))));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocab::build(Cursor::new("a b a ."), 16).unwrap();
        let mut buf = Vec::new();
        v.save(&mut buf).unwrap();
        let loaded = Vocab::load(Cursor::new(buf)).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.period_id(), v.id("."));
    }

    #[test]
    fn vocab_load_rejects_broken_reserved_block() {
        let res = Vocab::load(Cursor::new("<pad>\n<unk>\nX\n</s>\n<mask>\n"));
        assert!(matches!(res, Err(Error::Ingestion(_))));
    }

    #[test]
    fn encode_pads_and_brackets() {
        let v = Vocab::build(Cursor::new("hello world"), 16).unwrap();
        let (ids, vl) = encode_sequence("hello", &v, 4);
        assert_eq!(ids, vec![BOS, v.id("hello"), EOS, PAD]);
        assert_eq!(vl, 3);
    }

    #[test]
    fn encode_empty_text() {
        let v = Vocab::build(Cursor::new("x"), 16).unwrap();
        let (ids, vl) = encode_sequence("", &v, 5);
        assert_eq!(ids, vec![BOS, EOS, PAD, PAD, PAD]);
        assert_eq!(vl, 2);
    }

    #[test]
    fn encode_truncates_long_text() {
        let v = Vocab::build(Cursor::new("w"), 16).unwrap();
        let text = vec!["w"; 100].join(" ");
        let (ids, vl) = encode_sequence(&text, &v, 8);
        assert_eq!(vl, 8);
        assert_eq!(ids[7], EOS);
        assert_eq!(&ids[1..7], &[v.id("w"); 6]);
    }

    fn toy_ids(content: usize, n: usize) -> (Vec<usize>, usize) {
        let mut ids = vec![BOS];
        ids.extend((0..content).map(|i| 5 + i % 7));
        ids.push(EOS);
        let vl = ids.len();
        ids.resize(n, PAD);
        (ids, vl)
    }

    #[test]
    fn mask_count_follows_round_rule() {
        let (ids, vl) = toy_ids(20, 24);
        let b = mask_batch(&[ids], &[vl], 0.15, 1, false, 16).unwrap();
        assert_eq!(b.mask_sets[0].len(), 3); // round(0.15 * 20)
    }

    #[test]
    fn mask_minimum_one_rule() {
        let (ids, vl) = toy_ids(2, 6);
        let b = mask_batch(&[ids], &[vl], 0.15, 1, false, 16).unwrap();
        assert_eq!(b.mask_sets[0].len(), 1);
    }

    #[test]
    fn mask_never_touches_specials_and_labels_kept() {
        let (ids, vl) = toy_ids(10, 16);
        let b = mask_batch(&[ids.clone()], &[vl], 0.3, 9, false, 16).unwrap();
        for &p in &b.mask_sets[0] {
            assert!(p >= 1 && p < vl - 1);
            assert_eq!(b.input_ids[0][p], MASK);
            assert_eq!(b.labels[0][p], ids[p]);
        }
        for j in 0..16 {
            if !b.mask_sets[0].contains(&j) {
                assert_eq!(b.input_ids[0][j], ids[j]);
            }
        }
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let (ids, vl) = toy_ids(12, 16);
        let a = mask_batch(&[ids.clone()], &[vl], 0.15, 42, false, 16).unwrap();
        let b = mask_batch(&[ids], &[vl], 0.15, 42, false, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_sequence_gets_no_masks() {
        let (ids, vl) = toy_ids(0, 8);
        let b = mask_batch(&[ids], &[vl], 0.15, 1, false, 16).unwrap();
        assert!(b.mask_sets[0].is_empty());
    }

    #[test]
    fn masked_fraction_close_to_k() {
        let mut total_content = 0usize;
        let mut total_masked = 0usize;
        for s in 0..10_000u64 {
            let content = 10 + (s % 30) as usize;
            let (ids, vl) = toy_ids(content, content + 4);
            let b = mask_batch(&[ids], &[vl], 0.15, s, false, 16).unwrap();
            total_content += content;
            total_masked += b.mask_sets[0].len();
        }
        let frac = total_masked as f64 / total_content as f64;
        assert!((frac - 0.15).abs() < 0.01, "fraction {}", frac);
    }

    #[test]
    fn stream_batch_count_and_coverage() {
        let lines: Vec<String> = (0..10).map(|i| format!("w{} w{} w{}", i, i, i)).collect();
        let text = lines.join("\n");
        let vocab = Vocab::build(Cursor::new(text), 64).unwrap();
        let mut stream = BatchStream::new(&lines, &vocab, 8, 4, 3).unwrap();
        assert_eq!(stream.batches_per_epoch(), 2);
        // multiset coverage: 2 batches = 8 of the 10 lines, no repeats within epoch
        let (b1, _) = stream.next_batch();
        let (b2, _) = stream.next_batch();
        let mut firsts: Vec<usize> = b1.iter().chain(b2.iter()).map(|ids| ids[1]).collect();
        firsts.sort_unstable();
        firsts.dedup();
        assert_eq!(firsts.len(), 8);
    }

    #[test]
    fn stream_epochs_differ_but_reproduce() {
        let lines: Vec<String> = (0..12).map(|i| format!("t{}", i)).collect();
        let vocab = Vocab::build(Cursor::new(lines.join("\n")), 64).unwrap();
        let run = || {
            let mut s = BatchStream::new(&lines, &vocab, 4, 4, 7).unwrap();
            let mut out = Vec::new();
            for _ in 0..6 {
                out.push(s.next_batch().0);
            }
            out
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        // epoch 0 (first 3 batches) vs epoch 1 ordering differ
        assert_ne!(a[0..3], a[3..6]);
    }

    #[test]
    fn stream_too_small_corpus_errors() {
        let lines = vec!["a".to_string()];
        let vocab = Vocab::build(Cursor::new("a"), 8).unwrap();
        assert!(matches!(
            BatchStream::new(&lines, &vocab, 4, 2, 0),
            Err(Error::Ingestion(_))
        ));
    }
}
