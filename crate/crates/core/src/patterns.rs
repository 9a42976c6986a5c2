//! Guidance pattern matrices: row-stochastic targets for attention heads.

use std::collections::HashSet;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The five guidance patterns. `Next`/`Prev`/`First` depend only on the
/// sequence length; `Period`/`Delim` follow the positions of the trigger
/// tokens in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PatternKind {
    Next,
    Prev,
    First,
    Period,
    Delim,
}

impl PatternKind {
    pub const ALL: [PatternKind; 5] =
        [PatternKind::Next, PatternKind::Prev, PatternKind::First, PatternKind::Period, PatternKind::Delim];

    pub fn name(&self) -> &'static str {
        match self {
            PatternKind::Next => "next",
            PatternKind::Prev => "prev",
            PatternKind::First => "first",
            PatternKind::Period => "period",
            PatternKind::Delim => "delim",
        }
    }

    /// True when the matrix depends only on n, not on token content.
    pub fn is_static(&self) -> bool {
        matches!(self, PatternKind::Next | PatternKind::Prev | PatternKind::First)
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "next" => Ok(PatternKind::Next),
            "prev" => Ok(PatternKind::Prev),
            "first" => Ok(PatternKind::First),
            "period" => Ok(PatternKind::Period),
            "delim" => Ok(PatternKind::Delim),
            other => Err(Error::Config(format!(
                "unknown pattern kind '{}' (expected next|prev|first|period|delim)",
                other
            ))),
        }
    }
}

/// An n x n row-stochastic guidance target.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMatrix {
    pub n: usize,
    /// Row-major n*n values.
    pub values: Vec<f64>,
    /// Set when a Period/Delim pattern found no trigger token and fell back
    /// to uniform rows.
    pub fallback: bool,
}

impl PatternMatrix {
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[p * self.n + q]
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.n..(p + 1) * self.n]
    }
}

/// Builds the guidance matrix for `kind` over a token sequence of length n.
/// Positions are 0-based. Period/Delim rows are uniform over the positions of
/// the trigger tokens; when no trigger is present every row falls back to the
/// uniform distribution and the result is flagged.
pub fn build_pattern(
    kind: PatternKind,
    tokens: &[usize],
    delim_set: &HashSet<usize>,
    period_id: usize,
) -> PatternMatrix {
    let n = tokens.len();
    assert!(n >= 1, "build_pattern needs n >= 1");
    let mut values = vec![0.0f64; n * n];
    let uniform = 1.0 / n as f64;
    let mut fallback = false;
    match kind {
        PatternKind::Next => {
            for p in 0..n {
                if p + 1 < n {
                    values[p * n + p + 1] = 1.0;
                } else {
                    for q in 0..n {
                        values[p * n + q] = uniform;
                    }
                }
            }
        }
        PatternKind::Prev => {
            for p in 0..n {
                if p > 0 {
                    values[p * n + p - 1] = 1.0;
                } else {
                    for q in 0..n {
                        values[p * n + q] = uniform;
                    }
                }
            }
        }
        PatternKind::First => {
            for p in 0..n {
                values[p * n] = 1.0;
            }
        }
        PatternKind::Period | PatternKind::Delim => {
            let hits: Vec<usize> = (0..n)
                .filter(|&q| match kind {
                    PatternKind::Period => tokens[q] == period_id,
                    _ => delim_set.contains(&tokens[q]),
                })
                .collect();
            if hits.is_empty() {
                fallback = true;
                for v in values.iter_mut() {
                    *v = uniform;
                }
            } else {
                let w = 1.0 / hits.len() as f64;
                for p in 0..n {
                    for &q in &hits {
                        values[p * n + q] = w;
                    }
                }
            }
        }
    }
    PatternMatrix { n, values, fallback }
}

/// Writes the matrix as n CSV rows with 6 fractional digits.
pub fn emit_pattern_csv<W: Write>(pattern: &PatternMatrix, sink: &mut W) -> Result<()> {
    for p in 0..pattern.n {
        let row: Vec<String> = pattern.row(p).iter().map(|v| format!("{:.6}", v)).collect();
        writeln!(sink, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_delims() -> HashSet<usize> {
        HashSet::new()
    }

    fn build_plain(kind: PatternKind, n: usize) -> PatternMatrix {
        let tokens: Vec<usize> = (100..100 + n).collect();
        build_pattern(kind, &tokens, &no_delims(), 9999)
    }

    #[test]
    fn next_n3_hand_example() {
        let p = build_plain(PatternKind::Next, 3);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(p.row(1), &[0.0, 0.0, 1.0]);
        let third = 1.0 / 3.0;
        assert_eq!(p.row(2), &[third, third, third]);
    }

    #[test]
    fn first_n3_all_rows_on_column_zero() {
        let p = build_plain(PatternKind::First, 3);
        for r in 0..3 {
            assert_eq!(p.row(r), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn period_on_two_periods() {
        // "<s> a . b . </s>": periods at positions 2 and 4
        let tokens = [2usize, 10, 7, 11, 7, 3];
        let p = build_pattern(PatternKind::Period, &tokens, &no_delims(), 7);
        assert!(!p.fallback);
        for r in 0..6 {
            assert_eq!(p.row(r), &[0.0, 0.0, 0.5, 0.0, 0.5, 0.0]);
        }
    }

    #[test]
    fn delim_boundary_positions_get_half() {
        let tokens = [2usize, 10, 11, 12, 3];
        let delims: HashSet<usize> = [2, 3].into_iter().collect();
        let p = build_pattern(PatternKind::Delim, &tokens, &delims, 999);
        for r in 0..5 {
            assert_eq!(p.get(r, 0), 0.5);
            assert_eq!(p.get(r, 4), 0.5);
            assert_eq!(p.get(r, 2), 0.0);
        }
    }

    #[test]
    fn period_without_trigger_falls_back_to_uniform() {
        let tokens = [5usize, 6, 8];
        let p = build_pattern(PatternKind::Period, &tokens, &no_delims(), 7);
        assert!(p.fallback);
        for r in 0..3 {
            for q in 0..3 {
                assert_eq!(p.get(r, q), 1.0 / 3.0);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_for_all_kinds_and_lengths() {
        let delims: HashSet<usize> = [2, 3].into_iter().collect();
        for n in 1..=512usize {
            let mut tokens: Vec<usize> = (0..n).map(|i| 10 + (i % 13)).collect();
            tokens[0] = 2;
            if n > 1 {
                tokens[n - 1] = 3;
                tokens[n / 2] = 7; // a period somewhere
            }
            for kind in PatternKind::ALL {
                let p = build_pattern(kind, &tokens, &delims, 7);
                for r in 0..n {
                    let s: f64 = p.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9, "{:?} n={} row={} sum={}", kind, n, r, s);
                    assert!(p.row(r).iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn static_patterns_are_content_independent() {
        let delims: HashSet<usize> = [2, 3].into_iter().collect();
        let a: Vec<usize> = (0..16).map(|i| 10 + i).collect();
        let b: Vec<usize> = (0..16).map(|i| 50 + (i % 3)).collect();
        for kind in [PatternKind::Next, PatternKind::Prev, PatternKind::First] {
            assert_eq!(
                build_pattern(kind, &a, &delims, 7),
                build_pattern(kind, &b, &delims, 7)
            );
        }
    }

    #[test]
    fn next_prev_interior_transpose() {
        let p_next = build_plain(PatternKind::Next, 8);
        let p_prev = build_plain(PatternKind::Prev, 8);
        // Interior rows: Next[p][q] == Prev[q][p]
        for p in 0..7 {
            for q in 1..8 {
                assert_eq!(p_next.get(p, q), p_prev.get(q, p));
            }
        }
    }

    #[test]
    fn n1_is_uniform_singleton() {
        for kind in [PatternKind::Next, PatternKind::Prev, PatternKind::First] {
            let p = build_plain(kind, 1);
            assert_eq!(p.values, vec![1.0]);
        }
    }

    #[test]
    fn csv_first_n2() {
        let p = build_plain(PatternKind::First, 2);
        let mut out = Vec::new();
        emit_pattern_csv(&p, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "1.000000,0.000000\n1.000000,0.000000\n"
        );
    }

    #[test]
    fn csv_next_n2() {
        let p = build_plain(PatternKind::Next, 2);
        let mut out = Vec::new();
        emit_pattern_csv(&p, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "0.000000,1.000000\n0.500000,0.500000\n"
        );
    }

    #[test]
    fn csv_roundtrip_exact_at_six_digits() {
        let tokens = [2usize, 10, 7, 11, 7, 3];
        let delims: HashSet<usize> = [2, 3].into_iter().collect();
        let p = build_pattern(PatternKind::Delim, &tokens, &delims, 7);
        let mut out = Vec::new();
        emit_pattern_csv(&p, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let parsed: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
            .collect();
        for (orig, got) in p.values.iter().zip(&parsed) {
            let rounded = format!("{:.6}", orig).parse::<f64>().unwrap();
            assert_eq!(rounded, *got);
        }
    }

    #[test]
    fn parse_is_case_insensitive() {
        assert_eq!("NeXt".parse::<PatternKind>().unwrap(), PatternKind::Next);
        assert_eq!("DELIM".parse::<PatternKind>().unwrap(), PatternKind::Delim);
        assert!("gauss".parse::<PatternKind>().is_err());
    }
}
