//! Seeded prompt perturbations.
//!
//! Character operations act on ASCII bytes only, so the output stays valid
//! UTF-8 and maps one-to-one onto byte tokens. Words are maximal runs of
//! non-whitespace; surrounding whitespace is preserved.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Duplicates a letter or digit ("modulo" → "mmodulo").
    CharTypo,
    CharSwapAdjacent,
    WordDelete,
    WordRepeat,
    WordSwapAdjacent,
    CaseFlip,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::CharTypo,
        PerturbationKind::CharSwapAdjacent,
        PerturbationKind::WordDelete,
        PerturbationKind::WordRepeat,
        PerturbationKind::WordSwapAdjacent,
        PerturbationKind::CaseFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::CharTypo => "char_typo",
            PerturbationKind::CharSwapAdjacent => "char_swap_adjacent",
            PerturbationKind::WordDelete => "word_delete",
            PerturbationKind::WordRepeat => "word_repeat",
            PerturbationKind::WordSwapAdjacent => "word_swap_adjacent",
            PerturbationKind::CaseFlip => "case_flip",
        }
    }

    /// Coarse category label used in reports. Labeling only.
    pub fn category_label(self) -> &'static str {
        match self {
            PerturbationKind::CharTypo | PerturbationKind::WordRepeat => "addition",
            PerturbationKind::WordDelete => "deletion",
            PerturbationKind::CaseFlip => "editing",
            PerturbationKind::CharSwapAdjacent | PerturbationKind::WordSwapAdjacent => "swap",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown perturbation kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub kind: PerturbationKind,
    pub seed: u64,
    #[serde(default = "one")]
    pub sites: usize,
}

fn one() -> usize {
    1
}

impl PerturbConfig {
    pub fn new(kind: PerturbationKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            sites: 1,
        }
    }
}

/// Applies `cfg.sites` edits of `cfg.kind` at seeded, distinct sites.
pub fn perturb(text: &str, cfg: &PerturbConfig) -> Result<String> {
    if text.is_empty() {
        return Err(Error::Parameter("cannot perturb empty text".into()));
    }
    if cfg.sites == 0 {
        return Err(Error::Parameter("sites must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bytes = text.as_bytes();
    let none = || Error::NoApplicableSite {
        kind: cfg.kind.name().into(),
    };

    let out: Vec<u8> = match cfg.kind {
        PerturbationKind::CharTypo => {
            let cands: Vec<usize> = (0..bytes.len())
                .filter(|&i| bytes[i].is_ascii_alphanumeric())
                .collect();
            let mut picks = choose(&cands, cfg.sites, &mut rng).ok_or_else(none)?;
            picks.sort_unstable();
            let mut out = Vec::with_capacity(bytes.len() + picks.len());
            let mut it = picks.iter().peekable();
            for (i, &b) in bytes.iter().enumerate() {
                out.push(b);
                if it.peek() == Some(&&i) {
                    out.push(b);
                    it.next();
                }
            }
            out
        }
        PerturbationKind::CaseFlip => {
            let cands: Vec<usize> = (0..bytes.len())
                .filter(|&i| bytes[i].is_ascii_alphabetic())
                .collect();
            let picks = choose(&cands, cfg.sites, &mut rng).ok_or_else(none)?;
            let mut out = bytes.to_vec();
            for i in picks {
                out[i] ^= 0x20;
            }
            out
        }
        PerturbationKind::CharSwapAdjacent => {
            let cands: Vec<usize> = (0..bytes.len().saturating_sub(1))
                .filter(|&i| {
                    let (a, b) = (bytes[i], bytes[i + 1]);
                    a != b && a.is_ascii_graphic() && b.is_ascii_graphic()
                })
                .collect();
            let picks = choose_disjoint_pairs(&cands, cfg.sites, &mut rng).ok_or_else(none)?;
            let mut out = bytes.to_vec();
            for i in picks {
                out.swap(i, i + 1);
            }
            out
        }
        PerturbationKind::WordDelete => {
            let words = word_spans(text);
            if words.len() <= cfg.sites {
                return Err(none());
            }
            let idx: Vec<usize> = (0..words.len()).collect();
            let mut picks = choose(&idx, cfg.sites, &mut rng).ok_or_else(none)?;
            picks.sort_unstable();
            let keep: Vec<&str> = (0..words.len())
                .filter(|i| picks.binary_search(i).is_err())
                .map(|i| &text[words[i].0..words[i].1])
                .collect();
            rejoin(text, &words, &keep).into_bytes()
        }
        PerturbationKind::WordRepeat => {
            let words = word_spans(text);
            let idx: Vec<usize> = (0..words.len()).collect();
            let mut picks = choose(&idx, cfg.sites, &mut rng).ok_or_else(none)?;
            picks.sort_unstable();
            let mut out = String::with_capacity(text.len() * 2);
            let mut last = 0;
            for (i, &(s, e)) in words.iter().enumerate() {
                out.push_str(&text[last..e]);
                if picks.binary_search(&i).is_ok() {
                    out.push(' ');
                    out.push_str(&text[s..e]);
                }
                last = e;
            }
            out.push_str(&text[last..]);
            out.into_bytes()
        }
        PerturbationKind::WordSwapAdjacent => {
            let words = word_spans(text);
            let w = |i: usize| &text[words[i].0..words[i].1];
            let cands: Vec<usize> = (0..words.len().saturating_sub(1))
                .filter(|&i| w(i) != w(i + 1))
                .collect();
            let picks = choose_disjoint_pairs(&cands, cfg.sites, &mut rng).ok_or_else(none)?;
            let mut order: Vec<&str> = (0..words.len()).map(w).collect();
            for i in picks {
                order.swap(i, i + 1);
            }
            rejoin(text, &words, &order).into_bytes()
        }
    };
    let out = String::from_utf8(out).expect("edits touch ASCII bytes or whole words only");
    debug_assert_ne!(out, text);
    Ok(out)
}

/// `k` distinct elements of `cands`, in seeded order.
fn choose(cands: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    if cands.len() < k {
        return None;
    }
    let mut v = cands.to_vec();
    v.shuffle(rng);
    v.truncate(k);
    Some(v)
}

/// `k` pair starts `i` (covering `i, i+1`) with no two pairs overlapping.
fn choose_disjoint_pairs(cands: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let mut v = cands.to_vec();
    v.shuffle(rng);
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for i in v {
        if picked.iter().all(|&p| p.abs_diff(i) >= 2) {
            picked.push(i);
            if picked.len() == k {
                return Some(picked);
            }
        }
    }
    None
}

fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Rebuilds `text` with `words` placed in the original word slots, keeping
/// leading and trailing whitespace; interior separators are reused in order.
fn rejoin(text: &str, spans: &[(usize, usize)], words: &[&str]) -> String {
    let lead = spans.first().map_or("", |s| &text[..s.0]);
    let trail = spans.last().map_or("", |s| &text[s.1..]);
    let seps: Vec<&str> = spans.windows(2).map(|w| &text[w[0].1..w[1].0]).collect();
    let mut out = String::from(lead);
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            out.push_str(seps.get(i - 1).copied().unwrap_or(" "));
        }
        out.push_str(w);
    }
    out.push_str(trail);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(kind: PerturbationKind, seed: u64, sites: usize) -> PerturbConfig {
        PerturbConfig { kind, seed, sites }
    }

    #[test]
    fn typo_duplicates_a_letter() {
        let out = perturb("modulo", &PerturbConfig::new(PerturbationKind::CharTypo, 1)).unwrap();
        assert_eq!(out.len(), 7);
        let dup = (0..6).any(|i| {
            let mut v = "modulo".as_bytes().to_vec();
            v.insert(i, v[i]);
            v == out.as_bytes()
        });
        assert!(dup, "{out} is not a single-letter duplication");
        assert_eq!(out, perturb("modulo", &PerturbConfig::new(PerturbationKind::CharTypo, 1)).unwrap());
    }

    #[test]
    fn word_delete_needs_two_words() {
        let r = perturb("sort", &PerturbConfig::new(PerturbationKind::WordDelete, 0));
        assert!(matches!(r, Err(Error::NoApplicableSite { .. })));
    }

    #[test]
    fn word_swap_single_site() {
        let r = perturb("a b", &PerturbConfig::new(PerturbationKind::WordSwapAdjacent, 9)).unwrap();
        assert_eq!(r, "b a");
    }

    #[test]
    fn word_delete_keeps_spacing() {
        let r = perturb("x  y", &PerturbConfig::new(PerturbationKind::WordDelete, 3)).unwrap();
        assert!(r == "y" || r == "x", "{r:?}");
    }

    #[test]
    fn no_site_cases() {
        assert!(perturb("  ", &PerturbConfig::new(PerturbationKind::CharTypo, 0)).is_err());
        assert!(perturb("aaaa", &PerturbConfig::new(PerturbationKind::CharSwapAdjacent, 0)).is_err());
        assert!(perturb("go go", &PerturbConfig::new(PerturbationKind::WordSwapAdjacent, 0)).is_err());
        assert!(perturb("123", &PerturbConfig::new(PerturbationKind::CaseFlip, 0)).is_err());
        assert!(perturb("", &PerturbConfig::new(PerturbationKind::CaseFlip, 0)).is_err());
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in PerturbationKind::ALL {
            assert_eq!(k.name().parse::<PerturbationKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
    }

    fn word_count(s: &str) -> usize {
        s.split_whitespace().count()
    }

    proptest! {
        #[test]
        fn perturbations_are_deterministic_and_change_text(
            text in "[a-zA-Z]{1,8}( [a-zA-Z0-9]{1,8}){2,8}",
            seed in any::<u64>(),
            sites in 1usize..3,
            k in 0usize..6,
        ) {
            let kind = PerturbationKind::ALL[k];
            let c = cfg(kind, seed, sites);
            match perturb(&text, &c) {
                Ok(out) => {
                    prop_assert_ne!(&out, &text);
                    prop_assert_eq!(&out, &perturb(&text, &c).unwrap());
                }
                Err(Error::NoApplicableSite { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn word_counts_change_by_sites(
            text in "[a-z]{1,6}( [a-z]{1,6}){3,8}",
            seed in any::<u64>(),
            sites in 1usize..4,
        ) {
            let n = word_count(&text);
            let del = perturb(&text, &cfg(PerturbationKind::WordDelete, seed, sites)).unwrap();
            prop_assert_eq!(word_count(&del), n - sites);
            let rep = perturb(&text, &cfg(PerturbationKind::WordRepeat, seed, sites)).unwrap();
            prop_assert_eq!(word_count(&rep), n + sites);
        }
    }
}
