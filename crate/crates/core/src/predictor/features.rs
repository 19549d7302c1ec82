use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::UtteranceAlignment;

pub const UNKNOWN_SYMBOL: &str = "<unk>";

/// Phoneme symbol to embedding-row mapping; row 0 is the unknown symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeVocab {
    symbols: Vec<String>,
}

impl PhonemeVocab {
    pub fn new(symbols: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = symbols
            .into_iter()
            .filter(|s| s != UNKNOWN_SYMBOL)
            .collect();
        let mut all = vec![UNKNOWN_SYMBOL.to_string()];
        all.extend(set);
        Self { symbols: all }
    }

    pub fn from_alignments<'a>(alignments: impl IntoIterator<Item = &'a UtteranceAlignment>) -> Self {
        Self::new(
            alignments
                .into_iter()
                .flat_map(|a| a.phonemes.iter().map(|p| p.symbol.clone())),
        )
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> usize {
        self.symbols[1..]
            .binary_search_by(|s| s.as_str().cmp(symbol))
            .map_or(0, |i| i + 1)
    }

    pub fn ids<'a>(&self, symbols: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        symbols.into_iter().map(|s| self.id(s)).collect()
    }
}

/// Static word vectors read from a text file: a `dim D` header, then
/// `token<TAB>v1 v2 ... vD` per line.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordFeatures {
    pub features: Array2<f64>,
    /// Words that fell back to the zero vector.
    pub oov: usize,
}

impl WordEmbeddings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("embedding file is empty".into()))?;
        let dim = header
            .trim()
            .strip_prefix("dim")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| {
                Error::Format(format!("embedding header must be `dim D`, got `{header}`"))
            })?;
        let mut vectors = HashMap::new();
        for (n, line) in lines {
            let (token, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("embedding line {}: missing tab after token", n + 1))
            })?;
            let values = rest
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("embedding line {}: {e}", n + 1)))?;
            if values.len() != dim {
                return Err(Error::Format(format!(
                    "embedding line {}: `{token}` has {} values, header says {dim}",
                    n + 1,
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding for `{token}`")));
            }
            vectors.insert(token.to_string(), values);
        }
        Ok(Self { dim, vectors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Exact match first, then lowercase.
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors
            .get(word)
            .or_else(|| self.vectors.get(&word.to_lowercase()))
            .map(Vec::as_slice)
    }

    /// One row per word; unknown words get zeros and are counted.
    pub fn lookup<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> WordFeatures {
        let words: Vec<&str> = words.into_iter().collect();
        let mut features = Array2::zeros((words.len(), self.dim));
        let mut oov = 0;
        for (r, w) in words.iter().enumerate() {
            match self.get(w) {
                Some(v) => features.row_mut(r).assign(&ndarray::aview1(v)),
                None => oov += 1,
            }
        }
        WordFeatures { features, oov }
    }

    pub fn to_text(&self) -> String {
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        let mut out = format!("dim {}\n", self.dim);
        for k in keys {
            let vals: Vec<String> = self.vectors[k].iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{k}\t{}\n", vals.join(" ")));
        }
        out
    }

    pub fn from_vectors(dim: usize, vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        if dim == 0 || vectors.values().any(|v| v.len() != dim) {
            return Err(Error::Format("embedding vectors must all have length dim > 0".into()));
        }
        Ok(Self { dim, vectors })
    }
}

/// Repeats word row `i` `counts[i]` times.
pub fn length_regulate(words: ArrayView2<f64>, counts: &[usize]) -> Result<Array2<f64>> {
    if words.nrows() != counts.len() {
        return Err(Error::Mismatch(format!(
            "{} word vectors but {} phoneme counts",
            words.nrows(),
            counts.len()
        )));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Format(format!("word {i} has zero phonemes")));
    }
    let total: usize = counts.iter().sum();
    let mut out = Array2::zeros((total, words.ncols()));
    let mut r = 0;
    for (w, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            out.row_mut(r).assign(&words.row(w));
            r += 1;
        }
    }
    Ok(out)
}

/// Adjoint of [`length_regulate`]: sums phoneme rows back into their words.
pub fn length_regulate_adjoint(grad: ArrayView2<f64>, counts: &[usize]) -> Result<Array2<f64>> {
    let total: usize = counts.iter().sum();
    if grad.nrows() != total {
        return Err(Error::Mismatch(format!(
            "{} phoneme rows but counts sum to {total}",
            grad.nrows()
        )));
    }
    let mut out = Array2::zeros((counts.len(), grad.ncols()));
    let mut r = 0;
    for (w, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let mut row = out.row_mut(w);
            row += &grad.row(r);
            r += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn unit_counts_are_identity() {
        let w = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(length_regulate(w.view(), &[1, 1]).unwrap(), w);
    }

    #[test]
    fn repeats_each_word() {
        let w = array![[1.0], [2.0]];
        assert_eq!(
            length_regulate(w.view(), &[2, 3]).unwrap(),
            array![[1.0], [1.0], [2.0], [2.0], [2.0]]
        );
        assert!(length_regulate(w.view(), &[2, 0]).is_err());
        assert!(length_regulate(w.view(), &[2]).is_err());
    }

    #[test]
    fn adjoint_sums_back() {
        let g = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        assert_eq!(
            length_regulate_adjoint(g.view(), &[2, 3]).unwrap(),
            array![[3.0], [12.0]]
        );
    }

    proptest! {
        #[test]
        fn output_length_is_count_sum(counts in prop::collection::vec(1usize..6, 1..12)) {
            let w = Array2::<f64>::zeros((counts.len(), 3));
            let out = length_regulate(w.view(), &counts).unwrap();
            prop_assert_eq!(out.nrows(), counts.iter().sum::<usize>());
        }
    }

    #[test]
    fn embedding_file_round_trip_and_oov() {
        let e = WordEmbeddings::parse("dim 2\nhello\t0.5 -1\nworld\t2 3\n").unwrap();
        assert_eq!(e.dim(), 2);
        let f = e.lookup(["hello", "Hello", "nope"]);
        assert_eq!(f.oov, 1);
        assert_eq!(f.features, array![[0.5, -1.0], [0.5, -1.0], [0.0, 0.0]]);
        assert_eq!(WordEmbeddings::parse(&e.to_text()).unwrap(), e);
    }

    #[test]
    fn malformed_embedding_files() {
        assert!(WordEmbeddings::parse("").is_err());
        assert!(WordEmbeddings::parse("dims 2\n").is_err());
        assert!(WordEmbeddings::parse("dim 2\na 1 2\n").is_err());
        assert!(WordEmbeddings::parse("dim 2\na\t1\n").is_err());
        assert!(WordEmbeddings::parse("dim 2\na\t1 x\n").is_err());
    }

    #[test]
    fn vocab_ids_and_unknown() {
        let v = PhonemeVocab::new(["b", "a", "b", "c"].map(String::from));
        assert_eq!(v.symbols(), &["<unk>", "a", "b", "c"]);
        assert_eq!(v.ids(["a", "c", "zz"]), vec![1, 3, 0]);
    }
}
