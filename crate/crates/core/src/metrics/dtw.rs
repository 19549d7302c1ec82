use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Monotone alignment between two frame sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pub steps: Vec<(usize, usize)>,
    /// Sum of frame distances along `steps`.
    pub cost: f64,
}

impl AlignmentPath {
    /// The diagonal path `(0,0), (1,1), ...` of length `n`.
    pub fn diagonal(n: usize) -> Self {
        Self {
            steps: (0..n).map(|t| (t, t)).collect(),
            cost: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks endpoints and the `{(1,0), (0,1), (1,1)}` step set.
    pub fn validate(&self, len_a: usize, len_b: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Format(format!("alignment path: {msg}")));
        match (self.steps.first(), self.steps.last()) {
            (Some(&(0, 0)), Some(&end)) if end == (len_a.wrapping_sub(1), len_b.wrapping_sub(1)) => {}
            _ => return bad(format!("must run from (0,0) to ({}, {})", len_a as i64 - 1, len_b as i64 - 1)),
        }
        for w in self.steps.windows(2) {
            let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            if !matches!((di, dj), (1, 0) | (0, 1) | (1, 1)) {
                return bad(format!("illegal step {:?} -> {:?}", w[0], w[1]));
            }
        }
        Ok(())
    }
}

fn euclidean(a: ArrayView2<f64>, b: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Unconstrained DTW under Euclidean frame distance.
///
/// Accumulated cost `D[i][j] = d(i,j) + min(D[i-1][j-1], D[i-1][j], D[i][j-1])`.
/// Backtracking breaks ties toward the diagonal, then `(1,0)`, then `(0,1)`.
pub fn dtw_align(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<AlignmentPath> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("dtw needs two non-empty sequences".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Mismatch(format!(
            "dtw frame dimensions differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let d = euclidean(a, b, i, j);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[at(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[at(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            // prefix sums accumulate in path order
            acc[at(i, j)] = prev + d;
        }
    }
    if !acc[at(n - 1, m - 1)].is_finite() {
        return Err(Error::NonFinite("dtw cost (non-finite frame values?)".into()));
    }
    let mut steps = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let mut best = None::<((usize, usize), f64)>;
        for cand in [
            (i.wrapping_sub(1), j.wrapping_sub(1)),
            (i.wrapping_sub(1), j),
            (i, j.wrapping_sub(1)),
        ] {
            if cand.0 >= n || cand.1 >= m {
                continue;
            }
            let c = acc[at(cand.0, cand.1)];
            if best.map_or(true, |(_, b)| c < b) {
                best = Some((cand, c));
            }
        }
        (i, j) = best.expect("a predecessor exists off the origin").0;
        steps.push((i, j));
    }
    steps.reverse();
    Ok(AlignmentPath {
        steps,
        cost: acc[at(n - 1, m - 1)],
    })
}
