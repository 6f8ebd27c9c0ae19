//! Clustering quality metrics: optimal-assignment accuracy and normalized
//! mutual information.

use crate::error::{Error, Result};

/// Maximum-weight assignment over a rectangular score matrix.
///
/// Returns the total score plus the chosen `(row, col)` pairs; every real row
/// and column is used at most once. Implemented as the `O(n^3)` potential
/// (Kuhn-Munkres) method on the negated matrix, zero-padded to square so a
/// surplus of rows or columns is simply left unmatched.
pub fn hungarian_max(scores: &[Vec<f64>]) -> Result<(f64, Vec<(usize, usize)>)> {
    let r = scores.len();
    if r == 0 {
        return Err(Error::InvalidConfig("empty assignment matrix".into()));
    }
    let c = scores[0].len();
    if c == 0 || scores.iter().any(|row| row.len() != c) {
        return Err(Error::ShapeMismatch(
            "assignment matrix rows have unequal lengths".into(),
        ));
    }
    let n = r.max(c);
    // cost[i][j] = -score for real cells, 0 for padding.
    let cost = |i: usize, j: usize| -> f64 {
        if i < r && j < c {
            -scores[i][j]
        } else {
            0.0
        }
    };

    // Potentials u, v and the col -> row matching p, 1-indexed over rows.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    let mut total = 0.0;
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < r && j - 1 < c {
            pairs.push((i - 1, j - 1));
            total += scores[i - 1][j - 1];
        }
    }
    pairs.sort_unstable();
    Ok((total, pairs))
}

/// A flat clustering: `assignments[i]` is the cluster id of sample `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<usize>,
}

impl Partition {
    pub fn new(assignments: Vec<usize>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::DegenerateData("empty partition".into()));
        }
        Ok(Partition { assignments })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Number of distinct ids, assuming dense `0..K` usage is *not* required:
    /// this is `max + 1` so sparse ids still index a contingency table.
    pub fn table_size(&self) -> usize {
        self.assignments.iter().max().map_or(0, |m| m + 1)
    }
}

/// Joint count table between two partitions over the same samples.
#[derive(Debug, Clone)]
pub struct Contingency {
    /// counts[i][j] = number of samples in cluster i (left) and class j (right).
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
}

impl Contingency {
    pub fn from_partitions(left: &Partition, right: &Partition) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::PartitionLength {
                left: left.len(),
                right: right.len(),
            });
        }
        let (rows, cols) = (left.table_size(), right.table_size());
        let mut counts = vec![vec![0usize; cols]; rows];
        for (&a, &b) in left.assignments.iter().zip(right.assignments.iter()) {
            counts[a][b] += 1;
        }
        Ok(Contingency {
            counts,
            total: left.len(),
        })
    }

    fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<usize> {
        let cols = self.counts.first().map_or(0, |r| r.len());
        (0..cols)
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

/// Clustering accuracy: the best achievable labeled accuracy over all
/// injective mappings of cluster ids onto class ids. With more clusters than
/// classes the surplus clusters stay unmapped and count as errors.
pub fn acc(predicted: &Partition, truth: &Partition) -> Result<f64> {
    let table = Contingency::from_partitions(predicted, truth)?;
    let scores: Vec<Vec<f64>> = table
        .counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64).collect())
        .collect();
    let (matched, _) = hungarian_max(&scores)?;
    Ok(matched / table.total as f64)
}

fn entropy(counts: &[usize], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `I(X;Y) / sqrt(H(X) H(Y))` with natural
/// logarithms, defined as 0 when either marginal entropy is 0 and clamped to
/// `[0, 1]` against floating-point overshoot.
pub fn nmi(predicted: &Partition, truth: &Partition) -> Result<f64> {
    let table = Contingency::from_partitions(predicted, truth)?;
    let n = table.total as f64;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let hx = entropy(&rows, n);
    let hy = entropy(&cols, n);
    if hx == 0.0 || hy == 0.0 {
        return Ok(0.0);
    }
    let mut info = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pi = rows[i] as f64 / n;
            let pj = cols[j] as f64 / n;
            info += pij * (pij / (pi * pj)).ln();
        }
    }
    Ok((info / (hx * hy).sqrt()).clamp(0.0, 1.0))
}
