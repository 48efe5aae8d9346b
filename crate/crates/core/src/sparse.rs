//! Compressed sparse row storage for square weighted graphs.
//!
//! Every stored entry carries an `f64` weight and a `u8` tag bitset. Rows are
//! sorted by column index, which fixes the summation order of every
//! matrix-vector product and keeps results bitwise reproducible.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    tags: Vec<u8>,
}

impl CsrMatrix {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            indptr: vec![0; n + 1],
            indices: Vec::new(),
            values: Vec::new(),
            tags: Vec::new(),
        }
    }

    /// Assembles a matrix from raw parts, checking structural consistency.
    pub fn from_parts(
        n: usize,
        indptr: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<f64>,
        tags: Vec<u8>,
    ) -> Result<Self, String> {
        if indptr.len() != n + 1 {
            return Err(format!("indptr has {} entries, expected {}", indptr.len(), n + 1));
        }
        if indptr[0] != 0 || indptr[n] != indices.len() {
            return Err("indptr does not span the index array".into());
        }
        if values.len() != indices.len() || tags.len() != indices.len() {
            return Err("value/tag arrays differ in length from index array".into());
        }
        for row in 0..n {
            let (lo, hi) = (indptr[row], indptr[row + 1]);
            if lo > hi {
                return Err(format!("indptr decreases at row {row}"));
            }
            let cols = &indices[lo..hi];
            if cols.iter().any(|&c| c as usize >= n) {
                return Err(format!("row {row} has a column index out of range"));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("row {row} columns are not strictly increasing"));
            }
        }
        Ok(Self {
            n,
            indptr,
            indices,
            values,
            tags,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tags(&self) -> &[u8] {
        &self.tags
    }

    /// Iterates `(column, weight, tags)` for one row.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64, u8)> + '_ {
        let range = self.indptr[row]..self.indptr[row + 1];
        range.map(move |k| (self.indices[k] as usize, self.values[k], self.tags[k]))
    }

    pub fn degree(&self, row: usize) -> usize {
        self.indptr[row + 1] - self.indptr[row]
    }

    pub fn weighted_degree(&self, row: usize) -> f64 {
        self.values[self.indptr[row]..self.indptr[row + 1]].iter().sum()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let (lo, hi) = (self.indptr[row], self.indptr[row + 1]);
        self.indices[lo..hi]
            .binary_search(&(col as u32))
            .ok()
            .map(|k| self.values[lo + k])
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|row| {
            self.row(row)
                .all(|(col, w, _)| self.get(col, row).is_some_and(|back| back == w))
        })
    }

    pub fn has_self_loops(&self) -> bool {
        (0..self.n).any(|row| self.get(row, row).is_some())
    }
}

/// Accumulates undirected weighted edges and emits a symmetric CSR matrix.
///
/// Repeated edges between the same pair sum their weights and OR their tags.
#[derive(Debug, Default)]
pub struct SymmetricBuilder {
    n: usize,
    edges: BTreeMap<(u32, u32), (f64, u8)>,
}

impl SymmetricBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            edges: BTreeMap::new(),
        }
    }

    /// Adds weight to the undirected edge `{a, b}`. Self-loops and
    /// non-positive weights are ignored.
    pub fn add(&mut self, a: usize, b: usize, weight: f64, tag: u8) {
        assert!(a < self.n && b < self.n, "edge endpoint out of range");
        if a == b || weight <= 0.0 {
            return;
        }
        let key = if a < b {
            (a as u32, b as u32)
        } else {
            (b as u32, a as u32)
        };
        let slot = self.edges.entry(key).or_insert((0.0, 0));
        slot.0 += weight;
        slot.1 |= tag;
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn build(self) -> CsrMatrix {
        let n = self.n;
        let mut counts = vec![0usize; n];
        for &(a, b) in self.edges.keys() {
            counts[a as usize] += 1;
            counts[b as usize] += 1;
        }
        let mut indptr = Vec::with_capacity(n + 1);
        indptr.push(0);
        for c in &counts {
            indptr.push(indptr.last().unwrap() + c);
        }
        let nnz = indptr[n];
        let mut indices = vec![0u32; nnz];
        let mut values = vec![0f64; nnz];
        let mut tags = vec![0u8; nnz];
        let mut cursor = indptr[..n].to_vec();
        // Keys are visited in (low, high) order; filling both directions in
        // this order leaves every row sorted by column.
        let mut entries: Vec<(u32, u32, f64, u8)> = Vec::with_capacity(nnz);
        for (&(a, b), &(w, t)) in &self.edges {
            entries.push((a, b, w, t));
            entries.push((b, a, w, t));
        }
        entries.sort_unstable_by_key(|&(r, c, _, _)| (r, c));
        for (r, c, w, t) in entries {
            let slot = cursor[r as usize];
            indices[slot] = c;
            values[slot] = w;
            tags[slot] = t;
            cursor[r as usize] += 1;
        }
        CsrMatrix {
            n,
            indptr,
            indices,
            values,
            tags,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_symmetric_and_sorted() {
        let mut b = SymmetricBuilder::new(4);
        b.add(2, 0, 1.0, 1);
        b.add(0, 2, 0.5, 2);
        b.add(3, 1, 2.0, 1);
        b.add(1, 1, 9.0, 1);
        let m = b.build();
        assert_eq!(m.nnz(), 4);
        assert!(m.is_symmetric());
        assert!(!m.has_self_loops());
        assert_eq!(m.get(0, 2), Some(1.5));
        assert_eq!(m.row(2).next().map(|e| e.2), Some(3));
        assert_eq!(m.weighted_degree(1), 2.0);
    }

    #[test]
    fn from_parts_rejects_unsorted_rows() {
        let err = CsrMatrix::from_parts(2, vec![0, 2, 2], vec![1, 0], vec![1.0, 1.0], vec![0, 0]);
        assert!(err.is_err());
    }
}
