//! Fixed-magnetization bases and the symmetric block matrices that live on them.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Pascal triangle up to n = 64.
#[derive(Debug, Clone)]
pub struct Binomial {
    table: Vec<Vec<u64>>,
}

impl Default for Binomial {
    fn default() -> Self {
        Self::new()
    }
}

impl Binomial {
    pub fn new() -> Self {
        let mut table = vec![vec![0u64; 65]; 65];
        for n in 0..=64 {
            table[n][0] = 1;
            for k in 1..=n {
                table[n][k] = table[n - 1][k - 1].saturating_add(if k < n { table[n - 1][k] } else { 0 });
            }
        }
        Binomial { table }
    }

    #[inline]
    pub fn get(&self, n: usize, k: usize) -> u64 {
        if k > n {
            0
        } else {
            self.table[n][k]
        }
    }

    /// Position of `state` among all states with the same popcount, in
    /// ascending numeric order.
    #[inline]
    pub fn rank(&self, mut state: u64) -> usize {
        let mut r = 0u64;
        let mut i = 1;
        while state != 0 {
            let pos = state.trailing_zeros() as usize;
            r += self.get(pos, i);
            i += 1;
            state &= state - 1;
        }
        r as usize
    }
}

/// All `n`-bit words with `k` bits set, ascending.
pub fn fixed_weight_states(n: usize, k: usize) -> Vec<u64> {
    assert!(n <= 64 && k <= n);
    if k == 0 {
        return vec![0];
    }
    let limit: u128 = 1u128 << n;
    let mut out = Vec::new();
    let mut v: u64 = if k == 64 { u64::MAX } else { (1u64 << k) - 1 };
    loop {
        out.push(v);
        let c = v & v.wrapping_neg();
        let (r, overflow) = v.overflowing_add(c);
        if overflow || (r as u128) >= limit {
            break;
        }
        v = (((r ^ v) >> 2) / c) | r;
        if (v as u128) >= limit {
            break;
        }
    }
    out
}

/// Compressed sparse rows of a symmetric matrix, both triangles stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(u32, u32)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r as usize + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr { n, row_ptr, cols, vals }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&(j as u32)) {
            Ok(p) => self.vals[self.row_ptr[i] + p],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[p] * x[self.cols[p] as usize];
            }
            y[i] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[(i, self.cols[p] as usize)] = self.vals[p];
            }
        }
        d
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (i, self.cols[p] as usize, self.vals[p]))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockMatrix {
    Dense(DMatrix<f64>),
    Sparse(Csr),
}

impl BlockMatrix {
    pub fn dim(&self) -> usize {
        match self {
            BlockMatrix::Dense(d) => d.nrows(),
            BlockMatrix::Sparse(s) => s.n,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            BlockMatrix::Dense(d) => d[(i, j)],
            BlockMatrix::Sparse(s) => s.get(i, j),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            BlockMatrix::Dense(d) => d.clone(),
            BlockMatrix::Sparse(s) => s.to_dense(),
        }
    }

    /// Nonzero entries, both triangles.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        match self {
            BlockMatrix::Dense(d) => {
                let mut out = Vec::new();
                for j in 0..d.ncols() {
                    for i in 0..d.nrows() {
                        if d[(i, j)] != 0.0 {
                            out.push((i, j, d[(i, j)]));
                        }
                    }
                }
                out
            }
            BlockMatrix::Sparse(s) => s.iter().collect(),
        }
    }

    /// Largest |A_ij − A_ji|.
    pub fn asymmetry(&self) -> f64 {
        self.entries()
            .into_iter()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }
}

/// Symmetric matrix restricted to the states of A with `n_up` up spins.
#[derive(Debug, Clone, PartialEq)]
pub struct SzBlock {
    pub n_a: usize,
    pub n_up: usize,
    /// Ascending packed A states; row/column `i` is `states[i]`.
    pub states: Vec<u64>,
    pub matrix: BlockMatrix,
}

impl SzBlock {
    pub fn sz(&self) -> f64 {
        self.n_up as f64 - self.n_a as f64 / 2.0
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn index_of(&self, state: u64) -> Option<usize> {
        self.states.binary_search(&state).ok()
    }

    pub fn check(&self) -> Result<()> {
        if self.matrix.dim() != self.states.len() {
            return Err(Error::InvalidParameter(format!(
                "block n_up={} has {} states but a {}-dimensional matrix",
                self.n_up,
                self.states.len(),
                self.matrix.dim()
            )));
        }
        Ok(())
    }
}
