//! Envelope (skyline) storage and Cholesky factorization for symmetric
//! positive (semi)definite matrices whose rows have a short profile.
//!
//! Row `i` stores columns `first[i]..=i` contiguously. The Cholesky factor
//! has the same envelope, so chain-structured systems factor in linear time.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Envelope {
    n: usize,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
    /// Rows treated as zero after a drop-factorization.
    dropped: Vec<bool>,
}

impl Envelope {
    /// `first[i]` is the lowest column stored in row `i` (must be `<= i`).
    pub fn new(first: Vec<usize>) -> Self {
        let n = first.len();
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            assert!(f <= i, "envelope row {i} starts after its diagonal");
            start.push(total);
            total += i - f + 1;
        }
        start.push(total);
        Self {
            n,
            first,
            start,
            data: vec![0.0; total],
            dropped: vec![false; n],
        }
    }

    /// Envelope large enough to hold every `(i, j)` pair listed.
    pub fn from_pattern(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j) in pairs {
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            first[hi] = first[hi].min(lo);
        }
        Self::new(first)
    }

    pub fn dense(n: usize) -> Self {
        Self::new(vec![0; n])
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn stored(&self) -> usize {
        self.data.len()
    }

    pub fn first(&self, i: usize) -> usize {
        self.first[i]
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if j < self.first[i] {
            None
        } else {
            Some(self.start[i] + j - self.first[i])
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.idx(i, j).map_or(0.0, |k| self.data[k])
    }

    /// Adds `v` to the symmetric pair `(i, j)`; panics outside the envelope.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j).expect("entry outside envelope");
        self.data[k] += v;
    }

    pub fn set_zero(&mut self) {
        self.data.fill(0.0);
        self.dropped.fill(false);
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[self.start[i + 1] - 1]
    }

    pub fn add_diag(&mut self, i: usize, v: f64) {
        let k = self.start[i + 1] - 1;
        self.data[k] += v;
    }

    pub fn dropped(&self) -> &[bool] {
        &self.dropped
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[self.start[i]..self.start[i + 1]]
    }

    /// `sum_k L[i,k] L[j,k]` over `k < j` inside both envelopes (`j <= i`).
    #[inline]
    fn row_dot(&self, i: usize, j: usize) -> f64 {
        let lo = self.first[i].max(self.first[j]);
        if lo >= j {
            return 0.0;
        }
        let ri = &self.data[self.start[i] + lo - self.first[i]..self.start[i] + j - self.first[i]];
        let rj = &self.data[self.start[j] + lo - self.first[j]..self.start[j] + j - self.first[j]];
        ri.iter().zip(rj).map(|(a, b)| a * b).sum()
    }

    /// In-place Cholesky `A = L L^T`. Fails on a non-positive pivot.
    pub fn cholesky(&mut self) -> Result<()> {
        let mut failure = None;
        self.factor_with(|i, d| {
            if d > 0.0 && d.is_finite() {
                Some(d.sqrt())
            } else {
                failure.get_or_insert((i, d));
                None
            }
        });
        match failure {
            Some((i, d)) => Err(Error::NumericalFailure(format!("non-positive pivot {d:.3e} in row {i}"))),
            None => Ok(()),
        }
    }

    /// Cholesky that treats rows whose pivot falls below `rel_tol` times
    /// their original diagonal as linearly dependent. Dropped rows get a zero
    /// column in `L` and are skipped by [`Envelope::solve`]. Returns the
    /// number of dropped rows.
    pub fn cholesky_drop(&mut self, rel_tol: f64) -> usize {
        let diag0: Vec<f64> = (0..self.n).map(|i| self.diag(i)).collect();
        let mut count = 0;
        self.factor_with(|i, d| {
            if d <= rel_tol * diag0[i].abs() || diag0[i] <= 0.0 {
                count += 1;
                None
            } else {
                Some(d.sqrt())
            }
        });
        count
    }

    /// Cholesky that replaces tiny or negative pivots by a huge value, which
    /// zeroes the matching solution component. Returns how many pivots were
    /// replaced.
    pub fn cholesky_guarded(&mut self, rel_tol: f64) -> usize {
        let diag0: Vec<f64> = (0..self.n).map(|i| self.diag(i)).collect();
        let mut count = 0;
        self.factor_with(|i, d| {
            if !(d > rel_tol * diag0[i].abs().max(f64::MIN_POSITIVE)) {
                count += 1;
                Some(1e32)
            } else {
                Some(d.sqrt())
            }
        });
        count
    }

    /// Core loop; `pivot(i, d)` maps the remaining diagonal to `L[i,i]` or
    /// drops the row when it returns `None`.
    fn factor_with<F>(&mut self, mut pivot: F) -> usize
    where
        F: FnMut(usize, f64) -> Option<f64>,
    {
        self.dropped.fill(false);
        let mut n_dropped = 0;
        for i in 0..self.n {
            let fi = self.first[i];
            for j in fi..i {
                let k = self.start[i] + j - fi;
                if self.dropped[j] {
                    self.data[k] = 0.0;
                    continue;
                }
                let s = self.row_dot(i, j);
                let ljj = self.diag(j);
                self.data[k] = (self.data[k] - s) / ljj;
            }
            let r = self.row(i);
            let s: f64 = r[..r.len() - 1].iter().map(|v| v * v).sum();
            let kd = self.start[i + 1] - 1;
            let d = self.data[kd] - s;
            match pivot(i, d) {
                Some(l) => self.data[kd] = l,
                None => {
                    self.dropped[i] = true;
                    n_dropped += 1;
                    self.data[kd] = 0.0;
                    let (a, b) = (self.start[i], kd);
                    self.data[a..b].fill(0.0);
                }
            }
        }
        n_dropped
    }

    /// Solves `L L^T x = b` in place using the stored factor.
    pub fn solve(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        for i in 0..self.n {
            if self.dropped[i] {
                b[i] = 0.0;
                continue;
            }
            let fi = self.first[i];
            let r = self.row(i);
            let s: f64 = r[..i - fi].iter().zip(&b[fi..i]).map(|(l, x)| l * x).sum();
            b[i] = (b[i] - s) / r[i - fi];
        }
        for i in (0..self.n).rev() {
            if self.dropped[i] {
                b[i] = 0.0;
                continue;
            }
            let fi = self.first[i];
            let r = self.row(i);
            let xi = b[i] / r[i - fi];
            b[i] = xi;
            for (l, x) in r[..i - fi].iter().zip(&mut b[fi..i]) {
                *x -= l * xi;
            }
        }
    }

    /// `y = A x` for the unfactored matrix.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let fi = self.first[i];
            let r = self.row(i);
            for (k, &a) in r.iter().enumerate() {
                let j = fi + k;
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn fill(env: &mut Envelope, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in env.first(i)..=i {
                env.add(i, j, m[(i, j)]);
            }
        }
    }

    #[test]
    fn banded_solve_matches_dense() {
        let n = 9;
        let m = DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
            0 => 4.0 + i as f64,
            1 => -1.0,
            2 => 0.5,
            _ => 0.0,
        });
        let mut env = Envelope::from_pattern(n, (0..n).flat_map(|i| (i.saturating_sub(2)..=i).map(move |j| (i, j))));
        assert_eq!(env.stored(), 1 + 2 + 3 * 7);
        fill(&mut env, &m);
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        assert_eq!(env.mul(&b).len(), n);
        env.cholesky().unwrap();
        let mut x = b.clone();
        env.solve(&mut x);
        let r = &m * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(b);
        assert!(r.amax() < 1e-13);
    }

    #[test]
    fn drop_detects_duplicate_row() {
        // Gram matrix of rows a, b, a+b, c.
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0, 3.0, 0.0, 0.0, 1.0]);
        let g = &a * a.transpose();
        let mut env = Envelope::dense(4);
        fill(&mut env, &g);
        assert_eq!(env.cholesky_drop(1e-12), 1);
        assert_eq!(env.dropped(), &[false, false, true, false]);
        let mut bad = Envelope::dense(4);
        fill(&mut bad, &g);
        assert!(bad.cholesky().is_err());
    }
}
