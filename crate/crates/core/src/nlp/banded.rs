//! Symmetric banded matrices and their Cholesky factorization.

/// Lower band of a symmetric matrix: entry `(i, j)` with `i - bw <= j <= i`
/// lives at `data[i * (bw + 1) + (i - j)]`.
#[derive(Clone, Debug)]
pub struct SymBand {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        SymBand {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Add `v` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(
            i - j <= self.bw,
            "entry ({i}, {j}) outside band {}",
            self.bw
        );
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[i * (self.bw + 1)]
    }

    pub fn add_diag(&mut self, shift: f64) {
        for i in 0..self.n {
            self.data[i * (self.bw + 1)] += shift;
        }
    }

    /// Replace row and column `i` by the unit vector scaled by `d`.
    pub fn isolate(&mut self, i: usize, d: f64) {
        let lo = i.saturating_sub(self.bw);
        for j in lo..i {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
        let hi = (i + self.bw).min(self.n - 1);
        for r in i + 1..=hi {
            let k = self.idx(r, i);
            self.data[k] = 0.0;
        }
        let k = self.idx(i, i);
        self.data[k] = d;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// Cholesky factor `L` with `A = L Lᵀ`, or `None` if `A` is not
    /// numerically positive definite.
    pub fn cholesky(&self) -> Option<BandCholesky> {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let mut l = self.data.clone();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = l[i * w + (i - j)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        Some(BandCholesky { n, bw, l })
    }
}

#[derive(Clone, Debug)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let w = self.bw + 1;
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(self.bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l[i * w + (i - k)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        for i in (0..n).rev() {
            let hi = (i + self.bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.l[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        y
    }
}
