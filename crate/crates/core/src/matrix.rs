/// Dense row-major square matrix of transition probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    n: usize,
    data: Vec<f64>,
}

impl Transition {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        assert!(
            rows.iter().all(|r| r.len() == n),
            "transition must be square"
        );
        Self {
            n,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_identity(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == if i == j { 1.0 } else { 0.0 }))
    }

    /// Largest deviation of a row sum from one, or `INFINITY` if any entry is
    /// negative or non-finite.
    pub fn stochastic_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let row = self.row(i);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return f64::INFINITY;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        worst
    }

    pub fn matmul(&self, other: &Transition) -> Transition {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * other.get(k, j);
                }
            }
        }
        Transition { n, data: out }
    }

    /// Distribution after one step: `dist · T`.
    pub fn push_forward(&self, dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, t) in out.iter_mut().zip(self.row(i)) {
                *o += p * t;
            }
        }
        out
    }

    /// Sample the next state from row `i` with a uniform draw `u`.
    pub fn sample(&self, i: usize, u: f64) -> usize {
        let row = self.row(i);
        let mut cum = 0.0;
        for (j, p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                return j;
            }
        }
        // rounding: fall back to the last state with positive mass
        row.iter().rposition(|p| *p > 0.0).unwrap_or(self.n - 1)
    }

    /// Smallest state whose cumulative probability in row `i` reaches `tau`.
    pub fn row_quantile(&self, i: usize, tau: f64) -> usize {
        let mut cum = 0.0;
        for (j, p) in self.row(i).iter().enumerate() {
            cum += p;
            if cum >= tau - 1e-12 {
                return j;
            }
        }
        self.n - 1
    }
}
