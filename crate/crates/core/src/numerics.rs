//! Dense vector/matrix helpers, the seeded PRNG, and the numerically stable
//! primitives shared by the memory, loss, and model code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold below which a vector is treated as having no direction.
pub const EPS: f64 = 1e-12;

/// SplitMix64 generator.
///
/// The whole state is one `u64`, every draw is integer arithmetic plus an
/// exact conversion to `f64`, so a seed yields the same stream on every
/// platform. Changing this algorithm is a breaking change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng { state: seed }
    }

    /// Independent generator for a named sub-stream, derived from the
    /// current state without advancing it.
    pub fn fork(&self, stream: u64) -> Prng {
        let mut mixer = Prng::new(self.state ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03));
        Prng::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased (rejection on the top zone).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let r = self.next_u64();
            if r < zone {
                return (r % n) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller, cosine branch only).
    pub fn normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(DenseMat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "matrix row",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|row| dot(row, x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.iter_rows().zip(y) {
            if yi != 0.0 {
                axpy(&mut out, yi, row);
            }
        }
        out
    }

    /// `self += scale · u vᵀ`
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        let cols = self.cols;
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            if s != 0.0 {
                axpy(&mut self.data[i * cols..(i + 1) * cols], s, v);
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += a · x`
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `v / ‖v‖`, or the zero vector when `‖v‖ < eps`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let n = norm(v);
    if n < eps {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Vector-Jacobian product of [`l2_normalize`]: `(I − v̂v̂ᵀ) g / ‖v‖`.
pub fn l2_normalize_vjp(v: &[f64], upstream: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.len() != upstream.len() {
        return Err(Error::DimensionMismatch {
            what: "l2_normalize_vjp upstream",
            expected: v.len(),
            found: upstream.len(),
        });
    }
    let n = norm(v);
    if n < eps {
        return Err(Error::DegenerateNorm { norm: n, eps });
    }
    let unit: Vec<f64> = v.iter().map(|x| x / n).collect();
    let radial = dot(&unit, upstream);
    Ok(upstream
        .iter()
        .zip(&unit)
        .map(|(g, u)| (g - radial * u) / n)
        .collect())
}

/// `log softmax(scores)` via max-subtraction and log-sum-exp.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - max - lse).collect()
}

/// Softmax of `scores / beta`.
pub fn softmax_temp(scores: &[f64], beta: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / beta).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0], EPS);
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
        let u = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&u, EPS), u.to_vec());
        assert_eq!(l2_normalize(&[0.0, 0.0], EPS), vec![0.0, 0.0]);
    }

    #[test]
    fn vjp_examples() {
        let g = l2_normalize_vjp(&[1.0, 0.0], &[0.0, 1.0], EPS).unwrap();
        assert_eq!(g, vec![0.0, 1.0]);
        let g = l2_normalize_vjp(&[1.0, 0.0], &[1.0, 0.0], EPS).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(matches!(
            l2_normalize_vjp(&[0.0, 0.0], &[1.0, 0.0], EPS),
            Err(Error::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = Prng::new(7);
        for _ in 0..20 {
            let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let up: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let analytic = l2_normalize_vjp(&v, &up, EPS).unwrap();
            let numeric = finite_diff_grad(|x| dot(&l2_normalize(x, EPS), &up), &v, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                let scale = a.abs().max(n.abs()).max(1e-8);
                assert!((a - n).abs() / scale < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[2.5; 5], 0.3);
        assert!(p.iter().all(|x| close(*x, 0.2, 1e-15)));
        let p = softmax_temp(&[1.0, 0.0], 1.0);
        let e = std::f64::consts::E;
        assert!(close(p[0], e / (e + 1.0), 1e-15));
        assert!(close(p[0], 0.73106, 1e-5) && close(p[1], 0.26894, 1e-5));
        let p = softmax_temp(&[1.0, 0.0], 0.05);
        let tail = 1.0 / (1.0 + 20f64.exp());
        assert!(close(p[1], tail, 1e-20));
        assert!(close(p[1], 2.06e-9, 0.01e-9));
        assert!(close(p[0], 1.0 - tail, 1e-15));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], 1e-5);
        assert!(close(g[0], 2.0, 1e-8) && close(g[1], 4.0, 1e-8));
        let g = finite_diff_grad(|_| 3.5, &[1.0, -2.0, 0.3], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn prng_is_reproducible_and_pinned() {
        let a: Vec<u64> = {
            let mut r = Prng::new(42);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let mut r = Prng::new(42);
        let b: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(a, b);
        // Reference SplitMix64 output for seed 0.
        let mut z = Prng::new(0);
        assert_eq!(z.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(z.next_u64(), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn prng_forks_differ() {
        let root = Prng::new(1);
        let mut a = root.fork(1);
        let mut b = root.fork(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = Prng::new(3);
        let xs: Vec<f64> = (0..100_000).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn matrix_ops() {
        let m = DenseMat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, -1.0]), vec![-1.0, -1.0, -1.0]);
        assert_eq!(m.matvec_t(&[1.0, 0.0, 1.0]), vec![6.0, 8.0]);
        let mut z = DenseMat::zeros(2, 2);
        z.add_outer(2.0, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(z.as_slice(), &[6.0, 8.0, 12.0, 16.0]);
        assert!(DenseMat::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    fn entropy_at(s: &[f64], beta: f64) -> f64 {
        entropy(&softmax_temp(s, beta))
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(s in prop::collection::vec(-50.0f64..50.0, 1..2000), beta in 0.01f64..=1.0) {
            let p = softmax_temp(&s, beta);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(s in prop::collection::vec(-5.0f64..5.0, 1..50), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let a = softmax_temp(&s, 0.5);
            let b = softmax_temp(&shifted, 0.5);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_has_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            prop_assume!(norm(&v) >= 1e-6);
            prop_assert!((norm(&l2_normalize(&v, EPS)) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn vjp_is_tangent(v in prop::collection::vec(-10.0f64..10.0, 2..32), seed in any::<u64>()) {
            prop_assume!(norm(&v) >= 1e-3);
            let mut r = Prng::new(seed);
            let up: Vec<f64> = (0..v.len()).map(|_| r.normal()).collect();
            let g = l2_normalize_vjp(&v, &up, EPS).unwrap();
            let unit = l2_normalize(&v, EPS);
            prop_assert!(dot(&g, &unit).abs() < 1e-10);
        }

        #[test]
        fn lower_temperature_lowers_entropy(s in prop::collection::vec(-3.0f64..3.0, 2..40)) {
            let spread = s.iter().cloned().fold(f64::MIN, f64::max) - s.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            prop_assert!(entropy_at(&s, 0.5) < entropy_at(&s, 1.0));
        }
    }
}
