//! Dense vector/matrix primitives and the stable scalar kernels the rest of
//! the crate is built on.
//!
//! All reductions run in a fixed left-to-right order so that results are
//! bitwise reproducible for identical inputs. Nothing here reassociates.

use std::ops::Deref;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Norm below which a vector is treated as degenerate by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Tolerance on the total mass accepted by [`entropy`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A non-empty vector of finite 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("Vec64"));
        }
        check_finite(&data, "Vec64")?;
        Ok(Vec64(data))
    }

    pub fn zeros(len: usize) -> Self {
        Vec64(vec![0.0; len.max(1)])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vec64 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix of finite 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                context: "Mat64::new",
                expected: rows * cols,
                got: data.len(),
            });
        }
        check_finite(&data, "Mat64")?;
        Ok(Mat64 { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Mat64 {
            rows: n,
            cols: n,
            data,
        }
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `M · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "matvec",
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot_unchecked(self.row(r), v)).collect())
    }

    /// `Mᵀ · v`, accumulated row by row in ascending row order.
    pub fn matvec_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch {
                context: "matvec_transpose",
                expected: self.rows,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += m * vr;
            }
        }
        Ok(out)
    }
}

pub(crate) fn check_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", v[i]))),
        None => Ok(()),
    }
}

/// Dot product with strict left-to-right accumulation.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "dot",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(v: &[f64]) -> f64 {
    dot_unchecked(v, v).sqrt()
}

/// `M · v` as a free function; see [`Mat64::matvec`].
pub fn matvec(m: &Mat64, v: &[f64]) -> Result<Vec<f64>> {
    m.matvec(v)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::DegenerateVector {
            norm: n,
            eps: EPS_NORM,
        });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    check_finite(logits, "logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let mut total = 0.0;
    for e in &exps {
        total += e;
    }
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `ln softmax(logits)`, computed without taking the log of a probability.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Contract("log_softmax of an empty vector".into()));
    }
    check_finite(logits, "logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits {
        total += (z - max).exp();
    }
    let lse = max + total.ln();
    Ok(logits.iter().map(|z| z - lse).collect())
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Contract("entropy of an empty vector".into()));
    }
    check_finite(p, "probabilities")?;
    let mut sum = 0.0;
    for &x in p {
        if x < 0.0 {
            return Err(Error::Contract(format!("negative probability {x}")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::Contract(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    Ok(h.max(0.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// SplitMix64 finalizer applied to `seed ^ (stream · 0x9E3779B97F4A7C15)`.
///
/// Used to derive independent sub-seeds (encoder, data, prompt init,
/// batching) from a single user-facing seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded, platform-independent random stream.
///
/// The generator is xoshiro256++ (Blackman & Vigna). Its 256-bit state is
/// expanded from the 64-bit seed with four successive SplitMix64 outputs.
/// Uniform floats take the top 53 bits of a draw; standard normals use the
/// ziggurat sampler of `rand_distr`. Identical seeds give identical streams
/// on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gaussian_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| std * self.gaussian()).collect()
    }

    /// Uniformly distributed direction on the unit sphere.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v = self.gaussian_vec(dim, 1.0);
            if let Ok(u) = l2_normalize(&v) {
                return u;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);

        // 1 / (1 + e^-1), evaluated independently in high precision.
        let p = softmax(&[2.0, 1.0]).unwrap();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-15);

        assert!(matches!(softmax(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let z = [0.3, -1.2, 4.0, 2.2];
        let p = softmax(&z).unwrap();
        let lp = log_softmax(&z).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-13);
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(entropy(&[0.5, -0.1, 0.6]).is_err());
        assert!(entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn dot_and_matvec_examples() {
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot(&[1.0, -1.0], &[0.0, 1.0]).unwrap(), -1.0);
        assert!(dot(&[1.0], &[1.0, 2.0]).is_err());
        let v = [0.5, -2.0, 3.25];
        assert_eq!(matvec(&Mat64::identity(3), &v).unwrap(), v.to_vec());
        assert!(Mat64::identity(2).matvec(&v).is_err());
    }

    #[test]
    fn matvec_transpose_matches_explicit_transpose() {
        let m = Mat64::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = Mat64::new(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let v = [0.5, -1.5];
        assert_eq!(m.matvec_transpose(&v).unwrap(), t.matvec(&v).unwrap());
    }

    #[test]
    fn vec64_rejects_non_finite() {
        assert!(Vec64::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vec64::new(vec![]).is_err());
        assert_eq!(&*Vec64::new(vec![1.0, 2.0]).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(SeededRng::new(1).next_u64(), SeededRng::new(2).next_u64());
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
    }

    #[test]
    fn softmax_sums_to_one_on_wide_logits() {
        let mut rng = SeededRng::new(3);
        for _ in 0..1000 {
            let len = 1 + rng.below(32);
            let z: Vec<f64> = (0..len).map(|_| rng.uniform(-1e3, 1e3)).collect();
            let p = softmax(&z).unwrap();
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            z in proptest::collection::vec(-50.0f64..50.0, 1..16),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_bounded_by_log_len(w in proptest::collection::vec(0.0f64..1.0, 1..16)) {
            let s: f64 = w.iter().sum();
            prop_assume!(s > 1e-6);
            let p: Vec<f64> = w.iter().map(|x| x / s).collect();
            let h = entropy(&p).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn normalize_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..32)) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            let uu = l2_normalize(&u).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
            for (a, b) in u.iter().zip(&uu) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn dot_is_bitwise_deterministic(
            a in proptest::collection::vec(-1e3f64..1e3, 64),
            b in proptest::collection::vec(-1e3f64..1e3, 64),
        ) {
            let x = dot(&a, &b).unwrap();
            let y = dot(&a, &b).unwrap();
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn entropy_maximal_at_uniform() {
        let n = 5;
        let uniform = vec![1.0 / n as f64; n];
        let h_max = entropy(&uniform).unwrap();
        assert!((h_max - (n as f64).ln()).abs() < 1e-15);
        let mut rng = SeededRng::new(11);
        for _ in 0..200 {
            let w: Vec<f64> = (0..n).map(|_| rng.unit() + 1e-9).collect();
            let s: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / s).collect();
            assert!(entropy(&p).unwrap() <= h_max + 1e-15);
        }
    }
}
