//! Flat parameter vectors and the small set of exact, order-fixed operations the
//! aggregation rules are built from.
//!
//! Everything here is deliberately scalar f64 code with a fixed left-to-right
//! evaluation order: two runs over the same inputs must produce bit-identical
//! outputs, because the simulator's reproducibility guarantee rests on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A model's parameters (or an update to them) as one flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps a non-empty vector of values.
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "parameter vectors must be non-empty");
        ParamVector(values)
    }

    /// The zero vector of dimension `d`.
    pub fn zeros(d: usize) -> Self {
        ParamVector::new(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty vectors
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// True when every component is finite (no NaN or infinity).
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Component-wise `self + scale * other`, in place.
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        check_dims(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Component-wise scaling by a constant, in place.
    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Cosine distance `1 - a·b / (‖a‖‖b‖)`, in [0, 2].
///
/// 0 means aligned, 1 orthogonal, 2 opposed. If either vector has zero norm the
/// distance is defined as exactly 1.0 (a zero update carries no direction, so it is
/// treated as orthogonal to everything). The dot product and both norms are
/// accumulated in one index-ordered pass, which makes the function exactly
/// symmetric in its arguments.
pub fn cosine_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(1.0);
    }
    let cos = dot / (na.sqrt() * nb.sqrt());
    // Rounding can push |cos| a hair past 1; clamp so the result stays in [0, 2].
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Sum of squared component differences `‖a - b‖²`.
pub fn squared_euclidean(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    Ok(acc)
}

/// Component-wise median of a non-empty set of equal-length vectors.
///
/// Odd counts take the middle order statistic; even counts take the mean of the two
/// middle ones. Sorting is by total order on f64, so the result does not depend on
/// the order the vectors were supplied in.
pub fn elementwise_median(vectors: &[ParamVector]) -> Result<ParamVector> {
    let first = vectors.first().ok_or(Error::EmptyInput("elementwise_median"))?;
    let d = first.len();
    for v in vectors {
        check_dims(d, v.len())?;
    }
    let n = vectors.len();
    let mut column = vec![0.0; n];
    let mut out = vec![0.0; d];
    for (c, slot) in out.iter_mut().enumerate() {
        for (k, v) in vectors.iter().enumerate() {
            column[k] = v[c];
        }
        column.sort_unstable_by(f64::total_cmp);
        *slot = if n % 2 == 1 {
            column[n / 2]
        } else {
            (column[n / 2 - 1] + column[n / 2]) / 2.0
        };
    }
    Ok(ParamVector::new(out))
}

/// Component-wise sum `a + b` (used to maintain running update totals).
pub fn accumulate(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    check_dims(a.len(), b.len())?;
    let mut out = a.clone();
    out.add_scaled(b, 1.0)?;
    Ok(out)
}

/// Mean of a non-empty set of equal-length vectors, summed in supplied order.
pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
    let first = vectors.first().ok_or(Error::EmptyInput("mean"))?;
    let mut acc = ParamVector::zeros(first.len());
    for v in vectors {
        acc.add_scaled(v, 1.0)?;
    }
    acc.scale(1.0 / vectors.len() as f64);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(values.to_vec())
    }

    #[test]
    fn cosine_identical_vectors_is_zero() {
        let a = pv(&[3.0, 4.0]);
        assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn cosine_orthogonal_is_one() {
        assert_eq!(cosine_distance(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 1.0);
    }

    #[test]
    fn cosine_antipodal_is_two() {
        assert_eq!(cosine_distance(&pv(&[3.0, 4.0]), &pv(&[-3.0, -4.0])).unwrap(), 2.0);
        // Norms that are not perfect squares pick up one rounding step.
        let d = cosine_distance(&pv(&[1.0, 2.0]), &pv(&[-1.0, -2.0])).unwrap();
        assert!((d - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_vector_is_defined_as_one() {
        assert_eq!(cosine_distance(&pv(&[0.0, 0.0]), &pv(&[5.0, -1.0])).unwrap(), 1.0);
        assert_eq!(cosine_distance(&pv(&[0.0, 0.0]), &pv(&[0.0, 0.0])).unwrap(), 1.0);
    }

    #[test]
    fn cosine_dimension_mismatch_errors() {
        let err = cosine_distance(&pv(&[1.0]), &pv(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 1, actual: 2 }));
    }

    #[test]
    fn squared_euclidean_examples() {
        let a = pv(&[1.0, 2.0]);
        assert_eq!(squared_euclidean(&a, &a).unwrap(), 0.0);
        assert_eq!(squared_euclidean(&pv(&[0.0, 0.0]), &pv(&[3.0, 4.0])).unwrap(), 25.0);
        assert_eq!(squared_euclidean(&pv(&[1.0, 1.0]), &pv(&[2.0, 3.0])).unwrap(), 5.0);
    }

    #[test]
    fn median_odd_takes_middle_per_component() {
        let m = elementwise_median(&[pv(&[1.0, 5.0]), pv(&[2.0, 4.0]), pv(&[3.0, 3.0])]).unwrap();
        assert_eq!(m.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn median_even_takes_mean_of_middle_pair() {
        let m = elementwise_median(&[pv(&[1.0, 0.0]), pv(&[3.0, 2.0])]).unwrap();
        assert_eq!(m.as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn median_of_single_vector_is_that_vector() {
        let v = pv(&[7.5, -2.0, 0.0]);
        assert_eq!(elementwise_median(std::slice::from_ref(&v)).unwrap(), v);
    }

    #[test]
    fn median_empty_input_errors() {
        assert!(matches!(elementwise_median(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn accumulate_examples() {
        let z = ParamVector::zeros(2);
        let u = pv(&[1.0, -2.0]);
        assert_eq!(accumulate(&z, &u).unwrap(), u);
        // Three rounds of accumulation.
        let total = accumulate(&accumulate(&u, &pv(&[1.0, 1.0])).unwrap(), &pv(&[0.5, 0.5])).unwrap();
        assert_eq!(total.as_slice(), &[2.5, -0.5]);
        // Exact cancellation.
        let back = accumulate(&u, &pv(&[-1.0, 2.0])).unwrap();
        assert_eq!(back.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_of_two_identical_is_identity() {
        let u = pv(&[0.3, -1.7, 2.9]);
        assert_eq!(mean(&[u.clone(), u.clone()]).unwrap(), u);
    }

    fn finite_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e6f64..1e6, d)
    }

    proptest! {
        #[test]
        fn cosine_is_exactly_symmetric(a in finite_vec(6), b in finite_vec(6)) {
            let (a, b) = (pv(&a), pv(&b));
            let ab = cosine_distance(&a, &b).unwrap();
            let ba = cosine_distance(&b, &a).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((0.0..=2.0).contains(&ab));
        }

        #[test]
        fn cosine_is_scale_invariant(a in finite_vec(5), b in finite_vec(5), s in 1e-3f64..1e3) {
            let (a, b) = (pv(&a), pv(&b));
            let mut scaled = a.clone();
            scaled.scale(s);
            let d0 = cosine_distance(&a, &b).unwrap();
            let d1 = cosine_distance(&scaled, &b).unwrap();
            // Scaling by a positive constant must not move the distance beyond
            // rounding noise — and must never flip a grouping decision materially.
            prop_assert!((d0 - d1).abs() <= 1e-12, "d0={} d1={}", d0, d1);
        }

        #[test]
        fn median_is_permutation_invariant(
            rows in prop::collection::vec(finite_vec(4), 1..7),
            seed in any::<u64>(),
        ) {
            let vectors: Vec<ParamVector> = rows.iter().map(|r| pv(r)).collect();
            let base = elementwise_median(&vectors).unwrap();
            // A deterministic pseudo-shuffle driven by the seed.
            let mut shuffled = vectors.clone();
            let mut state = seed | 1;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let permuted = elementwise_median(&shuffled).unwrap();
            prop_assert_eq!(base, permuted);
        }

        #[test]
        fn median_with_identical_majority_is_exact(
            v in finite_vec(5),
            others in prop::collection::vec(finite_vec(5), 0..4),
        ) {
            // k+1 identical vectors out of 2k+1 total: the identical vector wins in
            // every component, bit for bit.
            let kept = pv(&v);
            let k = others.len();
            let mut vectors = vec![kept.clone(); k + 1];
            vectors.extend(others.iter().map(|r| pv(r)));
            prop_assert_eq!(elementwise_median(&vectors).unwrap(), kept);
        }

        #[test]
        fn squared_euclidean_zero_iff_equal(a in finite_vec(5), b in finite_vec(5)) {
            let (a, b) = (pv(&a), pv(&b));
            let d = squared_euclidean(&a, &b).unwrap();
            prop_assert!(d >= 0.0);
            let equal = a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x == y);
            prop_assert_eq!(d == 0.0, equal);
        }

        #[test]
        fn operations_preserve_finiteness(a in finite_vec(5), b in finite_vec(5)) {
            let (a, b) = (pv(&a), pv(&b));
            prop_assert!(cosine_distance(&a, &b).unwrap().is_finite());
            prop_assert!(squared_euclidean(&a, &b).unwrap().is_finite());
            prop_assert!(accumulate(&a, &b).unwrap().is_finite());
            prop_assert!(elementwise_median(&[a, b]).unwrap().is_finite());
        }
    }
}
