//! Concentration observables over minor samples.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minors::MinorPlan;
use crate::mlp::{Layer, Regime};
use crate::seed::{self, tag};

/// `‖m‖₂ / ‖m‖₁`, between `1/√N` (uniform) and `1` (one value dominates).
pub fn participation_ratio(values: &[f64]) -> Result<f64> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !max.is_finite() {
        return Err(Error::InvalidArgument("non-finite minor value".into()));
    }
    if max == 0.0 {
        return Err(Error::UndefinedMetric(
            "participation ratio of an all-zero sample",
        ));
    }
    // Scaling by the max keeps tiny high-order minors from underflowing.
    let (l1, l2) = values.iter().fold((0.0, 0.0), |(l1, l2), v| {
        let s = v.abs() / max;
        (l1 + s, l2 + s * s)
    });
    Ok(l2.sqrt() / l1)
}

pub fn pr_ratio(trained: &[f64], random_init: &[f64]) -> Result<f64> {
    Ok(participation_ratio(trained)? / participation_ratio(random_init)?)
}

/// Shared bins over `log10(|m| + floor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSpec {
    edges: Vec<f64>,
    floor: f64,
    smoothing: f64,
}

impl HistogramSpec {
    pub const DEFAULT_BINS: usize = 64;
    pub const DEFAULT_FLOOR: f64 = 1e-20;
    pub const DEFAULT_SMOOTHING: f64 = 1e-9;

    pub fn new(edges: Vec<f64>, floor: f64, smoothing: f64) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(
                "histogram edges must be strictly increasing, at least two".into(),
            ));
        }
        if !(floor > 0.0) || !(smoothing > 0.0) {
            return Err(Error::InvalidArgument(
                "histogram floor and smoothing must be > 0".into(),
            ));
        }
        Ok(HistogramSpec {
            edges,
            floor,
            smoothing,
        })
    }

    /// Equal-width bins spanning the pooled range of both samples.
    pub fn pooled(a: &[f64], b: &[f64], bins: usize, floor: f64, smoothing: f64) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::InvalidArgument(
                "histogram needs two nonempty samples".into(),
            ));
        }
        if bins == 0 {
            return Err(Error::InvalidArgument("bin count must be >= 1".into()));
        }
        let (lo, hi) = a
            .iter()
            .chain(b)
            .map(|v| (v.abs() + floor).log10())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t), hi.max(t))
            });
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        };
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        edges[bins] = hi;
        Self::new(edges, floor, smoothing)
    }

    pub fn default_for(a: &[f64], b: &[f64]) -> Result<Self> {
        Self::pooled(
            a,
            b,
            Self::DEFAULT_BINS,
            Self::DEFAULT_FLOOR,
            Self::DEFAULT_SMOOTHING,
        )
    }

    pub fn bin_count(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    fn bin_of(&self, v: f64) -> usize {
        let t = (v.abs() + self.floor).log10();
        let last = self.bin_count() - 1;
        self.edges[1..].partition_point(|&e| e <= t).min(last)
    }

    /// Normalized histogram with `smoothing` added to every bin, then
    /// renormalized.
    pub fn masses(&self, values: &[f64]) -> Vec<f64> {
        let mut counts = vec![0.0; self.bin_count()];
        for &v in values {
            counts[self.bin_of(v)] += 1.0;
        }
        let n = values.len().max(1) as f64;
        let total = 1.0 + self.smoothing * counts.len() as f64;
        counts
            .into_iter()
            .map(|c| (c / n + self.smoothing) / total)
            .collect()
    }
}

/// `Σ p ln(p/q)`; bins with `p = 0` contribute nothing.
pub fn kl_from_masses(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "histograms must share bins");
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

pub fn kl_divergence_with(trained: &[f64], init: &[f64], spec: &HistogramSpec) -> Result<f64> {
    if trained.is_empty() || init.is_empty() {
        return Err(Error::InvalidArgument("KL needs nonempty samples".into()));
    }
    Ok(kl_from_masses(&spec.masses(trained), &spec.masses(init)).max(0.0))
}

/// `KL(P_trained ‖ P_init)` with the default pooled log-domain histogram.
pub fn kl_divergence(trained: &[f64], init: &[f64]) -> Result<f64> {
    let spec = HistogramSpec::default_for(trained, init)?;
    kl_divergence_with(trained, init, &spec)
}

/// Determinant by partial-pivot LU.
pub fn determinant(m: ArrayView2<f64>) -> f64 {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "determinant of a non-square matrix");
    let mut a = m.to_owned();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .expect("nonempty range");
        if a[[pivot, col]] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..n {
                a.swap([pivot, c], [col, c]);
            }
            det = -det;
        }
        let p = a[[col, col]];
        det *= p;
        for r in col + 1..n {
            let f = a[[r, col]] / p;
            if f != 0.0 {
                for c in col + 1..n {
                    a[[r, c]] -= f * a[[col, c]];
                }
            }
        }
    }
    det
}

/// Haar-distributed element of SO(dim).
///
/// Gram-Schmidt on a Gaussian matrix (which yields the QR factor with a
/// positive diagonal in R), then the first column is negated if the
/// determinant is −1.
pub fn random_rotation(dim: usize, seed: u64) -> Result<Array2<f64>> {
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "rotation dimension must be >= 1".into(),
        ));
    }
    let mut rng = seed::rng_from(seed, &[tag::ROTATION]);
    // Columns stored as rows of `q` while orthonormalizing.
    let mut q = Array2::<f64>::from_shape_fn((dim, dim), |_| StandardNormal.sample(&mut rng));
    for i in 0..dim {
        // Two passes of modified Gram-Schmidt for numerical orthogonality.
        for _ in 0..2 {
            for j in 0..i {
                let proj = q.row(i).dot(&q.row(j));
                let qj = q.row(j).to_owned();
                q.row_mut(i).scaled_add(-proj, &qj);
            }
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / norm);
    }
    let mut q = q.reversed_axes().as_standard_layout().into_owned();
    if determinant(q.view()) < 0.0 {
        q.column_mut(0).mapv_inplace(|v| -v);
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationSide {
    /// `R·J` with `R ∈ SO(h)`.
    Hidden,
    /// `J·R` with `R ∈ SO(784)`.
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub count: usize,
    pub seed: u64,
    pub side: RotationSide,
}

impl Default for RotationSpec {
    fn default() -> Self {
        RotationSpec {
            count: 100,
            seed: 0,
            side: RotationSide::Hidden,
        }
    }
}

/// Pre-drawn rotations, reused across inputs, layers and orders.
#[derive(Debug, Clone)]
pub struct RotationBank {
    side: RotationSide,
    matrices: Vec<Array2<f64>>,
}

impl RotationBank {
    pub fn new(spec: &RotationSpec, h: usize, input_dim: usize) -> Result<Self> {
        if spec.count == 0 {
            return Err(Error::InvalidArgument("rotation count must be >= 1".into()));
        }
        let dim = match spec.side {
            RotationSide::Hidden => h,
            RotationSide::Input => input_dim,
        };
        let matrices = (0..spec.count as u64)
            .into_par_iter()
            .map(|i| random_rotation(dim, seed::derive_seed(spec.seed, &[i])))
            .collect::<Result<Vec<_>>>()?;
        Ok(RotationBank {
            side: spec.side,
            matrices,
        })
    }

    /// Uses the given matrices verbatim (e.g. identity or permutations).
    pub fn from_matrices(side: RotationSide, matrices: Vec<Array2<f64>>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::InvalidArgument("rotation bank is empty".into()));
        }
        Ok(RotationBank { side, matrices })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    fn apply(&self, r: &Array2<f64>, j: ArrayView2<f64>) -> Array2<f64> {
        match self.side {
            RotationSide::Hidden => r.dot(&j),
            RotationSide::Input => j.dot(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationRatio {
    pub base_pr: f64,
    pub mean_rotated_pr: f64,
    /// `E_R[PR(rotated)] / PR(J)`.
    pub ratio: f64,
    /// `PR(J) / E_R[PR(rotated)]`.
    pub reciprocal: f64,
}

/// PR under each rotation of `j`, using one fixed minor plan throughout.
pub fn rotation_ratio(
    j: ArrayView2<f64>,
    plan: &MinorPlan,
    bank: &RotationBank,
    chunk: usize,
) -> Result<RotationRatio> {
    let base_pr = participation_ratio(&plan.evaluate(j, chunk)?)?;
    let prs = bank
        .matrices
        .par_iter()
        .map(|r| {
            let rotated = bank.apply(r, j);
            participation_ratio(&plan.evaluate(rotated.view(), chunk)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_rotated_pr = prs.iter().sum::<f64>() / prs.len() as f64;
    Ok(RotationRatio {
        base_pr,
        mean_rotated_pr,
        ratio: mean_rotated_pr / base_pr,
        reciprocal: base_pr / mean_rotated_pr,
    })
}

/// [`rotation_ratio`] for several plans at once, rotating `j` only once per
/// matrix in the bank.
pub fn rotation_ratios(
    j: ArrayView2<f64>,
    plans: &[&MinorPlan],
    bank: &RotationBank,
    chunk: usize,
) -> Result<Vec<RotationRatio>> {
    let base = plans
        .iter()
        .map(|p| participation_ratio(&p.evaluate(j, chunk)?))
        .collect::<Result<Vec<f64>>>()?;
    let per_rotation = bank
        .matrices
        .par_iter()
        .map(|r| {
            let rotated = bank.apply(r, j);
            plans
                .iter()
                .map(|p| participation_ratio(&p.evaluate(rotated.view(), chunk)?))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(base
        .iter()
        .enumerate()
        .map(|(i, &base_pr)| {
            let mean_rotated_pr =
                per_rotation.iter().map(|prs| prs[i]).sum::<f64>() / per_rotation.len() as f64;
            RotationRatio {
                base_pr,
                mean_rotated_pr,
                ratio: mean_rotated_pr / base_pr,
                reciprocal: base_pr / mean_rotated_pr,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroRows {
    pub fraction: f64,
    /// Median row norm was zero.
    pub degenerate: bool,
}

/// Fraction of rows whose norm is below `tol × median row norm`.
pub fn zero_row_fraction(j: ArrayView2<f64>, tol: f64) -> Result<ZeroRows> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(
            "zero-row tolerance must be > 0".into(),
        ));
    }
    if j.nrows() == 0 {
        return Err(Error::InvalidArgument("matrix has no rows".into()));
    }
    let norms: Vec<f64> = j.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    if median == 0.0 {
        let zeros = norms.iter().filter(|&&v| v == 0.0).count();
        return Ok(ZeroRows {
            fraction: zeros as f64 / n as f64,
            degenerate: true,
        });
    }
    let threshold = tol * median;
    let below = norms.iter().filter(|&&v| v < threshold).count();
    Ok(ZeroRows {
        fraction: below as f64 / n as f64,
        degenerate: false,
    })
}

/// One `(model, layer, k, condition, epoch)` cell.
///
/// `rr`, `rr_inverse` and `kl_floor` are empty when not computed for the
/// condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub h: usize,
    pub seed: u64,
    pub regime: Regime,
    pub epoch: usize,
    pub layer: Layer,
    pub k: usize,
    pub condition: String,
    pub pr: f64,
    pub pr_ratio: f64,
    pub kl: f64,
    pub rr: Option<f64>,
    pub zero_row_fraction: f64,
    pub pr_init: f64,
    pub rr_inverse: Option<f64>,
    pub kl_floor: Option<f64>,
    pub n_minors: usize,
    pub n_inputs: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minors::{sample_combinations, MinorCaps};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pr_examples() {
        assert_eq!(participation_ratio(&[5.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((participation_ratio(&[3.0, 4.0]).unwrap() - 5.0 / 7.0).abs() < 1e-15);
        for n in [2usize, 10, 10_000] {
            let pr = participation_ratio(&vec![0.37; n]).unwrap();
            assert!((pr - 1.0 / (n as f64).sqrt()).abs() < 1e-12);
        }
        assert!(matches!(
            participation_ratio(&[0.0, 0.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(participation_ratio(&[]).is_err());
    }

    #[test]
    fn pr_ratio_examples() {
        let uniform = vec![1.0; 100];
        assert_eq!(pr_ratio(&uniform, &uniform).unwrap(), 1.0);
        let mut one_hot = vec![0.0; 100];
        one_hot[7] = 2.0;
        assert!((pr_ratio(&one_hot, &uniform).unwrap() - 10.0).abs() < 1e-12);
        assert!(pr_ratio(&one_hot, &[0.0]).is_err());
    }

    #[test]
    fn kl_two_bin_example() {
        let kl = kl_from_masses(&[0.5, 0.5], &[0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_self_is_zero_and_shift_is_positive() {
        let mut rng = seed::rng_from(1, &[]);
        let a: Vec<f64> = (0..5000)
            .map(|_| rng.random_range(0.0..1.0f64).powi(3))
            .collect();
        assert!(kl_divergence(&a, &a).unwrap().abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|v| v * 10.0).collect();
        assert!(kl_divergence(&b, &a).unwrap() > 0.1);
        assert!(kl_divergence(&[], &a).is_err());
    }

    #[test]
    fn histogram_spec_validation() {
        assert!(HistogramSpec::new(vec![0.0, 0.0], 1e-20, 1e-9).is_err());
        assert!(HistogramSpec::new(vec![0.0, 1.0], 0.0, 1e-9).is_err());
        assert!(HistogramSpec::new(vec![0.0, 1.0], 1e-20, 0.0).is_err());
        let spec = HistogramSpec::pooled(&[1.0], &[1.0], 8, 1e-20, 1e-9).unwrap();
        assert_eq!(spec.bin_count(), 8);
        let m = spec.masses(&[1.0, 1.0]);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::neg_multiply)]
    fn lu_determinant_matches_closed_forms() {
        let m = ndarray::array![[2.0, 1.0, 0.5], [0.0, -1.0, 3.0], [4.0, 0.0, 1.0]];
        // cofactor expansion along the first row
        let expected = 2.0 * (-1.0 * 1.0 - 3.0 * 0.0) - 1.0 * (0.0 * 1.0 - 3.0 * 4.0)
            + 0.5 * (0.0 * 0.0 - (-1.0) * 4.0);
        assert!((determinant(m.view()) - expected).abs() < 1e-12);
        let swap = ndarray::array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(determinant(swap.view()), -1.0);
    }

    #[test]
    fn rotations_are_special_orthogonal() {
        for (dim, seed) in [(1, 0), (2, 1), (8, 2), (64, 3)] {
            let r = random_rotation(dim, seed).unwrap();
            let rrt = r.dot(&r.t());
            let eye = Array2::<f64>::eye(dim);
            let err = (&rrt - &eye).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "dim {dim}: {err}");
            assert!((determinant(r.view()) - 1.0).abs() < 1e-10);
        }
        assert_eq!(
            random_rotation(8, 5).unwrap(),
            random_rotation(8, 5).unwrap()
        );
        assert!(random_rotation(0, 0).is_err());
    }

    #[test]
    fn rotation_entries_have_haar_moments() {
        // For Haar SO(d), each entry has mean 0 and variance 1/d.
        let dim = 8;
        let draws = 1000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut col_norm_dev = 0.0f64;
        for s in 0..draws {
            let r = random_rotation(dim, 1000 + s).unwrap();
            sum += r[[0, 0]];
            sum_sq += r[[0, 0]] * r[[0, 0]];
            for c in 0..dim {
                let n = r.column(c).dot(&r.column(c)).sqrt();
                col_norm_dev = col_norm_dev.max((n - 1.0).abs());
            }
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0 / dim as f64).abs() < 0.025, "var {var}");
        assert!(col_norm_dev < 1e-12);
    }

    fn exhaustive_plan(h: usize, d: usize, k: usize) -> MinorPlan {
        MinorPlan::full(
            sample_combinations(h, k, usize::MAX, 0).unwrap(),
            sample_combinations(d, k, usize::MAX, 0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_rotation_gives_unit_ratio() {
        let mut rng = seed::rng_from(4, &[]);
        let j = Array2::from_shape_fn((6, 9), |_| rng.random_range(-1.0..1.0));
        let plan = exhaustive_plan(6, 9, 2);
        let bank = RotationBank::from_matrices(RotationSide::Hidden, vec![Array2::eye(6)]).unwrap();
        let rr = rotation_ratio(j.view(), &plan, &bank, 500).unwrap();
        assert_eq!(rr.ratio, 1.0);
        assert_eq!(rr.reciprocal, 1.0);
    }

    #[test]
    fn permutation_rotation_leaves_pr_invariant() {
        let mut rng = seed::rng_from(5, &[]);
        let j = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
        let mut perm = Array2::<f64>::zeros((6, 6));
        for (i, p) in [3, 0, 5, 1, 4, 2].into_iter().enumerate() {
            perm[[i, p]] = 1.0;
        }
        for k in 1..=3 {
            let plan = exhaustive_plan(6, 6, k);
            let bank =
                RotationBank::from_matrices(RotationSide::Hidden, vec![perm.clone()]).unwrap();
            let rr = rotation_ratio(j.view(), &plan, &bank, 3).unwrap();
            assert!((rr.ratio - 1.0).abs() < 1e-12, "k={k}: {}", rr.ratio);
        }
    }

    #[test]
    fn isotropic_jacobian_has_unit_rotation_ratio() {
        let mut rng = seed::rng_from(6, &[]);
        let j = Array2::from_shape_fn((64, 784), |_| StandardNormal.sample(&mut rng));
        let caps = MinorCaps {
            row_cap: 10_000,
            col_cap: 10_000,
            pair_budget: Some(20_000),
        };
        let plan = MinorPlan::sample(64, 784, 2, caps, 42, None).unwrap();
        let spec = RotationSpec {
            count: 100,
            seed: 7,
            side: RotationSide::Hidden,
        };
        let bank = RotationBank::new(&spec, 64, 784).unwrap();
        let rr = rotation_ratio(j.view(), &plan, &bank, 500).unwrap();
        assert!((rr.ratio - 1.0).abs() < 0.05, "rr {}", rr.ratio);
    }

    #[test]
    fn axis_aligned_spike_loses_concentration_under_rotation() {
        // Brute force on a 4×4 toy: one dominant entry, k = 1.
        let mut j = Array2::<f64>::from_elem((4, 4), 0.01);
        j[[0, 0]] = 10.0;
        let plan = exhaustive_plan(4, 4, 1);
        let spec = RotationSpec {
            count: 50,
            seed: 3,
            side: RotationSide::Hidden,
        };
        let bank = RotationBank::new(&spec, 4, 4).unwrap();
        let rr = rotation_ratio(j.view(), &plan, &bank, 500).unwrap();
        assert!(rr.mean_rotated_pr < rr.base_pr);
        assert!(rr.ratio < 1.0 && rr.reciprocal > 1.0);
    }

    #[test]
    fn batched_rotation_ratios_match_single_plan() {
        let mut rng = seed::rng_from(8, &[]);
        let j = Array2::from_shape_fn((7, 10), |_| rng.random_range(-1.0..1.0));
        let plans: Vec<MinorPlan> = (1..=3).map(|k| exhaustive_plan(7, 10, k)).collect();
        let spec = RotationSpec {
            count: 5,
            seed: 1,
            side: RotationSide::Input,
        };
        let bank = RotationBank::new(&spec, 7, 10).unwrap();
        let refs: Vec<&MinorPlan> = plans.iter().collect();
        let batched = rotation_ratios(j.view(), &refs, &bank, 4).unwrap();
        for (plan, got) in plans.iter().zip(&batched) {
            assert_eq!(*got, rotation_ratio(j.view(), plan, &bank, 4).unwrap());
        }
    }

    #[test]
    fn zero_rows() {
        let eye = Array2::<f64>::eye(6);
        let z = zero_row_fraction(eye.view(), 1e-3).unwrap();
        assert_eq!(z.fraction, 0.0);
        assert!(!z.degenerate);

        let mut half = Array2::<f64>::from_elem((6, 5), 1.0);
        for r in [0, 2, 4] {
            half.row_mut(r).fill(0.0);
        }
        assert_eq!(zero_row_fraction(half.view(), 1e-3).unwrap().fraction, 0.5);

        let zero = Array2::<f64>::zeros((4, 4));
        let z = zero_row_fraction(zero.view(), 1e-3).unwrap();
        assert_eq!(z.fraction, 1.0);
        assert!(z.degenerate);
        assert!(zero_row_fraction(eye.view(), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn pr_bounds_and_scale_invariance(
            values in proptest::collection::vec(0.0f64..1e3, 1..200),
            exp in -20i32..20,
        ) {
            prop_assume!(values.iter().any(|&v| v > 0.0));
            let pr = participation_ratio(&values).unwrap();
            let n = values.len() as f64;
            prop_assert!(pr <= 1.0 + 1e-12);
            prop_assert!(pr >= 1.0 / n.sqrt() - 1e-12);
            let c = 2f64.powi(exp);
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            prop_assert_eq!(participation_ratio(&scaled).unwrap(), pr);
            let c = 3.7;
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            prop_assert!((participation_ratio(&scaled).unwrap() - pr).abs() < 1e-12);
        }

        #[test]
        fn kl_is_non_negative(
            a in proptest::collection::vec(0.0f64..10.0, 1..100),
            b in proptest::collection::vec(0.0f64..10.0, 1..100),
        ) {
            let kl = kl_divergence(&a, &b).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_divergence(&a, &a).unwrap().abs() < 1e-12);
        }
    }
}
