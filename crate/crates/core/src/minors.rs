//! Sampling of row/column index combinations and evaluation of absolute
//! `k×k` minors (`k ≤ 3`) of a Jacobian.
//!
//! A [`MinorPlan`] fixes which (row-tuple, column-tuple) pairs are
//! evaluated. The same plan is applied to a trained Jacobian, its
//! initialization counterpart and every rotated copy, so all compared
//! samples share identical index sets. Values are laid out column-tuple
//! major: all row tuples for the first column tuple, then the next.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::ArrayView2;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, tag};

pub const MAX_ORDER: usize = 3;

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Strictly increasing `k`-tuples over `{0, …, n−1}`, stored flat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinationSet {
    k: usize,
    n: usize,
    seed: u64,
    flat: Vec<usize>,
}

impl CombinationSet {
    /// Validates ordering, range and uniqueness of explicit tuples.
    pub fn from_tuples(n: usize, k: usize, seed: u64, tuples: &[Vec<usize>]) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("tuple order must be >= 1".into()));
        }
        let mut seen = HashSet::with_capacity(tuples.len());
        let mut flat = Vec::with_capacity(tuples.len() * k);
        for t in tuples {
            if t.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "tuple {t:?} does not have length {k}"
                )));
            }
            if t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "tuple {t:?} is not strictly increasing"
                )));
            }
            if let Some(&bad) = t.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfBounds {
                    index: bad,
                    bound: n,
                });
            }
            if !seen.insert(t.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate tuple {t:?}")));
            }
            flat.extend_from_slice(t);
        }
        Ok(CombinationSet { k, n, seed, flat })
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn source_n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn tuple(&self, i: usize) -> &[usize] {
        &self.flat[i * self.k..(i + 1) * self.k]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, usize> {
        self.flat.chunks_exact(self.k)
    }

    fn max_index(&self) -> Option<usize> {
        self.flat.iter().copied().max()
    }

    /// Re-expresses tuples over `{0..universe.len()}` as tuples of
    /// `universe` entries. `universe` must be strictly increasing so
    /// tuples stay sorted.
    pub fn mapped_through(&self, universe: &[usize], n: usize) -> CombinationSet {
        debug_assert!(universe.windows(2).all(|w| w[0] < w[1]));
        CombinationSet {
            k: self.k,
            n,
            seed: self.seed,
            flat: self.flat.iter().map(|&i| universe[i]).collect(),
        }
    }
}

fn lexicographic(n: usize, k: usize) -> Vec<usize> {
    let mut flat = Vec::new();
    let mut t: Vec<usize> = (0..k).collect();
    loop {
        flat.extend_from_slice(&t);
        // rightmost position that can still advance
        let Some(pos) = (0..k).rev().find(|&i| t[i] < n - k + i) else {
            return flat;
        };
        t[pos] += 1;
        for i in pos + 1..k {
            t[i] = t[i - 1] + 1;
        }
    }
}

/// All `C(n,k)` tuples in lexicographic order when that fits within
/// `cap`; otherwise `cap` distinct tuples drawn uniformly by rejection, in
/// generation order.
pub fn sample_combinations(n: usize, k: usize, cap: usize, seed: u64) -> Result<CombinationSet> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    if cap == 0 {
        return Err(Error::InvalidArgument("cap must be >= 1".into()));
    }
    if binomial(n, k) <= cap as u128 {
        return Ok(CombinationSet {
            k,
            n,
            seed,
            flat: lexicographic(n, k),
        });
    }
    let mut rng = seed::rng_from(seed, &[]);
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(cap);
    let mut flat = Vec::with_capacity(cap * k);
    while seen.len() < cap {
        let mut t = index::sample(&mut rng, n, k).into_vec();
        t.sort_unstable();
        if !seen.contains(&t) {
            flat.extend_from_slice(&t);
            seen.insert(t);
        }
    }
    Ok(CombinationSet { k, n, seed, flat })
}

/// Sampling limits for one minor distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinorCaps {
    pub row_cap: usize,
    pub col_cap: usize,
    /// Upper bound on evaluated (row, column) pairs; the cross product is
    /// uniformly subsampled when larger.
    pub pair_budget: Option<usize>,
}

impl Default for MinorCaps {
    fn default() -> Self {
        MinorCaps {
            row_cap: 10_000,
            col_cap: 10_000,
            pair_budget: None,
        }
    }
}

/// Row tuples × column tuples, optionally restricted to a sorted subset of
/// pair indices `c * rows.len() + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinorPlan {
    rows: CombinationSet,
    cols: CombinationSet,
    pairs: Option<Vec<u64>>,
}

impl MinorPlan {
    pub fn full(rows: CombinationSet, cols: CombinationSet) -> Result<Self> {
        if rows.order() != cols.order() {
            return Err(Error::InvalidArgument(format!(
                "row order {} differs from column order {}",
                rows.order(),
                cols.order()
            )));
        }
        if rows.order() > MAX_ORDER {
            return Err(Error::UnsupportedOrder(rows.order()));
        }
        Ok(MinorPlan {
            rows,
            cols,
            pairs: None,
        })
    }

    /// Full cross product, uniformly thinned to `budget` pairs if needed.
    pub fn with_budget(
        rows: CombinationSet,
        cols: CombinationSet,
        budget: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut plan = Self::full(rows, cols)?;
        let total = plan.rows.len() as u64 * plan.cols.len() as u64;
        if let Some(b) = budget {
            if b == 0 {
                return Err(Error::InvalidArgument("pair budget must be >= 1".into()));
            }
            if total > b as u64 {
                let mut rng = seed::rng_from(seed, &[tag::PAIRS]);
                let mut picked: Vec<u64> = index::sample(&mut rng, total as usize, b)
                    .into_iter()
                    .map(|i| i as u64)
                    .collect();
                picked.sort_unstable();
                plan.pairs = Some(picked);
            }
        }
        Ok(plan)
    }

    /// Samples rows over `{0..h}` and columns over `universe` (all 784
    /// pixels when `None`). For `k = 1` every row and every column is used
    /// and the pair budget is ignored.
    pub fn sample(
        h: usize,
        input_dim: usize,
        k: usize,
        caps: MinorCaps,
        seed: u64,
        universe: Option<&[usize]>,
    ) -> Result<Self> {
        if !(1..=MAX_ORDER).contains(&k) {
            return Err(Error::UnsupportedOrder(k));
        }
        let owned: Vec<usize>;
        let universe = match universe {
            Some(u) => u,
            None => {
                owned = (0..input_dim).collect();
                &owned
            }
        };
        if universe.len() < k || h < k {
            return Err(Error::InvalidArgument(format!(
                "cannot form order-{k} minors from {h} rows and {} columns",
                universe.len()
            )));
        }
        let (row_cap, col_cap) = if k == 1 {
            (h, universe.len())
        } else {
            (caps.row_cap, caps.col_cap)
        };
        let rows = sample_combinations(h, k, row_cap, seed::derive_seed(seed, &[tag::ROWS]))?;
        let cols = sample_combinations(
            universe.len(),
            k,
            col_cap,
            seed::derive_seed(seed, &[tag::COLS]),
        )?
        .mapped_through(universe, input_dim);
        let budget = if k == 1 { None } else { caps.pair_budget };
        Self::with_budget(rows, cols, budget, seed)
    }

    pub fn order(&self) -> usize {
        self.rows.order()
    }

    pub fn rows(&self) -> &CombinationSet {
        &self.rows
    }

    pub fn cols(&self) -> &CombinationSet {
        &self.cols
    }

    pub fn len(&self) -> usize {
        match &self.pairs {
            Some(p) => p.len(),
            None => self.rows.len() * self.cols.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row tuple index, column tuple index)` of the `i`-th value.
    pub fn pair(&self, i: usize) -> (usize, usize) {
        let r = self.rows.len() as u64;
        let p = match &self.pairs {
            Some(p) => p[i],
            None => i as u64,
        };
        ((p % r) as usize, (p / r) as usize)
    }

    fn check_bounds(&self, j: &ArrayView2<f64>) -> Result<()> {
        if let Some(m) = self.rows.max_index().filter(|&m| m >= j.nrows()) {
            return Err(Error::IndexOutOfBounds {
                index: m,
                bound: j.nrows(),
            });
        }
        if let Some(m) = self.cols.max_index().filter(|&m| m >= j.ncols()) {
            return Err(Error::IndexOutOfBounds {
                index: m,
                bound: j.ncols(),
            });
        }
        Ok(())
    }

    /// Absolute minors of `j`, processing at most `chunk` column tuples at
    /// a time. Output order does not depend on `chunk`.
    pub fn evaluate(&self, j: ArrayView2<f64>, chunk: usize) -> Result<Vec<f64>> {
        if chunk == 0 {
            return Err(Error::InvalidArgument("chunk must be >= 1".into()));
        }
        self.check_bounds(&j)?;
        let ncols = self.cols.len();
        let starts: Vec<usize> = (0..ncols).step_by(chunk).collect();
        let parts: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&c0| self.evaluate_columns(&j, c0, (c0 + chunk).min(ncols)))
            .collect();
        Ok(parts.concat())
    }

    fn evaluate_columns(&self, j: &ArrayView2<f64>, c0: usize, c1: usize) -> Vec<f64> {
        let k = self.order();
        let h = j.nrows();
        let nrows = self.rows.len();
        let mut gathered = vec![0.0; k * h];
        let mut out = Vec::new();
        let mut eval_column = |c: usize, row_iter: &mut dyn Iterator<Item = usize>| {
            for (t, &col) in self.cols.tuple(c).iter().enumerate() {
                for (r, g) in gathered[t * h..(t + 1) * h].iter_mut().enumerate() {
                    *g = j[[r, col]];
                }
            }
            for r in row_iter {
                out.push(abs_det(&gathered, h, self.rows.tuple(r)));
            }
        };
        match &self.pairs {
            None => {
                for c in c0..c1 {
                    eval_column(c, &mut (0..nrows));
                }
            }
            Some(pairs) => {
                let r = nrows as u64;
                let lo = pairs.partition_point(|&p| p < c0 as u64 * r);
                let hi = pairs.partition_point(|&p| p < c1 as u64 * r);
                let mut i = lo;
                while i < hi {
                    let c = (pairs[i] / r) as usize;
                    let end = i + pairs[i..hi].partition_point(|&p| p / r == c as u64);
                    eval_column(c, &mut pairs[i..end].iter().map(|&p| (p % r) as usize));
                    i = end;
                }
            }
        }
        out
    }
}

/// `|det|` of the submatrix picking `rows` from the column-major `k×h`
/// gather buffer.
#[inline]
fn abs_det(g: &[f64], h: usize, rows: &[usize]) -> f64 {
    match rows.len() {
        1 => g[rows[0]].abs(),
        2 => {
            let (r0, r1) = (rows[0], rows[1]);
            (g[r0] * g[h + r1] - g[h + r0] * g[r1]).abs()
        }
        3 => {
            let e = |r: usize, c: usize| g[c * h + rows[r]];
            let (a, b, c) = (e(0, 0), e(0, 1), e(0, 2));
            let (d, ee, f) = (e(1, 0), e(1, 1), e(1, 2));
            let (gg, hh, i) = (e(2, 0), e(2, 1), e(2, 2));
            (a * (ee * i - f * hh) - b * (d * i - f * gg) + c * (d * hh - ee * gg)).abs()
        }
        k => unreachable!("order {k} rejected at plan construction"),
    }
}

/// Absolute minors for one plan applied to one matrix.
#[derive(Debug, Clone)]
pub struct MinorSample {
    pub k: usize,
    pub values: Vec<f64>,
    pub plan: Arc<MinorPlan>,
}

impl MinorSample {
    pub fn evaluate(plan: Arc<MinorPlan>, j: ArrayView2<f64>, chunk: usize) -> Result<Self> {
        let values = plan.evaluate(j, chunk)?;
        Ok(MinorSample {
            k: plan.order(),
            values,
            plan,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(row tuple, column tuple, value)` in evaluation order.
    pub fn entries(&self) -> impl Iterator<Item = (&[usize], &[usize], f64)> + '_ {
        self.values.iter().enumerate().map(|(i, &v)| {
            let (r, c) = self.plan.pair(i);
            (self.plan.rows().tuple(r), self.plan.cols().tuple(c), v)
        })
    }

    /// Writes `k,rows,cols,value` lines; tuple entries are `;`-separated.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let join = |t: &[usize]| {
            t.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        let io = |e| Error::io(path, e);
        writeln!(w, "k,rows,cols,value").map_err(io)?;
        for (r, c, v) in self.entries() {
            writeln!(w, "{},{},{},{}", self.k, join(r), join(c), v).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Every (row tuple, column tuple) pair of the two sets.
pub fn compute_minors(
    j: ArrayView2<f64>,
    rows: &CombinationSet,
    cols: &CombinationSet,
    chunk: usize,
) -> Result<MinorSample> {
    let plan = MinorPlan::full(rows.clone(), cols.clone())?;
    MinorSample::evaluate(Arc::new(plan), j, chunk)
}

/// Samples rows over all hidden units and columns over all input pixels,
/// then evaluates.
pub fn minor_distribution(
    j: ArrayView2<f64>,
    k: usize,
    caps: MinorCaps,
    seed: u64,
    chunk: usize,
) -> Result<MinorSample> {
    let plan = MinorPlan::sample(j.nrows(), j.ncols(), k, caps, seed, None)?;
    MinorSample::evaluate(Arc::new(plan), j, chunk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng_from(seed, &[5]);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Leibniz-formula determinant.
    fn leibniz(m: &[Vec<f64>]) -> f64 {
        fn perms(k: usize) -> Vec<Vec<usize>> {
            if k == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in perms(k - 1) {
                for pos in 0..k {
                    let mut q = p.clone();
                    q.insert(pos, k - 1);
                    out.push(q);
                }
            }
            out
        }
        let k = m.len();
        perms(k)
            .into_iter()
            .map(|p| {
                let inversions = (0..k)
                    .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
                    .filter(|&(i, j)| p[i] > p[j])
                    .count();
                let sign = if inversions % 2 == 0 { 1.0 } else { -1.0 };
                sign * (0..k).map(|i| m[i][p[i]]).product::<f64>()
            })
            .sum()
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(64, 2), 2016);
        assert_eq!(binomial(784, 3), 80_007_984);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(10_000, 5_000), u128::MAX);
    }

    #[test]
    fn exhaustive_small_sets() {
        let s = sample_combinations(4, 2, 100, 42).unwrap();
        let tuples: Vec<&[usize]> = s.iter().collect();
        assert_eq!(
            tuples,
            vec![&[0, 1][..], &[0, 2], &[0, 3], &[1, 2], &[1, 3], &[2, 3]]
        );
        let s = sample_combinations(5, 5, 10, 42).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.tuple(0), &[0, 1, 2, 3, 4]);
        assert!(sample_combinations(3, 4, 10, 0).is_err());
        assert!(sample_combinations(3, 0, 10, 0).is_err());
        assert!(sample_combinations(3, 2, 0, 0).is_err());
    }

    #[test]
    fn sampled_triples_are_distinct_and_deterministic() {
        let a = sample_combinations(784, 3, 10_000, 42).unwrap();
        let b = sample_combinations(784, 3, 10_000, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10_000);
        let set: HashSet<&[usize]> = a.iter().collect();
        assert_eq!(set.len(), 10_000);
        assert!(a.iter().all(|t| t[0] < t[1] && t[1] < t[2] && t[2] < 784));
        assert_ne!(a, sample_combinations(784, 3, 10_000, 43).unwrap());
    }

    #[test]
    fn hand_determinants() {
        let j = array![[1.0, 2.0], [3.0, 4.0]];
        let rows = sample_combinations(2, 2, 10, 0).unwrap();
        let s = compute_minors(j.view(), &rows, &rows, 500).unwrap();
        assert_eq!(s.values, vec![2.0]);

        let eye = Array2::<f64>::eye(3);
        let rows = sample_combinations(3, 3, 10, 0).unwrap();
        let s = compute_minors(eye.view(), &rows, &rows, 500).unwrap();
        assert_eq!(s.values, vec![1.0]);
    }

    #[test]
    fn all_minors_of_6x6_match_leibniz() {
        let j = random_matrix(6, 6, 1);
        for k in 1..=3 {
            let combos = sample_combinations(6, k, 10_000, 0).unwrap();
            let got = compute_minors(j.view(), &combos, &combos, 4).unwrap();
            let mut expected = Vec::new();
            for ct in combos.iter() {
                for rt in combos.iter() {
                    let m: Vec<Vec<f64>> = rt
                        .iter()
                        .map(|&r| ct.iter().map(|&c| j[[r, c]]).collect())
                        .collect();
                    expected.push(leibniz(&m).abs());
                }
            }
            for (a, b) in got.values.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn order_one_is_absolute_entries() {
        let j = random_matrix(64, 784, 2);
        let caps = MinorCaps {
            pair_budget: Some(100),
            ..MinorCaps::default()
        };
        let s = minor_distribution(j.view(), 1, caps, 42, 500).unwrap();
        assert_eq!(s.len(), 64 * 784);
        for (rt, ct, v) in s.entries() {
            assert_eq!(v, j[[rt[0], ct[0]]].abs());
        }
    }

    #[test]
    fn order_two_rows_exhaustive_at_h64() {
        let j = random_matrix(64, 784, 3);
        let caps = MinorCaps {
            row_cap: 10_000,
            col_cap: 10_000,
            pair_budget: Some(50_000),
        };
        let s = minor_distribution(j.view(), 2, caps, 42, 500).unwrap();
        assert_eq!(s.plan.rows().len(), 2016);
        assert_eq!(s.plan.cols().len(), 10_000);
        assert_eq!(s.len(), 50_000);
    }

    #[test]
    fn zero_matrix_gives_zero_minors() {
        let j = Array2::<f64>::zeros((10, 784));
        for k in 1..=3 {
            let caps = MinorCaps {
                row_cap: 50,
                col_cap: 50,
                pair_budget: None,
            };
            let s = minor_distribution(j.view(), k, caps, 1, 7).unwrap();
            assert!(!s.is_empty());
            assert!(s.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn errors() {
        let j = random_matrix(4, 4, 4);
        let rows = sample_combinations(4, 2, 10, 0).unwrap();
        let cols = sample_combinations(4, 3, 10, 0).unwrap();
        assert!(compute_minors(j.view(), &rows, &cols, 5).is_err());
        let rows4 = sample_combinations(4, 4, 10, 0).unwrap();
        assert!(matches!(
            compute_minors(j.view(), &rows4, &rows4, 5),
            Err(Error::UnsupportedOrder(4))
        ));
        let wide = sample_combinations(8, 2, 100, 0).unwrap();
        assert!(matches!(
            compute_minors(j.view(), &rows, &wide, 5),
            Err(Error::IndexOutOfBounds { .. })
        ));
        assert!(compute_minors(j.view(), &rows, &rows, 0).is_err());
    }

    #[test]
    fn budget_selects_subset_of_full_cross_product() {
        let j = random_matrix(12, 40, 6);
        let rows = sample_combinations(12, 2, 1000, 0).unwrap();
        let cols = sample_combinations(40, 2, 1000, 0).unwrap();
        let full = MinorPlan::full(rows.clone(), cols.clone()).unwrap();
        let thin = MinorPlan::with_budget(rows, cols, Some(500), 9).unwrap();
        let all = full.evaluate(j.view(), 13).unwrap();
        let some = thin.evaluate(j.view(), 13).unwrap();
        assert_eq!(some.len(), 500);
        for (i, v) in some.iter().enumerate() {
            let (r, c) = thin.pair(i);
            assert_eq!(*v, all[c * full.rows().len() + r]);
        }
        for chunk in [1, 7, 500] {
            assert_eq!(thin.evaluate(j.view(), chunk).unwrap(), some);
        }
    }

    #[test]
    fn dump_has_one_line_per_minor() {
        let j = random_matrix(4, 5, 8);
        let rows = sample_combinations(4, 2, 10, 0).unwrap();
        let cols = sample_combinations(5, 2, 10, 0).unwrap();
        let s = compute_minors(j.view(), &rows, &cols, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("minors.csv");
        s.write_dump(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 60);
        assert!(text.lines().nth(1).unwrap().starts_with("2,0;1,0;1,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn chunk_size_does_not_matter(seed in 0u64..1000, k in 1usize..=3) {
            let j = random_matrix(7, 9, seed);
            let rows = sample_combinations(7, k, 20, seed).unwrap();
            let cols = sample_combinations(9, k, 30, seed + 1).unwrap();
            let reference = compute_minors(j.view(), &rows, &cols, usize::MAX).unwrap().values;
            for chunk in [1, 7, 500] {
                prop_assert_eq!(&compute_minors(j.view(), &rows, &cols, chunk).unwrap().values, &reference);
            }
        }

        #[test]
        fn scaling_covariance(seed in 0u64..1000, k in 1usize..=3, c in 0.1f64..10.0) {
            let j = random_matrix(6, 6, seed);
            let combos = sample_combinations(6, k, 1000, 0).unwrap();
            let base = compute_minors(j.view(), &combos, &combos, 5).unwrap().values;
            let scaled_j = &j * c;
            let scaled = compute_minors(scaled_j.view(), &combos, &combos, 5).unwrap().values;
            // Rounding is relative to the product terms, not the (possibly
            // cancelled) determinant.
            let scale = j.iter().fold(0.0f64, |m, v| m.max(v.abs())).powi(k as i32) * 6.0;
            for (a, b) in base.iter().zip(&scaled) {
                let expected = a * c.powi(k as i32);
                prop_assert!((b - expected).abs() <= 1e-13 * scale * c.powi(k as i32));
            }
        }

        #[test]
        fn row_swap_preserves_multiset(seed in 0u64..1000, k in 1usize..=3, a in 0usize..6, b in 0usize..6) {
            let j = random_matrix(6, 6, seed);
            let mut swapped = j.clone();
            for c in 0..6 {
                swapped.swap([a, c], [b, c]);
            }
            let combos = sample_combinations(6, k, 1000, 0).unwrap();
            let x = sorted(compute_minors(j.view(), &combos, &combos, 5).unwrap().values);
            let y = sorted(compute_minors(swapped.view(), &combos, &combos, 5).unwrap().values);
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
