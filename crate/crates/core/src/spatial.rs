//! Pixel subsets of the 28×28 grid that restrict which Jacobian columns
//! take part in a minor. Flat index `f` is pixel `(f / 28, f % 28)`.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::ArrayView2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{kl_divergence, participation_ratio};
use crate::minors::{sample_combinations, CombinationSet, MinorCaps, MinorPlan, MinorSample};
use crate::mnist::{IMAGE_PIXELS, IMAGE_SIDE};
use crate::seed::{self, tag};

pub const REJECTION_BUDGET: usize = 10_000;

#[inline]
pub fn pixel_coords(f: usize) -> (usize, usize) {
    (f / IMAGE_SIDE, f % IMAGE_SIDE)
}

pub fn pixel_distance(a: usize, b: usize) -> f64 {
    let (ra, ca) = pixel_coords(a);
    let (rb, cb) = pixel_coords(b);
    let dr = ra as f64 - rb as f64;
    let dc = ca as f64 - cb as f64;
    (dr * dr + dc * dc).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchRegion {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl PatchRegion {
    pub const ALL: [PatchRegion; 5] = [
        PatchRegion::TopLeft,
        PatchRegion::TopRight,
        PatchRegion::BottomLeft,
        PatchRegion::BottomRight,
        PatchRegion::Center,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PatchRegion::TopLeft => "top_left",
            PatchRegion::TopRight => "top_right",
            PatchRegion::BottomLeft => "bottom_left",
            PatchRegion::BottomRight => "bottom_right",
            PatchRegion::Center => "center",
        }
    }

    /// First row and first column of the 14×14 block.
    fn origin(&self) -> (usize, usize) {
        match self {
            PatchRegion::TopLeft => (0, 0),
            PatchRegion::TopRight => (0, 14),
            PatchRegion::BottomLeft => (14, 0),
            PatchRegion::BottomRight => (14, 14),
            PatchRegion::Center => (7, 7),
        }
    }
}

impl std::str::FromStr for PatchRegion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PatchRegion::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown patch region {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MaskDescriptor {
    Full,
    Ball { center: (usize, usize), radius: f64 },
    Patch(PatchRegion),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    selected: Vec<usize>,
    descriptor: MaskDescriptor,
}

impl PixelMask {
    pub fn full() -> Self {
        PixelMask {
            selected: (0..IMAGE_PIXELS).collect(),
            descriptor: MaskDescriptor::Full,
        }
    }

    /// Sorted flat indices.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn descriptor(&self) -> &MaskDescriptor {
        &self.descriptor
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, f: usize) -> bool {
        self.selected.binary_search(&f).is_ok()
    }
}

/// Grid pixels within Euclidean `radius` of `center = (row, col)`.
pub fn euclidean_ball_mask(center: (usize, usize), radius: f64) -> Result<PixelMask> {
    if center.0 >= IMAGE_SIDE || center.1 >= IMAGE_SIDE {
        return Err(Error::InvalidArgument(format!(
            "ball center {center:?} outside the 28x28 grid"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("ball radius must be > 0".into()));
    }
    let c = center.0 * IMAGE_SIDE + center.1;
    let selected = (0..IMAGE_PIXELS)
        .filter(|&f| pixel_distance(f, c) <= radius)
        .collect();
    Ok(PixelMask {
        selected,
        descriptor: MaskDescriptor::Ball { center, radius },
    })
}

/// Quadrants are the four 14×14 corner blocks; `Center` spans rows and
/// columns 7–20.
pub fn patch_mask(region: PatchRegion) -> PixelMask {
    let (r0, c0) = region.origin();
    let selected = (0..IMAGE_PIXELS)
        .filter(|&f| {
            let (r, c) = pixel_coords(f);
            (r0..r0 + 14).contains(&r) && (c0..c0 + 14).contains(&c)
        })
        .collect();
    PixelMask {
        selected,
        descriptor: MaskDescriptor::Patch(region),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationConstraint {
    pub k: usize,
    pub min_dist: f64,
    pub seed: u64,
    pub sample_count: usize,
}

/// Distinct pixel `k`-tuples whose pairwise distances are all at least
/// `min_dist`, drawn by rejection. No tuple is emitted twice.
pub fn sample_separated_pixels(c: &SeparationConstraint) -> Result<CombinationSet> {
    if !(2..=3).contains(&c.k) {
        return Err(Error::InvalidArgument(format!(
            "separation constraint needs k in {{2, 3}}, got {}",
            c.k
        )));
    }
    if !(c.min_dist >= 0.0) {
        return Err(Error::InvalidArgument("min_dist must be >= 0".into()));
    }
    if c.sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be >= 1".into()));
    }
    let mut rng = seed::rng_from(c.seed, &[tag::SEPARATED]);
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(c.sample_count);
    let mut tuples = Vec::with_capacity(c.sample_count);
    while tuples.len() < c.sample_count {
        let mut accepted = None;
        for _ in 0..REJECTION_BUDGET {
            let mut t = index::sample(&mut rng, IMAGE_PIXELS, c.k).into_vec();
            t.sort_unstable();
            let separated = (0..c.k)
                .flat_map(|i| (i + 1..c.k).map(move |j| (i, j)))
                .all(|(i, j)| pixel_distance(t[i], t[j]) >= c.min_dist);
            if separated && !seen.contains(&t) {
                accepted = Some(t);
                break;
            }
        }
        let t = accepted.ok_or(Error::RejectionExhausted {
            k: c.k,
            min_dist: c.min_dist,
            attempts: REJECTION_BUDGET,
        })?;
        seen.insert(t.clone());
        tuples.push(t);
    }
    CombinationSet::from_tuples(IMAGE_PIXELS, c.k, c.seed, &tuples)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialCondition {
    Full,
    Mask(PixelMask),
    Separated(SeparationConstraint),
}

impl SpatialCondition {
    /// Stable label used in result tables.
    pub fn label(&self) -> String {
        match self {
            SpatialCondition::Full => "full".to_string(),
            SpatialCondition::Mask(m) => match m.descriptor() {
                MaskDescriptor::Full => "full".to_string(),
                MaskDescriptor::Ball { radius, .. } => format!("ball_r{radius}"),
                MaskDescriptor::Patch(region) => format!("patch_{}", region.as_str()),
            },
            SpatialCondition::Separated(c) => format!("sep_d{}", c.min_dist),
        }
    }

    /// Minor plan whose column tuples respect the condition. Row sampling
    /// is the same as for the unrestricted plan.
    pub fn plan(&self, h: usize, k: usize, caps: MinorCaps, seed: u64) -> Result<MinorPlan> {
        match self {
            SpatialCondition::Full => MinorPlan::sample(h, IMAGE_PIXELS, k, caps, seed, None),
            SpatialCondition::Mask(mask) => {
                if mask.len() < k {
                    return Err(Error::InvalidArgument(format!(
                        "mask of {} pixels cannot host order-{k} minors",
                        mask.len()
                    )));
                }
                MinorPlan::sample(h, IMAGE_PIXELS, k, caps, seed, Some(mask.selected()))
            }
            SpatialCondition::Separated(c) => {
                if c.k != k {
                    return Err(Error::InvalidArgument(format!(
                        "separation constraint has k={}, requested {k}",
                        c.k
                    )));
                }
                let rows =
                    sample_combinations(h, k, caps.row_cap, seed::derive_seed(seed, &[tag::ROWS]))?;
                let cols = sample_separated_pixels(c)?;
                MinorPlan::with_budget(rows, cols, caps.pair_budget, seed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionMetrics {
    pub pr: f64,
    pub pr_init: f64,
    pub pr_ratio: f64,
    pub kl: f64,
    pub n_minors: usize,
}

/// Trained-vs-initial concentration with column tuples restricted by
/// `condition`. Both Jacobians see the identical plan.
pub fn spatial_pr(
    j: ArrayView2<f64>,
    j_init: ArrayView2<f64>,
    condition: &SpatialCondition,
    k: usize,
    caps: MinorCaps,
    seed: u64,
    chunk: usize,
) -> Result<ConditionMetrics> {
    let plan = Arc::new(condition.plan(j.nrows(), k, caps, seed)?);
    let trained = MinorSample::evaluate(plan.clone(), j, chunk)?;
    let init = MinorSample::evaluate(plan, j_init, chunk)?;
    let pr = participation_ratio(&trained.values)?;
    let pr_init = participation_ratio(&init.values)?;
    Ok(ConditionMetrics {
        pr,
        pr_init,
        pr_ratio: pr / pr_init,
        kl: kl_divergence(&trained.values, &init.values)?,
        n_minors: trained.len(),
    })
}
