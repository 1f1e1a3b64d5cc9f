//! Two-layer GELU MLP: `f(x) = W_out σ(W_1 σ(W_0 x + b_0) + b_1) + b_out`.
//!
//! All parameters and analysis arithmetic are `f64`. Weight matrices are
//! stored `(out, in)`, so a single-sample pre-activation is `W · x`.

mod snapshot;
mod train;

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mnist::{IMAGE_PIXELS, NUM_CLASSES};
use crate::seed::{self, tag};

pub use snapshot::{read_snapshot, snapshot_digest, write_snapshot, ModelSnapshot, Regime};
pub use train::{
    accuracy, mean_loss, train, train_with_progress, EpochReport, TrainConfig, TrainRun,
};

pub const INPUT_DIM: usize = IMAGE_PIXELS;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl MlpParams {
    pub fn zeros(h: usize) -> Self {
        MlpParams {
            w0: Array2::zeros((h, INPUT_DIM)),
            b0: Array1::zeros(h),
            w1: Array2::zeros((h, h)),
            b1: Array1::zeros(h),
            w_out: Array2::zeros((NUM_CLASSES, h)),
            b_out: Array1::zeros(NUM_CLASSES),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim();
        let shapes_ok = self.w0.dim() == (h, INPUT_DIM)
            && self.w1.dim() == (h, h)
            && self.b1.len() == h
            && self.w_out.dim() == (NUM_CLASSES, h)
            && self.b_out.len() == NUM_CLASSES;
        if !shapes_ok {
            return Err(Error::InvalidArgument(format!(
                "inconsistent parameter shapes for h={h}"
            )));
        }
        let finite = self.w0.iter().all(|v| v.is_finite())
            && self.w1.iter().all(|v| v.is_finite())
            && self.w_out.iter().all(|v| v.is_finite())
            && self
                .b0
                .iter()
                .chain(&self.b1)
                .chain(&self.b_out)
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// He initialization: weights i.i.d. `N(0, 2/n_in)`, biases zero.
///
/// Draw order is `W0`, `W1`, `W_out`, each row-major, from one seeded stream.
pub fn init_params(h: usize, seed: u64) -> Result<MlpParams> {
    if h < 1 {
        return Err(Error::InvalidArgument(
            "hidden dimension must be >= 1".into(),
        ));
    }
    let mut rng = seed::rng_from(seed, &[tag::INIT]);
    let mut draw = |rows: usize, cols: usize| {
        let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
        Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
    };
    let w0 = draw(h, INPUT_DIM);
    let w1 = draw(h, h);
    let w_out = draw(NUM_CLASSES, h);
    Ok(MlpParams {
        w0,
        b0: Array1::zeros(h),
        w1,
        b1: Array1::zeros(h),
        w_out,
        b_out: Array1::zeros(NUM_CLASSES),
    })
}

#[inline]
fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z * FRAC_1_SQRT_2))
}

#[inline]
fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `z·Φ(z)`.
#[inline]
pub fn gelu(z: f64) -> f64 {
    z * std_normal_cdf(z)
}

/// `Φ(z) + z·φ(z)`.
#[inline]
pub fn gelu_prime(z: f64) -> f64 {
    std_normal_cdf(z) + z * std_normal_pdf(z)
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub z1: Array1<f64>,
    pub a1: Array1<f64>,
    pub z2: Array1<f64>,
    pub a2: Array1<f64>,
    pub logits: Array1<f64>,
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Forward {
    assert_eq!(x.len(), INPUT_DIM, "input must have 784 entries");
    let x = ArrayView1::from(x);
    let z1 = params.w0.dot(&x) + &params.b0;
    let a1 = z1.mapv(gelu);
    let z2 = params.w1.dot(&a1) + &params.b1;
    let a2 = z2.mapv(gelu);
    let logits = params.w_out.dot(&a2) + &params.b_out;
    Forward {
        z1,
        a1,
        z2,
        a2,
        logits,
    }
}

/// Which hidden-layer map a Jacobian differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    L1,
    L2,
}

impl Layer {
    pub const ALL: [Layer; 2] = [Layer::L1, Layer::L2];

    pub fn as_str(&self) -> &'static str {
        match self {
            Layer::L1 => "L1",
            Layer::L2 => "L2",
        }
    }
}

impl std::fmt::Display for Layer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Layer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" | "l1" => Ok(Layer::L1),
            "L2" | "l2" => Ok(Layer::L2),
            other => Err(Error::InvalidArgument(format!("unknown layer {other:?}"))),
        }
    }
}

/// `h × 784` Jacobian of one hidden-layer map with respect to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub entries: Array2<f64>,
    pub layer: Layer,
    pub input_index: usize,
}

impl JacobianMatrix {
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn with_input_index(mut self, index: usize) -> Self {
        self.input_index = index;
        self
    }
}

/// Closed-form Jacobian: `J1 = diag(σ'(z1))·W0`, `J2 = diag(σ'(z2))·W1·J1`.
pub fn layer_jacobian(params: &MlpParams, x: &[f64], layer: Layer) -> JacobianMatrix {
    let fwd = forward(params, x);
    let mut j1 = params.w0.clone();
    for (mut row, &z) in j1.axis_iter_mut(Axis(0)).zip(&fwd.z1) {
        row *= gelu_prime(z);
    }
    let entries = match layer {
        Layer::L1 => j1,
        Layer::L2 => {
            let mut j2 = params.w1.dot(&j1);
            for (mut row, &z) in j2.axis_iter_mut(Axis(0)).zip(&fwd.z2) {
                row *= gelu_prime(z);
            }
            j2
        }
    };
    JacobianMatrix {
        entries,
        layer,
        input_index: 0,
    }
}

/// Hidden activation of the requested layer.
pub fn layer_activation(params: &MlpParams, x: &[f64], layer: Layer) -> Array1<f64> {
    let fwd = forward(params, x);
    match layer {
        Layer::L1 => fwd.a1,
        Layer::L2 => fwd.a2,
    }
}

/// Central-difference Jacobian of an arbitrary map `R^d → R^m`.
pub fn central_difference<F>(map: F, x: &[f64], step: f64) -> Result<Array2<f64>>
where
    F: Fn(&[f64]) -> Array1<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(
            "finite-difference step must be > 0".into(),
        ));
    }
    let m = map(x).len();
    let d = x.len();
    let mut out = Array2::zeros((m, d));
    let mut probe = x.to_vec();
    for j in 0..d {
        probe[j] = x[j] + step;
        let plus = map(&probe);
        probe[j] = x[j] - step;
        let minus = map(&probe);
        probe[j] = x[j];
        let col = (plus - minus) / (2.0 * step);
        out.column_mut(j).assign(&col);
    }
    Ok(out)
}

/// Numerical reference for [`layer_jacobian`].
pub fn finite_difference_oracle(
    params: &MlpParams,
    x: &[f64],
    layer: Layer,
    step: f64,
) -> Result<JacobianMatrix> {
    let entries = central_difference(|p| layer_activation(params, p, layer), x, step)?;
    Ok(JacobianMatrix {
        entries,
        layer,
        input_index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = seed::rng_from(seed, &[99]);
        (0..INPUT_DIM)
            .map(|_| rng.random_range(-1.0..3.0))
            .collect()
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(gelu_prime(0.0), 0.5);
        assert!((gelu(3.0) - 2.995_950_305_905_11).abs() < 1e-12);
        assert!(gelu(-40.0).abs() < 1e-300);
    }

    #[test]
    fn gelu_prime_matches_central_difference() {
        let h = 1e-5;
        for z in [-2.0, -1.0, 0.5, 4.0] {
            let fd = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
            assert!((fd - gelu_prime(z)).abs() < 1e-8, "z={z}");
        }
    }

    #[test]
    fn init_is_deterministic_and_he_scaled() {
        let a = init_params(64, 0).unwrap();
        let b = init_params(64, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(64, 1).unwrap());
        assert!(a.b0.iter().chain(&a.b1).chain(&a.b_out).all(|&v| v == 0.0));
        let n = a.w0.len() as f64;
        let mean = a.w0.sum() / n;
        let var = a.w0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / 784.0;
        assert!((var - target).abs() < 0.1 * target, "var {var}");
        assert!(init_params(0, 0).is_err());
    }

    #[test]
    fn zero_input_zero_bias_propagates_zero() {
        let p = init_params(16, 3).unwrap();
        let f = forward(&p, &vec![0.0; INPUT_DIM]);
        assert!(f.z1.iter().chain(&f.a1).chain(&f.a2).all(|&v| v == 0.0));
        assert_eq!(f.logits.len(), 10);
    }

    #[test]
    fn forward_matches_hand_rolled_matmul() {
        let mut p = init_params(8, 5).unwrap();
        p.b0.iter_mut()
            .enumerate()
            .for_each(|(i, b)| *b = 0.1 * i as f64);
        p.b1.fill(-0.2);
        p.b_out.fill(0.3);
        let x = random_input(1);
        let matvec = |w: &Array2<f64>, v: &[f64], b: &Array1<f64>| -> Vec<f64> {
            (0..w.nrows())
                .map(|i| (0..v.len()).map(|j| w[[i, j]] * v[j]).sum::<f64>() + b[i])
                .collect()
        };
        let z1 = matvec(&p.w0, &x, &p.b0);
        let a1: Vec<f64> = z1.iter().map(|&z| gelu(z)).collect();
        let z2 = matvec(&p.w1, &a1, &p.b1);
        let a2: Vec<f64> = z2.iter().map(|&z| gelu(z)).collect();
        let logits = matvec(&p.w_out, &a2, &p.b_out);
        let f = forward(&p, &x);
        for (a, b) in f.logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in f.a2.iter().zip(&a2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_rows_are_scaled_weight_rows() {
        let p = init_params(12, 7).unwrap();
        let x = random_input(2);
        let fwd = forward(&p, &x);
        let j = layer_jacobian(&p, &x, Layer::L1);
        for i in 0..12 {
            let s = gelu_prime(fwd.z1[i]);
            for c in 0..INPUT_DIM {
                assert_eq!(j.entries[[i, c]], p.w0[[i, c]] * s);
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for trial in 0..3 {
            let p = init_params(8, trial).unwrap();
            let x = random_input(trial + 10);
            for layer in Layer::ALL {
                let exact = layer_jacobian(&p, &x, layer).entries;
                let fd = finite_difference_oracle(&p, &x, layer, 1e-5)
                    .unwrap()
                    .entries;
                let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let worst = exact
                    .iter()
                    .zip(fd.iter())
                    .map(|(a, b)| (a - b).abs() / scale)
                    .fold(0.0, f64::max);
                assert!(worst < 1e-6, "{layer} worst {worst}");
            }
        }
    }

    #[test]
    fn saturated_unit_gives_near_zero_row() {
        let mut p = init_params(8, 1).unwrap();
        p.b0[3] = -60.0;
        let x = random_input(4);
        let fwd = forward(&p, &x);
        assert!(fwd.z1[3] < -10.0);
        let j = layer_jacobian(&p, &x, Layer::L1);
        let norm = j.entries.row(3).mapv(|v| v * v).sum().sqrt();
        assert!(norm < 1e-8, "norm {norm}");
    }

    #[test]
    fn central_difference_of_linear_map_recovers_matrix() {
        let p = init_params(6, 9).unwrap();
        let x = random_input(5);
        let w0 = p.w0.clone();
        let fd = central_difference(|v| w0.dot(&ArrayView1::from(v)), &x, 1e-3).unwrap();
        for (a, b) in fd.iter().zip(p.w0.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(central_difference(|v| w0.dot(&ArrayView1::from(v)), &x, 0.0).is_err());
    }
}
