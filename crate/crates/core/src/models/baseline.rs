//! Ridge regression and IDW over lag features.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::impute::{IdwConfig, SpatialIndex};

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeWeights {
    pub w: Vec<f64>,
    pub intercept: f64,
}

/// Minimizes `‖Xw + c − y‖² + λ‖w‖²` with an unpenalized intercept `c`.
///
/// Features and target are centered, then the augmented least-squares
/// problem `[X; √λ I] w ≈ [y; 0]` is solved by Householder QR.
pub fn ridge_fit(x: &[f64], n_features: usize, y: &[f64], lambda: f64) -> Result<RidgeWeights> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Empty("ridge needs at least one row".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge lambda must be finite and ≥ 0, got {lambda}")));
    }
    if x.len() != n * n_features {
        return Err(Error::shape("ridge_fit", &[x.len()], &[n, n_features]));
    }
    let f = n_features;
    let mut x_mean = vec![0.0; f];
    for r in x.chunks(f) {
        x_mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    if f == 0 {
        return Ok(RidgeWeights {
            w: Vec::new(),
            intercept: y_mean,
        });
    }
    let sq = lambda.sqrt();
    let a = DMatrix::from_fn(n + f, f, |i, j| {
        if i < n {
            x[i * f + j] - x_mean[j]
        } else if i - n == j {
            sq
        } else {
            0.0
        }
    });
    let mut rhs = DVector::from_fn(n + f, |i, _| if i < n { y[i] - y_mean } else { 0.0 });
    let qr = a.qr();
    let r = qr.r();
    let scale = (0..f).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let tiny = scale * 1e-12 * (n + f) as f64;
    if r.nrows() < f || (0..f).any(|i| r[(i, i)].abs() <= tiny) {
        return Err(Error::SingularSystem { lambda });
    }
    qr.q_tr_mul(&mut rhs);
    let qtb = rhs.rows(0, f).into_owned();
    let w = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::SingularSystem { lambda })?;
    let w: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok(RidgeWeights { w, intercept })
}

pub fn ridge_predict(weights: &RidgeWeights, x: &[f64]) -> Vec<f64> {
    let f = weights.w.len();
    if f == 0 {
        return vec![weights.intercept; x.len().max(1)];
    }
    x.chunks(f)
        .map(|r| weights.intercept + r.iter().zip(&weights.w).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// IDW regression: the prediction for a query row is the inverse-distance
/// weighted mean of the targets of its `k` nearest training rows in
/// standardized feature space.
#[derive(Clone, Debug)]
pub struct IdwBaseline {
    index: SpatialIndex,
    cfg: IdwConfig,
}

impl IdwBaseline {
    pub fn fit(n_features: usize, x: &[f64], y: Vec<[f64; 2]>, cfg: IdwConfig) -> Result<Self> {
        cfg.validate()?;
        let index = SpatialIndex::from_rows(n_features, x, y, vec![1.0; n_features])?;
        Ok(IdwBaseline { index, cfg })
    }

    pub fn predict(&self, row: &[f64]) -> Result<[f64; 2]> {
        self.index.query(row, &self.cfg)
    }
}
