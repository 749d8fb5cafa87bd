use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

use super::state::{wrap_angle, VariableKey};

/// Measurement/motion models with analytic Jacobians.
#[derive(Debug, Clone)]
pub enum FactorModel {
    /// Direct observation of a pose: h(p) = p (θ residual wrapped).
    PosePrior,
    /// Direct observation of a landmark: h(l) = l.
    LandmarkPrior,
    /// Relative pose of the second variable in the first one's frame.
    Odometry,
    /// Range and bearing from a pose to a landmark (bearing residual wrapped).
    RangeBearing,
    /// Affine model h(x) = Σ_i blocks[i]·x_i + constant, for generic graphs.
    Linear {
        blocks: Vec<DMatrix<f64>>,
        constant: DVector<f64>,
    },
}

impl FactorModel {
    /// Predicted measurement and per-variable Jacobian blocks at `values`.
    pub fn evaluate(&self, values: &[DVector<f64>]) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        match self {
            FactorModel::PosePrior | FactorModel::LandmarkPrior => {
                let v = values[0].clone();
                let d = v.len();
                (v, vec![DMatrix::identity(d, d)])
            }
            FactorModel::Odometry => {
                let p1 = &values[0];
                let p2 = &values[1];
                let (dx, dy) = (p2[0] - p1[0], p2[1] - p1[1]);
                let (s, c) = p1[2].sin_cos();
                let h = DVector::from_vec(vec![
                    c * dx + s * dy,
                    -s * dx + c * dy,
                    wrap_angle(p2[2] - p1[2]),
                ]);
                let j1 = DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        -c,
                        -s,
                        -s * dx + c * dy,
                        s,
                        -c,
                        -c * dx - s * dy,
                        0.0,
                        0.0,
                        -1.0,
                    ],
                );
                let j2 = DMatrix::from_row_slice(3, 3, &[c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0]);
                (h, vec![j1, j2])
            }
            FactorModel::RangeBearing => {
                let p = &values[0];
                let l = &values[1];
                let (dx, dy) = (l[0] - p[0], l[1] - p[1]);
                let q = dx * dx + dy * dy;
                let r = q.sqrt();
                let h = DVector::from_vec(vec![r, wrap_angle(dy.atan2(dx) - p[2])]);
                let jp = DMatrix::from_row_slice(
                    2,
                    3,
                    &[-dx / r, -dy / r, 0.0, dy / q, -dx / q, -1.0],
                );
                let jl = DMatrix::from_row_slice(2, 2, &[dx / r, dy / r, -dy / q, dx / q]);
                (h, vec![jp, jl])
            }
            FactorModel::Linear { blocks, constant } => {
                let mut h = constant.clone();
                for (b, x) in blocks.iter().zip(values) {
                    h += b * x;
                }
                (h, blocks.clone())
            }
        }
    }

    /// Indices of angular residual components (wrapped on subtraction).
    fn angular_components(&self) -> &'static [usize] {
        match self {
            FactorModel::PosePrior | FactorModel::Odometry => &[2],
            FactorModel::RangeBearing => &[1],
            _ => &[],
        }
    }
}

/// One Gaussian factor: a model over involved variables, an observed value
/// and an SPD noise covariance kept as its inverse square root.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    pub involved: Vec<VariableKey>,
    pub model: FactorModel,
    pub observed: DVector<f64>,
    whitener: DMatrix<f64>,
}

impl GaussianFactor {
    pub fn new(
        involved: Vec<VariableKey>,
        model: FactorModel,
        observed: DVector<f64>,
        noise: DMatrix<f64>,
    ) -> Result<Self> {
        let m = observed.len();
        if noise.nrows() != m || noise.ncols() != m {
            return Err(Error::DimensionMismatch {
                context: "factor noise covariance",
                expected: m,
                actual: noise.nrows(),
            });
        }
        let chol = noise.cholesky().ok_or(Error::NonSpdNoise)?;
        // W = L⁻¹ gives WᵀW = Σ⁻¹.
        let whitener = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .ok_or(Error::NonSpdNoise)?;
        Ok(Self {
            involved,
            model,
            observed,
            whitener,
        })
    }

    /// Residual dimension.
    pub fn dim(&self) -> usize {
        self.observed.len()
    }

    /// Noise-whitened Jacobian blocks and residual at the given values
    /// (one value vector per involved variable, in `involved` order).
    pub fn linearize_at(&self, values: &[DVector<f64>]) -> Result<(Vec<DMatrix<f64>>, DVector<f64>)> {
        debug_assert_eq!(values.len(), self.involved.len());
        let (h, jacs) = self.model.evaluate(values);
        if h.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "factor residual",
                expected: self.dim(),
                actual: h.len(),
            });
        }
        let mut residual = &self.observed - h;
        for &c in self.model.angular_components() {
            residual[c] = wrap_angle(residual[c]);
        }
        let blocks = jacs.iter().map(|j| &self.whitener * j).collect();
        Ok((blocks, &self.whitener * residual))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn identity_prior_whitening() {
        // Unit-noise direct observation: A is the identity, residual is r − point.
        let f = GaussianFactor::new(
            vec![VariableKey::landmark(0)],
            FactorModel::LandmarkPrior,
            dvector![1.0, -2.0],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let (blocks, resid) = f.linearize_at(&[dvector![0.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(blocks[0], DMatrix::identity(2, 2), epsilon = 1e-15);
        assert_abs_diff_eq!(resid, dvector![1.0, -2.0], epsilon = 1e-15);
    }

    #[test]
    fn between_factor_whitened_by_noise_sqrt() {
        // Difference model with noise variance 4: whitening scales by 1/2.
        let f = GaussianFactor::new(
            vec![VariableKey::landmark(0), VariableKey::landmark(1)],
            FactorModel::Linear {
                blocks: vec![-DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
                constant: dvector![0.0, 0.0],
            },
            dvector![2.0, 2.0],
            DMatrix::identity(2, 2) * 4.0,
        )
        .unwrap();
        let (blocks, resid) = f
            .linearize_at(&[dvector![0.0, 0.0], dvector![0.0, 0.0]])
            .unwrap();
        assert_abs_diff_eq!(blocks[0], dmatrix![-0.5, 0.0; 0.0, -0.5], epsilon = 1e-15);
        assert_abs_diff_eq!(blocks[1], dmatrix![0.5, 0.0; 0.0, 0.5], epsilon = 1e-15);
        assert_abs_diff_eq!(resid, dvector![1.0, 1.0], epsilon = 1e-15);
    }

    #[test]
    fn non_spd_noise_rejected() {
        let err = GaussianFactor::new(
            vec![VariableKey::landmark(0)],
            FactorModel::LandmarkPrior,
            dvector![0.0, 0.0],
            dmatrix![1.0, 2.0; 2.0, 1.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonSpdNoise));
    }

    /// Central finite differences of the whitened residual.
    fn finite_diff_blocks(
        f: &GaussianFactor,
        values: &[DVector<f64>],
        eps: f64,
    ) -> Vec<DMatrix<f64>> {
        let mut out = Vec::new();
        for (vi, v) in values.iter().enumerate() {
            let mut block = DMatrix::zeros(f.dim(), v.len());
            for c in 0..v.len() {
                let mut hi = values.to_vec();
                let mut lo = values.to_vec();
                hi[vi][c] += eps;
                lo[vi][c] -= eps;
                let (_, r_hi) = f.linearize_at(&hi).unwrap();
                let (_, r_lo) = f.linearize_at(&lo).unwrap();
                // residual = W(r − h): ∂residual/∂x = −W·J
                let col = (r_lo - r_hi) / (2.0 * eps);
                block.set_column(c, &col);
            }
            out.push(block);
        }
        out
    }

    #[test]
    fn range_bearing_jacobian_matches_finite_difference() {
        let noise = dmatrix![0.04, 0.0; 0.0, 0.001];
        let f = GaussianFactor::new(
            vec![VariableKey::pose(0), VariableKey::landmark(0)],
            FactorModel::RangeBearing,
            dvector![5.0, 0.3],
            noise,
        )
        .unwrap();
        let vals = vec![dvector![1.0, -2.0, 0.7], dvector![4.5, 1.5]];
        let (blocks, _) = f.linearize_at(&vals).unwrap();
        let fd = finite_diff_blocks(&f, &vals, 1e-6);
        for (a, b) in blocks.iter().zip(&fd) {
            assert!((a - b).amax() < 1e-6, "jacobian mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn odometry_jacobian_matches_finite_difference() {
        let noise = DMatrix::identity(3, 3) * 0.01;
        let f = GaussianFactor::new(
            vec![VariableKey::pose(0), VariableKey::pose(1)],
            FactorModel::Odometry,
            dvector![1.0, 0.2, 0.1],
            noise,
        )
        .unwrap();
        let vals = vec![dvector![0.4, -0.3, 0.5], dvector![1.5, 0.2, 0.8]];
        let (blocks, _) = f.linearize_at(&vals).unwrap();
        let fd = finite_diff_blocks(&f, &vals, 1e-6);
        for (a, b) in blocks.iter().zip(&fd) {
            assert!((a - b).amax() < 1e-5, "jacobian mismatch: {a} vs {b}");
        }
    }
}
