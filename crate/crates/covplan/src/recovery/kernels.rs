//! Dense update kernels mapping prior covariance blocks to posterior ones.
//!
//! Every kernel works on the 2×2 partition of the prior block matrix over
//! `W = {Y, X^I}`: the target block Σ^Y, the cross block Σ^C (Y rows, X^I
//! columns) and the involved block Σ^I. Removed factor rows (relinearization
//! downdates) are handled with explicit sign bookkeeping so all arithmetic
//! stays real: a row sign of −1 replaces the corresponding unit diagonal of
//! the capacitance matrix, which is exactly what the imaginary-row stacking
//! produces under the plain (non-conjugate) transpose.

use std::cell::Cell;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::dense::{chol_upper, div_by_upper, symmetrize};

/// Prior covariance blocks over `W = {Y, X^I}`.
#[derive(Debug, Clone, Copy)]
pub struct PriorBlocks<'a> {
    /// Σ^Y, |Y| × |Y|.
    pub target: &'a DMatrix<f64>,
    /// Σ^C, |Y| × |X^I| (rectangular slice; Y and X^I may overlap).
    pub cross: &'a DMatrix<f64>,
    /// Σ^I, |X^I| × |X^I|.
    pub involved: &'a DMatrix<f64>,
}

/// Intermediates of the last kernel run. All shapes are bounded by the factor
/// dimension m, |X^I| and |X_new| (plus |Y| for the output-sized gain), never
/// by the full state dimension.
#[derive(Debug, Clone, Default)]
pub struct UpdateWorkspace {
    pub capacitance: Option<DMatrix<f64>>,
    pub cross_gain: Option<DMatrix<f64>>,
    pub new_gram_inverse: Option<DMatrix<f64>>,
    pub projector: Option<DMatrix<f64>>,
    pub projected_block: Option<DMatrix<f64>>,
    pub projected_capacitance: Option<DMatrix<f64>>,
    pub new_cov: Option<DMatrix<f64>>,
    pub new_inverse: Option<DMatrix<f64>>,
    pub removal_half: Option<DMatrix<f64>>,
    pub addition_half: Option<DMatrix<f64>>,
    pub coupling: Option<DMatrix<f64>>,
}

impl UpdateWorkspace {
    pub fn max_dim(&self) -> usize {
        [
            &self.capacitance,
            &self.cross_gain,
            &self.new_gram_inverse,
            &self.projector,
            &self.projected_block,
            &self.projected_capacitance,
            &self.new_cov,
            &self.new_inverse,
            &self.removal_half,
            &self.addition_half,
            &self.coupling,
        ]
        .iter()
        .filter_map(|m| m.as_ref())
        .map(|m| m.nrows().max(m.ncols()))
        .max()
        .unwrap_or(0)
    }
}

/// Row signs for stacked updates: `+1.0` for added factor rows, `-1.0` for
/// removed (relinearization downdate) rows.
pub type RowSigns<'a> = Option<&'a [f64]>;

fn signed_identity(m: usize, signs: RowSigns) -> DMatrix<f64> {
    let mut d = DMatrix::identity(m, m);
    if let Some(s) = signs {
        debug_assert_eq!(s.len(), m);
        for (i, &v) in s.iter().enumerate() {
            d[(i, i)] = v;
        }
    }
    d
}

/// Posterior target block for a change without new variables:
/// Σ₊^Y = Σ^Y − B C⁻¹ Bᵀ with B = Σ^C Aᵀ and C = D ± A Σ^I Aᵀ.
pub fn not_augmented(
    prior: PriorBlocks,
    a_inv: &DMatrix<f64>,
    signs: RowSigns,
) -> Result<(DMatrix<f64>, UpdateWorkspace)> {
    let m = a_inv.nrows();
    check_dims(prior, a_inv.ncols())?;
    let mut ws = UpdateWorkspace::default();
    if m == 0 {
        return Ok((prior.target.clone(), ws));
    }
    let c = signed_identity(m, signs) + a_inv * prior.involved * a_inv.transpose();
    let b = prior.cross * a_inv.transpose();
    let lu = c.clone().lu();
    let x = lu
        .solve(&b.transpose())
        .ok_or(Error::InconsistentDowndate)?;
    let post = symmetrize(&(prior.target - &b * x));
    ws.capacitance = Some(c);
    ws.cross_gain = Some(b);
    Ok((post, ws))
}

/// Output blocks of an augmented update: the updated old-variable block, the
/// full new-variable covariance and the old↔new cross covariance.
#[derive(Debug, Clone)]
pub struct AugmentedOutput {
    pub old: DMatrix<f64>,
    /// Σ₊ over all new variables, |X_new| × |X_new|.
    pub new: DMatrix<f64>,
    /// Σ₊^(Y, X_new), |Y| × |X_new|.
    pub cross: DMatrix<f64>,
}

/// Which algebraic route computes the old↔new cross block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossMethod {
    One,
    Two,
}

/// The small matrices a rectangular update is built from, shared between the
/// block-cache path and the vectorized all-marginals path.
#[derive(Debug, Clone)]
pub struct RectangularPieces {
    /// C = D ± A Σ^I Aᵀ.
    pub capacitance: DMatrix<f64>,
    /// F = (A_newᵀ A_new)⁻¹.
    pub new_gram_inverse: DMatrix<f64>,
    /// K = I − A_new F A_newᵀ (symmetric idempotent, K A_new = 0).
    pub projector: DMatrix<f64>,
    /// K₁ = K A.
    pub projected_block: DMatrix<f64>,
    /// G = D ± K₁ Σ^I K₁ᵀ.
    pub projected_capacitance: DMatrix<f64>,
    /// Σ₊ over all new variables.
    pub new_cov: DMatrix<f64>,
}

impl RectangularPieces {
    pub fn compute(
        involved_cov: &DMatrix<f64>,
        a_inv: &DMatrix<f64>,
        a_new: &DMatrix<f64>,
        signs: RowSigns,
    ) -> Result<Self> {
        let m = a_new.nrows();
        let n_new = a_new.ncols();
        if let Some(s) = signs {
            for (i, &v) in s.iter().enumerate() {
                debug_assert!(
                    v > 0.0 || a_new.row(i).amax() == 0.0,
                    "downdate rows must not touch new variables"
                );
            }
        }
        // F = (A_newᵀ A_new)⁻¹; failure means new variables are unconstrained.
        let gram = a_new.transpose() * a_new;
        let f = gram
            .cholesky()
            .ok_or(Error::RankDeficientNewBlock)?
            .inverse();
        let k = DMatrix::identity(m, m) - a_new * &f * a_new.transpose();
        let k1 = &k * a_inv;
        let g = signed_identity(m, signs) + &k1 * involved_cov * k1.transpose();
        let c = signed_identity(m, signs) + a_inv * involved_cov * a_inv.transpose();

        // Σ₊ over new variables: (A_newᵀ C⁻¹ A_new)⁻¹.
        let c_inv_a_new = c
            .clone()
            .lu()
            .solve(a_new)
            .ok_or(Error::InconsistentDowndate)?;
        let small = a_new.transpose() * &c_inv_a_new;
        let new_cov = symmetrize(
            &small
                .lu()
                .solve(&DMatrix::identity(n_new, n_new))
                .ok_or(Error::RankDeficientNewBlock)?,
        );

        Ok(Self {
            capacitance: c,
            new_gram_inverse: f,
            projector: k,
            projected_block: k1,
            projected_capacitance: g,
            new_cov,
        })
    }
}

/// Rectangular update: new factors constrain both old and new variables with
/// total factor dimension exceeding the new-variable dimension.
///
/// Rows with sign −1 must have zero entries in `a_new` (removed factors never
/// touch new variables).
pub fn rectangular(
    prior: PriorBlocks,
    a_inv: &DMatrix<f64>,
    a_new: &DMatrix<f64>,
    signs: RowSigns,
    method: CrossMethod,
) -> Result<(AugmentedOutput, UpdateWorkspace)> {
    let m = a_new.nrows();
    check_dims(prior, a_inv.ncols())?;
    if a_inv.nrows() != m {
        return Err(Error::DimensionMismatch {
            context: "rectangular blocks row count",
            expected: m,
            actual: a_inv.nrows(),
        });
    }
    let mut ws = UpdateWorkspace::default();
    let pieces = RectangularPieces::compute(prior.involved, a_inv, a_new, signs)?;
    let k1 = &pieces.projected_block;
    let b = prior.cross * k1.transpose();
    let g_lu = pieces.projected_capacitance.clone().lu();
    let mut correction = &b
        * g_lu
            .solve(&b.transpose())
            .ok_or(Error::InconsistentDowndate)?;
    if mutation::active() == Some(mutation::Mutation::RectangularGainFlip) {
        correction = -correction;
    }
    let old = symmetrize(&(prior.target - correction));
    let new = pieces.new_cov.clone();

    let cross = match method {
        CrossMethod::One => {
            // Σ^C Aᵀ (C⁻¹ A Σ^I Aᵀ − I) A_new P
            let a_sig_at = a_inv * prior.involved * a_inv.transpose();
            let bracket = pieces
                .capacitance
                .clone()
                .lu()
                .solve(&a_sig_at)
                .ok_or(Error::InconsistentDowndate)?
                - DMatrix::identity(m, m);
            prior.cross * a_inv.transpose() * bracket * a_new * &new
        }
        CrossMethod::Two => {
            // Σ^C (K₁ᵀ G⁻¹ K₁ Σ^I − I) Aᵀ A_new F
            let k1_sig = k1 * prior.involved;
            let inner = k1.transpose()
                * g_lu.solve(&k1_sig).ok_or(Error::InconsistentDowndate)?
                - DMatrix::identity(a_inv.ncols(), a_inv.ncols());
            prior.cross * inner * a_inv.transpose() * a_new * &pieces.new_gram_inverse
        }
    };

    ws.capacitance = Some(pieces.capacitance);
    ws.cross_gain = Some(b);
    ws.new_gram_inverse = Some(pieces.new_gram_inverse);
    ws.projector = Some(pieces.projector);
    ws.projected_block = Some(pieces.projected_block);
    ws.projected_capacitance = Some(pieces.projected_capacitance);
    ws.new_cov = Some(new.clone());
    Ok((AugmentedOutput { old, new, cross }, ws))
}

/// Squared update (m = |X_new|, `a_new` invertible): old-variable covariances
/// are returned untouched.
pub fn squared(
    prior: PriorBlocks,
    a_inv: &DMatrix<f64>,
    a_new: &DMatrix<f64>,
) -> Result<(AugmentedOutput, UpdateWorkspace)> {
    let m = a_new.nrows();
    check_dims(prior, a_inv.ncols())?;
    if a_new.ncols() != m || a_inv.nrows() != m {
        return Err(Error::DimensionMismatch {
            context: "squared change shape",
            expected: m,
            actual: a_new.ncols(),
        });
    }
    let mut ws = UpdateWorkspace::default();
    let a_iv = a_new
        .clone()
        .lu()
        .solve(&DMatrix::identity(m, m))
        .ok_or(Error::RankDeficientNewBlock)?;
    let c = DMatrix::identity(m, m) + a_inv * prior.involved * a_inv.transpose();
    let new = symmetrize(&(&a_iv * &c * a_iv.transpose()));
    let cross = -(prior.cross * a_inv.transpose() * a_iv.transpose());
    ws.capacitance = Some(c);
    ws.new_inverse = Some(a_iv);
    Ok((
        AugmentedOutput {
            old: prior.target.clone(),
            new,
            cross,
        },
        ws,
    ))
}

/// Relinearization update: factor rows `a_before` leave the system, rows
/// `a_after` enter it. Both blocks share the involved columns; row counts may
/// differ (extra purely-additive rows can be stacked into `a_after`).
///
/// Σ₊^Y = Σ^Y − U₂U₂ᵀ + U₁U₁ᵀ, the real-by-construction form of the
/// square-root downdate/update pair.
pub fn relinearized(
    prior: PriorBlocks,
    a_before: &DMatrix<f64>,
    a_after: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, UpdateWorkspace)> {
    let k = a_after.ncols();
    check_dims(prior, k)?;
    if a_before.ncols() != k {
        return Err(Error::DimensionMismatch {
            context: "relinearization involved columns",
            expected: k,
            actual: a_before.ncols(),
        });
    }
    let m_plus = a_after.nrows();
    let mut ws = UpdateWorkspace::default();

    // Addition half: M₂ = A₊ᵀ / chol(I + A₊ Σ^I A₊ᵀ).
    let c_plus = DMatrix::identity(m_plus, m_plus) + a_after * prior.involved * a_after.transpose();
    let u_plus = chol_upper(&c_plus).map_err(|_| Error::NotPositiveDefinite { index: 0 })?;
    let m2 = div_by_upper(&a_after.transpose().into_owned(), &u_plus);

    // Removal half: M₁ = (A₋ᵀ − M₂ G) / chol(I − A₋ Σ^I A₋ᵀ + Gᵀ G).
    let g = m2.transpose() * prior.involved * a_before.transpose();
    let m_minus = a_before.nrows();
    let j = DMatrix::identity(m_minus, m_minus) - a_before * prior.involved * a_before.transpose()
        + g.transpose() * &g;
    let u_j = chol_upper(&j)?; // not PD ⇒ posterior information lost PD
    let m1 = div_by_upper(&(a_before.transpose() - &m2 * &g), &u_j);

    let u2 = prior.cross * &m2;
    let u1 = prior.cross * &m1;
    let post = symmetrize(&(prior.target - &u2 * u2.transpose() + &u1 * u1.transpose()));

    ws.addition_half = Some(m2);
    ws.removal_half = Some(m1);
    ws.coupling = Some(g);
    Ok((post, ws))
}

fn check_dims(prior: PriorBlocks, involved_dim: usize) -> Result<()> {
    if prior.involved.nrows() != involved_dim || prior.involved.ncols() != involved_dim {
        return Err(Error::DimensionMismatch {
            context: "involved covariance block",
            expected: involved_dim,
            actual: prior.involved.nrows(),
        });
    }
    if prior.cross.ncols() != involved_dim || prior.cross.nrows() != prior.target.nrows() {
        return Err(Error::DimensionMismatch {
            context: "cross covariance block",
            expected: involved_dim,
            actual: prior.cross.ncols(),
        });
    }
    Ok(())
}

/// Deliberate fault injection for oracle-suite sensitivity checks.
pub mod mutation {
    use super::Cell;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Mutation {
        /// Flips the sign of the rectangular update's covariance correction.
        RectangularGainFlip,
    }

    thread_local! {
        static ACTIVE: Cell<Option<Mutation>> = const { Cell::new(None) };
    }

    pub fn set(m: Option<Mutation>) {
        ACTIVE.with(|a| a.set(m));
    }

    pub(crate) fn active() -> Option<Mutation> {
        ACTIVE.with(|a| a.get())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn blocks<'a>(
        target: &'a DMatrix<f64>,
        cross: &'a DMatrix<f64>,
        involved: &'a DMatrix<f64>,
    ) -> PriorBlocks<'a> {
        PriorBlocks {
            target,
            cross,
            involved,
        }
    }

    #[test]
    fn scalar_not_augmented() {
        // prior variance 1, unit factor: capacitance 2, posterior 0.5
        let t = dmatrix![1.0];
        let a = dmatrix![1.0];
        let (post, ws) = not_augmented(blocks(&t, &t, &t), &a, None).unwrap();
        assert_abs_diff_eq!(post[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ws.capacitance.unwrap()[(0, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_jacobian_is_identity_update() {
        let t = dmatrix![2.0, 0.3; 0.3, 1.0];
        let c = dmatrix![0.1; 0.2];
        let i = dmatrix![1.5];
        let a = dmatrix![0.0];
        let (post, _) = not_augmented(blocks(&t, &c, &i), &a, None).unwrap();
        assert_abs_diff_eq!(post, t, epsilon = 1e-15);
    }

    #[test]
    fn scalar_squared_prediction() {
        // prior var 1 on x_old, factor (x_new − x_old) with unit noise:
        // var(x_new) = 2, cov(x_old, x_new) = 1, var(x_old) unchanged.
        let t = dmatrix![1.0];
        let a_inv = dmatrix![-1.0];
        let a_new = dmatrix![1.0];
        let (out, ws) = squared(blocks(&t, &t, &t), &a_inv, &a_new).unwrap();
        assert_abs_diff_eq!(ws.capacitance.as_ref().unwrap()[(0, 0)], 2.0, epsilon = 1e-15);
        assert_eq!(out.old, t); // bit-equal conservation
        assert_abs_diff_eq!(out.new[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.cross[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn squared_with_no_involved_vars_decouples() {
        // unary prior on a new variable: Σ_new = A⁻¹A⁻ᵀ, no cross term
        let t = dmatrix![3.0];
        let cross = DMatrix::<f64>::zeros(1, 0);
        let inv = DMatrix::<f64>::zeros(0, 0);
        let a_inv = DMatrix::<f64>::zeros(2, 0);
        let a_new = dmatrix![2.0, 0.0; 0.0, 4.0];
        let (out, _) = squared(blocks(&t, &cross, &inv), &a_inv, &a_new).unwrap();
        assert_abs_diff_eq!(out.new, dmatrix![0.25, 0.0; 0.0, 0.0625], epsilon = 1e-14);
        assert_eq!(out.cross.ncols(), 2);
        assert_abs_diff_eq!(out.cross.amax(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn relinearization_identical_points_is_noop() {
        let t = dmatrix![2.0, 0.4; 0.4, 1.5];
        let c = dmatrix![0.3, 0.1; -0.2, 0.5];
        let i = dmatrix![1.2, 0.2; 0.2, 0.9];
        let a = dmatrix![0.5, -0.3; 0.2, 0.8; 1.0, 0.0];
        let (post, _) = relinearized(blocks(&t, &c, &i), &a, &a).unwrap();
        assert_abs_diff_eq!(post, t, epsilon = 1e-12);
    }

    #[test]
    fn relinearization_with_zero_before_matches_not_augmented() {
        let t = dmatrix![2.0, 0.4; 0.4, 1.5];
        let c = dmatrix![0.3, 0.1; -0.2, 0.5];
        let i = dmatrix![1.2, 0.2; 0.2, 0.9];
        let a_after = dmatrix![0.5, -0.3; 0.2, 0.8];
        let zero = DMatrix::<f64>::zeros(0, 2);
        let (via_relin, _) = relinearized(blocks(&t, &c, &i), &zero, &a_after).unwrap();
        let (via_naug, _) = not_augmented(blocks(&t, &c, &i), &a_after, None).unwrap();
        assert_abs_diff_eq!(via_relin, via_naug, epsilon = 1e-12);
    }

    #[test]
    fn relinearization_matches_signed_capacitance_route() {
        let t = dmatrix![2.0, 0.4; 0.4, 1.5];
        let c = dmatrix![0.3, 0.1; -0.2, 0.5];
        let i = dmatrix![1.2, 0.2; 0.2, 0.9];
        let before = dmatrix![0.4, -0.2; 0.1, 0.3];
        let after = dmatrix![0.6, -0.1; 0.15, 0.45];
        let (via_chol, _) = relinearized(blocks(&t, &c, &i), &before, &after).unwrap();

        let mut stacked = DMatrix::zeros(4, 2);
        stacked.view_mut((0, 0), (2, 2)).copy_from(&before);
        stacked.view_mut((2, 0), (2, 2)).copy_from(&after);
        let signs = [-1.0, -1.0, 1.0, 1.0];
        let (via_signed, _) =
            not_augmented(blocks(&t, &c, &i), &stacked, Some(&signs)).unwrap();
        assert_abs_diff_eq!(via_chol, via_signed, epsilon = 1e-10);
    }

    #[test]
    fn rectangular_with_square_new_block_keeps_old_covariance() {
        // A_new square invertible ⇒ projector K = 0 ⇒ old block unchanged.
        let t = dmatrix![2.0, 0.4; 0.4, 1.5];
        let c = dmatrix![0.3; -0.2];
        let i = dmatrix![1.2];
        let a_inv = dmatrix![0.5; -0.7];
        let a_new = dmatrix![1.0, 0.2; 0.0, 2.0];
        let (out, ws) = rectangular(
            blocks(&t, &c, &i),
            &a_inv,
            &a_new,
            None,
            CrossMethod::Two,
        )
        .unwrap();
        assert_abs_diff_eq!(out.old, t, epsilon = 1e-12);
        let k = ws.projector.unwrap();
        assert_abs_diff_eq!(k.amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn projector_properties() {
        let t = dmatrix![2.0, 0.4; 0.4, 1.5];
        let c = dmatrix![0.3, 0.0; -0.2, 0.1];
        let i = dmatrix![1.2, 0.1; 0.1, 0.8];
        let a_inv = dmatrix![0.5, 0.1; -0.7, 0.3; 0.2, 0.2];
        let a_new = dmatrix![1.0; 0.5; -0.3];
        let (_, ws) = rectangular(
            blocks(&t, &c, &i),
            &a_inv,
            &a_new,
            None,
            CrossMethod::One,
        )
        .unwrap();
        let k = ws.projector.unwrap();
        assert_abs_diff_eq!(k.clone(), k.transpose(), epsilon = 1e-12);
        assert!((&k * &k - &k).amax() < 1e-10);
        assert!((&k * &a_new).amax() < 1e-12);
    }
}
