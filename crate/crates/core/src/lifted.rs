//! Multi-step predictor obtained by lifting an ARX model over a past window
//! of length `Lp` and a future window of length `Lf`.
//!
//! Stacked signals are ordered oldest first:
//! `u_p = [u(t−Lp); …; u(t−1)]`, `u_f = [u(t); …; u(t+Lf−1)]`, and
//! likewise for outputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::ident::{ArxStructure, CoeffBlock, PredictorTheta};
use crate::numerics::unit_lower_solve_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizons {
    pub lp: usize,
    pub lf: usize,
}

impl Horizons {
    pub fn new(lp: usize, lf: usize) -> Result<Self> {
        if lp == 0 || lf == 0 {
            return Err(Error::InvalidArgument(format!("horizons must be at least 1, got Lp = {lp}, Lf = {lf}")));
        }
        Ok(Horizons { lp, lf })
    }

    /// Largest coefficient lag that appears in the lifted matrices.
    pub fn max_lag(&self) -> usize {
        self.lp + self.lf - 1
    }

    pub fn check(&self, structure: &ArxStructure) -> Result<()> {
        for order in [structure.na, structure.nb] {
            if order > self.lp {
                return Err(Error::OrderExceedsHorizon { order, horizon: self.lp });
            }
        }
        Ok(())
    }
}

/// Coefficients `φ_y^1..φ_y^M`, `φ_u^0..φ_u^M` with `M = Lp + Lf − 1`, where
/// every lag beyond the identified orders is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedTheta {
    pub structure: ArxStructure,
    pub horizons: Horizons,
    pub values: DVector<f64>,
    /// `embed[p]` is the padded index of identified coordinate `p`.
    pub embed: Vec<usize>,
}

impl PaddedTheta {
    fn output_offset(ny: usize, i: usize) -> usize {
        (i - 1) * ny * ny
    }

    fn input_offset(ny: usize, nu: usize, m: usize, j: usize) -> usize {
        m * ny * ny + j * ny * nu
    }

    pub fn len_for(structure: &ArxStructure, h: &Horizons) -> usize {
        let m = h.max_lag();
        m * structure.n_y * structure.n_y + (m + 1) * structure.n_y * structure.n_u
    }

    pub fn phi_y(&self, i: usize) -> DMatrix<f64> {
        let ny = self.structure.n_y;
        if i == 0 || i > self.horizons.max_lag() {
            return DMatrix::zeros(ny, ny);
        }
        let off = Self::output_offset(ny, i);
        DMatrix::from_column_slice(ny, ny, &self.values.as_slice()[off..off + ny * ny])
    }

    pub fn phi_u(&self, j: usize) -> DMatrix<f64> {
        let (ny, nu) = (self.structure.n_y, self.structure.n_u);
        if j > self.horizons.max_lag() {
            return DMatrix::zeros(ny, nu);
        }
        let off = Self::input_offset(ny, nu, self.horizons.max_lag(), j);
        DMatrix::from_column_slice(ny, nu, &self.values.as_slice()[off..off + ny * nu])
    }

    /// Identified coordinates read back out of the padded vector.
    pub fn extract(&self) -> PredictorTheta {
        let values = DVector::from_iterator(self.embed.len(), self.embed.iter().map(|&q| self.values[q]));
        PredictorTheta { structure: self.structure, values }
    }
}

/// Embeds `theta` into the padded coefficient vector for horizons `h`.
pub fn pad_theta(theta: &PredictorTheta, h: &Horizons) -> Result<PaddedTheta> {
    let s = theta.structure;
    h.check(&s)?;
    let (ny, nu, m) = (s.n_y, s.n_u, h.max_lag());
    let mut values = DVector::zeros(PaddedTheta::len_for(&s, h));
    let mut embed = Vec::with_capacity(s.n_theta());
    for p in 0..s.n_theta() {
        let c = s.coordinate(p);
        let q = match c.block {
            CoeffBlock::Output => PaddedTheta::output_offset(ny, c.lag) + c.col * ny + c.row,
            CoeffBlock::Input => PaddedTheta::input_offset(ny, nu, m, c.lag) + c.col * ny + c.row,
        };
        values[q] = theta.values[p];
        embed.push(q);
    }
    Ok(PaddedTheta { structure: s, horizons: *h, values, embed })
}

/// `ŷ_f = (I − Φ_y)⁻¹ (Ψ_u u_p + Ψ_y y_p + Φ_u u_f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPredictor {
    pub horizons: Horizons,
    pub n_y: usize,
    pub n_u: usize,
    pub psi_u: DMatrix<f64>,
    pub psi_y: DMatrix<f64>,
    pub phi_u: DMatrix<f64>,
    pub phi_y: DMatrix<f64>,
    /// `I − Φ_y`, unit lower triangular.
    pub a: DMatrix<f64>,
}

/// Lag of the coefficient in block `(k, ℓ)` of the Ψ matrices.
pub fn psi_lag(h: &Horizons, k: usize, l: usize) -> usize {
    h.lp - l + k
}

fn place(target: &mut DMatrix<f64>, k: usize, l: usize, block: &DMatrix<f64>) {
    let (r, c) = block.shape();
    target.view_mut((k * r, l * c), (r, c)).copy_from(block);
}

pub fn assemble(padded: &PaddedTheta) -> LiftedPredictor {
    let h = padded.horizons;
    let (ny, nu) = (padded.structure.n_y, padded.structure.n_u);
    let (lp, lf) = (h.lp, h.lf);
    let mut psi_u = DMatrix::zeros(ny * lf, nu * lp);
    let mut psi_y = DMatrix::zeros(ny * lf, ny * lp);
    let mut phi_u = DMatrix::zeros(ny * lf, nu * lf);
    let mut phi_y = DMatrix::zeros(ny * lf, ny * lf);
    for k in 0..lf {
        for l in 0..lp {
            let lag = psi_lag(&h, k, l);
            place(&mut psi_u, k, l, &padded.phi_u(lag));
            place(&mut psi_y, k, l, &padded.phi_y(lag));
        }
        for l in 0..=k {
            place(&mut phi_u, k, l, &padded.phi_u(k - l));
            if l < k {
                place(&mut phi_y, k, l, &padded.phi_y(k - l));
            }
        }
    }
    let a = DMatrix::identity(ny * lf, ny * lf) - &phi_y;
    LiftedPredictor { horizons: h, n_y: ny, n_u: nu, psi_u, psi_y, phi_u, phi_y, a }
}

impl LiftedPredictor {
    pub fn from_theta(theta: &PredictorTheta, h: &Horizons) -> Result<Self> {
        Ok(assemble(&pad_theta(theta, h)?))
    }

    fn check_dims(&self, u_p: &DVector<f64>, y_p: &DVector<f64>) -> Result<()> {
        let h = self.horizons;
        dim_check(u_p.len() == self.n_u * h.lp, || format!("u_p has length {}, expected {}", u_p.len(), self.n_u * h.lp))?;
        dim_check(y_p.len() == self.n_y * h.lp, || format!("y_p has length {}, expected {}", y_p.len(), self.n_y * h.lp))
    }

    fn check_uf(&self, u_f: &DVector<f64>) -> Result<()> {
        let want = self.n_u * self.horizons.lf;
        dim_check(u_f.len() == want, || format!("u_f has length {}, expected {want}", u_f.len()))
    }

    /// `Ψ_u u_p + Ψ_y y_p` (before applying `A⁻¹`).
    pub fn past_term(&self, u_p: &DVector<f64>, y_p: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(u_p, y_p)?;
        Ok(&self.psi_u * u_p + &self.psi_y * y_p)
    }

    /// Forward substitution with `A`.
    pub fn solve_a(&self, rhs: &DVector<f64>) -> DVector<f64> {
        unit_lower_solve_vec(&self.a, rhs)
    }

    /// `A⁻¹ M` column by column.
    pub fn solve_a_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rhs.clone();
        crate::numerics::unit_lower_solve_mut(&self.a, &mut out);
        out
    }

    pub fn predict(&self, u_p: &DVector<f64>, y_p: &DVector<f64>, u_f: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_uf(u_f)?;
        let b = self.past_term(u_p, y_p)? + &self.phi_u * u_f;
        Ok(self.solve_a(&b))
    }

    /// Free response `A⁻¹(Ψ_u u_p + Ψ_y y_p)`, the prediction for `u_f = 0`.
    pub fn free_response(&self, u_p: &DVector<f64>, y_p: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.solve_a(&self.past_term(u_p, y_p)?))
    }

    /// Forced-response matrix `A⁻¹Φ_u`, so that `ŷ_f = free + G u_f`.
    pub fn forced_response(&self) -> DMatrix<f64> {
        self.solve_a_mat(&self.phi_u)
    }
}

/// Step-by-step ARX recursion over the future window, substituting earlier
/// predictions for unknown future outputs. Lags that reach before the past
/// window contribute nothing.
pub fn rollout_oracle(theta: &PredictorTheta, u_p: &DVector<f64>, y_p: &DVector<f64>, u_f: &DVector<f64>) -> Result<DVector<f64>> {
    let s = theta.structure;
    let (ny, nu) = (s.n_y, s.n_u);
    dim_check(u_p.len() % nu == 0 && y_p.len() % ny == 0 && u_p.len() / nu == y_p.len() / ny, || {
        "u_p and y_p must cover the same past horizon".into()
    })?;
    dim_check(u_f.len() % nu == 0, || "u_f length must be a multiple of n_u".into())?;
    let lp = u_p.len() / nu;
    let lf = u_f.len() / nu;
    // time index τ = t − Lp + position; time t is position Lp
    let u_at = |pos: usize| -> DVector<f64> {
        if pos < lp {
            u_p.rows(pos * nu, nu).clone_owned()
        } else {
            u_f.rows((pos - lp) * nu, nu).clone_owned()
        }
    };
    let mut y_all: Vec<DVector<f64>> = (0..lp).map(|k| y_p.rows(k * ny, ny).clone_owned()).collect();
    for k in 0..lf {
        let pos = lp + k;
        let mut yk = DVector::zeros(ny);
        for i in 1..=s.na.min(pos) {
            yk += theta.phi_y(i) * &y_all[pos - i];
        }
        for j in 0..=s.nb.min(pos) {
            yk += theta.phi_u(j) * u_at(pos - j);
        }
        y_all.push(yk);
    }
    let mut out = DVector::zeros(ny * lf);
    for k in 0..lf {
        out.rows_mut(k * ny, ny).copy_from(&y_all[lp + k]);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::numerics::RngState;

    /// Random coefficients with decaying magnitude, arbitrary orders up to `Lp`.
    pub fn random_instance(rng: &mut RngState, n_y: usize, n_u: usize, max_lp: usize, max_lf: usize) -> (PredictorTheta, Horizons) {
        let lp = 1 + (rng.uniform(0.0, max_lp as f64) as usize).min(max_lp - 1);
        let lf = 1 + (rng.uniform(0.0, max_lf as f64) as usize).min(max_lf - 1);
        let na = 1 + (rng.uniform(0.0, lp as f64) as usize).min(lp - 1);
        let nb = (rng.uniform(0.0, (lp + 1) as f64) as usize).min(lp);
        let feed = rng.uniform(0.0, 1.0) < 0.5;
        let s = ArxStructure::new(na, nb, feed, n_y, n_u).unwrap();
        let mut theta = PredictorTheta::zeros(s);
        for p in 0..s.n_theta() {
            let lag = s.kernel_lag(p) as i32;
            theta.values[p] = 0.6 * 0.7f64.powi(lag - 1) / n_y as f64 * rng.uniform(-1.0, 1.0);
        }
        (theta, Horizons::new(lp, lf).unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::numerics::RngState;
    use proptest::prelude::*;

    fn signals(rng: &mut RngState, lp: &LiftedPredictor) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let h = lp.horizons;
        (rng.standard_normal_vec(lp.n_u * h.lp), rng.standard_normal_vec(lp.n_y * h.lp), rng.standard_normal_vec(lp.n_u * h.lf))
    }

    #[test]
    fn padding_cases() {
        let s = ArxStructure::siso(3, 3, true);
        let th = PredictorTheta::new(s, DVector::from_fn(s.n_theta(), |i, _| i as f64 + 1.0)).unwrap();
        let p = pad_theta(&th, &Horizons::new(3, 1).unwrap()).unwrap();
        assert_eq!(p.values.len(), 3 + 4);
        assert_eq!(p.extract(), th);

        let s1 = ArxStructure::siso(1, 1, true);
        let th1 = PredictorTheta::new(s1, DVector::from_column_slice(&[0.5, 1.0, 2.0])).unwrap();
        let p1 = pad_theta(&th1, &Horizons::new(3, 2).unwrap()).unwrap();
        for i in 2..=4 {
            assert_eq!(p1.phi_y(i)[(0, 0)], 0.0);
        }
        assert_eq!(p1.phi_y(1)[(0, 0)], 0.5);
        assert_eq!(p1.phi_u(1)[(0, 0)], 2.0);
        assert_eq!(p1.extract(), th1);
        let nonzero = p1.values.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 3);

        let err = pad_theta(&PredictorTheta::zeros(ArxStructure::siso(4, 1, true)), &Horizons::new(3, 2).unwrap()).unwrap_err();
        assert_eq!(err, Error::OrderExceedsHorizon { order: 4, horizon: 3 });
    }

    #[test]
    fn zero_theta_gives_identity_a() {
        let s = ArxStructure::new(2, 2, true, 2, 1).unwrap();
        let lp = LiftedPredictor::from_theta(&PredictorTheta::zeros(s), &Horizons::new(3, 4).unwrap()).unwrap();
        assert_eq!(lp.psi_u.amax() + lp.psi_y.amax() + lp.phi_u.amax() + lp.phi_y.amax(), 0.0);
        assert_eq!(lp.a, DMatrix::identity(8, 8));
        let mut rng = RngState::new(0, 0);
        let (up, yp, uf) = signals(&mut rng, &lp);
        assert_eq!(lp.predict(&up, &yp, &uf).unwrap().amax(), 0.0);
    }

    #[test]
    fn two_by_two_horizon_example() {
        let s = ArxStructure::siso(1, 0, false);
        let a = 0.37;
        let th = PredictorTheta::new(s, DVector::from_column_slice(&[a])).unwrap();
        let lp = LiftedPredictor::from_theta(&th, &Horizons::new(2, 2).unwrap()).unwrap();
        assert_eq!(lp.phi_y, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, a, 0.0]));
        assert_eq!(lp.psi_y, DMatrix::from_row_slice(2, 2, &[0.0, a, 0.0, 0.0]));
    }

    #[test]
    fn pure_feedthrough_is_identity() {
        let s = ArxStructure::siso(1, 0, true);
        let th = PredictorTheta::new(s, DVector::from_column_slice(&[0.0, 1.0])).unwrap();
        let lp = LiftedPredictor::from_theta(&th, &Horizons::new(2, 5).unwrap()).unwrap();
        let mut rng = RngState::new(1, 0);
        let (up, yp, uf) = signals(&mut rng, &lp);
        assert_eq!(lp.predict(&up, &yp, &uf).unwrap(), uf);
    }

    #[test]
    fn entries_follow_index_rules() {
        let mut rng = RngState::new(2, 0);
        for _ in 0..50 {
            let (ny, nu) = (1 + (rng.uniform(0.0, 2.0) as usize), 1 + (rng.uniform(0.0, 2.0) as usize));
            let (th, h) = random_instance(&mut rng, ny, nu, 6, 6);
            let lp = LiftedPredictor::from_theta(&th, &h).unwrap();
            let coef_u = |lag: usize, r: usize, c: usize| th.phi_u(lag)[(r, c)];
            let coef_y = |lag: usize, r: usize, c: usize| if lag == 0 { 0.0 } else { th.phi_y(lag)[(r, c)] };
            for row in 0..ny * h.lf {
                let (k, r) = (row / ny, row % ny);
                for col in 0..nu * h.lp {
                    let (l, c) = (col / nu, col % nu);
                    assert_eq!(lp.psi_u[(row, col)], coef_u(h.lp - l + k, r, c));
                }
                for col in 0..ny * h.lp {
                    let (l, c) = (col / ny, col % ny);
                    assert_eq!(lp.psi_y[(row, col)], coef_y(h.lp - l + k, r, c));
                }
                for col in 0..nu * h.lf {
                    let (l, c) = (col / nu, col % nu);
                    let want = if k >= l { coef_u(k - l, r, c) } else { 0.0 };
                    assert_eq!(lp.phi_u[(row, col)], want);
                }
                for col in 0..ny * h.lf {
                    let (l, c) = (col / ny, col % ny);
                    let want = if k > l { coef_y(k - l, r, c) } else { 0.0 };
                    assert_eq!(lp.phi_y[(row, col)], want);
                    let diag = if row == col { 1.0 } else { 0.0 };
                    if col >= row {
                        assert_eq!(lp.a[(row, col)], diag);
                    }
                }
            }
        }
    }

    #[test]
    fn one_step_horizon_is_arx_prediction() {
        let mut rng = RngState::new(4, 0);
        let (th, h) = random_instance(&mut rng, 1, 1, 5, 1);
        assert_eq!(h.lf, 1);
        let lp = LiftedPredictor::from_theta(&th, &h).unwrap();
        let (up, yp, uf) = signals(&mut rng, &lp);
        let mut want = th.phi_u(0)[(0, 0)] * uf[0];
        for i in 1..=th.structure.na {
            want += th.phi_y(i)[(0, 0)] * yp[h.lp - i];
        }
        for j in 1..=th.structure.nb {
            want += th.phi_u(j)[(0, 0)] * up[h.lp - j];
        }
        assert!((lp.predict(&up, &yp, &uf).unwrap()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch() {
        let s = ArxStructure::siso(1, 1, true);
        let lp = LiftedPredictor::from_theta(&PredictorTheta::zeros(s), &Horizons::new(2, 2).unwrap()).unwrap();
        let e = lp.predict(&DVector::zeros(3), &DVector::zeros(2), &DVector::zeros(2)).unwrap_err();
        assert!(matches!(e, Error::DimensionMismatch(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn predict_matches_rollout(seed in 0u64..1_000_000, mimo in any::<bool>()) {
            let mut rng = RngState::new(seed, 0);
            let d = if mimo { 2 } else { 1 };
            let (th, h) = random_instance(&mut rng, d, d, 10, 15);
            let lp = LiftedPredictor::from_theta(&th, &h).unwrap();
            let (up, yp, uf) = signals(&mut rng, &lp);
            let fast = lp.predict(&up, &yp, &uf).unwrap();
            let slow = rollout_oracle(&th, &up, &yp, &uf).unwrap();
            prop_assert!((fast - slow).amax() < 1e-10);
        }

        #[test]
        fn predict_is_homogeneous(seed in 0u64..1_000_000, alpha in -5.0f64..5.0) {
            let mut rng = RngState::new(seed, 1);
            let (th, h) = random_instance(&mut rng, 1, 1, 8, 8);
            let lp = LiftedPredictor::from_theta(&th, &h).unwrap();
            let (up, yp, uf) = signals(&mut rng, &lp);
            let base = lp.predict(&up, &yp, &uf).unwrap() * alpha;
            let scaled = lp.predict(&(&up * alpha), &(&yp * alpha), &(&uf * alpha)).unwrap();
            prop_assert!((base - scaled).amax() < 1e-12 * (1.0 + alpha.abs()));
        }

        #[test]
        fn assemble_is_linear(seed in 0u64..1_000_000) {
            let mut rng = RngState::new(seed, 2);
            let (t1, h) = random_instance(&mut rng, 2, 1, 6, 6);
            let t2 = PredictorTheta::new(t1.structure, rng.standard_normal_vec(t1.values.len())).unwrap();
            let sum = PredictorTheta::new(t1.structure, &t1.values + &t2.values).unwrap();
            let (a, b, c) = (
                LiftedPredictor::from_theta(&t1, &h).unwrap(),
                LiftedPredictor::from_theta(&t2, &h).unwrap(),
                LiftedPredictor::from_theta(&sum, &h).unwrap(),
            );
            prop_assert!((&a.psi_u + &b.psi_u - &c.psi_u).amax() < 1e-15);
            prop_assert!((&a.psi_y + &b.psi_y - &c.psi_y).amax() < 1e-15);
            prop_assert!((&a.phi_u + &b.phi_u - &c.phi_u).amax() < 1e-15);
            prop_assert!((&a.phi_y + &b.phi_y - &c.phi_y).amax() < 1e-15);
        }
    }
}
