//! Ground-truth LTI plant, closed-loop data collection and the steady-state
//! Kalman predictor used by the oracle controller.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::error::{dim_check, Error, Result};
use crate::numerics::{chol_factor, RngState, SymMatrix};

/// Discrete-time plant `x⁺ = A x + B u + w`, `y = C x + D u + v` with
/// `w ~ N(0, σ_w² I)` and `v ~ N(0, σ_v² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub sigma_w2: f64,
    pub sigma_v2: f64,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, sigma_w2: f64, sigma_v2: f64) -> Result<Self> {
        let n = a.nrows();
        dim_check(a.is_square(), || "A must be square".into())?;
        dim_check(b.nrows() == n, || format!("B has {} rows, expected {n}", b.nrows()))?;
        dim_check(c.ncols() == n, || format!("C has {} columns, expected {n}", c.ncols()))?;
        dim_check(d.nrows() == c.nrows() && d.ncols() == b.ncols(), || {
            format!("D is {}x{}, expected {}x{}", d.nrows(), d.ncols(), c.nrows(), b.ncols())
        })?;
        if !(sigma_w2 >= 0.0 && sigma_v2 >= 0.0) {
            return Err(Error::InvalidArgument("noise variances must be non-negative".into()));
        }
        Ok(LtiSystem { a, b, c, d, sigma_w2, sigma_v2 })
    }

    /// The sampled second-order benchmark plant.
    pub fn benchmark(sigma_w2: f64, sigma_v2: f64) -> Self {
        LtiSystem {
            a: DMatrix::from_row_slice(2, 2, &[0.7326, -0.0861, 0.1722, 0.9909]),
            b: DMatrix::from_column_slice(2, 1, &[0.0609, 0.0064]),
            c: DMatrix::from_row_slice(1, 2, &[0.0, 1.4142]),
            d: DMatrix::zeros(1, 1),
            sigma_w2,
            sigma_v2,
        }
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn with_noise(&self, sigma_w2: f64, sigma_v2: f64) -> Self {
        LtiSystem { sigma_w2, sigma_v2, ..self.clone() }
    }

    /// `C (I − A)⁻¹ B + D`.
    pub fn dc_gain(&self) -> Option<DMatrix<f64>> {
        let n = self.n_x();
        let x = (DMatrix::identity(n, n) - &self.a).lu().solve(&self.b)?;
        Some(&self.c * x + &self.d)
    }

    fn measurement_noise(&self, rng: &mut RngState) -> DVector<f64> {
        rng.standard_normal_vec(self.n_y()) * self.sigma_v2.sqrt()
    }

    fn process_noise(&self, rng: &mut RngState) -> DVector<f64> {
        rng.standard_normal_vec(self.n_x()) * self.sigma_w2.sqrt()
    }
}

/// One simulation step. Measurement noise is drawn before process noise.
pub fn step(sys: &LtiSystem, x: &DVector<f64>, u: &DVector<f64>, rng: &mut RngState) -> Result<(DVector<f64>, DVector<f64>)> {
    dim_check(x.len() == sys.n_x(), || format!("state has length {}, expected {}", x.len(), sys.n_x()))?;
    dim_check(u.len() == sys.n_u(), || format!("input has length {}, expected {}", u.len(), sys.n_u()))?;
    let v = sys.measurement_noise(rng);
    let y = &sys.c * x + &sys.d * u + v;
    let w = sys.process_noise(rng);
    let x_next = &sys.a * x + &sys.b * u + w;
    Ok((x_next, y))
}

/// Reference generator for the training feedback loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegimeSpec {
    /// `+amplitude` for `t mod period < period/2`, `-amplitude` otherwise.
    SquareWave { amplitude: f64, period: f64 },
    Sinusoid { amplitude: f64, period: f64 },
}

impl RegimeSpec {
    pub fn informative() -> Self {
        RegimeSpec::SquareWave { amplitude: 1.0, period: 50.0 }
    }

    pub fn weak() -> Self {
        RegimeSpec::Sinusoid { amplitude: 1.0, period: 75.0 }
    }

    pub fn value(&self, t: usize) -> f64 {
        match *self {
            RegimeSpec::SquareWave { amplitude, period } => {
                if (t as f64).rem_euclid(period) < period / 2.0 {
                    amplitude
                } else {
                    -amplitude
                }
            }
            RegimeSpec::Sinusoid { amplitude, period } => amplitude * (2.0 * std::f64::consts::PI * t as f64 / period).sin(),
        }
    }
}

/// Signals stored one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub r: Option<DMatrix<f64>>,
    pub t0: usize,
}

impl Trajectory {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>, r: Option<DMatrix<f64>>, t0: usize) -> Result<Self> {
        dim_check(u.nrows() == y.nrows(), || format!("u has {} rows, y has {}", u.nrows(), y.nrows()))?;
        if let Some(r) = &r {
            dim_check(r.nrows() == y.nrows() && r.ncols() == y.ncols(), || {
                format!("r is {}x{}, expected {}x{}", r.nrows(), r.ncols(), y.nrows(), y.ncols())
            })?;
        }
        Ok(Trajectory { u, y, r, t0 })
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_u(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=self.n_u()).map(|i| format!("u_{i}")));
        h.extend((1..=self.n_y()).map(|i| format!("y_{i}")));
        if self.r.is_some() {
            h.extend((1..=self.n_y()).map(|i| format!("r_{i}")));
        }
        h
    }

    /// Fields of one CSV row, numbers with 17 significant digits.
    pub fn row_fields(&self, k: usize) -> Vec<String> {
        let mut row = vec![(self.t0 + k).to_string()];
        row.extend(self.u.row(k).iter().map(|v| fmt_num(*v)));
        row.extend(self.y.row(k).iter().map(|v| fmt_num(*v)));
        if let Some(r) = &self.r {
            row.extend(r.row(k).iter().map(|v| fmt_num(*v)));
        }
        row
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.header())?;
        for k in 0..self.len() {
            wr.write_record(self.row_fields(k))?;
        }
        wr.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Parses the CSV layout written by [`Trajectory::write_csv`]. Extra
    /// columns (e.g. solver diagnostics) are ignored.
    pub fn read_csv<R: Read>(r: R) -> std::result::Result<Self, DataError> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rd.headers().map_err(|e| DataError::new(1, e.to_string()))?.clone();
        let idx = |prefix: &str| -> Vec<usize> {
            let mut cols: Vec<(usize, usize)> = header
                .iter()
                .enumerate()
                .filter_map(|(c, name)| name.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok()).map(|k| (k, c)))
                .collect();
            cols.sort();
            cols.into_iter().map(|(_, c)| c).collect()
        };
        let (uc, yc, rc) = (idx("u_"), idx("y_"), idx("r_"));
        let tcol = header.iter().position(|h| h == "t").ok_or_else(|| DataError::new(1, "missing `t` column".into()))?;
        if uc.is_empty() || yc.is_empty() {
            return Err(DataError::new(1, "header needs at least one u_ and one y_ column".into()));
        }
        if !rc.is_empty() && rc.len() != yc.len() {
            return Err(DataError::new(1, format!("{} r_ columns for {} outputs", rc.len(), yc.len())));
        }
        let (mut u, mut y, mut rr) = (Vec::new(), Vec::new(), Vec::new());
        let mut t0 = None;
        for (k, rec) in rd.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| DataError::new(line, e.to_string()))?;
            let field = |c: usize| -> std::result::Result<f64, DataError> {
                let s = rec.get(c).ok_or_else(|| DataError::new(line, format!("missing column {}", c + 1)))?;
                s.trim().parse::<f64>().map_err(|_| DataError::new(line, format!("cannot parse `{s}` as a number")))
            };
            let t = field(tcol)?;
            if t0.is_none() {
                t0 = Some(t as usize);
            }
            for &c in &uc {
                u.push(field(c)?);
            }
            for &c in &yc {
                y.push(field(c)?);
            }
            for &c in &rc {
                rr.push(field(c)?);
            }
        }
        let n = u.len() / uc.len();
        let r = (!rc.is_empty()).then(|| DMatrix::from_row_slice(n, rc.len(), &rr));
        Ok(Trajectory {
            u: DMatrix::from_row_slice(n, uc.len(), &u),
            y: DMatrix::from_row_slice(n, yc.len(), &y),
            r,
            t0: t0.unwrap_or(0),
        })
    }
}

/// Malformed trajectory data, with the 1-based line number in the file.
#[derive(Debug, Clone, PartialEq, ThisError)]
#[error("line {row}: {message}")]
pub struct DataError {
    pub row: usize,
    pub message: String,
}

impl DataError {
    fn new(row: usize, message: String) -> Self {
        DataError { row, message }
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Simulates `u(t) = r_train(t) − y(t)` for `n_train` steps from the zero state.
pub fn collect_training_data(sys: &LtiSystem, regime: &RegimeSpec, n_train: usize, rng: &mut RngState) -> Result<Trajectory> {
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be at least 1".into()));
    }
    dim_check(sys.n_u() == sys.n_y(), || "output feedback u = r − y needs n_u == n_y".into())?;
    let (nx, nu, ny) = (sys.n_x(), sys.n_u(), sys.n_y());
    // (I + D) y = C x + D r + v resolves the algebraic loop when D ≠ 0
    let loop_lu = (DMatrix::<f64>::identity(ny, ny) + &sys.d).lu();
    let direct = sys.d.iter().all(|v| *v == 0.0);
    let mut x = DVector::zeros(nx);
    let mut u = DMatrix::zeros(n_train, nu);
    let mut y = DMatrix::zeros(n_train, ny);
    let mut r = DMatrix::zeros(n_train, ny);
    for t in 0..n_train {
        let rt = DVector::from_element(ny, regime.value(t));
        let v = sys.measurement_noise(rng);
        let yt = if direct {
            &sys.c * &x + v
        } else {
            loop_lu
                .solve(&(&sys.c * &x + &sys.d * &rt + v))
                .ok_or_else(|| Error::InvalidArgument("I + D is singular".into()))?
        };
        let ut = &rt - &yt;
        let w = sys.process_noise(rng);
        x = &sys.a * &x + &sys.b * &ut + w;
        u.set_row(t, &ut.transpose());
        y.set_row(t, &yt.transpose());
        r.set_row(t, &rt.transpose());
    }
    Trajectory::new(u, y, Some(r), 0)
}

/// Steady-state one-step predictor gain and error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanGain {
    pub k: DMatrix<f64>,
    pub p: SymMatrix,
}

impl KalmanGain {
    /// `Ã = A − K C`.
    pub fn a_tilde(&self, sys: &LtiSystem) -> DMatrix<f64> {
        &sys.a - &self.k * &sys.c
    }

    /// `B̃ = B − K D`.
    pub fn b_tilde(&self, sys: &LtiSystem) -> DMatrix<f64> {
        &sys.b - &self.k * &sys.d
    }
}

fn riccati_map(sys: &LtiSystem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ny = sys.n_y();
    let nx = sys.n_x();
    let s = SymMatrix::from_dense(&sys.c * p * sys.c.transpose() + DMatrix::identity(ny, ny) * sys.sigma_v2);
    let apc = &sys.a * p * sys.c.transpose();
    let f = chol_factor(&s, 0.0)?;
    let gain_t = f.solve(&apc.transpose())?;
    Ok(&sys.a * p * sys.a.transpose() - &apc * gain_t + DMatrix::identity(nx, nx) * sys.sigma_w2)
}

/// Frobenius norm of `P − Ric(P)`.
pub fn dare_residual(sys: &LtiSystem, p: &SymMatrix) -> Result<f64> {
    Ok((p.matrix() - riccati_map(sys, p.matrix())?).norm())
}

const DARE_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 100_000;

/// Fixed-point iteration of the filtering Riccati equation started at `Σ_w`.
pub fn steady_state_kf(sys: &LtiSystem) -> Result<KalmanGain> {
    if !(sys.sigma_v2 > 0.0) {
        return Err(Error::InvalidArgument("steady-state Kalman filter needs σ_v² > 0".into()));
    }
    let nx = sys.n_x();
    let mut p = DMatrix::identity(nx, nx) * sys.sigma_w2;
    let mut residual = f64::INFINITY;
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_map(sys, &p)?;
        let next = 0.5 * (&next + next.transpose());
        residual = (&next - &p).norm();
        p = next;
        if residual < DARE_TOL {
            let p = SymMatrix::from_dense(p);
            let s = SymMatrix::from_dense(&sys.c * p.matrix() * sys.c.transpose() + DMatrix::identity(sys.n_y(), sys.n_y()) * sys.sigma_v2);
            let apc = &sys.a * p.matrix() * sys.c.transpose();
            let k = chol_factor(&s, 0.0)?.solve(&apc.transpose())?.transpose();
            return Ok(KalmanGain { k, p });
        }
    }
    Err(Error::NoConvergence { iterations: DARE_MAX_ITER, residual })
}

/// `x̂⁺ = (A − K C) x̂ + (B − K D) u + K y`.
pub fn kf_filter_step(gain: &KalmanGain, sys: &LtiSystem, xhat: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    dim_check(xhat.len() == sys.n_x(), || format!("state estimate has length {}, expected {}", xhat.len(), sys.n_x()))?;
    dim_check(u.len() == sys.n_u(), || format!("input has length {}, expected {}", u.len(), sys.n_u()))?;
    dim_check(y.len() == sys.n_y(), || format!("output has length {}, expected {}", y.len(), sys.n_y()))?;
    Ok(gain.a_tilde(sys) * xhat + gain.b_tilde(sys) * u + &gain.k * y)
}

/// Predictor Markov parameters `φ_y^i = C Ã^{i−1} K` (i = 1..=na) and
/// `φ_u^0 = D`, `φ_u^j = C Ã^{j−1} B̃` (j = 1..=nb).
pub fn predictor_markov_parameters(sys: &LtiSystem, gain: &KalmanGain, na: usize, nb: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let at = gain.a_tilde(sys);
    let bt = gain.b_tilde(sys);
    let mut phi_y = Vec::with_capacity(na);
    let mut phi_u = vec![sys.d.clone()];
    let mut ca = sys.c.clone();
    for i in 1..=na.max(nb) {
        if i <= na {
            phi_y.push(&ca * &gain.k);
        }
        if i <= nb {
            phi_u.push(&ca * &bt);
        }
        ca = &ca * &at;
    }
    (phi_y, phi_u)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}
