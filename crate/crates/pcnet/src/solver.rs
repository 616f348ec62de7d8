//! Linearized pseudorange positioning: geometry matrix, GDOP, iterative
//! weighted least squares, robust WLS (smooth-L1 IRLS), and a
//! constant-velocity Kalman filter baseline over per-epoch fixes.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geodesy::EcefPosition;
use crate::model::{correct_pseudorange, CorrectedPseudorange, Epoch, Trace};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("insufficient satellites: have {have}, need {need}")]
    InsufficientSatellites { have: usize, need: usize },
    #[error("singular geometry: {0}")]
    SingularGeometry(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("solver did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("empty trace")]
    EmptyTrace,
}

/// M x 4 linearized measurement geometry; row m = [g_x, g_y, g_z, 1].
#[derive(Debug, Clone)]
pub struct GeometryMatrix {
    pub rows: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct PositionFix {
    pub position: EcefPosition,
    /// Receiver clock bias b_r, meters.
    pub clock_bias: f64,
    pub gdop: f64,
    /// Post-fit residuals, meters, one per usable satellite.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when the position step drops below this, meters.
    pub step_tolerance: f64,
    /// Smooth-L1 threshold for the robust solver, meters.
    pub robust_delta: f64,
    pub weight_floor: f64,
    /// Linearization start; Earth center by default, previous fix when
    /// tracking a trace.
    pub initial_position: EcefPosition,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            step_tolerance: 1e-4,
            robust_delta: 1.0,
            weight_floor: 1e-3,
            initial_position: EcefPosition::new(0.0, 0.0, 0.0),
        }
    }
}

/// Unit line-of-sight vector, receiver minus satellite over range.
pub fn los_vector(
    sat: &EcefPosition,
    x0: &EcefPosition,
) -> Result<(f64, f64, f64), SolverError> {
    let d = x0.sub(sat);
    let range = d.norm();
    if range < 1e-9 {
        return Err(SolverError::DegenerateGeometry(
            "satellite coincident with linearization point".into(),
        ));
    }
    Ok((d.x / range, d.y / range, d.z / range))
}

pub fn geometry_matrix(
    sats: &[EcefPosition],
    x0: &EcefPosition,
) -> Result<GeometryMatrix, SolverError> {
    if sats.is_empty() {
        return Err(SolverError::DegenerateGeometry("no satellites".into()));
    }
    let mut rows = DMatrix::zeros(sats.len(), 4);
    for (i, sat) in sats.iter().enumerate() {
        let (gx, gy, gz) = los_vector(sat, x0)?;
        rows[(i, 0)] = gx;
        rows[(i, 1)] = gy;
        rows[(i, 2)] = gz;
        rows[(i, 3)] = 1.0;
    }
    Ok(GeometryMatrix { rows })
}

/// Geometric dilution of precision, sqrt(trace((G'G)^-1)).
pub fn gdop(g: &GeometryMatrix) -> Result<f64, SolverError> {
    let gram = g.rows.transpose() * &g.rows;
    let inv = gram
        .clone()
        .try_inverse()
        .ok_or_else(|| SolverError::SingularGeometry("G'G not invertible".into()))?;
    // Reject numerically meaningless inverses from near-singular geometry.
    let cond_proxy = gram.norm() * inv.norm();
    if !cond_proxy.is_finite() || cond_proxy > 1e12 {
        return Err(SolverError::SingularGeometry(format!(
            "G'G condition estimate {cond_proxy:.3e} exceeds 1e12"
        )));
    }
    Ok(inv.trace().sqrt())
}

/// Usable (correctable) measurements in canonical sat_id order. The sort
/// fixes the floating-point accumulation order of the normal equations, so
/// solves are bitwise invariant under input permutation. Residuals in the
/// returned fix follow this canonical order.
fn usable_measurements(epoch: &Epoch) -> Vec<CorrectedPseudorange> {
    let mut meas: Vec<CorrectedPseudorange> = epoch
        .measurements
        .iter()
        .filter_map(|m| correct_pseudorange(m).ok())
        .collect();
    meas.sort_by(|a, b| a.sat_id.cmp(&b.sat_id));
    meas
}

/// Solve Gt W G [dx; db] = Gt W dRho by Cholesky, falling back to a
/// column-pivoted QR of the weighted system when conditioning fails.
fn solve_normal_equations(
    g: &DMatrix<f64>,
    w: &[f64],
    drho: &DVector<f64>,
) -> Result<DVector<f64>, SolverError> {
    let m = g.nrows();
    let mut gtwg = DMatrix::zeros(4, 4);
    let mut gtwr = DVector::zeros(4);
    for i in 0..m {
        let wi = w[i];
        for a in 0..4 {
            gtwr[a] += wi * g[(i, a)] * drho[i];
            for b in 0..4 {
                gtwg[(a, b)] += wi * g[(i, a)] * g[(i, b)];
            }
        }
    }
    if let Some(chol) = gtwg.clone().cholesky() {
        return Ok(chol.solve(&gtwr));
    }
    // Weighted least-squares via QR on sqrt(W) G.
    let mut wg = g.clone();
    let mut wr = drho.clone();
    for i in 0..m {
        let s = w[i].max(0.0).sqrt();
        for a in 0..4 {
            wg[(i, a)] *= s;
        }
        wr[i] *= s;
    }
    wg.col_piv_qr()
        .solve(&wr)
        .ok_or_else(|| SolverError::SingularGeometry("normal equations singular".into()))
}

fn gauss_newton(
    meas: &[CorrectedPseudorange],
    weights: &[f64],
    config: &SolverConfig,
) -> Result<PositionFix, SolverError> {
    let m = meas.len();
    if m < 4 {
        return Err(SolverError::InsufficientSatellites { have: m, need: 4 });
    }

    let mut x = config.initial_position;
    let mut b = 0.0f64;
    let mut converged = false;
    let mut iterations = 0;
    let sats: Vec<EcefPosition> = meas.iter().map(|c| c.sat_pos).collect();

    for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let geom = geometry_matrix(&sats, &x)?;
        let mut drho = DVector::zeros(m);
        for (i, c) in meas.iter().enumerate() {
            let predicted = x.sub(&c.sat_pos).norm() + b;
            drho[i] = c.value - predicted;
        }
        let delta = solve_normal_equations(&geom.rows, weights, &drho)?;
        x = EcefPosition::new(x.x + delta[0], x.y + delta[1], x.z + delta[2]);
        b += delta[3];
        let step = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
        if step < config.step_tolerance {
            converged = true;
            break;
        }
    }

    let geom = geometry_matrix(&sats, &x)?;
    let fix_gdop = gdop(&geom)?;
    let residuals: Vec<f64> = meas
        .iter()
        .map(|c| c.value - (x.sub(&c.sat_pos).norm() + b))
        .collect();

    Ok(PositionFix {
        position: x,
        clock_bias: b,
        gdop: fix_gdop,
        residuals,
        iterations,
        converged,
    })
}

/// Iterative weighted least squares with caller-supplied weights
/// (uniform when `weights` is None).
pub fn wls_solve(
    epoch: &Epoch,
    config: &SolverConfig,
    weights: Option<&[f64]>,
) -> Result<PositionFix, SolverError> {
    let meas = usable_measurements(epoch);
    if meas.len() < 4 {
        return Err(SolverError::InsufficientSatellites { have: meas.len(), need: 4 });
    }
    let w = match weights {
        Some(w) => {
            assert_eq!(w.len(), meas.len(), "weight vector length mismatch");
            w.to_vec()
        }
        None => vec![1.0; meas.len()],
    };
    gauss_newton(&meas, &w, config)
}

/// Robust WLS: IRLS with the smooth-L1 (Huber-form) weight
/// w = 1 for |r| <= delta, delta/|r| otherwise, floored at weight_floor.
pub fn rwls_solve(epoch: &Epoch, config: &SolverConfig) -> Result<PositionFix, SolverError> {
    let meas = usable_measurements(epoch);
    let m = meas.len();
    if m < 4 {
        return Err(SolverError::InsufficientSatellites { have: m, need: 4 });
    }
    let mut weights = vec![1.0f64; m];
    let mut fix = gauss_newton(&meas, &weights, config)?;
    for _ in 0..10 {
        let mut new_weights = Vec::with_capacity(m);
        for r in &fix.residuals {
            let w = if r.abs() <= config.robust_delta {
                1.0
            } else {
                config.robust_delta / r.abs()
            };
            new_weights.push(w.max(config.weight_floor));
        }
        let max_change = new_weights
            .iter()
            .zip(&weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        weights = new_weights;
        if max_change < 1e-6 {
            break;
        }
        let mut inner = config.clone();
        inner.initial_position = fix.position;
        fix = gauss_newton(&meas, &weights, &inner)?;
    }
    Ok(fix)
}

/// Kalman filter configuration for [`kf_track`].
#[derive(Debug, Clone)]
pub struct KfConfig {
    /// Acceleration power spectral density, m^2/s^3.
    pub accel_psd: f64,
    /// Base measurement sigma scaled by GDOP, meters.
    pub sigma0: f64,
    /// Clock drift PSD, m^2/s^3.
    pub clock_psd: f64,
}

impl Default for KfConfig {
    fn default() -> Self {
        Self { accel_psd: 1.0, sigma0: 5.0, clock_psd: 1.0 }
    }
}

/// Constant-velocity Kalman filter over an 8-state [pos(3), vel(3), clock
/// bias, clock drift] vector, measuring per-epoch r-WLS fixes with a
/// covariance scaled by gdop^2 sigma0^2. Epochs with unsolvable geometry are
/// coast-predicted and flagged unconverged.
pub fn kf_track(
    trace: &Trace,
    solver_config: &SolverConfig,
    kf_config: &KfConfig,
) -> Result<Vec<PositionFix>, SolverError> {
    if trace.epochs.is_empty() {
        return Err(SolverError::EmptyTrace);
    }

    let mut out = Vec::with_capacity(trace.epochs.len());
    let mut state: Option<(DVector<f64>, DMatrix<f64>, i64)> = None;
    let mut config = solver_config.clone();

    for epoch in &trace.epochs {
        let measured = rwls_solve(epoch, &config).ok();
        if let Some(fix) = &measured {
            config.initial_position = fix.position;
        }

        match (&mut state, &measured) {
            (None, Some(fix)) => {
                // Initialize from the first solvable epoch.
                let mut x = DVector::zeros(8);
                x[0] = fix.position.x;
                x[1] = fix.position.y;
                x[2] = fix.position.z;
                x[6] = fix.clock_bias;
                let mut p = DMatrix::zeros(8, 8);
                let sigma = kf_config.sigma0 * fix.gdop;
                for i in 0..3 {
                    p[(i, i)] = sigma * sigma;
                    p[(i + 3, i + 3)] = 100.0; // unknown velocity
                }
                p[(6, 6)] = sigma * sigma;
                p[(7, 7)] = 100.0;
                state = Some((x, p, epoch.time_ms));
                out.push(fix.clone());
            }
            (None, None) => {
                out.push(PositionFix {
                    position: EcefPosition::new(0.0, 0.0, 0.0),
                    clock_bias: 0.0,
                    gdop: f64::INFINITY,
                    residuals: Vec::new(),
                    iterations: 0,
                    converged: false,
                });
            }
            (Some((x, p, last_t)), measured) => {
                let dt = ((epoch.time_ms - *last_t) as f64 / 1000.0).max(1e-3);
                *last_t = epoch.time_ms;

                // Predict: constant velocity, clock bias + drift.
                let mut f = DMatrix::identity(8, 8);
                for i in 0..3 {
                    f[(i, i + 3)] = dt;
                }
                f[(6, 7)] = dt;
                let mut q = DMatrix::zeros(8, 8);
                let q3 = kf_config.accel_psd * dt.powi(3) / 3.0;
                let q2 = kf_config.accel_psd * dt.powi(2) / 2.0;
                let q1 = kf_config.accel_psd * dt;
                for i in 0..3 {
                    q[(i, i)] = q3;
                    q[(i, i + 3)] = q2;
                    q[(i + 3, i)] = q2;
                    q[(i + 3, i + 3)] = q1;
                }
                q[(6, 6)] = kf_config.clock_psd * dt.powi(3) / 3.0;
                q[(6, 7)] = kf_config.clock_psd * dt.powi(2) / 2.0;
                q[(7, 6)] = q[(6, 7)];
                q[(7, 7)] = kf_config.clock_psd * dt;

                *x = &f * &*x;
                *p = &f * &*p * f.transpose() + q;

                let mut converged = false;
                let mut gdop_out = f64::INFINITY;
                let mut residuals = Vec::new();
                if let Some(fix) = measured {
                    // Update with the 4-vector [pos; clock] measurement.
                    let mut h = DMatrix::zeros(4, 8);
                    for i in 0..3 {
                        h[(i, i)] = 1.0;
                    }
                    h[(3, 6)] = 1.0;
                    let sigma = kf_config.sigma0 * fix.gdop;
                    let r = DMatrix::identity(4, 4) * sigma * sigma;
                    let z = DVector::from_vec(vec![
                        fix.position.x,
                        fix.position.y,
                        fix.position.z,
                        fix.clock_bias,
                    ]);
                    let y = &z - &h * &*x;
                    let s = &h * &*p * h.transpose() + r;
                    if let Some(s_inv) = s.try_inverse() {
                        let k = &*p * h.transpose() * s_inv;
                        *x += &k * &y;
                        *p = (DMatrix::identity(8, 8) - &k * &h) * &*p;
                        converged = true;
                        gdop_out = fix.gdop;
                        residuals = fix.residuals.clone();
                    }
                }
                out.push(PositionFix {
                    position: EcefPosition::new(x[0], x[1], x[2]),
                    clock_bias: x[6],
                    gdop: gdop_out,
                    residuals,
                    iterations: 1,
                    converged,
                });
            }
        }
    }
    Ok(out)
}
