//! Unconstrained slip-velocity MPC with integral action.
//!
//! The plant model is the Euler-discretized wheel/chassis system with the
//! slip velocities as outputs. Augmenting it with the outputs and using the
//! input rate as decision variable gives integral action; the resulting
//! truncated-LQR cost is a plain quadratic in the input-rate sequence, so its
//! minimizer is a fixed linear map of the augmented state and the reference.
//! That map is computed once per configuration and only its first row is kept.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{
    Cholesky, DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, SMatrix, SVector, SymmetricEigen, Vector2, Vector3,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::MpcError;
use crate::plant::{Measurement, SlipMode, VehicleParams, LOW_SPEED_EPS};

pub const STATE_DIM: usize = 5;
pub const OUTPUT_DIM: usize = 2;

/// Largest accepted condition-number bound of the Hessian.
pub const MAX_CONDITION: f64 = 1e12;

pub type AugState = SVector<f64, STATE_DIM>;

/// `x_p(k+1) = A_p x_p + B_p u + B_d d`, `y = C_p x_p` with
/// `x_p = [omega_L, omega_R, v_x]`, `d = [F_xL, F_xR, T_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantModel {
    pub a_p: Matrix3<f64>,
    pub b_p: Vector3<f64>,
    /// Disturbance channel; used by simulators, ignored by the controller design.
    pub b_d: Matrix3<f64>,
    pub c_p: Matrix2x3<f64>,
    pub sample_time: f64,
}

pub fn build_plant_model(params: &VehicleParams) -> PlantModel {
    let ts = params.sample_time;
    let i = params.wheel_inertia;
    let r = params.wheel_radius;
    let m = params.mass;
    let b = ts * params.gear_ratio / (2.0 * i);
    PlantModel {
        a_p: Matrix3::identity(),
        b_p: Vector3::new(b, b, 0.0),
        b_d: Matrix3::new(
            -ts * r / i, 0.0, ts / i,
            0.0, -ts * r / i, -ts / i,
            ts / m, ts / m, 0.0,
        ),
        c_p: Matrix2x3::new(r, 0.0, -1.0, 0.0, r, -1.0),
        sample_time: ts,
    }
}

impl PlantModel {
    pub fn step(&self, x: &Vector3<f64>, u: f64, d: &Vector3<f64>) -> Vector3<f64> {
        self.a_p * x + self.b_p * u + self.b_d * d
    }

    pub fn output(&self, x: &Vector3<f64>) -> Vector2<f64> {
        self.c_p * x
    }
}

/// Input-rate form with state `[dx_p; y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedModel {
    pub a: SMatrix<f64, STATE_DIM, STATE_DIM>,
    pub b: SVector<f64, STATE_DIM>,
    pub c: SMatrix<f64, OUTPUT_DIM, STATE_DIM>,
}

pub fn augment_delta_u(pm: &PlantModel) -> AugmentedModel {
    let mut a = SMatrix::<f64, 5, 5>::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&pm.a_p);
    a.fixed_view_mut::<2, 3>(3, 0).copy_from(&(pm.c_p * pm.a_p));
    a.fixed_view_mut::<2, 2>(3, 3).copy_from(&Matrix2::identity());
    let mut b = SVector::<f64, 5>::zeros();
    b.fixed_rows_mut::<3>(0).copy_from(&pm.b_p);
    b.fixed_rows_mut::<2>(3).copy_from(&(pm.c_p * pm.b_p));
    let mut c = SMatrix::<f64, 2, 5>::zeros();
    c.fixed_view_mut::<2, 2>(0, 3).copy_from(&Matrix2::identity());
    AugmentedModel { a, b, c }
}

impl AugmentedModel {
    pub fn step(&self, x: &AugState, du: f64) -> AugState {
        self.a * x + self.b * du
    }

    pub fn output(&self, x: &AugState) -> Vector2<f64> {
        self.c * x
    }
}

/// Stacked prediction `Y = Phi x + Gamma dU` over `horizon` steps.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub horizon: usize,
    /// `2N x 5`, block row `i` is `C A^(i+1)`.
    pub phi: DMatrix<f64>,
    /// `2N x N`, block `(i, j)` is `C A^(i-j) B` for `i >= j`.
    pub gamma: DMatrix<f64>,
}

pub fn build_prediction(am: &AugmentedModel, horizon: usize) -> Result<Prediction, MpcError> {
    if horizon == 0 {
        return Err(MpcError::EmptyHorizon);
    }
    let n = horizon;
    let mut phi = DMatrix::zeros(OUTPUT_DIM * n, STATE_DIM);
    // markov[k] = C A^k B
    let mut markov = Vec::with_capacity(n);
    let mut a_pow = SMatrix::<f64, 5, 5>::identity();
    for i in 0..n {
        markov.push(am.c * a_pow * am.b);
        a_pow = am.a * a_pow;
        phi.view_mut((OUTPUT_DIM * i, 0), (OUTPUT_DIM, STATE_DIM)).copy_from(&(am.c * a_pow));
    }
    let mut gamma = DMatrix::zeros(OUTPUT_DIM * n, n);
    for i in 0..n {
        for j in 0..=i {
            gamma.view_mut((OUTPUT_DIM * i, j), (OUTPUT_DIM, 1)).copy_from(&markov[i - j]);
        }
    }
    Ok(Prediction { horizon, phi, gamma })
}

/// Terminal weight `p`, stage weight `q`, input-rate weight `r`, horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct CostConfig {
    pub p: Matrix2<f64>,
    pub q: Matrix2<f64>,
    pub r: f64,
    pub horizon: usize,
}

impl CostConfig {
    /// `P = p I`, `Q = q I`.
    pub fn scalar(p: f64, q: f64, r: f64, horizon: usize) -> Self {
        Self { p: Matrix2::identity() * p, q: Matrix2::identity() * q, r, horizon }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::EmptyHorizon);
        }
        if !(self.r > 0.0) {
            return Err(MpcError::NonPositiveInputWeight(self.r));
        }
        for (name, m) in [("P", &self.p), ("Q", &self.q)] {
            let scale = m.abs().max().max(1.0);
            if (m - m.transpose()).abs().max() > 1e-12 * scale {
                return Err(MpcError::NotPsd(name));
            }
            let eig = SymmetricEigen::new(*m);
            if eig.eigenvalues.min() < -1e-12 * scale {
                return Err(MpcError::NotPsd(name));
            }
        }
        Ok(())
    }
}

/// Block-diagonal matrix kept as its blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDiagonal {
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockDiagonal {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        let mut at = 0;
        for b in &self.blocks {
            out.view_mut((at, at), b.shape()).copy_from(b);
            at += b.nrows();
        }
        out
    }

    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace()).sum()
    }

    /// `self * m` without forming the dense matrix.
    pub fn mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.dim(), m.nrows());
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        let mut at = 0;
        for b in &self.blocks {
            let k = b.nrows();
            let prod = b * m.rows(at, k);
            out.rows_mut(at, k).copy_from(&prod);
            at += k;
        }
        out
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        DVector::from_column_slice(self.mul(&m).as_slice())
    }

    /// Smallest eigenvalue over all blocks.
    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| SymmetricEigen::new(b.clone()).eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Output weight `Omega = blockdiag(Q, .., Q, P)` and input-rate weight
/// `Psi = blockdiag(R, .., R)`, `N` blocks each.
pub fn build_cost(cfg: &CostConfig) -> Result<(BlockDiagonal, BlockDiagonal), MpcError> {
    cfg.validate()?;
    let n = cfg.horizon;
    let q = DMatrix::from_column_slice(2, 2, cfg.q.as_slice());
    let p = DMatrix::from_column_slice(2, 2, cfg.p.as_slice());
    let mut omega = vec![q; n];
    omega[n - 1] = p;
    let psi = vec![DMatrix::from_element(1, 1, cfg.r); n];
    Ok((BlockDiagonal { blocks: omega }, BlockDiagonal { blocks: psi }))
}

/// `J = 1/2 dU' G dU + dU' F (Phi x - Ref)` with `G = 2 (Psi + Gamma' Omega Gamma)`
/// and `F = 2 Gamma' Omega`.
#[derive(Clone, Debug)]
pub struct QuadraticForm {
    pub g: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub phi: DMatrix<f64>,
}

impl QuadraticForm {
    pub fn new(pred: &Prediction, omega: &BlockDiagonal, psi: &BlockDiagonal) -> Result<Self, MpcError> {
        check_dims(pred, omega, psi)?;
        let omega_gamma = omega.mul(&pred.gamma);
        let g = hessian(&pred.gamma, &omega_gamma, psi);
        let f = omega_gamma.transpose() * 2.0;
        Ok(Self { g, f, phi: pred.phi.clone() })
    }

    pub fn horizon(&self) -> usize {
        self.g.nrows()
    }

    /// Gradient offset `F (Phi x - Ref)`.
    pub fn linear_term(&self, x: &AugState, reference: &DVector<f64>) -> DVector<f64> {
        let x = DVector::from_column_slice(x.as_slice());
        &self.f * (&self.phi * x - reference)
    }

    pub fn cost(&self, du: &DVector<f64>, x: &AugState, reference: &DVector<f64>) -> f64 {
        0.5 * du.dot(&(&self.g * du)) + du.dot(&self.linear_term(x, reference))
    }

    /// Full minimizer `dU* = -G^-1 F (Phi x - Ref)`.
    pub fn optimal_sequence(&self, x: &AugState, reference: &DVector<f64>) -> Result<DVector<f64>, MpcError> {
        let chol = Cholesky::new(self.g.clone()).ok_or(MpcError::NotPositiveDefinite)?;
        Ok(-chol.solve(&self.linear_term(x, reference)))
    }
}

fn check_dims(pred: &Prediction, omega: &BlockDiagonal, psi: &BlockDiagonal) -> Result<(), MpcError> {
    if omega.dim() != pred.gamma.nrows() || psi.dim() != pred.gamma.ncols() {
        return Err(MpcError::Dimension(format!(
            "Gamma is {}x{}, Omega {}, Psi {}",
            pred.gamma.nrows(),
            pred.gamma.ncols(),
            omega.dim(),
            psi.dim()
        )));
    }
    Ok(())
}

fn hessian(gamma: &DMatrix<f64>, omega_gamma: &DMatrix<f64>, psi: &BlockDiagonal) -> DMatrix<f64> {
    let mut g = gamma.transpose() * omega_gamma;
    g += psi.to_dense();
    g *= 2.0;
    // Gamma' Omega Gamma is symmetric up to rounding
    let gt = g.transpose();
    (g + gt) * 0.5
}

/// First row of the analytical solution: `du_0 = -K_x x + K_r Ref`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcGains {
    pub horizon: usize,
    pub k_x: [f64; STATE_DIM],
    /// Length `2N`, interleaved `[left, right]` per predicted step.
    pub k_r: Vec<f64>,
    /// `K_r` summed per output, for a reference held constant over the horizon.
    pub k_r_sum: [f64; OUTPUT_DIM],
    /// Upper bound on the condition number of `G` used by the guard.
    pub condition_bound: f64,
}

/// Precomputes the feedback and feedforward rows of the analytical solution.
///
/// Only `G^-1 e_0` is needed, obtained from one Cholesky solve. The
/// condition number is bounded above by the largest absolute row sum of `G`
/// over `2 lambda_min(Psi)`, a lower bound on the smallest eigenvalue of `G`.
pub fn compute_gains(
    phi: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    omega: &BlockDiagonal,
    psi: &BlockDiagonal,
) -> Result<MpcGains, MpcError> {
    let n = gamma.ncols();
    let pred = Prediction { horizon: n, phi: phi.clone(), gamma: gamma.clone() };
    check_dims(&pred, omega, psi)?;
    let omega_gamma = omega.mul(gamma);
    let g = hessian(gamma, &omega_gamma, psi);

    let lambda_min = 2.0 * psi.min_eigenvalue();
    if !(lambda_min > 0.0) {
        return Err(MpcError::NonPositiveInputWeight(lambda_min / 2.0));
    }
    let max_row_sum = g.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max);
    let condition_bound = max_row_sum / lambda_min;
    if condition_bound > MAX_CONDITION || !condition_bound.is_finite() {
        return Err(MpcError::IllConditioned { bound: condition_bound, limit: MAX_CONDITION });
    }

    let chol = Cholesky::new(g).ok_or(MpcError::NotPositiveDefinite)?;
    let mut e0 = DVector::zeros(n);
    e0[0] = 1.0;
    let z = chol.solve(&e0);
    // K_r = z' F = 2 (Omega Gamma z)'
    let k_r = (&omega_gamma * z) * 2.0;
    let k_x = phi.tr_mul(&k_r);

    let mut k_r_sum = [0.0; OUTPUT_DIM];
    for (i, v) in k_r.iter().enumerate() {
        k_r_sum[i % OUTPUT_DIM] += v;
    }
    let mut kx = [0.0; STATE_DIM];
    kx.copy_from_slice(k_x.as_slice());
    Ok(MpcGains { horizon: n, k_x: kx, k_r: k_r.as_slice().to_vec(), k_r_sum, condition_bound })
}

/// Builds model, prediction, weights and gains for a vehicle and cost.
pub fn synthesize(params: &VehicleParams, cost: &CostConfig) -> Result<MpcGains, MpcError> {
    let am = augment_delta_u(&build_plant_model(params));
    let pred = build_prediction(&am, cost.horizon)?;
    let (omega, psi) = build_cost(cost)?;
    compute_gains(&pred.phi, &pred.gamma, &omega, &psi)
}

impl MpcGains {
    /// First optimal input rate for a full stacked reference.
    pub fn delta_u(&self, x: &AugState, reference: &[f64]) -> f64 {
        assert_eq!(reference.len(), self.k_r.len(), "reference length must be 2N");
        let fb: f64 = self.k_x.iter().zip(x.iter()).map(|(k, v)| k * v).sum();
        let ff: f64 = self.k_r.iter().zip(reference).map(|(k, r)| k * r).sum();
        ff - fb
    }

    /// First optimal input rate for a reference held constant over the horizon.
    pub fn delta_u_constant(&self, x: &AugState, reference: &Vector2<f64>) -> f64 {
        let fb: f64 = self.k_x.iter().zip(x.iter()).map(|(k, v)| k * v).sum();
        self.k_r_sum[0] * reference[0] + self.k_r_sum[1] * reference[1] - fb
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorqueLimits {
    pub min: f64,
    pub max: f64,
}

impl TorqueLimits {
    pub fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.min, self.max)
    }
}

/// One receding-horizon step: `u = sat(u_prev + du_0)`.
pub fn mpc_step(gains: &MpcGains, x: &AugState, reference: &[f64], u_prev: f64, limits: &TorqueLimits) -> f64 {
    limits.clamp(u_prev + gains.delta_u(x, reference))
}

/// Slip-velocity reference for a slip-ratio reference, inverting the braking
/// or driving slip definition. Uses the low-speed floor below
/// [`LOW_SPEED_EPS`].
pub fn reference_from_kappa(kappa_ref: f64, v_x: f64, omega: f64, r_w: f64, mode: SlipMode) -> f64 {
    let denom = match mode {
        SlipMode::Braking => v_x,
        SlipMode::Driving => omega * r_w,
    };
    kappa_ref * denom.max(LOW_SPEED_EPS)
}

/// Stateful wrapper: assembles the augmented state from successive
/// measurements and keeps the previous (saturated) input.
#[derive(Clone, Debug)]
pub struct MpcController {
    gains: Arc<MpcGains>,
    model: PlantModel,
    limits: TorqueLimits,
    prev: Option<Vector3<f64>>,
    u_prev: f64,
}

impl MpcController {
    pub fn new(gains: Arc<MpcGains>, params: &VehicleParams, limits: TorqueLimits) -> Self {
        Self { gains, model: build_plant_model(params), limits, prev: None, u_prev: 0.0 }
    }

    pub fn gains(&self) -> &MpcGains {
        &self.gains
    }

    /// Sets the previous input, e.g. to the driver torque on activation.
    pub fn reset_input(&mut self, u: f64) {
        self.u_prev = self.limits.clamp(u);
    }

    /// Augmented state `[x_p(k) - x_p(k-1); C_p x_p(k)]` from a measurement,
    /// recording it as the new previous state.
    pub fn observe(&mut self, m: &Measurement) -> AugState {
        let xp = Vector3::new(m.omega_l, m.omega_r, m.v_x);
        let dx = self.prev.map(|p| xp - p).unwrap_or_else(Vector3::zeros);
        self.prev = Some(xp);
        let y = self.model.output(&xp);
        AugState::new(dx[0], dx[1], dx[2], y[0], y[1])
    }

    /// Control for the slip-velocity references of both wheels, held over
    /// the horizon.
    pub fn step(&mut self, m: &Measurement, reference: Vector2<f64>) -> f64 {
        let x = self.observe(m);
        let u = self.limits.clamp(self.u_prev + self.gains.delta_u_constant(&x, &reference));
        self.u_prev = u;
        u
    }
}

/// Stable key for a gain configuration.
pub fn gain_cache_key(params: &VehicleParams, cost: &CostConfig) -> String {
    let mut h = Sha256::new();
    for v in [params.sample_time, params.gear_ratio, params.wheel_inertia, params.wheel_radius, params.mass, cost.r] {
        h.update(v.to_le_bytes());
    }
    for v in cost.p.iter().chain(cost.q.iter()) {
        h.update(v.to_le_bytes());
    }
    h.update((cost.horizon as u64).to_le_bytes());
    hex::encode(h.finalize())
}

const CACHE_MAGIC: &[u8; 8] = b"SLIPGN01";

/// Binary gain cache: magic, horizon (u64), condition bound, `K_x`, `K_r`,
/// all little endian.
pub fn write_gains(path: &Path, gains: &MpcGains) -> Result<(), MpcError> {
    let mut buf = Vec::with_capacity(32 + 8 * (STATE_DIM + gains.k_r.len()));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(gains.horizon as u64).to_le_bytes());
    buf.extend_from_slice(&gains.condition_bound.to_le_bytes());
    for v in gains.k_x.iter().chain(gains.k_r.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_gains(path: &Path) -> Result<MpcGains, MpcError> {
    let bytes = std::fs::read(path)?;
    let bad = |why: &str| MpcError::Cache(format!("{}: {why}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("bad header"));
    }
    let word = |i: usize| -> [u8; 8] { bytes[i..i + 8].try_into().unwrap() };
    let horizon = u64::from_le_bytes(word(8)) as usize;
    let condition_bound = f64::from_le_bytes(word(16));
    let count = STATE_DIM + OUTPUT_DIM * horizon;
    if bytes.len() != 24 + 8 * count {
        return Err(bad("truncated"));
    }
    let values: Vec<f64> = (0..count).map(|i| f64::from_le_bytes(word(24 + 8 * i))).collect();
    let mut k_x = [0.0; STATE_DIM];
    k_x.copy_from_slice(&values[..STATE_DIM]);
    let k_r = values[STATE_DIM..].to_vec();
    let mut k_r_sum = [0.0; OUTPUT_DIM];
    for (i, v) in k_r.iter().enumerate() {
        k_r_sum[i % OUTPUT_DIM] += v;
    }
    Ok(MpcGains { horizon, k_x, k_r, k_r_sum, condition_bound })
}

/// Loads gains from `dir` when cached, otherwise synthesizes and stores them.
pub fn cached_gains(dir: &Path, params: &VehicleParams, cost: &CostConfig) -> Result<MpcGains, MpcError> {
    let path: PathBuf = dir.join(format!("gains-{}.bin", gain_cache_key(params, cost)));
    if path.exists() {
        if let Ok(g) = read_gains(&path) {
            if g.horizon == cost.horizon {
                return Ok(g);
            }
        }
    }
    let gains = synthesize(params, cost)?;
    std::fs::create_dir_all(dir)?;
    write_gains(&path, &gains)?;
    Ok(gains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_state(rng: &mut ChaCha8Rng) -> AugState {
        AugState::from_fn(|_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn plant_model_entries() {
        let p = VehicleParams { gear_ratio: 3.0, wheel_inertia: 1.0, sample_time: 0.005, ..Default::default() };
        let pm = build_plant_model(&p);
        assert!((pm.b_p[0] - 0.0075).abs() < 1e-15);
        assert!((pm.b_p[1] - 0.0075).abs() < 1e-15);
        assert_eq!(pm.b_p[2], 0.0);
        assert_eq!(pm.a_p, Matrix3::identity());
        let x = Vector3::new(20.0 / p.wheel_radius, 20.0 / p.wheel_radius, 20.0);
        assert!(pm.output(&x).norm() < 1e-12);
    }

    #[test]
    fn augmented_structure() {
        let pm = build_plant_model(&VehicleParams::default());
        let am = augment_delta_u(&pm);
        assert_eq!(am.a.fixed_view::<3, 3>(0, 0).into_owned(), pm.a_p);
        let x = AugState::new(1.0, -2.0, 3.0, 0.4, -0.7);
        assert_eq!(am.output(&x), Vector2::new(0.4, -0.7));
    }

    #[test]
    fn augmented_step_matches_plant() {
        let pm = build_plant_model(&VehicleParams::default());
        let am = augment_delta_u(&pm);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x_prev = Vector3::from_fn(|_, _| rng.random_range(0.0..100.0));
            let u_prev = rng.random_range(-200.0..200.0);
            let u = rng.random_range(-200.0..200.0);
            let x = pm.step(&x_prev, u_prev, &Vector3::zeros());
            let x_next = pm.step(&x, u, &Vector3::zeros());
            let dx = x - x_prev;
            let y = pm.output(&x);
            let aug = AugState::new(dx[0], dx[1], dx[2], y[0], y[1]);
            let y_next = am.output(&am.step(&aug, u - u_prev));
            assert!((y_next - pm.output(&x_next)).norm() < 1e-12);
        }
    }

    #[test]
    fn horizon_one_prediction() {
        let am = augment_delta_u(&build_plant_model(&VehicleParams::default()));
        let pred = build_prediction(&am, 1).unwrap();
        assert_eq!(pred.phi, DMatrix::from_column_slice(2, 5, (am.c * am.a).as_slice()));
        assert_eq!(pred.gamma, DMatrix::from_column_slice(2, 1, (am.c * am.b).as_slice()));
        assert!(build_prediction(&am, 0).is_err());
    }

    #[test]
    fn gamma_is_block_lower_triangular() {
        let am = augment_delta_u(&build_plant_model(&VehicleParams::default()));
        let pred = build_prediction(&am, 6).unwrap();
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert_eq!(pred.gamma[(2 * i, j)], 0.0);
                assert_eq!(pred.gamma[(2 * i + 1, j)], 0.0);
            }
        }
    }

    #[test]
    fn cost_blocks() {
        let cfg = CostConfig::scalar(3.0, 2.0, 1.0, 1);
        let (omega, psi) = build_cost(&cfg).unwrap();
        assert_eq!(omega.to_dense(), DMatrix::identity(2, 2) * 3.0);
        assert_eq!(psi.to_dense(), DMatrix::identity(1, 1));

        let cfg = CostConfig::scalar(2.0, 2.0, 1.0, 4);
        let (omega, _) = build_cost(&cfg).unwrap();
        assert_eq!(omega.to_dense(), DMatrix::identity(8, 8) * 2.0);

        let cfg = CostConfig { p: Matrix2::new(5.0, 1.0, 1.0, 2.0), q: Matrix2::new(1.0, 0.5, 0.5, 3.0), r: 1.0, horizon: 7 };
        let (omega, _) = build_cost(&cfg).unwrap();
        assert!((omega.trace() - (6.0 * 4.0 + 7.0)).abs() < 1e-12);
        assert!((omega.to_dense().trace() - omega.trace()).abs() < 1e-12);
    }

    #[test]
    fn invalid_costs_rejected() {
        assert!(matches!(build_cost(&CostConfig::scalar(1.0, 1.0, 0.0, 3)), Err(MpcError::NonPositiveInputWeight(_))));
        assert!(matches!(build_cost(&CostConfig::scalar(-1.0, 1.0, 1.0, 3)), Err(MpcError::NotPsd("P"))));
        assert!(matches!(build_cost(&CostConfig::scalar(1.0, 1.0, 1.0, 0)), Err(MpcError::EmptyHorizon)));
    }

    #[test]
    fn zero_tracking_weights_give_zero_input() {
        let am = augment_delta_u(&build_plant_model(&VehicleParams::default()));
        let pred = build_prediction(&am, 5).unwrap();
        let (omega, psi) = build_cost(&CostConfig::scalar(0.0, 0.0, 1.0, 5)).unwrap();
        let form = QuadraticForm::new(&pred, &omega, &psi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_state(&mut rng);
        let reference = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(form.optimal_sequence(&x, &reference).unwrap().norm(), 0.0);
    }

    #[test]
    fn on_reference_means_no_action() {
        let am = augment_delta_u(&build_plant_model(&VehicleParams::default()));
        let pred = build_prediction(&am, 5).unwrap();
        let (omega, psi) = build_cost(&CostConfig::scalar(250.0, 250.0, 1.0, 5)).unwrap();
        let form = QuadraticForm::new(&pred, &omega, &psi).unwrap();
        let x = AugState::new(0.3, 0.3, 0.075, 0.2, -0.1);
        let x_dv = DVector::from_column_slice(x.as_slice());
        let reference = &pred.phi * x_dv;
        assert!(form.optimal_sequence(&x, &reference).unwrap().norm() < 1e-9);
    }

    #[test]
    fn gains_match_full_solution() {
        let params = VehicleParams::default();
        let am = augment_delta_u(&build_plant_model(&params));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 3, 8, 20] {
            let pred = build_prediction(&am, n).unwrap();
            let (omega, psi) = build_cost(&CostConfig::scalar(40.0, 10.0, 1.0, n)).unwrap();
            let form = QuadraticForm::new(&pred, &omega, &psi).unwrap();
            let gains = compute_gains(&pred.phi, &pred.gamma, &omega, &psi).unwrap();
            let x = rand_state(&mut rng);
            let reference = DVector::from_fn(2 * n, |_, _| rng.random_range(-1.0..1.0));
            let full = form.optimal_sequence(&x, &reference).unwrap();
            let du = gains.delta_u(&x, reference.as_slice());
            assert!((du - full[0]).abs() <= 1e-8 * full[0].abs().max(1.0), "{n}: {du} vs {}", full[0]);
        }
    }

    #[test]
    fn hessian_is_symmetric_positive_definite() {
        let am = augment_delta_u(&build_plant_model(&VehicleParams::default()));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(p, q, r, n) in &[(1.0, 1.0, 1.0, 1), (250.0, 250.0, 1.0, 10), (1e4, 1.0, 0.1, 30), (0.0, 0.0, 2.0, 4)] {
            let pred = build_prediction(&am, n).unwrap();
            let (omega, psi) = build_cost(&CostConfig::scalar(p, q, r, n)).unwrap();
            let form = QuadraticForm::new(&pred, &omega, &psi).unwrap();
            assert_eq!(form.g, form.g.transpose());
            for _ in 0..10 {
                let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                assert!(v.dot(&(&form.g * &v)) > 0.0);
            }
        }
    }

    #[test]
    fn ill_conditioned_configuration_rejected() {
        let err = synthesize(&VehicleParams::default(), &CostConfig::scalar(1e6, 1e6, 1e-6, 400)).unwrap_err();
        assert!(matches!(err, MpcError::IllConditioned { .. }), "{err}");
    }

    #[test]
    fn step_without_error_keeps_input() {
        let gains = synthesize(&VehicleParams::default(), &CostConfig::scalar(250.0, 250.0, 1.0, 10)).unwrap();
        let limits = TorqueLimits { min: -250.0, max: 250.0 };
        let u = mpc_step(&gains, &AugState::zeros(), &[0.0; 20], 42.0, &limits);
        assert_eq!(u, 42.0);
        assert_eq!(mpc_step(&gains, &AugState::new(0.0, 0.0, 0.0, -50.0, -50.0), &[0.0; 20], 240.0, &limits), 250.0);
    }

    #[test]
    fn slip_velocity_references() {
        assert_eq!(reference_from_kappa(0.0, 30.0, 100.0, 0.3, SlipMode::Driving), 0.0);
        assert!((reference_from_kappa(-0.05, 40.0, 100.0, 0.3, SlipMode::Braking) + 2.0).abs() < 1e-12);
        assert!((reference_from_kappa(0.044, 40.0, 50.0 / 0.25, 0.25, SlipMode::Driving) - 2.2).abs() < 1e-12);
        assert!((reference_from_kappa(-0.1, 0.1, 0.0, 0.3, SlipMode::Braking) + 0.1 * LOW_SPEED_EPS).abs() < 1e-12);
    }

    #[test]
    fn gain_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = VehicleParams::default();
        let cost = CostConfig::scalar(250.0, 250.0, 1.0, 25);
        let a = cached_gains(dir.path(), &params, &cost).unwrap();
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let b = cached_gains(dir.path(), &params, &cost).unwrap();
        assert_eq!(a, b);
        assert_ne!(gain_cache_key(&params, &cost), gain_cache_key(&params, &CostConfig::scalar(250.0, 250.0, 1.0, 26)));
    }
}
