//! Reduced magic-formula longitudinal tire curve.

use serde::{Deserialize, Serialize};

/// Grid resolution used by [`optimal_slip`].
pub const OPTIMAL_SLIP_GRID_STEP: f64 = 1e-4;

/// Upper end of the slip range searched by [`optimal_slip`].
pub const OPTIMAL_SLIP_SEARCH_MAX: f64 = 0.2;

/// Longitudinal force curve `F_x = mu * D * F_z * sin(C * atan(B k - E (B k - atan(B k))))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TireModel {
    pub stiffness_factor: f64,
    pub shape_factor: f64,
    pub peak_factor: f64,
    pub curvature_factor: f64,
    #[serde(default = "one")]
    pub friction_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TireModel {
    /// Reference tire: peak force at 4.4 % slip.
    fn default() -> Self {
        Self::calibrated(1.65, 1.0, 0.0, 0.044)
    }
}

impl TireModel {
    /// Builds a tire whose force peak sits at `optimal_slip`, solving for the
    /// stiffness factor with the shape, peak and curvature factors fixed.
    ///
    /// The peak of the curve is where the sine argument reaches pi/2, i.e.
    /// `x - E (x - atan x) = tan(pi / (2C))` with `x = B k*`. The left side is
    /// increasing in `x` for `E < 1`, so a bisection finds `x`.
    pub fn calibrated(shape: f64, peak: f64, curvature: f64, optimal_slip: f64) -> Self {
        assert!(shape > 1.0, "shape factor must exceed 1 for the curve to have a peak");
        assert!(curvature < 1.0, "curvature factor must be below 1");
        assert!(optimal_slip > 0.0);
        let target = (std::f64::consts::FRAC_PI_2 / shape).tan();
        let lhs = |x: f64| x - curvature * (x - x.atan());
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while lhs(hi) < target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if lhs(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self {
            stiffness_factor: 0.5 * (lo + hi) / optimal_slip,
            shape_factor: shape,
            peak_factor: peak,
            curvature_factor: curvature,
            friction_scale: 1.0,
        }
    }

    pub fn with_friction(self, mu: f64) -> Self {
        Self { friction_scale: mu, ..self }
    }

    /// Normalized curve `F_x / (mu D F_z)`, odd in slip.
    pub fn shape_curve(&self, kappa: f64) -> f64 {
        let bk = self.stiffness_factor * kappa;
        let arg = bk - self.curvature_factor * (bk - bk.atan());
        (self.shape_factor * arg.atan()).sin()
    }

    /// Longitudinal force for slip `kappa` under vertical load `fz` (N).
    pub fn force(&self, kappa: f64, fz: f64) -> f64 {
        self.friction_scale * self.peak_factor * fz.max(0.0) * self.shape_curve(kappa)
    }
}

/// Longitudinal tire force. Total function; negative loads are treated as zero.
pub fn tire_fx(tire: &TireModel, kappa: f64, fz: f64) -> f64 {
    tire.force(kappa, fz)
}

/// Slip ratio of peak force found by dense grid search over
/// `[0, OPTIMAL_SLIP_SEARCH_MAX]`. `None` for a flat curve.
///
/// This is the ground truth for estimator checks; controllers never see it.
pub fn optimal_slip(tire: &TireModel, fz: f64) -> Option<f64> {
    optimal_slip_in(tire, fz, OPTIMAL_SLIP_SEARCH_MAX)
}

pub fn optimal_slip_in(tire: &TireModel, fz: f64, kappa_max: f64) -> Option<f64> {
    if tire.peak_factor == 0.0 || tire.friction_scale == 0.0 || fz <= 0.0 {
        return None;
    }
    let steps = (kappa_max / OPTIMAL_SLIP_GRID_STEP).round() as usize;
    let mut best = (0.0, tire.force(0.0, fz));
    for i in 1..=steps {
        let kappa = i as f64 * OPTIMAL_SLIP_GRID_STEP;
        let f = tire.force(kappa, fz);
        if f > best.1 {
            best = (kappa, f);
        }
    }
    if best.1 <= 0.0 {
        None
    } else {
        Some(best.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_slip_gives_zero_force() {
        let tire = TireModel::default();
        for fz in [0.0, 100.0, 2500.0] {
            assert_eq!(tire_fx(&tire, 0.0, fz), 0.0);
        }
    }

    #[test]
    fn sampled_symmetry() {
        let tire = TireModel::default();
        for i in 1..=20 {
            let k = 0.01 * i as f64;
            assert_eq!(tire_fx(&tire, k, 1000.0) + tire_fx(&tire, -k, 1000.0), 0.0);
        }
    }

    #[test]
    fn reference_tire_peaks_at_4_4_percent() {
        let k = optimal_slip(&TireModel::default(), 1000.0).unwrap();
        assert!((k - 0.044).abs() <= 1e-3, "{k}");
    }

    #[test]
    fn calibration_hits_other_targets() {
        for (e, target) in [(0.0, 0.06), (0.3, 0.05), (-0.5, 0.08)] {
            let tire = TireModel::calibrated(1.65, 1.0, e, target);
            let k = optimal_slip(&tire, 800.0).unwrap();
            assert!((k - target).abs() <= 1e-4, "{e} {target} {k}");
        }
    }

    #[test]
    fn friction_scaling_keeps_peak_location() {
        let tire = TireModel::default();
        let a = optimal_slip(&tire, 1000.0).unwrap();
        let b = optimal_slip(&tire.with_friction(0.5), 1000.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flat_tire_has_no_optimum() {
        let tire = TireModel { peak_factor: 0.0, ..TireModel::default() };
        assert_eq!(optimal_slip(&tire, 1000.0), None);
    }

    #[test]
    fn single_peak_on_search_range() {
        let tire = TireModel::default();
        let n = (OPTIMAL_SLIP_SEARCH_MAX / OPTIMAL_SLIP_GRID_STEP) as usize;
        let f: Vec<f64> = (0..=n).map(|i| tire.force(i as f64 * 1e-4, 1000.0)).collect();
        let local_maxima = f.windows(3).filter(|w| w[1] > w[0] && w[1] >= w[2]).count();
        assert_eq!(local_maxima, 1);
    }

    proptest! {
        #[test]
        fn force_is_odd(k in -1.0f64..1.0, fz in 0.0f64..5000.0, mu in 0.1f64..1.5) {
            let tire = TireModel::default().with_friction(mu);
            prop_assert_eq!(tire.force(k, fz), -tire.force(-k, fz));
        }
    }
}
