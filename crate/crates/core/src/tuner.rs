//! Preference-based search over controller hyper-parameters.
//!
//! The tuner never sees a numeric objective. Each iteration shows the user
//! two evaluated points (the incumbent and a new proposal) and records which
//! one they preferred and whether each looked stable. A radial-basis
//! surrogate is fit so that preferred points get lower values; the next
//! proposal minimizes the normalized surrogate minus an inverse-distance
//! exploration bonus plus a penalty on predicted instability.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TunerError;

pub const SESSION_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    /// Search in log space.
    #[serde(default)]
    pub log: bool,
    #[serde(default)]
    pub integer: bool,
}

impl Dimension {
    pub fn new(name: &str, lo: f64, hi: f64, log: bool, integer: bool) -> Self {
        Self { name: name.to_string(), lo, hi, log, integer }
    }

    fn normalize(&self, x: f64) -> f64 {
        if self.log {
            (x.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())
        } else {
            (x - self.lo) / (self.hi - self.lo)
        }
    }

    fn denormalize(&self, z: f64) -> f64 {
        let z = z.clamp(0.0, 1.0);
        let x = if self.log {
            (self.lo.ln() + z * (self.hi.ln() - self.lo.ln())).exp()
        } else {
            self.lo + z * (self.hi - self.lo)
        };
        let x = if self.integer { x.round() } else { x };
        x.clamp(self.lo, self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

impl Default for SearchSpace {
    /// `p, q` in `[1, 1e4]` and `N` in `[10, 2000]`, all log scaled.
    fn default() -> Self {
        Self::mpc((1.0, 1e4), (1.0, 1e4), (10.0, 2000.0))
    }
}

impl SearchSpace {
    pub fn mpc(p: (f64, f64), q: (f64, f64), horizon: (f64, f64)) -> Self {
        Self {
            dims: vec![
                Dimension::new("p", p.0, p.1, true, false),
                Dimension::new("q", q.0, q.1, true, false),
                Dimension::new("N", horizon.0, horizon.1, true, true),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), TunerError> {
        if self.dims.is_empty() {
            return Err(TunerError::Bounds { name: String::new(), reason: "no dimensions".into() });
        }
        for d in &self.dims {
            let bad = |reason: &str| Err(TunerError::Bounds { name: d.name.clone(), reason: reason.into() });
            if !(d.lo.is_finite() && d.hi.is_finite()) {
                return bad("bounds must be finite");
            }
            if !(d.lo < d.hi) {
                return bad("lower bound must be below upper bound");
            }
            if d.log && d.lo <= 0.0 {
                return bad("log-scaled bounds must be positive");
            }
            if d.integer && (d.lo < 1.0 || d.hi.floor() < d.lo.ceil()) {
                return bad("integer range must contain a value of at least 1");
            }
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(x).map(|(d, v)| d.normalize(*v)).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(z).map(|(d, v)| d.denormalize(*v)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims.len()
            && self.dims.iter().zip(x).all(|(d, v)| *v >= d.lo && *v <= d.hi && (!d.integer || v.fract() == 0.0))
    }
}

/// One candidate, in the raw units of the search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterPoint(pub Vec<f64>);

impl ParameterPoint {
    pub fn p(&self) -> f64 {
        self.0[0]
    }
    pub fn q(&self) -> f64 {
        self.0[1]
    }
    pub fn horizon(&self) -> usize {
        self.0[2] as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    APreferred,
    BPreferred,
    Tie,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    /// Indices into the session's evaluated points.
    pub pair: (usize, usize),
    pub outcome: Outcome,
    pub stable_a: bool,
    pub stable_b: bool,
}

impl PreferenceRecord {
    /// `(winner, loser)` for strict outcomes.
    pub fn winner_loser(&self) -> Option<(usize, usize)> {
        let (a, b) = self.pair;
        match self.outcome {
            Outcome::APreferred => Some((a, b)),
            Outcome::BPreferred => Some((b, a)),
            Outcome::Tie => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerConfig {
    pub seed: u64,
    /// Candidate grid points per dimension.
    pub grid_points: usize,
    pub exploration_weight: f64,
    pub infeasibility_penalty: f64,
    /// Required surrogate gap between a preferred and a rejected point.
    pub margin: f64,
    pub regularization: f64,
    /// Weight of the squared-hinge preference terms.
    pub hinge_weight: f64,
    /// Candidates closer than this (unit box) to an evaluated point are skipped.
    pub duplicate_tolerance: f64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_points: 21,
            exploration_weight: 0.5,
            infeasibility_penalty: 2.0,
            margin: 0.01,
            regularization: 1e-6,
            hinge_weight: 1e3,
            duplicate_tolerance: 1e-9,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<(), TunerError> {
        let bad = |name: &str, reason: &str| Err(TunerError::Bounds { name: name.into(), reason: reason.into() });
        if self.grid_points < 2 {
            return bad("grid_points", "need at least 2 points per dimension");
        }
        if !(self.margin > 0.0 && self.regularization > 0.0 && self.hinge_weight > 0.0) {
            return bad("margin", "margin, regularization and hinge weight must be positive");
        }
        if self.exploration_weight < 0.0 || self.infeasibility_penalty < 0.0 || self.duplicate_tolerance < 0.0 {
            return bad("exploration_weight", "weights must be non-negative");
        }
        Ok(())
    }
}

fn thin_plate(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Thin-plate radial-basis surrogate over unit-box coordinates. Lower is
/// better.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Session point index of each center.
    pub point_index: Vec<usize>,
}

impl Surrogate {
    pub fn value(&self, z: &[f64]) -> f64 {
        self.centers.iter().zip(&self.weights).map(|(c, w)| w * thin_plate(distance(c, z))).sum()
    }

    /// Fits weights to the preference constraints by minimizing
    /// `lambda/2 |w|^2 + c/2 sum max(0, g_k(w))^2` with a damped Newton
    /// iteration on the active set.
    fn fit(centers: Vec<Vec<f64>>, point_index: Vec<usize>, constraints: &[(DVector<f64>, f64)], cfg: &TunerConfig) -> Self {
        let n = centers.len();
        let lambda = cfg.regularization;
        let c = cfg.hinge_weight;
        let loss = |w: &DVector<f64>| {
            0.5 * lambda * w.norm_squared() + 0.5 * c * constraints.iter().map(|(a, b)| (a.dot(w) + b).max(0.0).powi(2)).sum::<f64>()
        };
        let mut w = DVector::zeros(n);
        for _ in 0..200 {
            let mut grad = lambda * &w;
            let mut hess = DMatrix::identity(n, n) * lambda;
            for (a, b) in constraints {
                let g = a.dot(&w) + b;
                if g > 0.0 {
                    grad.axpy(c * g, a, 1.0);
                    hess.ger(c, a, a, 1.0);
                }
            }
            if grad.norm() <= 1e-14 * (1.0 + c) {
                break;
            }
            let Some(chol) = hess.cholesky() else { break };
            let step = chol.solve(&(-&grad));
            let f0 = loss(&w);
            let slope = grad.dot(&step);
            let mut t = 1.0;
            let mut next = &w + &step;
            while loss(&next) > f0 + 1e-4 * t * slope && t > 1e-12 {
                t *= 0.5;
                next = &w + t * &step;
            }
            let moved = (t * step.norm()) <= 1e-15 * (1.0 + w.norm());
            w = next;
            if moved {
                break;
            }
        }
        Self { centers, weights: w.iter().copied().collect(), point_index }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSoFar {
    pub index: usize,
    pub point: ParameterPoint,
    /// Winners excluded because they were judged unstable.
    pub unstable_excluded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningSession {
    pub schema_version: u32,
    pub space: SearchSpace,
    pub config: TunerConfig,
    pub points: Vec<ParameterPoint>,
    /// Latest stability judgment per point; `None` until compared.
    pub stable: Vec<Option<bool>>,
    pub records: Vec<PreferenceRecord>,
    pub pending: Option<(usize, usize)>,
    pub converged: bool,
}

impl TuningSession {
    /// Starts a session with two space-filling seed points as the first pair.
    pub fn new(space: SearchSpace, config: TunerConfig) -> Result<Self, TunerError> {
        space.validate()?;
        config.validate()?;
        let mut s = Self {
            schema_version: SESSION_SCHEMA_VERSION,
            space,
            config,
            points: Vec::new(),
            stable: Vec::new(),
            records: Vec::new(),
            pending: None,
            converged: false,
        };
        let seeds = s.seed_design(2);
        for z in seeds {
            let x = s.space.denormalize(&z);
            s.push_point(ParameterPoint(x));
        }
        s.pending = Some((0, 1));
        Ok(s)
    }

    /// Latin hypercube in the unit box.
    fn seed_design(&self, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let dims = self.space.dims.len();
        let mut out = vec![vec![0.0; dims]; n];
        for d in 0..dims {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(&mut rng);
            for (row, s) in out.iter_mut().zip(strata) {
                row[d] = (s as f64 + rng.random_range(0.0..1.0)) / n as f64;
            }
        }
        // distinct raw points even when rounding collapses a dimension
        if n == 2 && self.space.denormalize(&out[0]) == self.space.denormalize(&out[1]) {
            out[0] = vec![0.25; dims];
            out[1] = vec![0.75; dims];
        }
        out
    }

    fn push_point(&mut self, p: ParameterPoint) -> usize {
        self.points.push(p);
        self.stable.push(None);
        self.points.len() - 1
    }

    pub fn unit(&self, i: usize) -> Vec<f64> {
        self.space.normalize(&self.points[i].0)
    }

    pub fn pending_pair(&self) -> Option<(usize, usize)> {
        self.pending
    }

    /// Stores a judgment for the pending pair, refits and queues the next pair.
    pub fn record_preference(&mut self, rec: PreferenceRecord) -> Result<Option<(usize, usize)>, TunerError> {
        let (a, b) = rec.pair;
        if a >= self.points.len() || b >= self.points.len() || a == b {
            return Err(TunerError::UnknownPoint(a, b));
        }
        if self.records.iter().any(|r| r.pair == (a, b) || r.pair == (b, a)) {
            return Err(TunerError::DuplicatePreference(a, b));
        }
        if self.converged {
            return Err(TunerError::Converged);
        }
        if self.pending != Some((a, b)) {
            return Err(TunerError::NotPending(a, b));
        }
        self.records.push(rec);
        self.stable[a] = Some(rec.stable_a);
        self.stable[b] = Some(rec.stable_b);
        self.advance();
        Ok(self.pending)
    }

    fn advance(&mut self) {
        let incumbent = self.incumbent();
        match self.propose_next() {
            Some(p) => {
                let new = self.push_point(p);
                self.pending = Some((incumbent, new));
            }
            None => {
                self.pending = None;
                self.converged = true;
            }
        }
    }

    /// Ends the session early, e.g. when an evaluation budget is spent. A
    /// proposal that was queued but never compared is dropped.
    pub fn stop(&mut self) {
        if let Some((_, new)) = self.pending.take() {
            if new + 1 == self.points.len() && self.stable[new].is_none() && self.records.iter().all(|r| r.pair.0 != new && r.pair.1 != new) {
                self.points.pop();
                self.stable.pop();
            }
        }
        self.converged = true;
    }

    /// Comparator for the next pair: the best stable point, or the lowest
    /// surrogate value when nothing stable has been seen.
    fn incumbent(&self) -> usize {
        match self.best_so_far() {
            Ok(Some(b)) => b.index,
            _ => {
                let s = self.surrogate();
                s.point_index
                    .iter()
                    .zip(&s.centers)
                    .min_by(|x, y| s.value(x.1).total_cmp(&s.value(y.1)))
                    .map(|(i, _)| *i)
                    .unwrap_or(0)
            }
        }
    }

    /// Surrogate fit to all recorded preferences. Centers are the points that
    /// took part in at least one comparison.
    pub fn surrogate(&self) -> Surrogate {
        let mut index: Vec<usize> = self.records.iter().flat_map(|r| [r.pair.0, r.pair.1]).collect();
        index.sort_unstable();
        index.dedup();
        let centers: Vec<Vec<f64>> = index.iter().map(|&i| self.unit(i)).collect();
        let pos = |i: usize| index.binary_search(&i).expect("compared point is a center");
        let n = centers.len();
        let row = |k: usize| DVector::from_iterator(n, centers.iter().map(|c| thin_plate(distance(c, &centers[k]))));
        let sigma = self.config.margin;
        let mut constraints = Vec::new();
        for r in &self.records {
            match r.winner_loser() {
                Some((w, l)) => constraints.push((row(pos(w)) - row(pos(l)), sigma)),
                None => {
                    let d = row(pos(r.pair.0)) - row(pos(r.pair.1));
                    constraints.push((d.clone(), -sigma));
                    constraints.push((-d, -sigma));
                }
            }
        }
        Surrogate::fit(centers, index, &constraints, &self.config)
    }

    /// Inverse-distance-weighted probability of instability.
    pub fn instability(&self, z: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, s) in self.stable.iter().enumerate() {
            let Some(stable) = s else { continue };
            let d2 = distance(&self.unit(i), z).powi(2);
            let u = if *stable { 0.0 } else { 1.0 };
            if d2 == 0.0 {
                return u;
            }
            num += u / d2;
            den += 1.0 / d2;
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// Exploration bonus in `[0, 1)`, zero at evaluated points.
    pub fn exploration(&self, z: &[f64]) -> f64 {
        let mut inv = 0.0;
        for i in 0..self.points.len() {
            let d2 = distance(&self.unit(i), z).powi(2);
            if d2 == 0.0 {
                return 0.0;
            }
            inv += 1.0 / d2;
        }
        std::f64::consts::FRAC_2_PI * (1.0 / inv).atan()
    }

    /// Candidate grid in raw units, deduplicated after integer rounding.
    pub fn candidates(&self) -> Vec<Vec<f64>> {
        let dims = self.space.dims.len();
        let g = self.config.grid_points;
        let total = g.pow(dims as u32);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(total);
        let mut z = vec![0.0; dims];
        for mut k in 0..total {
            for zd in z.iter_mut() {
                *zd = (k % g) as f64 / (g - 1) as f64;
                k /= g;
            }
            out.push(self.space.denormalize(&z));
        }
        out.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        out.dedup();
        out
    }

    /// Acquisition minimizer over the grid, skipping evaluated points; `None`
    /// once every candidate has been evaluated.
    pub fn propose_next(&self) -> Option<ParameterPoint> {
        let evaluated: Vec<Vec<f64>> = (0..self.points.len()).map(|i| self.unit(i)).collect();
        let candidates: Vec<(Vec<f64>, Vec<f64>)> = self
            .candidates()
            .into_iter()
            .filter(|x| !self.points.iter().any(|p| &p.0 == x))
            .map(|x| {
                let z = self.space.normalize(&x);
                (x, z)
            })
            .filter(|(_, z)| evaluated.iter().all(|e| distance(e, z) > self.config.duplicate_tolerance))
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let surrogate = self.surrogate();
        let values: Vec<f64> = candidates.iter().map(|(_, z)| surrogate.value(z)).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut best: Option<(f64, usize)> = None;
        for (k, (_, z)) in candidates.iter().enumerate() {
            let f = if span > 0.0 { (values[k] - lo) / span } else { 0.0 };
            let a = f - self.config.exploration_weight * self.exploration(z) + self.config.infeasibility_penalty * self.instability(z);
            if best.is_none_or(|(b, _)| a < b) {
                best = Some((a, k));
            }
        }
        best.map(|(_, k)| ParameterPoint(candidates[k].0.clone()))
    }

    /// The stable point never beaten by a stable point, ties broken by the
    /// surrogate. `Ok(None)` when no compared point was judged stable.
    pub fn best_so_far(&self) -> Result<Option<BestSoFar>, TunerError> {
        if self.records.is_empty() {
            return Err(TunerError::NoPreferences);
        }
        let compared: Vec<usize> = {
            let mut v: Vec<usize> = self.records.iter().flat_map(|r| [r.pair.0, r.pair.1]).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let is_stable = |i: usize| self.stable[i] == Some(true);
        let mut beaten = vec![false; self.points.len()];
        let mut unstable_excluded = Vec::new();
        for r in &self.records {
            if let Some((w, l)) = r.winner_loser() {
                if is_stable(w) {
                    beaten[l] = true;
                } else if !unstable_excluded.contains(&w) {
                    unstable_excluded.push(w);
                }
            }
        }
        let stable: Vec<usize> = compared.iter().copied().filter(|&i| is_stable(i)).collect();
        if stable.is_empty() {
            return Ok(None);
        }
        let unbeaten: Vec<usize> = stable.iter().copied().filter(|&i| !beaten[i]).collect();
        let pool = if unbeaten.is_empty() { &stable } else { &unbeaten };
        let index = if pool.len() == 1 {
            pool[0]
        } else {
            let s = self.surrogate();
            *pool.iter().min_by(|&&x, &&y| s.value(&self.unit(x)).total_cmp(&s.value(&self.unit(y)))).expect("non-empty")
        };
        Ok(Some(BestSoFar { index, point: self.points[index].clone(), unstable_excluded }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TunerError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| TunerError::Format(e.to_string()))?;
        let found = v.get("schema_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if found != SESSION_SCHEMA_VERSION {
            return Err(TunerError::Schema { found, expected: SESSION_SCHEMA_VERSION });
        }
        let s: Self = serde_json::from_value(v).map_err(|e| TunerError::Format(e.to_string()))?;
        s.space.validate()?;
        s.config.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answer(s: &TuningSession, score: impl Fn(&[f64]) -> f64) -> PreferenceRecord {
        let (a, b) = s.pending_pair().unwrap();
        let (fa, fb) = (score(&s.points[a].0), score(&s.points[b].0));
        let outcome = if fa > fb {
            Outcome::APreferred
        } else if fb > fa {
            Outcome::BPreferred
        } else {
            Outcome::Tie
        };
        PreferenceRecord { pair: (a, b), outcome, stable_a: true, stable_b: true }
    }

    #[test]
    fn bounds_validated() {
        assert!(SearchSpace::mpc((10.0, 1.0), (1.0, 2.0), (10.0, 20.0)).validate().is_err());
        assert!(SearchSpace::mpc((0.0, 1.0), (1.0, 2.0), (10.0, 20.0)).validate().is_err());
        assert!(SearchSpace::default().validate().is_ok());
        let d = &SearchSpace::default().dims;
        assert!(d[0].lo <= 250.0 && 250.0 <= d[0].hi && d[2].lo <= 1450.0 && 1450.0 <= d[2].hi);
    }

    #[test]
    fn unit_round_trip() {
        let s = SearchSpace::default();
        let x = vec![250.0, 37.5, 1450.0];
        let back = s.denormalize(&s.normalize(&x));
        assert!((back[0] - 250.0).abs() < 1e-9 && (back[1] - 37.5).abs() < 1e-9);
        assert_eq!(back[2], 1450.0);
    }

    #[test]
    fn new_session_starts_with_seed_pair() {
        let s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
        assert_eq!(s.points.len(), 2);
        assert_eq!(s.pending_pair(), Some((0, 1)));
        assert!(s.points.iter().all(|p| s.space.contains(&p.0)));
        assert_ne!(s.points[0], s.points[1]);
        assert_eq!(s.best_so_far(), Err(TunerError::NoPreferences));
    }

    #[test]
    fn single_comparison_winner_is_best() {
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
        s.record_preference(PreferenceRecord { pair: (0, 1), outcome: Outcome::BPreferred, stable_a: true, stable_b: true }).unwrap();
        assert_eq!(s.best_so_far().unwrap().unwrap().index, 1);
        assert_eq!(s.pending_pair().unwrap().0, 1);
    }

    #[test]
    fn rejects_duplicates_and_unexpected_pairs() {
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
        let rec = PreferenceRecord { pair: (0, 1), outcome: Outcome::APreferred, stable_a: true, stable_b: true };
        s.record_preference(rec).unwrap();
        assert_eq!(s.record_preference(rec), Err(TunerError::DuplicatePreference(0, 1)));
        let swapped = PreferenceRecord { pair: (1, 0), ..rec };
        assert_eq!(s.record_preference(swapped), Err(TunerError::DuplicatePreference(1, 0)));
        let (a, b) = s.pending_pair().unwrap();
        assert_eq!(s.record_preference(PreferenceRecord { pair: (b, a), ..rec }), Err(TunerError::NotPending(b, a)));
        assert_eq!(s.record_preference(PreferenceRecord { pair: (a, 99), ..rec }), Err(TunerError::UnknownPoint(a, 99)));
    }

    #[test]
    fn tournament_total_order() {
        // score increases with p; three rounds compare four points
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
        for _ in 0..3 {
            let rec = answer(&s, |x| x[0]);
            s.record_preference(rec).unwrap();
        }
        let compared: Vec<usize> = (0..4).collect();
        let max = compared.iter().copied().max_by(|&a, &b| s.points[a].p().total_cmp(&s.points[b].p())).unwrap();
        assert_eq!(s.best_so_far().unwrap().unwrap().index, max);
    }

    #[test]
    fn unstable_winner_excluded() {
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
        s.record_preference(PreferenceRecord { pair: (0, 1), outcome: Outcome::APreferred, stable_a: false, stable_b: true }).unwrap();
        let best = s.best_so_far().unwrap().unwrap();
        assert_eq!(best.index, 1);
        assert_eq!(best.unstable_excluded, vec![0]);
        assert_eq!(s.instability(&s.unit(0)), 1.0);
        assert_eq!(s.instability(&s.unit(1)), 0.0);
    }

    #[test]
    fn no_stable_point_gives_empty_result() {
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
        s.record_preference(PreferenceRecord { pair: (0, 1), outcome: Outcome::Tie, stable_a: false, stable_b: false }).unwrap();
        assert_eq!(s.best_so_far(), Ok(None));
    }

    #[test]
    fn surrogate_honours_recorded_preferences() {
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
        let score = |x: &[f64]| -(x[0].ln() - 5.0).powi(2) - (x[1].ln() - 3.0).powi(2);
        for _ in 0..5 {
            let rec = answer(&s, score);
            s.record_preference(rec).unwrap();
        }
        let sur = s.surrogate();
        let sigma = s.config.margin;
        for r in &s.records {
            let (fa, fb) = (sur.value(&s.unit(r.pair.0)), sur.value(&s.unit(r.pair.1)));
            match r.winner_loser() {
                Some((w, _)) if w == r.pair.0 => assert!(fa - fb <= -0.99 * sigma, "{fa} {fb}"),
                Some(_) => assert!(fb - fa <= -0.99 * sigma, "{fa} {fb}"),
                None => assert!((fa - fb).abs() <= 1.01 * sigma),
            }
        }
    }

    #[test]
    fn tie_keeps_values_within_margin() {
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
        s.record_preference(PreferenceRecord { pair: (0, 1), outcome: Outcome::Tie, stable_a: true, stable_b: true }).unwrap();
        let sur = s.surrogate();
        assert!((sur.value(&s.unit(0)) - sur.value(&s.unit(1))).abs() <= s.config.margin);
    }

    #[test]
    fn proposals_stay_in_bounds_and_new() {
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig { seed: 3, ..TunerConfig::default() }).unwrap();
        for k in 0..15 {
            let mut rec = answer(&s, |x| -(x[2] - 700.0).abs());
            rec.stable_b = k % 4 != 0;
            s.record_preference(rec).unwrap();
            let (_, new) = s.pending_pair().unwrap();
            let p = &s.points[new];
            assert!(s.space.contains(&p.0));
            assert!(s.points[..new].iter().all(|q| q != p));
        }
    }

    #[test]
    fn exhausted_grid_converges() {
        let space = SearchSpace { dims: vec![Dimension::new("x", 1.0, 4.0, false, true)] };
        let mut s = TuningSession::new(space, TunerConfig { grid_points: 4, ..TunerConfig::default() }).unwrap();
        let mut n = 0;
        while s.pending_pair().is_some() {
            let rec = answer(&s, |x| x[0]);
            s.record_preference(rec).unwrap();
            n += 1;
            assert!(n < 10);
        }
        assert!(s.converged);
        assert_eq!(s.points.len(), 4);
        assert_eq!(s.best_so_far().unwrap().unwrap().point.0, vec![4.0]);
        let rec = PreferenceRecord { pair: (0, 3), outcome: Outcome::Tie, stable_a: true, stable_b: true };
        assert!(s.record_preference(rec).is_err());
    }

    #[test]
    fn stop_drops_uncompared_proposal() {
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
        let rec = answer(&s, |x| x[0]);
        s.record_preference(rec).unwrap();
        assert_eq!(s.points.len(), 3);
        s.stop();
        assert!(s.converged && s.pending_pair().is_none());
        assert_eq!(s.points.len(), 2);
        assert!(s.best_so_far().unwrap().is_some());
    }

    #[test]
    fn json_round_trip_reproduces_proposals() {
        let mut s = TuningSession::new(SearchSpace::default(), TunerConfig { seed: 11, ..TunerConfig::default() }).unwrap();
        for _ in 0..4 {
            let rec = answer(&s, |x| -x[1]);
            s.record_preference(rec).unwrap();
        }
        let back = TuningSession::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.propose_next(), s.propose_next());
        let mut v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        v["schema_version"] = 99.into();
        assert_eq!(TuningSession::from_json(&v.to_string()), Err(TunerError::Schema { found: 99, expected: 1 }));
    }
}
