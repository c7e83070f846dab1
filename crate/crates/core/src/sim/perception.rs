//! Stand-ins for the five perception routines. Each function draws from the
//! caller's random stream in a fixed order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::action::PerceiveKind;
use crate::state::{AgentKind, EntityDeclarations, InteractionState, Location, ObjectId};

use super::scenario::ShearParams;

/// Location noise of the overview camera, m.
pub const CAO_SIGMA: f64 = 0.005;
/// Location noise of close-range marker refinement, m.
pub const PMD_SIGMA: f64 = 0.001;
/// A reported object further than this from its believed pose contradicts the belief, m.
pub const CONTRADICTION_DISTANCE: f64 = 0.05;
/// Query period of the empty-box detector, s.
pub const BOX_POLL: f64 = 0.5;
/// Query period of the idle classifier, s.
pub const IDLE_POLL: f64 = 0.25;
/// Consecutive idle readings required before the idle detector fires.
pub const IDLE_CONFIRM: u32 = 2;
/// Tolerance on the shear threshold comparison.
pub const SHEAR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PerceiveData {
    AvailableObjects { objects: BTreeMap<ObjectId, Location> },
    RefinedPose { object: ObjectId, location: Option<Location> },
    BoxEmpty { object: ObjectId, empty: bool },
    PullDetected { object: ObjectId, detected: bool },
    Idle { idle: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceiveResult {
    pub kind: PerceiveKind,
    /// Seconds; always positive.
    pub duration: f64,
    pub data: PerceiveData,
}

fn noisy<R: Rng>(loc: &Location, sigma: f64, rng: &mut R) -> Location {
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let dx = n.sample(rng);
    let dy = n.sample(rng);
    Location {
        region: loc.region.clone(),
        coords: [loc.coords[0] + dx, loc.coords[1] + dy],
    }
}

fn held_by_human(state: &InteractionState, decl: &EntityDeclarations, obj: &ObjectId) -> bool {
    state.oc[obj]
        .grasped_by
        .iter()
        .any(|h| decl.agent_kind(&h.agent) == Some(AgentKind::Human))
}

/// Whether the robot's cameras can see `obj`: it lies in a robot-reachable
/// region and no human hand covers it.
pub fn visible(state: &InteractionState, decl: &EntityDeclarations, obj: &ObjectId) -> bool {
    let regions = decl.visible_regions();
    state.op.get(obj).is_some_and(|p| regions.contains(&p.location.region)) && !held_by_human(state, decl, obj)
}

/// Visible objects with camera noise, in id order (two draws per object).
pub fn check_available_objects<R: Rng>(
    truth: &InteractionState,
    decl: &EntityDeclarations,
    rng: &mut R,
) -> BTreeMap<ObjectId, Location> {
    truth
        .op
        .iter()
        .filter(|(o, _)| visible(truth, decl, o))
        .map(|(o, p)| (o.clone(), noisy(&p.location, CAO_SIGMA, rng)))
        .collect()
}

/// Close-range pose of one object, or `None` when it is out of view.
pub fn precise_marker<R: Rng>(
    truth: &InteractionState,
    decl: &EntityDeclarations,
    obj: &ObjectId,
    rng: &mut R,
) -> Option<Location> {
    if !visible(truth, decl, obj) {
        return None;
    }
    Some(noisy(&truth.op[obj].location, PMD_SIGMA, rng))
}

/// One classifier query: the true flag, flipped with probability `noise`.
pub fn idle_reading<R: Rng>(truly_idle: bool, noise: f64, rng: &mut R) -> bool {
    let flip = rng.random::<f64>() < noise;
    truly_idle != flip
}

impl ShearParams {
    pub fn threshold(&self) -> f64 {
        self.baseline + self.k * self.sigma
    }

    pub fn period(&self) -> f64 {
        1.0 / self.rate_hz
    }

    /// Shear reading at `t`; one normal draw per call.
    pub fn sample<R: Rng>(&self, t: f64, pull_start: Option<f64>, rng: &mut R) -> f64 {
        let noise = if self.sigma > 0.0 {
            Normal::new(0.0, self.sigma).expect("finite sigma").sample(rng)
        } else {
            0.0
        };
        let pull = match pull_start {
            Some(t0) if t >= t0 => self.ramp * (t - t0),
            _ => 0.0,
        };
        self.baseline + noise + pull
    }

    pub fn fires(&self, shear: f64) -> bool {
        shear + SHEAR_EPS >= self.threshold()
    }

    /// Time of sample `k` for a detector started at `start`.
    pub fn sample_time(&self, start: f64, k: u64) -> f64 {
        start + k as f64 * self.period()
    }

    /// First sample time in `(start, deadline]` at which the detector fires.
    pub fn first_crossing<R: Rng>(
        &self,
        start: f64,
        pull_start: Option<f64>,
        deadline: f64,
        rng: &mut R,
    ) -> Option<f64> {
        let mut k = 1;
        loop {
            let t = self.sample_time(start, k);
            if t > deadline {
                return None;
            }
            if self.fires(self.sample(t, pull_start, rng)) {
                return Some(t);
            }
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{fixtures::tabletop, new_state};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_pull_crosses_after_k_sigma_over_ramp() {
        // Threshold is computed from the nominal sigma; the readings themselves are noise free.
        let p = ShearParams::default();
        let quiet = ShearParams { sigma: 0.0, ..p };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t0 = 3.0;
        let mut k = 1;
        let fired = loop {
            let t = p.sample_time(t0, k);
            if p.fires(quiet.sample(t, Some(t0), &mut rng)) {
                break t;
            }
            k += 1;
        };
        let expected = t0 + p.k * p.sigma / p.ramp;
        assert!((fired - expected).abs() < 1e-9, "{fired} vs {expected}");
    }

    #[test]
    fn threshold_not_reached_before_pull() {
        let p = ShearParams::default();
        let quiet = |t: f64| p.baseline + if t >= 5.0 { p.ramp * (t - 5.0) } else { 0.0 };
        assert!(!p.fires(quiet(4.9)));
        assert!(!p.fires(quiet(5.35)));
        assert!(p.fires(quiet(5.4)));
    }

    #[test]
    fn cao_reports_visible_objects_near_truth() {
        let decl = tabletop();
        let s = new_state(&decl).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut inside, mut total) = (0usize, 0usize);
        let mut err_sum = BTreeMap::<ObjectId, [f64; 2]>::new();
        let draws = 1000;
        for _ in 0..draws {
            let r = check_available_objects(&s, &decl, &mut rng);
            assert_eq!(r.len(), 7);
            assert_eq!(r.keys().filter(|o| o.as_str().starts_with('O')).count(), 6);
            for (o, loc) in &r {
                let truth = &s.op[o].location;
                assert_eq!(loc.region, truth.region);
                let e = err_sum.entry(o.clone()).or_default();
                for i in 0..2 {
                    let d = loc.coords[i] - truth.coords[i];
                    e[i] += d;
                    total += 1;
                    inside += usize::from(d.abs() <= 3.0 * CAO_SIGMA);
                }
            }
        }
        // Normal coordinates fall within 3 sigma 99.73% of the time.
        assert!(inside as f64 / total as f64 >= 0.99, "{inside}/{total}");
        let se = CAO_SIGMA / (draws as f64).sqrt();
        for e in err_sum.values() {
            for v in e {
                assert!((v / draws as f64).abs() <= 3.0 * se);
            }
        }
    }

    #[test]
    fn idle_reading_flips_at_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flips = (0..100_000).filter(|_| !idle_reading(true, 0.02, &mut rng)).count();
        assert!((1700..2300).contains(&flips), "{flips}");
        assert!((0..100).all(|_| idle_reading(true, 0.0, &mut rng)));
    }
}
