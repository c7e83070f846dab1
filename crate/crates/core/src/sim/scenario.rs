use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lang::{bundled_source, parse_str};
use crate::planner::Domain;

use super::SimError;

/// Uniform jitter around a mean, clamped at a small positive floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dist {
    pub mean: f64,
    pub jitter: f64,
}

/// Shortest duration any sampled action may take.
pub const MIN_DURATION: f64 = 0.05;

impl Dist {
    pub const fn fixed(mean: f64) -> Self {
        Self { mean, jitter: 0.0 }
    }

    pub const fn new(mean: f64, jitter: f64) -> Self {
        Self { mean, jitter }
    }

    /// Draws exactly one uniform sample, even when jitter is zero, so the
    /// random stream does not depend on table contents.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random_range(-1.0..1.0);
        (self.mean + self.jitter * u).max(MIN_DURATION)
    }
}

/// Keys are template names (`move`), perceive kinds (`perceive.detect_idle`)
/// and human activities (`human.assemble`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationTable(pub BTreeMap<String, Dist>);

impl DurationTable {
    pub fn get(&self, key: &str) -> Dist {
        self.0.get(key).copied().unwrap_or(Dist::fixed(1.0))
    }

    pub fn set(&mut self, key: &str, d: Dist) {
        self.0.insert(key.to_string(), d);
    }
}

impl Default for DurationTable {
    fn default() -> Self {
        let entries: [(&str, Dist); 18] = [
            ("move", Dist::new(4.0, 1.0)),
            ("grasp", Dist::fixed(1.0)),
            ("release", Dist::fixed(1.0)),
            ("wait", Dist::fixed(0.2)),
            ("perceive.check_available_objects", Dist::fixed(2.0)),
            ("perceive.precise_marker_detection", Dist::fixed(3.0)),
            // Minimum processing time; these three run until their event is detected.
            ("perceive.detect_empty_box", Dist::new(1.0, 0.5)),
            ("perceive.detect_tool_pulling", Dist::new(0.5, 0.25)),
            ("perceive.detect_idle", Dist::new(1.0, 0.5)),
            ("human.move", Dist::new(1.5, 0.5)),
            ("human.grasp", Dist::new(0.8, 0.2)),
            ("human.release", Dist::new(0.8, 0.2)),
            ("human.assemble", Dist::new(16.0, 8.0)),
            ("human.take", Dist::new(1.5, 0.5)),
            ("human.dof", Dist::new(14.0, 5.0)),
            ("human.set", Dist::new(16.5, 6.0)),
            ("human.wait", Dist::fixed(1.0)),
            ("human.perceive", Dist::fixed(1.0)),
        ];
        Self(entries.into_iter().map(|(k, d)| (k.to_string(), d)).collect())
    }
}

/// Shear-force model for the tool-pull detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShearParams {
    /// Resting shear, N.
    pub baseline: f64,
    /// Sensor noise standard deviation, N.
    pub sigma: f64,
    /// Shear growth while the human pulls, N/s.
    pub ramp: f64,
    /// Threshold multiplier on sigma.
    pub k: f64,
    pub rate_hz: f64,
}

impl Default for ShearParams {
    fn default() -> Self {
        Self {
            baseline: 0.1,
            sigma: 0.05,
            ramp: 0.5,
            k: 4.0,
            rate_hz: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum PolicyKind {
    Compliant,
    /// Probability that the human fetches an undelivered piece on their own.
    IndependentPicker(f64),
    /// Multiplier on human durations.
    VariableSpeed(f64),
    /// Probability that a returned tool is put back in the wrong place.
    ErrorProne(f64),
    Interactive,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Compliant => f.write_str("compliant"),
            PolicyKind::IndependentPicker(p) => write!(f, "independent:{p}"),
            PolicyKind::VariableSpeed(s) => write!(f, "variable:{s}"),
            PolicyKind::ErrorProne(p) => write!(f, "error:{p}"),
            PolicyKind::Interactive => f.write_str("interactive"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: f64| -> Result<f64, String> {
            match arg {
                None => Ok(default),
                Some(a) => a.parse::<f64>().map_err(|_| format!("invalid policy parameter `{a}`")),
            }
        };
        let p = match name {
            "compliant" => PolicyKind::Compliant,
            "independent" => PolicyKind::IndependentPicker(num(0.5)?),
            "variable" => PolicyKind::VariableSpeed(num(1.0)?),
            "error" => PolicyKind::ErrorProne(num(0.1)?),
            "interactive" => PolicyKind::Interactive,
            _ => return Err(format!("unknown policy `{s}`")),
        };
        p.check()?;
        Ok(p)
    }
}

impl PolicyKind {
    pub fn check(&self) -> Result<(), String> {
        match *self {
            PolicyKind::IndependentPicker(p) | PolicyKind::ErrorProne(p) if !(0.0..=1.0).contains(&p) => {
                Err(format!("probability {p} outside [0, 1]"))
            }
            PolicyKind::VariableSpeed(s) if !(s.is_finite() && s > 0.0) => {
                Err(format!("speed scale {s} must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn human_scale(&self) -> f64 {
        match *self {
            PolicyKind::VariableSpeed(s) => s,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Bundled name or file label.
    pub domain_name: String,
    pub domain_source: String,
    pub seed: u64,
    pub policy: PolicyKind,
    pub durations: DurationTable,
    /// Probability that one idle-detector query reports the wrong value.
    pub perception_noise: f64,
    pub shear: ShearParams,
    /// Seconds a robot wait may block before it counts as a divergence.
    pub wait_timeout: f64,
}

impl Scenario {
    pub fn new(domain_name: &str, domain_source: &str, seed: u64, policy: PolicyKind) -> Self {
        Self {
            domain_name: domain_name.to_string(),
            domain_source: domain_source.to_string(),
            seed,
            policy,
            durations: DurationTable::default(),
            perception_noise: 0.02,
            shear: ShearParams::default(),
            wait_timeout: 120.0,
        }
    }

    pub fn bundled(name: &str, seed: u64, policy: PolicyKind) -> Result<Self, SimError> {
        let src = bundled_source(name).ok_or_else(|| SimError::Scenario(format!("unknown bundled domain `{name}`")))?;
        Ok(Self::new(name, src, seed, policy))
    }

    pub fn domain(&self) -> Result<Domain, SimError> {
        parse_str(&self.domain_source).map_err(|e| SimError::Domain(e.render(&self.domain_name)))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        for (k, d) in &self.durations.0 {
            if !(d.mean >= 0.0 && d.jitter >= 0.0 && d.mean.is_finite() && d.jitter.is_finite()) {
                return bad(format!("duration `{k}` must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.perception_noise) {
            return bad(format!("perception noise {} outside [0, 1]", self.perception_noise));
        }
        let s = &self.shear;
        if !(s.sigma >= 0.0 && s.ramp > 0.0 && s.k >= 0.0 && s.rate_hz > 0.0) {
            return bad("shear parameters must be non-negative with positive ramp and rate".into());
        }
        if !(self.wait_timeout > 0.0) {
            return bad("wait timeout must be positive".into());
        }
        self.policy.check().map_err(SimError::Scenario)
    }
}
