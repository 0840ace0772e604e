//! Per-step reward: acoustic prediction gain, map coverage growth and
//! visitation novelty, combined with fixed weights.

use serde::{Deserialize, Serialize};

/// Area below which coverage growth is measured against this floor instead.
pub const COVERAGE_FLOOR_M2: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub lambda_a: f64,
    pub lambda_v: f64,
    pub lambda_n: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_a: 2e5,
            lambda_v: 2e2,
            lambda_n: 10.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_a", self.lambda_a),
            ("lambda_v", self.lambda_v),
            ("lambda_n", self.lambda_n),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self {
            lambda_a: 0.0,
            lambda_v: 0.0,
            lambda_n: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_a: f64,
    pub r_v: f64,
    pub r_n: f64,
    pub total: f64,
    pub l_r_before: f64,
    pub l_r_after: f64,
}

/// `l_prev - l_cur` on a Sample step, zero otherwise. Not clipped.
pub fn acoustic_reward(l_prev: f64, l_cur: f64, sampled: bool) -> f64 {
    if sampled {
        l_prev - l_cur
    } else {
        0.0
    }
}

pub fn coverage_reward(v_cur: f64, v_prev: f64) -> f64 {
    (v_cur - v_prev) / v_prev.max(COVERAGE_FLOOR_M2)
}

/// `1/sqrt(count)`; the count includes the current visit.
pub fn novelty_reward(visit_count: u32) -> f64 {
    debug_assert!(visit_count >= 1);
    1.0 / f64::from(visit_count.max(1)).sqrt()
}

pub fn total_reward(
    r_a: f64,
    r_v: f64,
    r_n: f64,
    l_r_before: f64,
    l_r_after: f64,
    w: &RewardWeights,
) -> RewardBreakdown {
    let total = w.lambda_a * r_a + w.lambda_v * r_v + w.lambda_n * r_n;
    RewardBreakdown {
        r_a,
        r_v,
        r_n,
        total,
        l_r_before,
        l_r_after,
    }
}

/// Error change at the query nearest the agent.
pub fn local_acoustic_reward(before: f64, after: f64, sampled: bool) -> f64 {
    acoustic_reward(before, after, sampled)
}

/// Index of the query whose receiver lies closest to `(x, y)`; ties go to
/// the lower index.
pub fn nearest_query(receivers: &[(f64, f64)], x: f64, y: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(qx, qy)) in receivers.iter().enumerate() {
        let d = (qx - x).hypot(qy - y);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}
