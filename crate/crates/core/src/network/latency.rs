use serde::{Deserialize, Serialize};

use crate::context::LayerContextPlan;

/// Converts future splice reach into milliseconds.
///
/// `base_latency_ms` is the delay every model pays regardless of context
/// (70 ms for the unidirectional baseline); each future frame adds `frame_ms`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_latency_ms: f64,
    pub frame_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            base_latency_ms: 70.0,
            frame_ms: 10.0,
        }
    }
}

/// `base + frame_ms · Σ_l K2(l)·s2(l)`. History settings never contribute.
pub fn model_latency_ms(plan: &LayerContextPlan, lat: &LatencyModel) -> f64 {
    lat.base_latency_ms + lat.frame_ms * plan.total_future_reach() as f64
}

/// Input frames that can influence one output frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ReceptiveField {
    /// Past frames reached through splicing alone.
    pub past_frames: usize,
    /// The recurrence carries information from arbitrarily far back.
    pub unbounded_past: bool,
    pub future_frames: usize,
}

pub fn receptive_field(plan: &LayerContextPlan) -> ReceptiveField {
    ReceptiveField {
        past_frames: plan.total_history_reach(),
        unbounded_past: true,
        future_frames: plan.total_future_reach(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(text: &str) -> LayerContextPlan {
        LayerContextPlan::parse(text).unwrap()
    }

    #[test]
    fn reference_plans() {
        let lat = LatencyModel::default();
        let rows = [
            ("{0;1×1} {0;1×3} {0;1×3} {0;1×3}", 170.0, 10),
            ("{1×6;1×1} {1×6;1×3} {1×6;1×3} {1×6;2×3}", 200.0, 13),
            ("{2×6;1×1} {2×6;1×3} {2×6;1×3} {2×6;2×3}", 200.0, 13),
            ("{1×6;1×1} {1×6;1×3} {1×6;1×6} {1×6;2×6}", 290.0, 22),
        ];
        for (text, ms, future) in rows {
            let p = plan(text);
            assert_eq!(model_latency_ms(&p, &lat), ms, "{text}");
            assert_eq!(receptive_field(&p).future_frames, future);
        }
    }

    #[test]
    fn empty_plan_is_base_latency() {
        let p = LayerContextPlan::empty();
        assert_eq!(model_latency_ms(&p, &LatencyModel::default()), 70.0);
        let rf = receptive_field(&p);
        assert_eq!((rf.past_frames, rf.unbounded_past, rf.future_frames), (0, true, 0));
    }

    #[test]
    fn history_does_not_change_latency() {
        let lat = LatencyModel { base_latency_ms: 5.0, frame_ms: 30.0 };
        let a = plan("{0;1×1} {0;2×3}");
        let b = plan("{4×6;1×1} {2×1;2×3}");
        assert_eq!(model_latency_ms(&a, &lat), model_latency_ms(&b, &lat));
        assert_eq!(receptive_field(&b).past_frames, 26);
    }
}
