//! Cumulative cost curves: what a session pays per request with and
//! without paging, and how the gap compounds.

use serde::{Deserialize, Serialize};

use crate::analytics::transcript::Transcript;
use crate::pagestore::SessionState;
use crate::policy::{estimate_tokens, PolicyConfig};
use crate::proxy::pipeline::Engine;
use crate::wire::{Request, Role};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("baseline has {baseline} turns but managed has {managed}")]
    LengthMismatch { baseline: usize, managed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub turn: usize,
    pub baseline: u64,
    pub managed: u64,
    pub cumulative_baseline: u64,
    pub cumulative_managed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub points: Vec<CostPoint>,
    /// `1 − managed_total / baseline_total`.
    pub reduction: f64,
    /// Mean over turns of `1 − managed / baseline`.
    pub mean_per_turn_reduction: f64,
    pub final_turn_reduction: f64,
}

fn ratio_reduction(baseline: u64, managed: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - managed as f64 / baseline as f64
    }
}

pub fn cost_curve(baseline: &[u64], managed: &[u64]) -> Result<CostCurve, CostError> {
    if baseline.len() != managed.len() {
        return Err(CostError::LengthMismatch {
            baseline: baseline.len(),
            managed: managed.len(),
        });
    }
    let mut points = Vec::with_capacity(baseline.len());
    let (mut cb, mut cm) = (0u64, 0u64);
    for (turn, (&b, &m)) in baseline.iter().zip(managed).enumerate() {
        cb += b;
        cm += m;
        points.push(CostPoint {
            turn,
            baseline: b,
            managed: m,
            cumulative_baseline: cb,
            cumulative_managed: cm,
        });
    }
    let n = points.len();
    let mean = if n == 0 {
        0.0
    } else {
        points.iter().map(|p| ratio_reduction(p.baseline, p.managed)).sum::<f64>() / n as f64
    };
    Ok(CostCurve {
        reduction: ratio_reduction(cb, cm),
        mean_per_turn_reduction: mean,
        final_turn_reduction: points.last().map(|p| ratio_reduction(p.baseline, p.managed)).unwrap_or(0.0),
        points,
    })
}

impl CostCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("turn,baseline,managed,cumulative_baseline,cumulative_managed\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.turn, p.baseline, p.managed, p.cumulative_baseline, p.cumulative_managed
            ));
        }
        s
    }
}

/// Per-request byte sizes of a transcript sent as-is and through `engine`.
/// A request is sent after every user message.
pub fn request_sizes(t: &Transcript, engine: &Engine) -> (Vec<u64>, Vec<u64>) {
    let messages = t.messages();
    let mut state = SessionState::new(t.session_id.clone());
    let (mut baseline, mut managed) = (Vec::new(), Vec::new());
    for (i, m) in messages.iter().enumerate() {
        if m.role != Role::User {
            continue;
        }
        let req = Request::new("replay", messages[..=i].to_vec());
        let raw = req.serialize();
        let p = engine.run(&raw, req, &mut state);
        baseline.push(raw.len() as u64);
        managed.push(p.forwarded.len() as u64);
    }
    (baseline, managed)
}

/// Byte sizes to token estimates.
pub fn to_tokens(bytes: &[u64], cfg: &PolicyConfig) -> Vec<u64> {
    bytes.iter().map(|&b| estimate_tokens(b, cfg)).collect()
}
