//! Plain-Rust versions of the browser entry points.

use serde::Serialize;

use vdit_core::demo::{demo_lexicons, generate_synthetic, DemoDims, SyntheticSpec, DEMO_QUERY};
use vdit_core::dtl_encoder::{schedule_coeffs, ScheduleKind};
use vdit_core::grounding_gate::{run_gate, select_best_proposals, GateConfig, GateOutput, ScoreTable};
use vdit_core::numerics::softmax;
use vdit_core::prompt::{extract_nouns, NounSet};
use vdit_core::span_decoder::decode_span;

pub type ApiResult<T> = Result<T, String>;

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Debug, Serialize)]
pub struct ScoreStream {
    pub query: String,
    pub nouns: Vec<String>,
    pub frames: usize,
    /// Best score per noun and frame, noun-major.
    pub scores: Vec<f64>,
    pub planted: (usize, usize),
}

/// Best-proposal scores of a seeded synthetic detection stream.
pub fn synthetic_stream(seed: u32, frames: usize, separation: f64) -> ApiResult<ScoreStream> {
    if !(0.0..=10.0).contains(&separation) {
        return Err(format!("separation {separation} outside [0, 10]"));
    }
    let spec = SyntheticSpec { separation, ..SyntheticSpec::planted(frames) };
    let video = generate_synthetic(u64::from(seed), spec, &DemoDims::default()).map_err(text)?;
    let (nouns, modifiers) = demo_lexicons();
    let nouns = extract_nouns(DEMO_QUERY, &nouns, Some(&modifiers));
    let table = select_best_proposals(&video.detections, &nouns, frames).map_err(text)?;
    let scores = (0..nouns.len()).flat_map(|i| table.scores_for(i).to_vec()).collect();
    Ok(ScoreStream { query: video.query, nouns: nouns.as_slice().to_vec(), frames, scores, planted: video.gt })
}

/// AND gate, persistence, start frame and span over a noun-major score grid.
pub fn explore_gate(
    scores: &[f64],
    nouns: usize,
    thresholds: &[f64],
    persistence: usize,
    min_span: usize,
) -> ApiResult<GateOutput> {
    if nouns == 0 || !scores.len().is_multiple_of(nouns) {
        return Err(format!("{} scores do not split into {nouns} nouns", scores.len()));
    }
    let names = NounSet::new((0..nouns).map(|i| format!("noun{i}")));
    let table = ScoreTable::from_scores(&names, scores.len() / nouns, scores.to_vec()).map_err(text)?;
    let config = GateConfig::new(thresholds.to_vec(), persistence, min_span).map_err(text)?;
    run_gate(&table, &config).map_err(text)
}

#[derive(Debug, Serialize, PartialEq)]
pub struct ScheduleCurve {
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `(α_τ, σ_τ)` on `points` evenly spaced times in `[0, 1]`.
pub fn schedule_curve(kind: &str, points: usize) -> ApiResult<ScheduleCurve> {
    let kind: ScheduleKind = kind.parse().map_err(text)?;
    if points < 2 {
        return Err("need at least two points".into());
    }
    let mut curve = ScheduleCurve { tau: Vec::new(), alpha: Vec::new(), sigma: Vec::new() };
    for i in 0..points {
        let tau = i as f64 / (points - 1) as f64;
        let (a, s) = schedule_coeffs(tau, kind).map_err(text)?;
        curve.tau.push(tau);
        curve.alpha.push(a);
        curve.sigma.push(s);
    }
    Ok(curve)
}

#[derive(Debug, Serialize)]
pub struct DecodedSpan {
    pub start: usize,
    pub end: usize,
    pub joint: f64,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

/// Softmax of both logit rows and the best `s ≤ e` pair.
pub fn decode(start_logits: &[f64], end_logits: &[f64]) -> ApiResult<DecodedSpan> {
    let ps = softmax(start_logits).map_err(text)?;
    let pe = softmax(end_logits).map_err(text)?;
    let span = decode_span(&ps, &pe).map_err(text)?;
    Ok(DecodedSpan {
        start: span.start,
        end: span.end,
        joint: span.joint,
        p_start: ps.into_vec(),
        p_end: pe.into_vec(),
    })
}
