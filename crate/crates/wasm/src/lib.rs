//! wasm-bindgen exports for the static demo page in `www/`.
//!
//! Structured results cross the boundary as JSON strings.

pub mod api;

use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(r: api::ApiResult<T>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = syntheticStream)]
pub fn synthetic_stream(seed: u32, frames: usize, separation: f64) -> Result<String, JsError> {
    to_json(api::synthetic_stream(seed, frames, separation))
}

#[wasm_bindgen(js_name = exploreGate)]
pub fn explore_gate(
    scores: &[f64],
    nouns: usize,
    thresholds: &[f64],
    persistence: usize,
    min_span: usize,
) -> Result<String, JsError> {
    to_json(api::explore_gate(scores, nouns, thresholds, persistence, min_span))
}

#[wasm_bindgen(js_name = scheduleCurve)]
pub fn schedule_curve(kind: &str, points: usize) -> Result<String, JsError> {
    to_json(api::schedule_curve(kind, points))
}

#[wasm_bindgen(js_name = decodeSpan)]
pub fn decode_span(start_logits: &[f64], end_logits: &[f64]) -> Result<String, JsError> {
    to_json(api::decode(start_logits, end_logits))
}
