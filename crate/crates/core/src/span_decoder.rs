//! Start/end heads over frame positions and joint-probability span decoding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{read_jsonl, Interval};
use crate::numerics::{matvec, softmax, Matrix, ProbVector};

/// Linear start and end classifiers over hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl HeadParams {
    pub fn new(start: Vec<f64>, end: Vec<f64>) -> Result<Self> {
        if start.len() != end.len() {
            return Err(Error::invalid("start and end heads differ in width"));
        }
        if start.iter().chain(&end).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head weights".into()));
        }
        Ok(Self { start, end })
    }

    pub fn zeros(width: usize) -> Self {
        Self { start: vec![0.0; width], end: vec![0.0; width] }
    }

    pub fn width(&self) -> usize {
        self.start.len()
    }
}

/// Rows of `h` at the given token positions, in order.
pub fn select_rows(h: &Matrix, positions: &[usize]) -> Result<Matrix> {
    if let Some(&p) = positions.iter().find(|&&p| p >= h.rows()) {
        return Err(Error::invalid(format!("position {p} outside {} hidden rows", h.rows())));
    }
    Ok(Matrix::from_fn(positions.len(), h.cols(), |r, c| h.get(positions[r], c)))
}

/// `p_s = softmax(H·w_s)` and `p_e = softmax(H·w_e)` over the rows of `h`,
/// which should hold the video-token positions only.
pub fn head_distributions(h: &Matrix, heads: &HeadParams) -> Result<(ProbVector, ProbVector)> {
    if h.rows() == 0 {
        return Err(Error::invalid("no hidden states to score"));
    }
    if h.cols() != heads.width() {
        return Err(Error::invalid(format!("hidden width {} but heads have width {}", h.cols(), heads.width())));
    }
    Ok((softmax(&matvec(h, &heads.start)?)?, softmax(&matvec(h, &heads.end)?)?))
}

/// A decoded span with 1-based inclusive frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub joint: f64,
}

/// Maximises `p_s(s)·p_e(e)` subject to `s ≤ e` in one pass. Ties go to the
/// smallest `s`, then the smallest `e`.
pub fn decode_span(p_start: &ProbVector, p_end: &ProbVector) -> Result<SpanPrediction> {
    let (ps, pe) = (p_start.as_slice(), p_end.as_slice());
    if ps.len() != pe.len() {
        return Err(Error::invalid(format!("start has {} positions, end has {}", ps.len(), pe.len())));
    }
    if ps.is_empty() {
        return Err(Error::invalid("cannot decode an empty distribution"));
    }
    let mut prefix_best = 0;
    let mut best = SpanPrediction { start: 1, end: 1, joint: ps[0] * pe[0] };
    for e in 1..ps.len() {
        if ps[e] > ps[prefix_best] {
            prefix_best = e;
        }
        let joint = ps[prefix_best] * pe[e];
        if joint > best.joint {
            best = SpanPrediction { start: prefix_best + 1, end: e + 1, joint };
        }
    }
    Ok(best)
}

/// Frame `t` covers `[(t−1)·d/T, t·d/T]`; the span runs from the start of
/// frame `s` to the end of frame `e`, clipped to the video.
pub fn span_to_seconds(span: &SpanPrediction, frames: usize, duration_s: f64) -> Interval {
    let frame_len = duration_s / frames as f64;
    let center = |t: usize| (t as f64 - 0.5) * frame_len;
    let start = (center(span.start) - 0.5 * frame_len).clamp(0.0, duration_s);
    let end = (center(span.end) + 0.5 * frame_len).clamp(start, duration_s);
    Interval { start_s: start, end_s: end }
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub s: usize,
    pub e: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub joint: f64,
}

impl PredictionRow {
    pub fn new(id: impl Into<String>, span: &SpanPrediction, frames: usize, duration_s: f64) -> Self {
        let seconds = span_to_seconds(span, frames, duration_s);
        Self {
            id: id.into(),
            s: span.start,
            e: span.end,
            start_s: seconds.start_s,
            end_s: seconds.end_s,
            joint: span.joint,
        }
    }

    pub fn interval(&self) -> Result<Interval> {
        Interval::new(self.start_s, self.end_s)
    }
}

pub fn write_predictions<W: Write>(mut w: W, rows: &[PredictionRow]) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<PredictionRow>> {
    let rows: Vec<PredictionRow> = read_jsonl(reader)?;
    for (i, row) in rows.iter().enumerate() {
        if row.s == 0 || row.s > row.e {
            return Err(Error::Schema {
                line: i + 1,
                message: format!("span ({}, {}) is not 1 ≤ s ≤ e", row.s, row.e),
            });
        }
        row.interval().map_err(|e| Error::Schema { line: i + 1, message: e.to_string() })?;
    }
    Ok(rows)
}
