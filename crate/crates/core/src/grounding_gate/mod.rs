//! Entity gating over per-frame detection streams.
//!
//! Frames are 1-based throughout the public surface (`frame = 1..=T`), which
//! matches the detection file format; internal vectors are 0-based and
//! `gate[t - 1]` is the value for frame `t`.

pub mod mask;
pub mod propagate;

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::NounSet;

pub use mask::{rle_decode, rle_encode, union_mask, BinaryMask, MaskGrid};
pub use propagate::{
    frame_union_masks, seed_and_propagate, track_from_detections, DetectionPropagator, IdentityPropagator,
    MaskPropagator, MaskTrack,
};

/// Threshold applied to every noun without an explicit entry.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One detector proposal for one noun in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: usize,
    pub noun: String,
    pub proposal: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
}

/// Per-noun, per-frame best proposal after the argmax over proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    nouns: Vec<String>,
    frames: usize,
    best_score: Vec<f64>,
    best_proposal: Vec<Option<usize>>,
}

impl ScoreTable {
    /// Builds a table directly from an `M × T` row-major score grid, with no
    /// proposal indices. Handy for tests and synthetic streams.
    pub fn from_scores(nouns: &NounSet, frames: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != nouns.len() * frames {
            return Err(Error::invalid(format!(
                "score grid has {} entries, expected {}x{}",
                scores.len(),
                nouns.len(),
                frames
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("score {s} outside [0, 1]")));
        }
        let best_proposal = scores.iter().map(|&s| (s > 0.0).then_some(0)).collect();
        Ok(Self { nouns: nouns.as_slice().to_vec(), frames, best_score: scores, best_proposal })
    }

    pub fn noun_count(&self) -> usize {
        self.nouns.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    /// Best score for noun index `i` at 1-based frame `t`.
    pub fn score(&self, i: usize, t: usize) -> f64 {
        self.best_score[i * self.frames + (t - 1)]
    }

    /// Best proposal index, `None` when the noun had no detection in that frame.
    pub fn proposal(&self, i: usize, t: usize) -> Option<usize> {
        self.best_proposal[i * self.frames + (t - 1)]
    }

    /// Score row of noun `i`, indexed by `t - 1`.
    pub fn scores_for(&self, i: usize) -> &[f64] {
        &self.best_score[i * self.frames..(i + 1) * self.frames]
    }

    pub fn with_score(mut self, i: usize, t: usize, score: f64) -> Self {
        self.best_score[i * self.frames + (t - 1)] = score;
        self
    }
}

/// Per-noun thresholds plus the persistence window `K` and minimum span `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub thresholds: Vec<f64>,
    pub persistence: usize,
    pub min_span: usize,
}

impl GateConfig {
    pub fn new(thresholds: Vec<f64>, persistence: usize, min_span: usize) -> Result<Self> {
        if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::invalid(format!("threshold {t} outside (0, 1]")));
        }
        if persistence == 0 {
            return Err(Error::invalid("persistence K must be at least 1"));
        }
        if min_span == 0 {
            return Err(Error::invalid("minimum span L must be at least 1"));
        }
        Ok(Self { thresholds, persistence, min_span })
    }

    pub fn uniform(nouns: usize, threshold: f64, persistence: usize, min_span: usize) -> Result<Self> {
        Self::new(vec![threshold; nouns], persistence, min_span)
    }
}

/// Keeps the highest-scoring proposal per (noun, frame); ties go to the
/// smaller proposal index. Pairs without any record score 0.
pub fn select_best_proposals(detections: &[DetectionRecord], nouns: &NounSet, frames: usize) -> Result<ScoreTable> {
    let m = nouns.len();
    let mut best_score = vec![0.0; m * frames];
    let mut best_proposal: Vec<Option<usize>> = vec![None; m * frames];
    for d in detections {
        let i = nouns
            .index_of(&d.noun)
            .ok_or_else(|| Error::invalid(format!("detection references unknown noun {:?}", d.noun)))?;
        if d.frame == 0 || d.frame > frames {
            return Err(Error::invalid(format!("detection frame {} outside 1..={frames}", d.frame)));
        }
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::invalid(format!("detection score {} outside [0, 1]", d.score)));
        }
        let cell = i * frames + (d.frame - 1);
        let better = match best_proposal[cell] {
            None => true,
            Some(k) => d.score > best_score[cell] || (d.score == best_score[cell] && d.proposal < k),
        };
        if better {
            best_score[cell] = d.score;
            best_proposal[cell] = Some(d.proposal);
        }
    }
    Ok(ScoreTable { nouns: nouns.as_slice().to_vec(), frames, best_score, best_proposal })
}

/// `g_t = 1` iff every noun clears its threshold at frame `t`. With no nouns
/// the product is empty and every frame passes.
pub fn and_gate(table: &ScoreTable, thresholds: &[f64]) -> Result<Vec<bool>> {
    if thresholds.len() != table.noun_count() {
        return Err(Error::invalid(format!("{} thresholds for {} nouns", thresholds.len(), table.noun_count())));
    }
    Ok((1..=table.frames).map(|t| thresholds.iter().enumerate().all(|(i, &tau)| table.score(i, t) >= tau)).collect())
}

/// `Γ_t = g_t ∧ … ∧ g_{t+K-1}`; windows running past the last frame are 0.
pub fn persistence(gate: &[bool], k: usize) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::invalid("persistence K must be at least 1"));
    }
    let n = gate.len();
    let mut out = vec![false; n];
    // length of the run of ones starting at t, computed right to left
    let mut run = 0usize;
    for t in (0..n).rev() {
        run = if gate[t] { run + 1 } else { 0 };
        out[t] = run >= k;
    }
    Ok(out)
}

/// Earliest 1-based frame with `Γ_t = 1`.
pub fn start_time(persist: &[bool]) -> Option<usize> {
    persist.iter().position(|&v| v).map(|i| i + 1)
}

/// Longest maximal run of ones with length at least `min_span`, as a 1-based
/// inclusive interval. Equal lengths resolve to the earliest run.
pub fn extract_span(gate: &[bool], min_span: usize) -> Option<(usize, usize)> {
    let min_span = min_span.max(1);
    let mut best: Option<(usize, usize)> = None;
    let mut t = 0;
    while t < gate.len() {
        if !gate[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < gate.len() && gate[t] {
            t += 1;
        }
        let len = t - start;
        let longer = best.is_none_or(|(s, e)| len > e - s + 1);
        if len >= min_span && longer {
            best = Some((start + 1, t));
        }
    }
    best
}

/// The full gate pipeline for one query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateOutput {
    #[serde(serialize_with = "bits")]
    pub gate: Vec<bool>,
    #[serde(rename = "persist", serialize_with = "bits")]
    pub persistence: Vec<bool>,
    pub t_s: Option<usize>,
    pub span: Option<(usize, usize)>,
}

fn bits<S: serde::Serializer>(v: &[bool], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|&b| u8::from(b)))
}

pub fn run_gate(table: &ScoreTable, config: &GateConfig) -> Result<GateOutput> {
    let gate = and_gate(table, &config.thresholds)?;
    let persist = persistence(&gate, config.persistence)?;
    let t_s = start_time(&persist);
    let span = extract_span(&gate, config.min_span);
    Ok(GateOutput { gate, persistence: persist, t_s, span })
}

/// Masks of the winning proposals at frame `t`, one per noun, when the
/// detector supplied them.
pub fn best_proposal_masks(detections: &[DetectionRecord], table: &ScoreTable, t: usize) -> Vec<Option<BinaryMask>> {
    (0..table.noun_count())
        .map(|i| {
            let k = table.proposal(i, t)?;
            detections
                .iter()
                .find(|d| d.frame == t && d.proposal == k && d.noun == table.nouns[i])
                .and_then(|d| d.mask.clone())
        })
        .collect()
}

/// Reads detection JSONL. Blank lines are skipped; any malformed line fails
/// with its 1-based line number.
pub fn read_detections<R: BufRead>(reader: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Schema { line: idx + 1, message: e.to_string() })?;
        if rec.frame == 0 {
            return Err(Error::Schema { line: idx + 1, message: "frame must be >= 1".into() });
        }
        if !rec.score.is_finite() {
            return Err(Error::Schema { line: idx + 1, message: "score must be finite".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(frame: usize, noun: &str, proposal: usize, score: f64) -> DetectionRecord {
        DetectionRecord { frame, noun: noun.into(), proposal, score, mask: None }
    }

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn singleton_detection() {
        let nouns = NounSet::new(["dog"]);
        let t = select_best_proposals(&[rec(1, "dog", 3, 0.8)], &nouns, 1).unwrap();
        assert_eq!(t.score(0, 1), 0.8);
        assert_eq!(t.proposal(0, 1), Some(3));
    }

    #[test]
    fn score_tie_keeps_smaller_proposal() {
        let nouns = NounSet::new(["dog"]);
        let d = [rec(1, "dog", 5, 0.8), rec(1, "dog", 2, 0.8)];
        let t = select_best_proposals(&d, &nouns, 1).unwrap();
        assert_eq!(t.proposal(0, 1), Some(2));
    }

    #[test]
    fn unknown_noun_is_named() {
        let nouns = NounSet::new(["dog"]);
        let err = select_best_proposals(&[rec(1, "cat", 0, 0.9)], &nouns, 2).unwrap_err();
        assert!(err.to_string().contains("cat"));
    }

    #[test]
    fn missing_detection_scores_zero() {
        let nouns = NounSet::new(["dog", "frisbee"]);
        let t = select_best_proposals(&[rec(2, "dog", 0, 0.7)], &nouns, 3).unwrap();
        assert_eq!(t.score(1, 2), 0.0);
        assert_eq!(t.proposal(1, 2), None);
    }

    #[test]
    fn and_gate_fixtures() {
        let one = NounSet::new(["a"]);
        let t = ScoreTable::from_scores(&one, 1, vec![0.9]).unwrap();
        assert_eq!(and_gate(&t, &[0.5]).unwrap(), vec![true]);

        let two = NounSet::new(["a", "b"]);
        let t = ScoreTable::from_scores(&two, 1, vec![0.9, 0.4]).unwrap();
        assert_eq!(and_gate(&t, &[0.5, 0.5]).unwrap(), vec![false]);
        assert!(and_gate(&t, &[0.5]).is_err());
    }

    #[test]
    fn persistence_fixtures() {
        assert_eq!(persistence(&bits("01110"), 2).unwrap(), bits("01100"));
        let g = bits("1011001");
        assert_eq!(persistence(&g, 1).unwrap(), g);
        assert_eq!(persistence(&bits("111"), 4).unwrap(), bits("000"));
        assert!(persistence(&g, 0).is_err());
    }

    #[test]
    fn start_time_fixtures() {
        assert_eq!(start_time(&bits("01100")), Some(2));
        assert_eq!(start_time(&bits("0000")), None);
    }

    #[test]
    fn span_fixtures() {
        assert_eq!(extract_span(&bits("110111"), 2), Some((4, 6)));
        assert_eq!(extract_span(&bits("11011"), 2), Some((1, 2)));
        assert_eq!(extract_span(&bits("10101"), 2), None);
        assert_eq!(extract_span(&[], 1), None);
    }

    #[test]
    fn gate_output_json() {
        let out = GateOutput { gate: bits("0110"), persistence: bits("0100"), t_s: Some(2), span: Some((2, 3)) };
        assert_eq!(
            serde_json::to_string(&out).unwrap(),
            r#"{"gate":[0,1,1,0],"persist":[0,1,0,0],"t_s":2,"span":[2,3]}"#
        );
    }

    #[test]
    fn detections_jsonl() {
        let text = r#"{"frame": 1, "noun": "dog", "proposal": 0, "score": 0.9}

{"frame": 2, "noun": "dog", "proposal": 1, "score": 0.4, "mask": {"w": 2, "h": 1, "runs": [1, 1]}}
"#;
        let recs = read_detections(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].mask.as_ref().unwrap().area(), 1);

        let bad = "{\"frame\": 1, \"noun\": \"dog\", \"proposal\": 0, \"score\": 0.9}\n{\"frame\": 1}\n";
        match read_detections(bad.as_bytes()) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema error, got {other:?}"),
        }
        let bad_mask =
            r#"{"frame": 1, "noun": "dog", "proposal": 0, "score": 0.9, "mask": {"w": 2, "h": 2, "runs": [1]}}"#;
        assert!(matches!(read_detections(bad_mask.as_bytes()), Err(Error::Schema { line: 1, .. })));
    }
}
