//! Interval overlap metrics and benchmark-style aggregates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const GQA_IOP_THRESHOLD: f64 = 0.5;

/// A time segment in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

impl Interval {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || end_s < start_s {
            return Err(Error::invalid(format!("invalid interval [{start_s}, {end_s}]")));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn length(&self) -> f64 {
        self.end_s - self.start_s
    }

    fn overlap(&self, other: &Interval) -> f64 {
        (self.end_s.min(other.end_s) - self.start_s.max(other.start_s)).max(0.0)
    }
}

pub fn interval_iou(a: &Interval, b: &Interval) -> f64 {
    let inter = a.overlap(b);
    let union = a.length() + b.length() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Intersection over the predicted length. A zero-length prediction scores 1
/// when it lies inside the ground truth and 0 otherwise.
pub fn interval_iop(pred: &Interval, gt: &Interval) -> f64 {
    if pred.length() > 0.0 {
        pred.overlap(gt) / pred.length()
    } else if pred.start_s >= gt.start_s && pred.end_s <= gt.end_s {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub pred: Interval,
    pub gt: Interval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_correct: Option<bool>,
}

/// Aggregate scores as percentages rounded to one decimal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub count: usize,
    /// `R@θ` keyed by the threshold as written, e.g. `"0.5"`.
    pub recall: BTreeMap<String, f64>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "mIoP")]
    pub miop: f64,
    #[serde(rename = "Acc@GQA", skip_serializing_if = "Option::is_none")]
    pub acc_gqa: Option<f64>,
}

/// Half-up rounding to one decimal place. The small bias absorbs binary
/// representation error so that e.g. 62.25 rounds to 62.3.
pub fn round_percent(x: f64) -> f64 {
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

fn threshold_key(theta: f64) -> String {
    let s = format!("{theta}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Acc@GQA is reported only when every record carries `answer_correct`.
pub fn aggregate(records: &[EvalRecord], thresholds: &[f64]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::invalid("no records to aggregate"));
    }
    let mut ordered: Vec<&EvalRecord> = records.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let n = ordered.len() as f64;
    let ious: Vec<f64> = ordered.iter().map(|r| interval_iou(&r.pred, &r.gt)).collect();
    let iops: Vec<f64> = ordered.iter().map(|r| interval_iop(&r.pred, &r.gt)).collect();
    let recall = thresholds
        .iter()
        .map(|&theta| {
            let hits = ious.iter().filter(|&&v| v >= theta).count();
            (threshold_key(theta), round_percent(100.0 * hits as f64 / n))
        })
        .collect();
    let acc_gqa = ordered
        .iter()
        .zip(&iops)
        .map(|(r, &iop)| r.answer_correct.map(|ok| ok && iop >= GQA_IOP_THRESHOLD))
        .collect::<Option<Vec<bool>>>()
        .map(|hits| round_percent(100.0 * hits.iter().filter(|&&h| h).count() as f64 / n));
    Ok(Report {
        count: ordered.len(),
        recall,
        miou: round_percent(100.0 * ious.iter().sum::<f64>() / n),
        miop: round_percent(100.0 * iops.iter().sum::<f64>() / n),
        acc_gqa,
    })
}

impl Report {
    pub fn to_table(&self) -> String {
        let mut cols: Vec<(String, f64)> = self.recall.iter().map(|(k, v)| (format!("R@{k}"), *v)).collect();
        cols.push(("mIoU".into(), self.miou));
        cols.push(("mIoP".into(), self.miop));
        if let Some(acc) = self.acc_gqa {
            cols.push(("Acc@GQA".into(), acc));
        }
        let cells: Vec<(String, String)> = cols.into_iter().map(|(k, v)| (k, format!("{v:.1}"))).collect();
        let widths: Vec<usize> = cells.iter().map(|(k, v)| k.len().max(v.len())).collect();
        let mut out = String::new();
        for ((k, _), w) in cells.iter().zip(&widths) {
            let _ = write!(out, "{k:>w$}  ");
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
        for ((_, v), w) in cells.iter().zip(&widths) {
            let _ = write!(out, "{v:>w$}  ");
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
        out
    }
}

/// One ground-truth line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub id: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_correct: Option<bool>,
}

/// Ids present in only one of the two inputs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct IdMismatch {
    pub missing_ground_truth: Vec<String>,
    pub missing_prediction: Vec<String>,
}

/// Parses JSONL where every non-blank line must deserialize as `T`.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Schema { line: i + 1, message: e.to_string() })?;
        out.push(row);
    }
    Ok(out)
}

/// Pairs predictions with ground truth by id. Duplicate ids are schema errors.
pub fn join_records(
    preds: &[(String, Interval)],
    gts: &[GroundTruthRow],
) -> Result<std::result::Result<Vec<EvalRecord>, IdMismatch>> {
    let mut gt_by_id = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        let interval =
            Interval::new(g.start_s, g.end_s).map_err(|e| Error::Schema { line: i + 1, message: e.to_string() })?;
        if gt_by_id.insert(g.id.as_str(), (interval, g.answer_correct)).is_some() {
            return Err(Error::Schema { line: i + 1, message: format!("duplicate id {:?}", g.id) });
        }
    }
    let mut seen = BTreeSet::new();
    let mut mismatch = IdMismatch::default();
    let mut records = Vec::with_capacity(preds.len());
    for (i, (id, pred)) in preds.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(Error::Schema { line: i + 1, message: format!("duplicate id {id:?}") });
        }
        match gt_by_id.get(id.as_str()) {
            Some(&(gt, answer_correct)) => records.push(EvalRecord { id: id.clone(), pred: *pred, gt, answer_correct }),
            None => mismatch.missing_ground_truth.push(id.clone()),
        }
    }
    mismatch.missing_prediction = gt_by_id.keys().filter(|k| !seen.contains(*k)).map(|k| k.to_string()).collect();
    mismatch.missing_ground_truth.sort();
    if mismatch == IdMismatch::default() {
        Ok(Ok(records))
    } else {
        Ok(Err(mismatch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(a: f64, b: f64) -> Interval {
        Interval::new(a, b).unwrap()
    }

    fn rec(id: &str, pred: Interval, gt: Interval, ok: Option<bool>) -> EvalRecord {
        EvalRecord { id: id.into(), pred, gt, answer_correct: ok }
    }

    #[test]
    fn iou_fixtures() {
        assert_eq!(interval_iou(&iv(1.0, 3.0), &iv(1.0, 3.0)), 1.0);
        assert_eq!(interval_iou(&iv(0.0, 1.0), &iv(2.0, 3.0)), 0.0);
        assert!((interval_iou(&iv(2.0, 6.0), &iv(4.0, 8.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(interval_iou(&iv(2.0, 2.0), &iv(2.0, 2.0)), 0.0);
    }

    #[test]
    fn iop_fixtures() {
        assert_eq!(interval_iop(&iv(3.0, 4.0), &iv(2.0, 10.0)), 1.0);
        assert_eq!(interval_iop(&iv(0.0, 1.0), &iv(2.0, 10.0)), 0.0);
        assert_eq!(interval_iop(&iv(0.0, 4.0), &iv(2.0, 10.0)), 0.5);
        assert_eq!(interval_iop(&iv(5.0, 5.0), &iv(2.0, 10.0)), 1.0);
        assert_eq!(interval_iop(&iv(11.0, 11.0), &iv(2.0, 10.0)), 0.0);
    }

    #[test]
    fn invalid_interval_rejected() {
        assert!(Interval::new(3.0, 2.0).is_err());
        assert!(Interval::new(-1.0, 2.0).is_err());
        assert!(Interval::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn perfect_record() {
        let r = aggregate(&[rec("a", iv(1.0, 2.0), iv(1.0, 2.0), None)], &DEFAULT_IOU_THRESHOLDS).unwrap();
        assert!(r.recall.values().all(|&v| v == 100.0));
        assert_eq!(r.miou, 100.0);
        assert_eq!(r.acc_gqa, None);
    }

    #[test]
    fn gqa_two_record_fixture() {
        // IoP 0.6 and 0.4
        let records =
            [rec("a", iv(0.0, 10.0), iv(4.0, 20.0), Some(true)), rec("b", iv(0.0, 10.0), iv(6.0, 20.0), Some(true))];
        let r = aggregate(&records, &[0.5]).unwrap();
        assert_eq!(r.acc_gqa, Some(50.0));
        assert_eq!(r.miop, 50.0);
    }

    #[test]
    fn empty_aggregate_rejected() {
        assert!(aggregate(&[], &[0.5]).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_percent(62.25), 62.3);
        assert_eq!(round_percent(100.0 / 3.0), 33.3);
        assert_eq!(round_percent(200.0 / 3.0), 66.7);
        assert_eq!(round_percent(0.05), 0.1);
    }

    #[test]
    fn table_and_json_shape() {
        let r = aggregate(&[rec("a", iv(0.0, 2.0), iv(1.0, 3.0), Some(false))], &[0.3, 0.5]).unwrap();
        let table = r.to_table();
        assert!(table.lines().next().unwrap().starts_with("R@0.3"));
        assert!(table.contains("33.3"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["mIoU"], 33.3);
        assert_eq!(json["recall"]["0.3"], 100.0);
        assert_eq!(json["Acc@GQA"], 0.0);
        assert_eq!(threshold_key(1.0), "1.0");
    }

    #[test]
    fn join_reports_both_sides() {
        let gts = vec![
            GroundTruthRow { id: "a".into(), start_s: 0.0, end_s: 1.0, answer_correct: None },
            GroundTruthRow { id: "c".into(), start_s: 0.0, end_s: 1.0, answer_correct: None },
        ];
        let preds = vec![("a".to_string(), iv(0.0, 1.0)), ("b".to_string(), iv(0.0, 1.0))];
        let m = join_records(&preds, &gts).unwrap().unwrap_err();
        assert_eq!(m.missing_ground_truth, vec!["b"]);
        assert_eq!(m.missing_prediction, vec!["c"]);
        let ok = join_records(&preds[..1], &gts[..1]).unwrap().unwrap();
        assert_eq!(ok.len(), 1);
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let text = "{\"id\":\"a\",\"start_s\":0,\"end_s\":1}\n\n{\"id\":\"b\"}\n";
        match read_jsonl::<GroundTruthRow, _>(text.as_bytes()) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
