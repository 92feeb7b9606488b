//! The demo's on-disk artifact bundle.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use vdit_core::alignment_loss::write_loss_trace;
use vdit_core::backbone_adapter::write_adapters;
use vdit_core::config::RunConfig;
use vdit_core::demo::DemoOutcome;
use vdit_core::dtl_encoder::LatentVideo;
use vdit_core::grounding_gate::BinaryMask;
use vdit_core::metrics::{aggregate, EvalRecord, GroundTruthRow, DEFAULT_IOU_THRESHOLDS};
use vdit_core::numerics::Matrix;
use vdit_core::span_decoder::{write_predictions, PredictionRow};

use crate::error::{CliError, CliResult};

#[derive(Serialize)]
struct MaskLine<'a> {
    frame: usize,
    mask: &'a BinaryMask,
}

fn put(dir: &Path, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> vdit_core::Result<()>) -> CliResult<()> {
    let mut buf = Vec::new();
    fill(&mut buf).map_err(|e| CliError::stage("output", format!("{name}: {e}")))?;
    std::fs::write(dir.join(name), buf).map_err(|e| CliError::stage("output", format!("{name}: {e}")))
}

fn jsonl<T: Serialize>(buf: &mut Vec<u8>, rows: impl IntoIterator<Item = T>) -> vdit_core::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut *buf, &row)?;
        buf.push(b'\n');
    }
    Ok(())
}

fn grid(buf: &mut Vec<u8>, m: &Matrix) -> vdit_core::Result<()> {
    LatentVideo::new(m.clone())?.write_to(buf)
}

pub fn write_bundle(dir: &Path, config: &RunConfig, outcome: &DemoOutcome) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::stage("output", format!("{}: {e}", dir.display())))?;
    let DemoOutcome { video, model, run, training_trace, .. } = outcome;
    let frames = video.latent.frames();

    put(dir, "config.txt", |b| {
        b.extend_from_slice(config.dump().as_bytes());
        Ok(())
    })?;
    put(dir, "query.txt", |b| Ok(writeln!(b, "{}", video.query)?))?;
    put(dir, "detections.jsonl", |b| jsonl(b, &video.detections))?;
    put(dir, "latent.bin", |b| video.latent.write_to(b))?;
    put(dir, "gate.json", |b| {
        serde_json::to_writer(&mut *b, &run.gate)?;
        b.push(b'\n');
        Ok(())
    })?;
    put(dir, "masks.jsonl", |b| {
        jsonl(b, run.union_masks.iter().enumerate().map(|(i, mask)| MaskLine { frame: i + 1, mask }))
    })?;
    put(dir, "dtl_features.bin", |b| grid(b, &run.dtl_features))?;
    put(dir, "features.bin", |b| grid(b, &run.embeddings))?;
    put(dir, "tokens.jsonl", |b| jsonl(b, run.sequence.dump_rows()))?;
    put(dir, "hidden.bin", |b| grid(b, &run.hidden))?;
    put(dir, "heads.json", |b| {
        serde_json::to_writer_pretty(&mut *b, &model.heads)?;
        b.push(b'\n');
        Ok(())
    })?;
    put(dir, "adapters.bin", |b| {
        let layers: Vec<(u64, &_)> = [&model.adapters.up, &model.adapters.down]
            .into_iter()
            .enumerate()
            .filter_map(|(i, a)| a.as_ref().map(|a| (i as u64, a)))
            .collect();
        write_adapters(b, &layers)
    })?;
    put(dir, "loss_trace.csv", |b| write_loss_trace(b, training_trace))?;

    let prediction = PredictionRow::new(&video.id, &run.span, frames, video.duration_s);
    put(dir, "prediction.jsonl", |b| write_predictions(b, std::slice::from_ref(&prediction)))?;
    let gt = video.gt_interval();
    let gt_row = GroundTruthRow { id: video.id.clone(), start_s: gt.start_s, end_s: gt.end_s, answer_correct: None };
    put(dir, "gt.jsonl", |b| jsonl(b, [&gt_row]))?;

    let record = EvalRecord { id: video.id.clone(), pred: run.interval, gt, answer_correct: None };
    let report = aggregate(&[record], &DEFAULT_IOU_THRESHOLDS).map_err(|e| CliError::stage("eval", e))?;
    put(dir, "report.json", |b| {
        serde_json::to_writer_pretty(&mut *b, &report)?;
        b.push(b'\n');
        Ok(())
    })?;
    put(dir, "report.txt", |b| {
        b.extend_from_slice(report.to_table().as_bytes());
        Ok(())
    })?;
    Ok(())
}
