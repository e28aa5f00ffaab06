//! Top-1 decoding over a split and Prec@X reporting.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Device;

use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, BBox, EvalReport, DEFAULT_THRESHOLDS};
use crate::fixtures::{DatasetReader, Split};
use crate::model::{batch_inputs, prepare_sample, GroundingModel, PreparedSample};
use crate::relation::Detection;
use crate::runner::checkpoint::load_checkpoint;

pub const EVAL_BATCH: usize = 32;

/// Top-1 detection per sample id. Samples are batched in order; phrases of
/// different lengths go to different batches.
pub fn predict_samples(model: &GroundingModel, samples: &[PreparedSample]) -> Result<BTreeMap<String, Detection>> {
    let mut by_len: BTreeMap<usize, Vec<&PreparedSample>> = BTreeMap::new();
    for s in samples {
        by_len.entry(s.tokens.len()).or_default().push(s);
    }
    let mut out = BTreeMap::new();
    for group in by_len.values() {
        for batch in group.chunks(EVAL_BATCH) {
            let inputs = batch_inputs(batch, &model.config, model.dtype(), &Device::Cpu)?;
            for (s, d) in batch.iter().zip(model.predict(&inputs)?) {
                out.insert(s.sample_id.clone(), d);
            }
        }
    }
    Ok(out)
}

pub fn evaluate_prepared(model: &GroundingModel, samples: &[PreparedSample]) -> Result<EvalReport> {
    let preds: BTreeMap<String, BBox> = predict_samples(model, samples)?
        .into_iter()
        .map(|(k, d)| (k, d.bbox))
        .collect();
    let gts: Vec<(String, BBox)> = samples.iter().map(|s| (s.sample_id.clone(), s.gt_box)).collect();
    Ok(evaluate(&preds, &gts, &DEFAULT_THRESHOLDS))
}

pub fn prepare_split(model: &GroundingModel, reader: &DatasetReader, split: Split) -> Result<Vec<PreparedSample>> {
    reader
        .load_split(split)?
        .iter()
        .map(|s| prepare_sample(s, &model.config))
        .collect()
}

pub fn evaluate_checkpoint(checkpoint: &Path, dataset_root: &Path, split: Split) -> Result<EvalReport> {
    let state = load_checkpoint(checkpoint)?;
    let reader = DatasetReader::open(dataset_root)?;
    if reader.vocabulary().len() != state.model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary has {} words, dataset has {}",
            state.model.config.vocab_size,
            reader.vocabulary().len()
        )));
    }
    let samples = prepare_split(&state.model, &reader, split)?;
    evaluate_prepared(&state.model, &samples)
}

/// Writes `report.txt`, `report.json` and `per_sample.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("report.txt", report.to_table())?;
    write("report.json", serde_json::to_string_pretty(report)?)?;
    write("per_sample.csv", report.per_sample_csv())?;
    Ok(())
}
