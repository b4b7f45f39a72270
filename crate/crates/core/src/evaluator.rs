//! Sliding-window video prediction, dataset reports and results tables.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::Network;
use crate::datapipe::{self, AugmentConfig, DatasetManifest, Split, VideoEntry};
use crate::error::{Error, Result};
use crate::ops::softmax_rows;
use crate::tensor::Tensor;
use crate::trainer::argmax;

/// Anything that maps a batch of clips to `(N, K)` logits.
pub trait ClipScorer: Sync {
    fn score_clips(&self, clips: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl ClipScorer for Network<f32> {
    fn score_clips(&self, clips: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.infer(clips)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    /// Mean of the clip softmax vectors.
    pub scores: Vec<f64>,
    pub predicted: usize,
    /// One softmax row per clip.
    pub clip_scores: Vec<Vec<f64>>,
}

/// Softmax per clip, averaged per class, argmax with lowest-index ties.
///
/// Each class column is summed in sorted order, so the result does not
/// depend on the order of the clips at all.
pub fn aggregate_clip_logits(video_id: &str, logits: &Tensor<f32>) -> Result<VideoPrediction> {
    let clip_scores = softmax_rows(logits)?;
    let k = clip_scores[0].len();
    let n = clip_scores.len() as f64;
    let scores: Vec<f64> = (0..k)
        .map(|c| {
            let mut col: Vec<f64> = clip_scores.iter().map(|row| row[c]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
        .collect();
    Ok(VideoPrediction { video_id: video_id.to_string(), predicted: argmax(&scores), scores, clip_scores })
}

/// Scores every evaluation window of `video` and aggregates them.
pub fn predict_video<S: ClipScorer + ?Sized>(
    scorer: &S,
    manifest: &DatasetManifest,
    video: &VideoEntry,
    augment: &AugmentConfig,
    mean: &[f64; 3],
) -> Result<VideoPrediction> {
    let clips = datapipe::evaluation_clips(manifest, video, augment, mean)?;
    let logits = scorer.score_clips(&clips)?;
    if logits.shape()[0] != clips.shape()[0] {
        return Err(Error::dim(format!("{} clips scored as {} rows", clips.shape()[0], logits.shape()[0])));
    }
    aggregate_clip_logits(&video.id, &logits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub architecture: String,
    pub video_accuracy: f64,
    pub clip_accuracy: f64,
    /// `confusion[label][predicted]` video counts.
    pub confusion: Vec<Vec<usize>>,
    pub num_videos: usize,
    pub num_clips: usize,
    pub runtime_seconds: f64,
    pub predictions: Vec<VideoPrediction>,
}

/// Video- and clip-level accuracy of `scorer` on one split.
pub fn evaluate_dataset<S: ClipScorer + ?Sized>(
    scorer: &S,
    architecture: &str,
    manifest: &DatasetManifest,
    split: Split,
    augment: &AugmentConfig,
) -> Result<EvalReport> {
    let start = Instant::now();
    let videos = manifest.split_videos(split);
    if videos.is_empty() {
        return Err(Error::EmptySplit(format!("{split:?} split has no videos")));
    }
    let mean = manifest.require_channel_mean()?;
    let predictions: Vec<VideoPrediction> =
        videos.par_iter().map(|v| predict_video(scorer, manifest, v, augment, &mean)).collect::<Result<_>>()?;

    let k = manifest.num_classes();
    let mut confusion = vec![vec![0; k]; k];
    let (mut correct, mut clip_correct, mut clips) = (0, 0, 0);
    for (v, p) in videos.iter().zip(&predictions) {
        if p.scores.len() != k {
            return Err(Error::dim(format!("scorer produced {} classes, dataset has {k}", p.scores.len())));
        }
        confusion[v.label][p.predicted] += 1;
        correct += usize::from(p.predicted == v.label);
        clip_correct += p.clip_scores.iter().filter(|row| argmax(row) == v.label).count();
        clips += p.clip_scores.len();
    }
    Ok(EvalReport {
        architecture: architecture.to_string(),
        video_accuracy: correct as f64 / videos.len() as f64,
        clip_accuracy: clip_correct as f64 / clips as f64,
        confusion,
        num_videos: videos.len(),
        num_clips: clips,
        runtime_seconds: start.elapsed().as_secs_f64(),
        predictions,
    })
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub architecture: String,
    /// Video-level accuracy in `[0, 1]`.
    pub accuracy: f64,
}

impl From<&EvalReport> for TableRow {
    fn from(r: &EvalReport) -> Self {
        TableRow { architecture: r.architecture.clone(), accuracy: r.video_accuracy }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

fn check_name(name: &str) -> Result<()> {
    if name.trim().is_empty() {
        return Err(Error::Validation("architecture name is blank".into()));
    }
    if name.contains([',', '"', '|', '\n', '\r']) {
        return Err(Error::Validation(format!("architecture name {name:?} contains a table delimiter")));
    }
    Ok(())
}

/// Architecture/accuracy table in row order. Markdown bolds the best
/// accuracy (every row that ties it); CSV keeps full precision.
pub fn emit_results_table(rows: &[TableRow], format: TableFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Validation("no results to tabulate".into()));
    }
    for r in rows {
        check_name(&r.architecture)?;
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(Error::Validation(format!("accuracy {} of {} is outside [0, 1]", r.accuracy, r.architecture)));
        }
    }
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("architecture,accuracy\n");
            for r in rows {
                writeln!(out, "{},{}", r.architecture, r.accuracy).unwrap();
            }
        }
        TableFormat::Markdown => {
            let best = rows.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
            out.push_str("| Architecture | Accuracy |\n|---|---|\n");
            for r in rows {
                let acc = format!("{:.1}%", 100.0 * r.accuracy);
                if r.accuracy == best {
                    writeln!(out, "| **{}** | **{acc}** |", r.architecture).unwrap();
                } else {
                    writeln!(out, "| {} | {acc} |", r.architecture).unwrap();
                }
            }
        }
    }
    Ok(out)
}

/// Reads the CSV written by [`emit_results_table`].
pub fn parse_results_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("architecture,accuracy") {
        return Err(Error::Validation("missing architecture,accuracy header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (name, acc) = l.split_once(',').ok_or_else(|| Error::Validation(format!("malformed row {l:?}")))?;
            let acc = acc.parse().map_err(|_| Error::Validation(format!("bad accuracy in row {l:?}")))?;
            Ok(TableRow { architecture: name.to_string(), accuracy: acc })
        })
        .collect()
}

/// `label,<class names...>` header, then one row of predicted counts per label.
pub fn confusion_csv(report: &EvalReport, class_names: &[String]) -> String {
    let mut out = String::from("label");
    for name in class_names {
        write!(out, ",{name}").unwrap();
    }
    out.push('\n');
    for (name, row) in class_names.iter().zip(&report.confusion) {
        out.push_str(name);
        for n in row {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
    }
    out
}
