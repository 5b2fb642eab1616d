//! Clip-level metrics, sliding-window timelines and comparison reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ActionLabel, Clip, VideoManifest};
use crate::network::{Classifier, HeadKind, Mode, Probs};
use crate::sampler::{ClipSource, FrameSequence, SamplerConfig};
use crate::trainer::{predicts_target, LabeledClips};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("the average is taken over exactly six actions, got {0}")]
    AverageCount(usize),
    #[error("video {video_id} has {frame_count} frames, shorter than one window of {window_len}")]
    TooShort {
        video_id: String,
        frame_count: usize,
        window_len: usize,
    },
    #[error("window_len and stride must be >= 1")]
    Window,
    #[error("report schema error: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Counts over `(predicted, truth)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for (p, t) in pairs {
            c.record(p, t);
        }
        c
    }

    /// The same table with the positive class swapped.
    pub fn swapped(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accuracy, precision, recall and F1; a `0/0` anywhere yields 0.
pub fn compute_metrics(c: &ConfusionCounts) -> Result<Metrics, EvalError> {
    let total = c.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(Metrics {
        accuracy: (tp + tn) / total as f64,
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    })
}

pub fn average_accuracy(per_action: &[f64]) -> Result<f64, EvalError> {
    if per_action.len() != 6 {
        return Err(EvalError::AverageCount(per_action.len()));
    }
    Ok(per_action.iter().sum::<f64>() / 6.0)
}

/// Anything that turns a frame sequence into class probabilities.
pub trait ClipScorer {
    fn score(&self, sequence: &FrameSequence) -> crate::Result<Probs>;
}

impl ClipScorer for Classifier {
    fn score(&self, sequence: &FrameSequence) -> crate::Result<Probs> {
        Ok(self.forward(sequence, Mode::Inference)?)
    }
}

/// Center-sample each clip, score it and tally the argmax decisions.
pub fn evaluate_clips(
    scorer: &dyn ClipScorer,
    clips: &LabeledClips<'_>,
    source: &dyn ClipSource,
    sequence_length: usize,
) -> crate::Result<ConfusionCounts> {
    if clips.is_empty() {
        return Err(EvalError::Empty.into());
    }
    let sampler = SamplerConfig::center(sequence_length);
    let mut counts = ConfusionCounts::default();
    for &(clip, truth) in clips {
        let seq = source.sample(clip, &sampler)?;
        counts.record(predicts_target(scorer.score(&seq)?), truth);
    }
    Ok(counts)
}

/// Window starts `0, stride, ...` with the final partial window dropped.
pub fn window_starts(frame_count: usize, window_len: usize, stride: usize) -> Result<Vec<usize>, EvalError> {
    if window_len == 0 || stride == 0 {
        return Err(EvalError::Window);
    }
    if frame_count < window_len {
        return Err(EvalError::TooShort {
            video_id: String::new(),
            frame_count,
            window_len,
        });
    }
    Ok((0..=(frame_count - window_len) / stride).map(|i| i * stride).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineWindow {
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTimeline {
    pub video_id: String,
    pub action: ActionLabel,
    pub windows: Vec<TimelineWindow>,
}

/// Score every window of `video` with each action's model.
pub fn sliding_window_infer(
    video: &VideoManifest,
    models: &[(ActionLabel, &dyn ClipScorer)],
    source: &dyn ClipSource,
    window_len: usize,
    stride: usize,
    sequence_length: usize,
) -> crate::Result<Vec<ActionTimeline>> {
    let starts = window_starts(video.frame_count, window_len, stride).map_err(|e| match e {
        EvalError::TooShort { frame_count, window_len, .. } => EvalError::TooShort {
            video_id: video.video_id.clone(),
            frame_count,
            window_len,
        },
        other => other,
    })?;
    let mut timelines: Vec<ActionTimeline> = models
        .iter()
        .map(|&(action, _)| ActionTimeline {
            video_id: video.video_id.clone(),
            action,
            windows: Vec::with_capacity(starts.len()),
        })
        .collect();
    let sampler = SamplerConfig::center(sequence_length);
    for &start in &starts {
        let mut clip = Clip::original(&video.video_id, ActionLabel::Other, start, window_len);
        clip.clip_id = format!("{}__window__{start:06}", video.video_id);
        let seq = source.sample(&clip, &sampler)?;
        for (timeline, (_, model)) in timelines.iter_mut().zip(models) {
            timeline.windows.push(TimelineWindow {
                start_frame: start,
                end_frame: start + window_len,
                probability: model.score(&seq)?[1],
            });
        }
    }
    Ok(timelines)
}

pub fn timelines_csv(timelines: &[ActionTimeline]) -> String {
    let mut out = String::from("video_id,action,start_frame,end_frame,probability\n");
    for t in timelines {
        for w in &t.windows {
            writeln!(
                out,
                "{},{},{},{},{:.6}",
                t.video_id, t.action, w.start_frame, w.end_frame, w.probability
            )
            .expect("string write");
        }
    }
    out
}

/// One evaluated (backbone, head, action) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub backbone: String,
    pub head: HeadKind,
    pub action: ActionLabel,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

pub const REPORT_HEADER: &str = "backbone,head,action,accuracy,precision,recall,f1";

impl MetricsReport {
    /// Parse the CSV written by [`render_report`]; `average` rows are
    /// recomputed on render and skipped here.
    pub fn from_csv(text: &str) -> Result<MetricsReport, EvalError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == REPORT_HEADER => {}
            other => return Err(EvalError::Schema(format!("unexpected header {other:?}"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line_no = i + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(EvalError::Schema(format!("line {line_no}: expected 7 fields")));
            }
            if fields[2] == "average" {
                continue;
            }
            let head: HeadKind = fields[1]
                .parse()
                .map_err(|_| EvalError::Schema(format!("line {line_no}: unknown head {}", fields[1])))?;
            let action: ActionLabel = fields[2]
                .parse()
                .map_err(|_| EvalError::Schema(format!("line {line_no}: unknown action {}", fields[2])))?;
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| EvalError::Schema(format!("line {line_no}: bad number {s:?}")))
            };
            rows.push(MetricsRow {
                backbone: fields[0].to_string(),
                head,
                action,
                metrics: Metrics {
                    accuracy: num(fields[3])?,
                    precision: num(fields[4])?,
                    recall: num(fields[5])?,
                    f1: num(fields[6])?,
                },
            });
        }
        Ok(MetricsReport { rows })
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }
}

/// One (backbone, head) line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub backbone: String,
    pub head: HeadKind,
    /// In the order of [`RenderedReport::actions`].
    pub metrics: Vec<Metrics>,
    /// Present when the line covers exactly six actions.
    pub average_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub actions: Vec<ActionLabel>,
    pub lines: Vec<ReportLine>,
    pub csv: String,
    pub table: String,
    pub f1_csv: String,
}

fn group_rows(report: &MetricsReport) -> Result<(Vec<ActionLabel>, Vec<ReportLine>), EvalError> {
    if report.rows.is_empty() {
        return Err(EvalError::Schema("no rows to report".into()));
    }
    let mut groups: BTreeMap<(String, HeadKind), BTreeMap<ActionLabel, Metrics>> = BTreeMap::new();
    for row in &report.rows {
        let group = groups.entry((row.backbone.clone(), row.head)).or_default();
        if group.insert(row.action, row.metrics).is_some() {
            return Err(EvalError::Schema(format!(
                "duplicate row for {} / {} / {}",
                row.backbone, row.head, row.action
            )));
        }
    }
    let action_set: BTreeSet<ActionLabel> = groups.values().next().expect("non-empty").keys().copied().collect();
    for ((backbone, head), group) in &groups {
        let set: BTreeSet<ActionLabel> = group.keys().copied().collect();
        if set != action_set {
            return Err(EvalError::Schema(format!(
                "{backbone} / {head} covers a different action set than the other rows"
            )));
        }
    }
    let actions: Vec<ActionLabel> = ActionLabel::ALL.into_iter().filter(|a| action_set.contains(a)).collect();
    let mut lines = Vec::new();
    for ((backbone, head), group) in groups {
        let metrics: Vec<Metrics> = actions.iter().map(|a| group[a]).collect();
        let accuracies: Vec<f64> = metrics.iter().map(|m| m.accuracy).collect();
        lines.push(ReportLine {
            backbone,
            head,
            metrics,
            average_accuracy: average_accuracy(&accuracies).ok(),
        });
    }
    Ok((actions, lines))
}

fn best_marks(values: impl Iterator<Item = Option<f64>> + Clone) -> Option<f64> {
    values.flatten().fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
}

fn render_table(actions: &[ActionLabel], lines: &[ReportLine]) -> String {
    let mut header = vec!["Backbone".to_string(), "Head".to_string()];
    header.extend(actions.iter().map(|a| a.title().to_string()));
    header.push("Average".to_string());

    let columns = actions.len() + 1;
    let value = |line: &ReportLine, col: usize| {
        if col < actions.len() {
            Some(line.metrics[col].accuracy)
        } else {
            line.average_accuracy
        }
    };
    let best: Vec<Option<f64>> = (0..columns)
        .map(|col| best_marks(lines.iter().map(move |l| value(l, col))))
        .collect();

    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut previous_backbone: Option<&str> = None;
    for line in lines {
        let mut row = Vec::with_capacity(columns + 2);
        let first_of_group = previous_backbone != Some(line.backbone.as_str());
        row.push(if first_of_group { line.backbone.clone() } else { String::new() });
        row.push(line.head.title().to_string());
        for (col, best) in best.iter().enumerate() {
            row.push(match value(line, col) {
                Some(v) => {
                    let mark = if Some(v) == *best { "*" } else { " " };
                    format!("{:.2}{mark}", v * 100.0)
                }
                None => "- ".to_string(),
            });
        }
        previous_backbone = Some(line.backbone.as_str());
        cells.push(row);
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |row: &[String]| {
        let parts: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| if i < 2 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
    let mut out = String::new();
    out.push_str(&fmt_row(&header));
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for (i, row) in cells.iter().enumerate() {
        if i > 0 && !row[0].is_empty() {
            out.push_str(&rule);
            out.push('\n');
        }
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out.push_str("accuracy in %, * = best in column\n");
    out
}

/// CSV, aligned text table and per-action F1 data for a set of rows.
pub fn render_report(report: &MetricsReport) -> Result<RenderedReport, EvalError> {
    let (actions, lines) = group_rows(report)?;
    let mut csv = format!("{REPORT_HEADER}\n");
    let mut f1_csv = String::from("backbone,head,action,f1\n");
    for line in &lines {
        for (action, m) in actions.iter().zip(&line.metrics) {
            writeln!(
                csv,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                line.backbone, line.head, action, m.accuracy, m.precision, m.recall, m.f1
            )
            .expect("string write");
            writeln!(f1_csv, "{},{},{},{:.6}", line.backbone, line.head, action, m.f1).expect("string write");
        }
        if let Some(avg) = line.average_accuracy {
            writeln!(csv, "{},{},average,{avg:.6},,,", line.backbone, line.head).expect("string write");
        }
    }
    let table = render_table(&actions, &lines);
    Ok(RenderedReport {
        actions,
        lines,
        csv,
        table,
        f1_csv,
    })
}
