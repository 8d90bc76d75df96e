//! Segmentation quality against ground truth: confusion counts, IoU,
//! pixel-level average precision and frozen-vs-online comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{is_valid_depth, DepthImage};
use crate::error::{Error, Result};
use crate::labels::{Label, LabelMap};
use crate::online::Segmentation;

/// Pixel subset to evaluate on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Pixels without valid depth: where only appearance can provide labels.
pub fn far_field_mask(depth: &DepthImage, max_range: f64) -> RegionMask {
    RegionMask {
        width: depth.width,
        height: depth.height,
        mask: depth.values.iter().map(|&z| !is_valid_depth(z, max_range)).collect(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// 2x2 confusion matrix `matrix[gt][pred]` over class indices
/// (0 = FreeSpace, 1 = Obstacle).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub matrix: [[u64; 2]; 2],
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn class(&self, c: usize) -> ClassCounts {
        let o = 1 - c;
        let m = &self.matrix;
        ClassCounts {
            tp: m[c][c],
            fp: m[o][c],
            fn_: m[c][o],
            tn: m[o][o],
        }
    }

    pub fn free(&self) -> ClassCounts {
        self.class(0)
    }

    pub fn obstacle(&self) -> ClassCounts {
        self.class(1)
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for g in 0..2 {
            for p in 0..2 {
                self.matrix[g][p] += other.matrix[g][p];
            }
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (self.matrix[0][0] + self.matrix[1][1]) as f64 / total as f64)
    }
}

fn check_region(region: Option<&RegionMask>, width: usize, height: usize) -> Result<()> {
    match region {
        Some(r) if r.width != width || r.height != height || r.mask.len() != width * height => {
            Err(Error::InvalidInput(format!(
                "region mask {}x{} does not match {width}x{height}",
                r.width, r.height
            )))
        }
        _ => Ok(()),
    }
}

pub fn confusion(pred: &Segmentation, gt: &LabelMap, region: Option<&RegionMask>) -> Result<ConfusionCounts> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::InvalidInput(format!(
            "prediction {}x{} does not match ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    check_region(region, gt.width, gt.height)?;
    let mut c = ConfusionCounts::default();
    for (i, (&g, &p)) in gt.labels.iter().zip(&pred.classes).enumerate() {
        if region.is_some_and(|r| !r.mask[i]) {
            continue;
        }
        let (Some(gi), Some(pi)) = (g.class_index(), p.class_index()) else {
            continue;
        };
        c.matrix[gi][pi] += 1;
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IouReport {
    pub free: Option<f64>,
    pub obstacle: Option<f64>,
    /// Mean over classes with support; `None` if neither has any.
    pub mean: Option<f64>,
}

fn class_iou(c: ClassCounts) -> Option<f64> {
    let denom = c.tp + c.fp + c.fn_;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

pub fn iou(counts: &ConfusionCounts) -> IouReport {
    let free = class_iou(counts.free());
    let obstacle = class_iou(counts.obstacle());
    let present: Vec<f64> = [free, obstacle].into_iter().flatten().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    IouReport { free, obstacle, mean }
}

/// Pixel-level average precision of the obstacle class.
///
/// Labeled pixels (inside `region`, if given) are ranked by descending
/// confidence, ties by ascending pixel index; AP is the sum over positive
/// ranks k of precision@k times the recall increment 1/P.
pub fn average_precision(confidences: &[f64], gt: &LabelMap, region: Option<&RegionMask>) -> Result<f64> {
    if confidences.len() != gt.labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} confidences for {} ground-truth pixels",
            confidences.len(),
            gt.labels.len()
        )));
    }
    check_region(region, gt.width, gt.height)?;
    let mut ranked: Vec<(usize, f64, bool)> = Vec::new();
    for (i, (&c, &g)) in confidences.iter().zip(&gt.labels).enumerate() {
        if g == Label::Unknown || region.is_some_and(|r| !r.mask[i]) {
            continue;
        }
        if !c.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite confidence at pixel {i}")));
        }
        ranked.push((i, c, g == Label::Obstacle));
    }
    let positives = ranked.iter().filter(|r| r.2).count();
    if positives == 0 {
        return Err(Error::UndefinedAp);
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, r) in ranked.iter().enumerate() {
        if r.2 {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    All,
    FarField,
}

impl Region {
    pub fn tag(self) -> &'static str {
        match self {
            Region::All => "all",
            Region::FarField => "far-field",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(Region::All),
            "far-field" => Some(Region::FarField),
            _ => None,
        }
    }
}

/// Metrics of one frame; `None` where a metric is undefined (no support).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame_id: usize,
    pub iou_free: Option<f64>,
    pub iou_obstacle: Option<f64>,
    pub miou: Option<f64>,
    pub ap: Option<f64>,
    pub accuracy: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["iou_free", "iou_obstacle", "miou", "ap", "accuracy"];

impl FrameMetrics {
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.iou_free, self.iou_obstacle, self.miou, self.ap, self.accuracy]
    }

    fn from_values(frame_id: usize, v: [Option<f64>; 5]) -> Self {
        Self {
            frame_id,
            iou_free: v[0],
            iou_obstacle: v[1],
            miou: v[2],
            ap: v[3],
            accuracy: v[4],
        }
    }
}

/// Scores one frame on the given region.
pub fn frame_metrics(
    frame_id: usize,
    pred: &Segmentation,
    gt: &LabelMap,
    region: Option<&RegionMask>,
) -> Result<FrameMetrics> {
    let counts = confusion(pred, gt, region)?;
    let i = iou(&counts);
    let ap = match average_precision(&pred.confidence, gt, region) {
        Ok(v) => Some(v),
        Err(Error::UndefinedAp) => None,
        Err(e) => return Err(e),
    };
    Ok(FrameMetrics {
        frame_id,
        iou_free: i.free,
        iou_obstacle: i.obstacle,
        miou: i.mean,
        ap,
        accuracy: counts.accuracy(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub region: Region,
    pub frames: Vec<FrameMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn parse_value(s: &str, path: &Path) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::format(path, format!("bad metric value {s:?}")))
}

impl MetricReport {
    pub fn new(region: Region) -> Self {
        Self {
            region,
            frames: Vec::new(),
        }
    }

    /// Per-metric mean over frames where the metric is defined.
    pub fn aggregate(&self) -> [Option<f64>; 5] {
        self.mean_over(|_| true)
    }

    /// Per-metric mean over the frames selected by `keep`.
    pub fn mean_over(&self, keep: impl Fn(usize) -> bool) -> [Option<f64>; 5] {
        let sel: Vec<&FrameMetrics> = self.frames.iter().filter(|f| keep(f.frame_id)).collect();
        std::array::from_fn(|m| mean_defined(sel.iter().map(|f| f.values()[m])))
    }

    /// Mean IoU averaged over frames with ids in `[from, to]`.
    pub fn mean_miou(&self, from: usize, to: usize) -> Option<f64> {
        self.mean_over(|id| (from..=to).contains(&id))[2]
    }

    /// CSV with one row per frame and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_id,");
        out.push_str(&METRIC_NAMES.join(","));
        out.push_str(",region\n");
        let row = |out: &mut String, id: &str, v: [Option<f64>; 5]| {
            let cells: Vec<String> = v.iter().map(|x| fmt_value(*x)).collect();
            let _ = writeln!(out, "{id},{},{}", cells.join(","), self.region.tag());
        };
        for f in &self.frames {
            row(&mut out, &f.frame_id.to_string(), f.values());
        }
        row(&mut out, "mean", self.aggregate());
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::format(path, e.to_string()))?
            .clone();
        let expected: Vec<&str> = std::iter::once("frame_id")
            .chain(METRIC_NAMES)
            .chain(std::iter::once("region"))
            .collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::format(path, "unexpected metrics CSV header"));
        }
        let mut region = None;
        let mut frames = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let r = Region::parse(&rec[6]).ok_or_else(|| Error::format(path, format!("bad region {:?}", &rec[6])))?;
            if region.is_some_and(|x| x != r) {
                return Err(Error::format(path, "mixed regions in one metrics file"));
            }
            region = Some(r);
            if &rec[0] == "mean" {
                continue;
            }
            let id = rec[0]
                .parse()
                .map_err(|_| Error::format(path, format!("bad frame id {:?}", &rec[0])))?;
            let mut v = [None; 5];
            for (m, slot) in v.iter_mut().enumerate() {
                *slot = parse_value(&rec[m + 1], path)?;
            }
            frames.push(FrameMetrics::from_values(id, v));
        }
        let region = region.ok_or_else(|| Error::format(path, "empty metrics file"))?;
        Ok(Self { region, frames })
    }
}

/// Values of [`METRIC_NAMES`], in order.
pub type MetricValues = [Option<f64>; 5];

/// Per-frame and aggregate differences `b - a` between two runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub region: Region,
    pub rows: Vec<(String, MetricValues, MetricValues)>,
}

fn delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

pub fn compare_runs(a: &MetricReport, b: &MetricReport) -> Result<Comparison> {
    if a.region != b.region {
        return Err(Error::InvalidInput(format!(
            "region mismatch: {} vs {}",
            a.region.tag(),
            b.region.tag()
        )));
    }
    let ids_a: Vec<usize> = a.frames.iter().map(|f| f.frame_id).collect();
    let ids_b: Vec<usize> = b.frames.iter().map(|f| f.frame_id).collect();
    if ids_a != ids_b {
        let set_a: std::collections::BTreeSet<_> = ids_a.iter().collect();
        let set_b: std::collections::BTreeSet<_> = ids_b.iter().collect();
        let missing: Vec<String> = set_a.symmetric_difference(&set_b).map(|i| i.to_string()).collect();
        return Err(Error::InvalidInput(format!(
            "runs cover different frames (differing ids: {})",
            if missing.is_empty() {
                "order differs".to_string()
            } else {
                missing.join(" ")
            }
        )));
    }
    let mut rows: Vec<_> = a
        .frames
        .iter()
        .zip(&b.frames)
        .map(|(fa, fb)| (fa.frame_id.to_string(), fa.values(), fb.values()))
        .collect();
    rows.push(("mean".to_string(), a.aggregate(), b.aggregate()));
    Ok(Comparison { region: a.region, rows })
}

impl Comparison {
    pub fn header() -> String {
        let mut cols = vec!["frame_id".to_string()];
        for m in METRIC_NAMES {
            cols.extend([format!("{m}_a"), format!("{m}_b"), format!("{m}_delta")]);
        }
        cols.push("region".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header();
        out.push('\n');
        for (id, a, b) in &self.rows {
            let mut cells = vec![id.clone()];
            for m in 0..5 {
                cells.extend([fmt_value(a[m]), fmt_value(b[m]), fmt_value(delta(a[m], b[m]))]);
            }
            cells.push(self.region.tag().into());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn aggregate_deltas(&self) -> BTreeMap<&'static str, Option<f64>> {
        let (_, a, b) = self.rows.last().expect("aggregate row");
        METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(m, name)| (*name, delta(a[m], b[m])))
            .collect()
    }

    pub fn summary(&self) -> String {
        let (_, a, b) = self.rows.last().expect("aggregate row");
        let mut out = format!("region {} ({} frames)\n", self.region.tag(), self.rows.len() - 1);
        let _ = writeln!(out, "{:<14}{:>10}{:>10}{:>10}", "metric", "a", "b", "b-a");
        for (m, name) in METRIC_NAMES.iter().enumerate() {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(
                out,
                "{name:<14}{:>10}{:>10}{:>10}",
                f(a[m]),
                f(b[m]),
                f(delta(a[m], b[m]))
            );
        }
        out
    }
}
