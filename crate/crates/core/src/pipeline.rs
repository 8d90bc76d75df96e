//! Experiment drivers behind the command-line tool: offline pretraining,
//! sequence replay in online or frozen mode, evaluation and gradcheck.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{frame_file_name, read_intrinsics, read_label_png, SequenceReader};
use crate::error::{Error, Result};
use crate::ground_plane::RansacConfig;
use crate::labels::{generate_labels, Label, LabelMap, LabelingConfig};
use crate::metrics::{compare_runs, far_field_mask, frame_metrics, Comparison, MetricReport, Region};
use crate::network::gradcheck::{run_gradcheck, GradcheckReport};
use crate::network::{
    batch_gradient, normalize_rgb, sgd_step, Example, FeatureMap, LossConfig, NetworkParams, ParamsFile, TrainScope,
    INPUT_HEIGHT, INPUT_WIDTH,
};
use crate::online::{fit_frame_plane, run_sequence, LoopConfig, OnlineConfig, OnlineLearner, Segmentation};

fn create_dir_all(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Opens a sequence at network resolution.
pub fn open_sequence(dir: &Path) -> Result<SequenceReader> {
    let scale = SequenceReader::scale_for(dir, INPUT_WIDTH, INPUT_HEIGHT)?;
    SequenceReader::open_scaled(dir, scale)
}

fn check_disjoint(train: &[u64], test: &[u64]) -> Result<()> {
    let overlap: Vec<u64> = train
        .iter()
        .filter(|s| test.contains(s))
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::SeedOverlap(overlap))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub ransac: RansacConfig,
    pub labeling: LabelingConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_frames: 4,
            lr: 0.02,
            momentum: 0.9,
            seed: 0,
            loss: LossConfig::default(),
            ransac: RansacConfig::default(),
            labeling: LabelingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub train_seeds: Vec<u64>,
    pub frames_used: usize,
    pub frames_skipped: usize,
    /// Mean mini-batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

struct TrainFrame {
    image: FeatureMap,
    labels: LabelMap,
}

/// Trains the whole network offline on geometry-generated labels of the
/// given sequences. Scene seeds of synthetic training sequences must not
/// appear in `test_seeds`.
pub fn pretrain(
    sequences: &[PathBuf],
    cfg: &PretrainConfig,
    test_seeds: &[u64],
) -> Result<(ParamsFile, PretrainReport)> {
    if cfg.batch_frames == 0 {
        return Err(Error::Config("pretrain batch_frames must be >= 1".into()));
    }
    cfg.loss.validate()?;
    cfg.ransac.validate()?;
    cfg.labeling.validate()?;
    let loop_cfg = LoopConfig {
        ransac: cfg.ransac,
        labeling: cfg.labeling,
        infer_every_k: 1,
    };
    let mut train_seeds = Vec::new();
    let mut readers = Vec::new();
    for dir in sequences {
        let reader = open_sequence(dir)?;
        if let Some(seed) = reader.scene_seed()? {
            train_seeds.push(seed);
        }
        readers.push(reader);
    }
    check_disjoint(&train_seeds, test_seeds)?;

    let mut frames = Vec::new();
    let mut skipped = 0;
    for reader in &readers {
        let k = reader.intrinsics;
        for frame in reader.frames() {
            let f = frame?;
            let labels = match fit_frame_plane(&f.depth, &k, &f.pose, &loop_cfg, f.frame_id) {
                Ok(plane) => generate_labels(&f.depth, &k, &plane, &cfg.labeling)?,
                Err(Error::NoGroundPlane(_) | Error::DegenerateGeometry(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if labels.is_all_unknown() {
                skipped += 1;
                continue;
            }
            frames.push(TrainFrame {
                image: normalize_rgb(k.width, k.height, &f.rgb)?,
                labels,
            });
        }
    }

    let mut params = NetworkParams::xavier(cfg.seed);
    let mut velocity = NetworkParams::zeros();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        if frames.is_empty() {
            break;
        }
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_frames) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (Example::Image(&frames[i].image), &frames[i].labels))
                .collect();
            let (loss, grads) = batch_gradient(&params, &batch, &cfg.loss, TrainScope::All)?;
            sgd_step(
                &mut params,
                &grads,
                cfg.lr,
                cfg.momentum,
                &mut velocity,
                TrainScope::All,
            )?;
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    if !params.is_finite() {
        return Err(Error::CheckFailed(
            "pretraining diverged (non-finite parameters)".into(),
        ));
    }
    let report = PretrainReport {
        train_seeds: train_seeds.clone(),
        frames_used: frames.len(),
        frames_skipped: skipped,
        epoch_losses,
    };
    Ok((ParamsFile { params, train_seeds }, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Online,
    Frozen,
}

/// Everything a replay run needs, loadable from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sequence: PathBuf,
    /// Defaults to the sequence's own intrinsics file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<PathBuf>,
    pub params: PathBuf,
    pub output: PathBuf,
    pub mode: Mode,
    /// Re-draw the decoder with Xavier initialization before the run.
    pub reset_decoder: bool,
    pub decoder_seed: u64,
    pub infer_every_k: usize,
    pub ransac: RansacConfig,
    pub labeling: LabelingConfig,
    pub online: OnlineConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sequence: PathBuf::from("data/shift"),
            intrinsics: None,
            params: PathBuf::from("pretrained.bin"),
            output: PathBuf::from("runs/online"),
            mode: Mode::Online,
            reset_decoder: false,
            decoder_seed: 0,
            infer_every_k: 1,
            ransac: RansacConfig::default(),
            labeling: LabelingConfig::default(),
            online: OnlineConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Default configuration with every key spelled out.
    pub fn default_toml() -> String {
        let mut out = String::from(
            "# nearfar replay configuration\n\
             # intrinsics = \"path/to/intrinsics.txt\"  (default: <sequence>/intrinsics.txt)\n",
        );
        out.push_str(&Self::default().to_toml());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.ransac.validate()?;
        self.labeling.validate()?;
        self.online.validate()?;
        self.loss.validate()?;
        if self.infer_every_k == 0 {
            return Err(Error::Config("infer_every_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            ransac: self.ransac,
            labeling: self.labeling,
            infer_every_k: self.infer_every_k,
        }
    }

    /// Online settings after applying the mode: frozen runs never update.
    pub fn effective_online(&self) -> OnlineConfig {
        match self.mode {
            Mode::Online => self.online,
            Mode::Frozen => OnlineConfig {
                steps_per_frame: 0,
                ..self.online
            },
        }
    }
}

pub const RUN_LOG: &str = "run.log";
pub const PRED_DIR: &str = "pred";
pub const OVERLAY_DIR: &str = "overlays";
pub const FINAL_PARAMS: &str = "final_params.bin";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn metrics_file_name(region: Region) -> &'static str {
    match region {
        Region::All => "metrics_all.csv",
        Region::FarField => "metrics_far_field.csv",
    }
}

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Alpha-blends red over obstacle and blue over free-space pixels; `None`
/// leaves the pixel untinted.
pub fn overlay(rgb: &[u8], width: usize, height: usize, class_at: impl Fn(usize) -> Option<Label>) -> RgbImage {
    let mut out = RgbImage::from_raw(width as u32, height as u32, rgb.to_vec()).expect("rgb buffer size");
    for (i, px) in out.pixels_mut().enumerate() {
        let tint = match class_at(i) {
            Some(Label::Obstacle) => [255.0, 0.0, 0.0],
            Some(Label::FreeSpace) => [0.0, 0.0, 255.0],
            _ => continue,
        };
        for c in 0..3 {
            px[c] = ((1.0 - OVERLAY_ALPHA) * px[c] as f64 + OVERLAY_ALPHA * tint[c]).round() as u8;
        }
    }
    out
}

/// Obstacle confidence quantized to 16 bits.
pub fn write_prediction_png(path: &Path, seg: &Segmentation) -> Result<()> {
    let buf: Vec<u16> = seg.confidence.iter().map(|&c| (c * 65535.0).round() as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(seg.width as u32, seg.height as u32, buf).expect("buffer size");
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a 16-bit confidence PNG, or an 8-bit label PNG used as a hard
/// prediction (Unknown maps to confidence 0.5).
pub fn read_prediction_png(path: &Path) -> Result<Segmentation> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma16(i) => {
            let (w, h) = i.dimensions();
            let conf = i.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            Segmentation::from_confidences(w as usize, h as usize, conf)
        }
        image::DynamicImage::ImageLuma8(_) => {
            let labels = read_label_png(path)?;
            let conf = labels
                .labels
                .iter()
                .map(|l| match l {
                    Label::Obstacle => 1.0,
                    Label::FreeSpace => 0.0,
                    Label::Unknown => 0.5,
                })
                .collect();
            Segmentation::from_confidences(labels.width, labels.height, conf)
        }
        other => Err(Error::format(
            path,
            format!("unsupported prediction image {:?}", other.color()),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub mode: Mode,
    pub frames: usize,
    pub inferred_frames: usize,
    pub plane_failures: usize,
    pub initial_params: String,
    pub final_params: String,
    pub encoder_unchanged: bool,
    pub miou_all: Option<f64>,
    pub miou_far_field: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub summary: ReplaySummary,
    pub metrics_all: Option<MetricReport>,
    pub metrics_far_field: Option<MetricReport>,
    pub params: NetworkParams,
}

/// Replays a sequence through the near-to-far loop and writes overlays,
/// predictions, the run log, metrics and a summary into `cfg.output`.
pub fn replay(cfg: &RunConfig) -> Result<ReplayOutcome> {
    cfg.validate()?;
    let file = ParamsFile::load(&cfg.params)?;
    let mut reader = open_sequence(&cfg.sequence)?;
    if let Some(path) = &cfg.intrinsics {
        let native = read_intrinsics(path)?;
        reader.intrinsics = native.downscaled(reader.scale)?;
        reader.native_intrinsics = native;
    }
    if let Some(seed) = reader.scene_seed()? {
        check_disjoint(&file.train_seeds, &[seed])?;
    }
    let k = reader.intrinsics;
    let out = &cfg.output;
    create_dir_all(out)?;
    create_dir_all(&out.join(PRED_DIR))?;
    create_dir_all(&out.join(OVERLAY_DIR))?;

    let mut params = file.params;
    if cfg.reset_decoder {
        params.reinit_decoder(cfg.decoder_seed);
    }
    let initial = params.digest();
    let initial_encoder = params.encoder_digest();
    let mut learner = OnlineLearner::new(params, cfg.effective_online(), cfg.loss)?;

    let log_path = out.join(RUN_LOG);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut metrics_all = MetricReport::new(Region::All);
    let mut metrics_far = MetricReport::new(Region::FarField);
    let mut inferred = 0;
    let max_range = cfg.labeling.max_range;

    let records = run_sequence(reader.frames(), &k, &mut learner, &cfg.loop_config(), |o| {
        let id = o.frame.frame_id;
        let name = frame_file_name(id);
        writeln!(log, "{}", o.record.to_json_line()).map_err(|e| Error::io(&log_path, e))?;
        let labels = &o.labels;
        overlay(&o.frame.rgb, k.width, k.height, |i| Some(labels.labels[i]))
            .save(out.join(OVERLAY_DIR).join(format!("labels_{name}")))
            .map_err(|e| Error::format(out.join(OVERLAY_DIR), e.to_string()))?;
        let Some(seg) = &o.segmentation else {
            return Ok(());
        };
        inferred += 1;
        write_prediction_png(&out.join(PRED_DIR).join(&name), seg)?;
        let gt = o.frame.gt.as_ref();
        overlay(&o.frame.rgb, k.width, k.height, |i| match gt.map(|g| g.labels[i]) {
            Some(Label::Unknown) => None,
            _ => Some(seg.classes[i]),
        })
        .save(out.join(OVERLAY_DIR).join(format!("pred_{name}")))
        .map_err(|e| Error::format(out.join(OVERLAY_DIR), e.to_string()))?;
        if let Some(gt) = gt {
            metrics_all.frames.push(frame_metrics(id, seg, gt, None)?);
            let far = far_field_mask(&o.frame.depth, max_range);
            metrics_far.frames.push(frame_metrics(id, seg, gt, Some(&far))?);
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let final_digest = learner.params.digest();
    if cfg.mode == Mode::Frozen && final_digest != initial {
        return Err(Error::CheckFailed("frozen run changed the parameters".into()));
    }
    let encoder_unchanged = learner.params.encoder_digest() == initial_encoder;
    if cfg.effective_online().train_decoder_only && !encoder_unchanged {
        return Err(Error::CheckFailed("encoder changed during decoder-only run".into()));
    }
    let have_gt = reader.has_gt;
    if have_gt {
        metrics_all.write_csv(&out.join(metrics_file_name(Region::All)))?;
        metrics_far.write_csv(&out.join(metrics_file_name(Region::FarField)))?;
    }
    if cfg.mode == Mode::Online {
        ParamsFile {
            params: learner.params.clone(),
            train_seeds: file.train_seeds.clone(),
        }
        .save(&out.join(FINAL_PARAMS))?;
    }
    let summary = ReplaySummary {
        mode: cfg.mode,
        frames: records.len(),
        inferred_frames: inferred,
        plane_failures: records.iter().filter(|r| r.plane.status != "ok").count(),
        initial_params: initial,
        final_params: final_digest,
        encoder_unchanged,
        miou_all: have_gt.then(|| metrics_all.aggregate()[2]).flatten(),
        miou_far_field: have_gt.then(|| metrics_far.aggregate()[2]).flatten(),
    };
    write_file(
        &out.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    Ok(ReplayOutcome {
        summary,
        metrics_all: have_gt.then_some(metrics_all),
        metrics_far_field: have_gt.then_some(metrics_far),
        params: learner.params,
    })
}

fn png_ids(dir: &Path) -> Result<BTreeSet<usize>> {
    let mut ids = BTreeSet::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".png").and_then(|s| s.parse().ok()) {
            ids.insert(id);
        }
    }
    Ok(ids)
}

fn id_list(ids: &BTreeSet<usize>) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// Scores predictions (a run directory or a directory of prediction PNGs)
/// against the ground truth of a sequence directory.
pub fn eval(pred: &Path, sequence: &Path, regions: &[Region]) -> Result<Vec<MetricReport>> {
    let pred_dir = if pred.join(PRED_DIR).is_dir() {
        pred.join(PRED_DIR)
    } else {
        pred.to_path_buf()
    };
    let gt_dir = sequence.join("gt");
    if !gt_dir.is_dir() {
        return Err(Error::InvalidInput(format!(
            "{} has no ground truth",
            sequence.display()
        )));
    }
    let pred_ids = png_ids(&pred_dir)?;
    let gt_ids = png_ids(&gt_dir)?;
    if pred_ids != gt_ids {
        let no_gt: BTreeSet<usize> = pred_ids.difference(&gt_ids).copied().collect();
        let no_pred: BTreeSet<usize> = gt_ids.difference(&pred_ids).copied().collect();
        return Err(Error::InvalidInput(format!(
            "frame sets differ; missing predictions: [{}]; missing ground truth: [{}]",
            id_list(&no_pred),
            id_list(&no_gt)
        )));
    }
    let Some(&first) = pred_ids.iter().next() else {
        return Err(Error::InvalidInput(format!("no frames in {}", pred_dir.display())));
    };
    let probe = read_prediction_png(&pred_dir.join(frame_file_name(first)))?;
    let scale = SequenceReader::scale_for(sequence, probe.width, probe.height)?;
    let reader = SequenceReader::open_scaled(sequence, scale)?;
    let max_range = LabelingConfig::default().max_range;
    let mut reports: Vec<MetricReport> = regions.iter().map(|&r| MetricReport::new(r)).collect();
    for &id in &pred_ids {
        let path = pred_dir.join(frame_file_name(id));
        let seg = read_prediction_png(&path)?;
        let frame = reader.read_frame(id)?;
        let gt = frame.gt.as_ref().expect("gt directory present");
        if (seg.width, seg.height) != (gt.width, gt.height) {
            return Err(Error::format(
                &path,
                format!("frame {id}: prediction size differs from ground truth"),
            ));
        }
        for report in &mut reports {
            let mask = match report.region {
                Region::All => None,
                Region::FarField => Some(far_field_mask(&frame.depth, max_range)),
            };
            report.frames.push(frame_metrics(id, &seg, gt, mask.as_ref())?);
        }
    }
    Ok(reports)
}

/// Compares the metrics files of two run directories for every region
/// present in both.
pub fn compare_run_dirs(run_a: &Path, run_b: &Path) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for region in [Region::All, Region::FarField] {
        let name = metrics_file_name(region);
        let (pa, pb) = (run_a.join(name), run_b.join(name));
        if !pa.exists() && !pb.exists() {
            continue;
        }
        let a = MetricReport::read_csv(&pa)?;
        let b = MetricReport::read_csv(&pb)?;
        out.push(compare_runs(&a, &b)?);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no metrics files in {} or {}",
            run_a.display(),
            run_b.display()
        )));
    }
    Ok(out)
}

pub fn comparison_file_name(region: Region) -> &'static str {
    match region {
        Region::All => "comparison_all.csv",
        Region::FarField => "comparison_far_field.csv",
    }
}

pub fn gradcheck(seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    run_gradcheck(seed, corrupt)
}

pub fn format_gradcheck(report: &GradcheckReport) -> String {
    let mut out = format!("gradcheck seed {} tolerance {:e}\n", report.seed, report.tolerance);
    for t in &report.tensors {
        let status = if t.max_rel_error < report.tolerance {
            "ok"
        } else {
            "FAIL"
        };
        let _ = writeln!(
            out,
            "{:<10} {:>6} entries  max rel error {:.3e}  {status}",
            t.tensor, t.entries, t.max_rel_error
        );
    }
    let _ = writeln!(out, "{}", if report.passed() { "PASS" } else { "FAIL" });
    out
}
