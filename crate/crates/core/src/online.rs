//! The near-to-far loop: self-labeled frames enter a sliding window that
//! drives online SGD updates, and every frame is segmented in full.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{backproject_image, CameraIntrinsics, DepthImage, Pose};
use crate::error::{Error, Result};
use crate::ground_plane::{fit_plane_ransac, Plane, RansacConfig};
use crate::labels::{generate_labels, label_histogram, Label, LabelHistogram, LabelMap, LabelingConfig};
use crate::network::{
    batch_gradient, encode, forward, normalize_rgb, obstacle_probabilities, sgd_step, Example, FeatureMap, LossConfig,
    NetworkParams, TrainScope,
};

#[derive(Debug, Clone)]
pub struct WindowEntry {
    pub frame_id: usize,
    pub image: FeatureMap,
    pub labels: LabelMap,
    /// Encoder output, valid while the encoder is frozen.
    encoded: Option<FeatureMap>,
}

/// FIFO of the most recent self-labeled frames.
#[derive(Debug, Clone)]
pub struct ReplayWindow {
    capacity: usize,
    entries: VecDeque<WindowEntry>,
}

impl ReplayWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("window capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &WindowEntry> {
        self.entries.iter()
    }

    pub fn frame_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_id).collect()
    }

    /// Appends a frame, evicting the oldest at capacity. All-Unknown label
    /// maps are rejected; returns whether the frame was inserted.
    pub fn push_frame(&mut self, image: FeatureMap, labels: LabelMap, frame_id: usize) -> Result<bool> {
        if image.width != labels.width || image.height != labels.height || image.channels != 3 {
            return Err(Error::InvalidInput(format!(
                "frame {frame_id}: image {}x{}x{} does not match labels {}x{}",
                image.width, image.height, image.channels, labels.width, labels.height
            )));
        }
        if let Some(first) = self.entries.front() {
            if first.image.width != image.width || first.image.height != image.height {
                return Err(Error::InvalidInput(format!(
                    "frame {frame_id}: size {}x{} differs from window frames {}x{}",
                    image.width, image.height, first.image.width, first.image.height
                )));
            }
        }
        if labels.is_all_unknown() {
            return Ok(false);
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(WindowEntry {
            frame_id,
            image,
            labels,
            encoded: None,
        });
        Ok(true)
    }

    fn clear_encodings(&mut self) {
        for e in &mut self.entries {
            e.encoded = None;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    /// Window size N.
    pub window: usize,
    pub steps_per_frame: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_decoder_only: bool,
    pub rng_seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            window: 10,
            steps_per_frame: 5,
            batch_frames: 4,
            lr: 0.02,
            momentum: 0.9,
            train_decoder_only: true,
            rng_seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("online.window must be >= 1".into()));
        }
        if self.batch_frames == 0 || self.batch_frames > self.window {
            return Err(Error::Config("online.batch_frames must be in 1..=window".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "online.lr must be > 0 and online.momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn scope(&self) -> TrainScope {
        if self.train_decoder_only {
            TrainScope::DecoderOnly
        } else {
            TrainScope::All
        }
    }
}

/// Per-pixel class and obstacle confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    /// FreeSpace or Obstacle, never Unknown.
    pub classes: Vec<Label>,
    pub confidence: Vec<f64>,
}

impl Segmentation {
    /// Class is Obstacle iff confidence >= 0.5.
    pub fn from_confidences(width: usize, height: usize, confidence: Vec<f64>) -> Result<Self> {
        if confidence.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{} confidences for a {width}x{height} segmentation",
                confidence.len()
            )));
        }
        if let Some(i) = confidence.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput(format!("confidence at pixel {i} outside [0, 1]")));
        }
        let classes = confidence
            .iter()
            .map(|&c| if c >= 0.5 { Label::Obstacle } else { Label::FreeSpace })
            .collect();
        Ok(Self {
            width,
            height,
            classes,
            confidence,
        })
    }

    pub fn obstacle_fraction(&self) -> f64 {
        self.classes.iter().filter(|&&c| c == Label::Obstacle).count() as f64 / self.classes.len() as f64
    }

    pub fn mean_confidence(&self) -> f64 {
        self.confidence.iter().sum::<f64>() / self.confidence.len() as f64
    }
}

pub fn predict(params: &NetworkParams, image: &FeatureMap) -> Result<Segmentation> {
    let logits = forward(params, image)?;
    Segmentation::from_confidences(logits.width, logits.height, obstacle_probabilities(&logits))
}

/// Optimizer state carried between updates.
#[derive(Debug, Clone)]
pub struct OnlineState {
    pub velocity: NetworkParams,
    pub rng: ChaCha8Rng,
}

impl OnlineState {
    pub fn new(seed: u64) -> Self {
        Self {
            velocity: NetworkParams::zeros(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Runs `steps_per_frame` SGD steps on mini-batches sampled without
/// replacement from the window. Returns the batch loss of every step,
/// measured before its update. An empty window is a no-op.
pub fn online_update(
    window: &mut ReplayWindow,
    params: &mut NetworkParams,
    state: &mut OnlineState,
    cfg: &OnlineConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if window.is_empty() {
        return Ok(Vec::new());
    }
    let scope = cfg.scope();
    if scope == TrainScope::All {
        window.clear_encodings();
    }
    let mut losses = Vec::with_capacity(cfg.steps_per_frame);
    for _ in 0..cfg.steps_per_frame {
        let n = window.len();
        let mut picks = sample(&mut state.rng, n, cfg.batch_frames.min(n)).into_vec();
        picks.sort_unstable();
        if scope == TrainScope::DecoderOnly {
            for &i in &picks {
                let e = &mut window.entries[i];
                if e.encoded.is_none() {
                    e.encoded = Some(encode(params, &e.image)?);
                }
            }
        }
        let batch: Vec<(Example<'_>, &LabelMap)> = picks
            .iter()
            .map(|&i| {
                let e = &window.entries[i];
                let ex = match &e.encoded {
                    Some(enc) if scope == TrainScope::DecoderOnly => Example::Encoded(enc),
                    _ => Example::Image(&e.image),
                };
                (ex, &e.labels)
            })
            .collect();
        let (loss, grads) = batch_gradient(params, &batch, loss_cfg, scope)?;
        sgd_step(params, &grads, cfg.lr, cfg.momentum, &mut state.velocity, scope)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// One input frame of a sequence.
#[derive(Debug, Clone)]
pub struct SequenceFrame {
    pub frame_id: usize,
    /// Interleaved 8-bit RGB, row-major.
    pub rgb: Vec<u8>,
    pub depth: DepthImage,
    pub pose: Pose,
    pub gt: Option<LabelMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub ransac: RansacConfig,
    pub labeling: LabelingConfig,
    /// Update and predict only on every k-th frame; labels enter the
    /// window on every frame.
    pub infer_every_k: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            labeling: LabelingConfig::default(),
            infer_every_k: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaneRecord {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inliers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inlier_rms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSummary {
    pub obstacle_fraction: f64,
    pub mean_confidence: f64,
}

/// Structured per-frame log record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame_id: usize,
    pub plane: PlaneRecord,
    pub labels: LabelHistogram,
    pub window_inserted: bool,
    pub window_size: usize,
    pub losses: Vec<f64>,
    pub prediction: Option<PredictionSummary>,
}

impl FrameRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Everything produced for one frame.
#[derive(Debug)]
pub struct FrameOutput<'a> {
    pub frame: &'a SequenceFrame,
    pub record: FrameRecord,
    pub plane: Option<Plane>,
    pub labels: LabelMap,
    pub segmentation: Option<Segmentation>,
}

/// Online learner state: parameters, optimizer state and window.
#[derive(Debug, Clone)]
pub struct OnlineLearner {
    pub params: NetworkParams,
    pub state: OnlineState,
    pub window: ReplayWindow,
    pub cfg: OnlineConfig,
    pub loss_cfg: LossConfig,
}

impl OnlineLearner {
    pub fn new(params: NetworkParams, cfg: OnlineConfig, loss_cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        loss_cfg.validate()?;
        params.check_architecture()?;
        Ok(Self {
            params,
            state: OnlineState::new(cfg.rng_seed),
            window: ReplayWindow::new(cfg.window)?,
            cfg,
            loss_cfg,
        })
    }

    pub fn update(&mut self) -> Result<Vec<f64>> {
        online_update(
            &mut self.window,
            &mut self.params,
            &mut self.state,
            &self.cfg,
            &self.loss_cfg,
        )
    }
}

/// Plane fit in the camera frame, with the RANSAC seed varied per frame.
pub fn fit_frame_plane(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    pose: &Pose,
    cfg: &LoopConfig,
    frame_id: usize,
) -> Result<Plane> {
    let cloud = backproject_image(depth, k, cfg.labeling.max_range)?;
    let ransac = RansacConfig {
        rng_seed: cfg.ransac.rng_seed.wrapping_add(frame_id as u64),
        ..cfg.ransac
    };
    fit_plane_ransac(&cloud.points, &pose.up_in_camera(), &ransac)
}

/// Processes one frame: backproject, fit plane, label, push, update,
/// predict. A failed plane fit skips labeling and the update but still
/// predicts.
pub fn process_frame<'a>(
    learner: &mut OnlineLearner,
    frame: &'a SequenceFrame,
    k: &CameraIntrinsics,
    cfg: &LoopConfig,
    position: usize,
) -> Result<FrameOutput<'a>> {
    frame.depth.check_matches(k)?;
    let image = normalize_rgb(k.width, k.height, &frame.rgb)?;
    let plane = match fit_frame_plane(&frame.depth, k, &frame.pose, cfg, frame.frame_id) {
        Ok(p) => Ok(p),
        Err(e @ (Error::NoGroundPlane(_) | Error::DegenerateGeometry(_))) => Err(e),
        Err(e) => return Err(e),
    };
    let (plane_record, plane, labels) = match plane {
        Ok(p) => {
            let labels = generate_labels(&frame.depth, k, &p, &cfg.labeling)?;
            let rec = PlaneRecord {
                status: "ok".into(),
                normal: Some(p.normal),
                offset: Some(p.offset),
                inliers: Some(p.inlier_count),
                inlier_rms: Some(p.inlier_rms),
            };
            (rec, Some(p), labels)
        }
        Err(e) => {
            let rec = PlaneRecord {
                status: format!("failed: {e}"),
                normal: None,
                offset: None,
                inliers: None,
                inlier_rms: None,
            };
            (rec, None, LabelMap::filled(k.width, k.height, Label::Unknown))
        }
    };
    let hist = label_histogram(&labels);
    let inserted = if plane.is_some() {
        learner
            .window
            .push_frame(image.clone(), labels.clone(), frame.frame_id)?
    } else {
        false
    };
    let every = cfg.infer_every_k.max(1);
    let (losses, segmentation) = if position.is_multiple_of(every) {
        let losses = learner.update()?;
        (losses, Some(predict(&learner.params, &image)?))
    } else {
        (Vec::new(), None)
    };
    let record = FrameRecord {
        frame_id: frame.frame_id,
        plane: plane_record,
        labels: hist,
        window_inserted: inserted,
        window_size: learner.window.len(),
        losses,
        prediction: segmentation.as_ref().map(|s| PredictionSummary {
            obstacle_fraction: s.obstacle_fraction(),
            mean_confidence: s.mean_confidence(),
        }),
    };
    Ok(FrameOutput {
        frame,
        record,
        plane,
        labels,
        segmentation,
    })
}

/// Runs the loop over a frame stream, handing each frame's output to
/// `sink` in order. Stream errors propagate unchanged.
pub fn run_sequence<I, F>(
    frames: I,
    k: &CameraIntrinsics,
    learner: &mut OnlineLearner,
    cfg: &LoopConfig,
    mut sink: F,
) -> Result<Vec<FrameRecord>>
where
    I: IntoIterator<Item = Result<SequenceFrame>>,
    F: FnMut(&FrameOutput<'_>) -> Result<()>,
{
    k.validate()?;
    cfg.ransac.validate()?;
    cfg.labeling.validate()?;
    let mut records = Vec::new();
    for (position, frame) in frames.into_iter().enumerate() {
        let frame = frame?;
        let out = process_frame(learner, &frame, k, cfg, position)?;
        sink(&out)?;
        records.push(out.record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{softmax2, ARCHITECTURE, DECODER_START};
    use rand::Rng;

    fn image(w: usize, h: usize, v: f64) -> FeatureMap {
        FeatureMap::from_vec(h, w, 3, vec![v; w * h * 3]).unwrap()
    }

    fn labels(w: usize, h: usize, l: Label) -> LabelMap {
        LabelMap::filled(w, h, l)
    }

    #[test]
    fn window_evicts_fifo() {
        let mut win = ReplayWindow::new(3).unwrap();
        for id in 1..=4 {
            assert!(win
                .push_frame(image(4, 4, 0.0), labels(4, 4, Label::FreeSpace), id)
                .unwrap());
        }
        assert_eq!(win.frame_ids(), vec![2, 3, 4]);
        assert!(!win
            .push_frame(image(4, 4, 0.0), labels(4, 4, Label::Unknown), 5)
            .unwrap());
        assert_eq!(win.frame_ids(), vec![2, 3, 4]);
        assert!(matches!(
            win.push_frame(image(8, 4, 0.0), labels(8, 4, Label::FreeSpace), 6),
            Err(Error::InvalidInput(_))
        ));
        assert!(win
            .push_frame(image(4, 4, 0.0), labels(4, 8, Label::FreeSpace), 7)
            .is_err());
        assert!(ReplayWindow::new(0).is_err());
    }

    #[test]
    fn window_never_exceeds_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for cap in 1..6 {
            let mut win = ReplayWindow::new(cap).unwrap();
            let mut pushed = Vec::new();
            for id in 0..40 {
                let l = if rng.random_range(0..4) == 0 {
                    Label::Unknown
                } else {
                    Label::Obstacle
                };
                if win.push_frame(image(4, 4, 0.0), labels(4, 4, l), id).unwrap() {
                    pushed.push(id);
                }
                assert!(win.len() <= cap);
                let tail = &pushed[pushed.len().saturating_sub(cap)..];
                assert_eq!(win.frame_ids(), tail);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(OnlineConfig::default().validate().is_ok());
        let bad = [
            OnlineConfig {
                window: 0,
                ..Default::default()
            },
            OnlineConfig {
                batch_frames: 0,
                ..Default::default()
            },
            OnlineConfig {
                batch_frames: 11,
                ..Default::default()
            },
            OnlineConfig {
                lr: 0.0,
                ..Default::default()
            },
            OnlineConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn zero_network_predicts_obstacle_at_half() {
        let s = predict(&NetworkParams::zeros(), &image(8, 8, 0.3)).unwrap();
        assert!(s.confidence.iter().all(|&c| c == 0.5));
        assert!(s.classes.iter().all(|&c| c == Label::Obstacle));
    }

    #[test]
    fn strong_obstacle_logit() {
        let mut p = NetworkParams::zeros();
        p.layers[5].bias = vec![-10.0, 10.0];
        let s = predict(&p, &image(8, 8, 0.0)).unwrap();
        assert!(s.confidence.iter().all(|&c| c > 1.0 - 1e-8));
        assert!(s.classes.iter().all(|&c| c == Label::Obstacle));
        p.layers[5].bias = vec![10.0, -10.0];
        let s = predict(&p, &image(8, 8, 0.0)).unwrap();
        assert!(s.classes.iter().all(|&c| c == Label::FreeSpace));
    }

    #[test]
    fn predict_matches_manual_composition() {
        let p = NetworkParams::xavier(21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img =
            FeatureMap::from_vec(8, 12, 3, (0..8 * 12 * 3).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let s = predict(&p, &img).unwrap();
        let logits = forward(&p, &img).unwrap();
        for i in 0..96 {
            let (a, b) = (logits.data[2 * i], logits.data[2 * i + 1]);
            let manual = b.exp() / (a.exp() + b.exp());
            assert!((s.confidence[i] - manual).abs() < 1e-12);
            assert_eq!(s.confidence[i], softmax2(a, b)[1]);
            assert_eq!(s.classes[i] == Label::Obstacle, manual >= 0.5);
        }
    }

    fn striped_frame(w: usize, h: usize) -> (FeatureMap, LabelMap) {
        let mut data = Vec::with_capacity(w * h * 3);
        let mut lab = Vec::with_capacity(w * h);
        for y in 0..h {
            for _ in 0..w {
                let obstacle = y < h / 2;
                data.extend(if obstacle { [0.3, -0.3, -0.3] } else { [-0.1, 0.0, 0.2] });
                lab.push(if y == h / 2 {
                    Label::Unknown
                } else if obstacle {
                    Label::Obstacle
                } else {
                    Label::FreeSpace
                });
            }
        }
        (
            FeatureMap::from_vec(h, w, 3, data).unwrap(),
            LabelMap::new(w, h, lab).unwrap(),
        )
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let (img, lab) = striped_frame(16, 16);
        let cfg = OnlineConfig {
            steps_per_frame: 0,
            ..Default::default()
        };
        let mut l = OnlineLearner::new(NetworkParams::xavier(1), cfg, LossConfig::default()).unwrap();
        let before = l.params.digest();
        l.window.push_frame(img, lab, 0).unwrap();
        assert!(l.update().unwrap().is_empty());
        assert_eq!(l.params.digest(), before);
    }

    #[test]
    fn empty_window_is_noop() {
        let mut l =
            OnlineLearner::new(NetworkParams::xavier(1), OnlineConfig::default(), LossConfig::default()).unwrap();
        let before = l.params.digest();
        assert!(l.update().unwrap().is_empty());
        assert_eq!(l.params.digest(), before);
    }

    #[test]
    fn decoder_only_freezes_encoder_and_is_deterministic() {
        let run = || {
            let mut l =
                OnlineLearner::new(NetworkParams::xavier(8), OnlineConfig::default(), LossConfig::default()).unwrap();
            let before = l.params.encoder_digest();
            for id in 0..6 {
                let (img, lab) = striped_frame(16, 12);
                l.window.push_frame(img, lab, id).unwrap();
                l.update().unwrap();
            }
            assert_eq!(l.params.encoder_digest(), before);
            l.params.digest()
        };
        let a = run();
        assert_eq!(a, run());
        assert_ne!(a, NetworkParams::xavier(8).digest());
    }

    #[test]
    fn cached_encodings_match_uncached_training() {
        // decoder-only training from cached encodings equals training from
        // images with the full forward pass each step
        let (img, lab) = striped_frame(16, 12);
        let cfg = OnlineConfig {
            window: 3,
            batch_frames: 2,
            steps_per_frame: 3,
            ..Default::default()
        };
        let mut l = OnlineLearner::new(NetworkParams::xavier(3), cfg, LossConfig::default()).unwrap();
        for id in 0..3 {
            l.window.push_frame(img.clone(), lab.clone(), id).unwrap();
        }
        let mut manual = l.params.clone();
        let mut state = OnlineState::new(cfg.rng_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let losses = l.update().unwrap();
        for &expected in &losses {
            let picks = sample(&mut rng, 3, 2).into_vec();
            let batch: Vec<_> = picks.iter().map(|_| (Example::Image(&img), &lab)).collect();
            let (loss, g) = batch_gradient(&manual, &batch, &LossConfig::default(), TrainScope::DecoderOnly).unwrap();
            assert_eq!(loss, expected);
            sgd_step(
                &mut manual,
                &g,
                cfg.lr,
                cfg.momentum,
                &mut state.velocity,
                TrainScope::DecoderOnly,
            )
            .unwrap();
        }
        assert_eq!(manual.digest(), l.params.digest());
    }

    #[test]
    fn full_scope_trains_encoder() {
        let (img, lab) = striped_frame(16, 12);
        let cfg = OnlineConfig {
            train_decoder_only: false,
            steps_per_frame: 2,
            ..Default::default()
        };
        let mut l = OnlineLearner::new(NetworkParams::xavier(4), cfg, LossConfig::default()).unwrap();
        let before = l.params.encoder_digest();
        l.window.push_frame(img, lab, 0).unwrap();
        l.update().unwrap();
        assert_ne!(l.params.encoder_digest(), before);
    }

    #[test]
    fn fixed_frame_training_halves_loss() {
        let (img, lab) = striped_frame(32, 32);
        let cfg = OnlineConfig {
            window: 1,
            batch_frames: 1,
            steps_per_frame: 200,
            rng_seed: 9,
            ..Default::default()
        };
        let mut l = OnlineLearner::new(NetworkParams::xavier(6), cfg, LossConfig::default()).unwrap();
        l.window.push_frame(img.clone(), lab.clone(), 0).unwrap();
        let losses = l.update().unwrap();
        assert_eq!(losses.len(), 200);
        let final_loss =
            crate::network::loss(&forward(&l.params, &img).unwrap(), &lab, &LossConfig::default()).unwrap();
        assert!(final_loss < 0.5 * losses[0], "{} -> {final_loss}", losses[0]);
    }

    #[test]
    fn decoder_layers_follow_encoder() {
        assert!(ARCHITECTURE[..DECODER_START].iter().all(|l| !l.upsample_before));
    }

    fn flat_frame(frame_id: usize, k: &CameraIntrinsics, pose: Pose, valid: bool) -> SequenceFrame {
        let depth = if valid {
            let mut d = DepthImage::zeros(k.width, k.height);
            let up = pose.up_in_camera();
            for v in 0..k.height {
                for u in 0..k.width {
                    let ray = crate::camera::Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                    // ground 1.2 m below the camera: up . (ray * z) = -1.2
                    let s = ray.dot(&up);
                    if s < -1e-6 {
                        d.values[v * k.width + u] = -1.2 / s;
                    }
                }
            }
            d
        } else {
            DepthImage::zeros(k.width, k.height)
        };
        SequenceFrame {
            frame_id,
            rgb: vec![100; k.width * k.height * 3],
            depth,
            pose,
            gt: None,
        }
    }

    fn small_camera() -> (CameraIntrinsics, Pose) {
        let k = CameraIntrinsics::new(30.0, 30.0, 16.0, 12.0, 32, 24).unwrap();
        let pose = Pose::from_rotation(
            crate::synth::forward_camera_rotation(30.0),
            crate::camera::Vec3::new(0.0, 0.0, 1.2),
        );
        (k, pose)
    }

    #[test]
    fn failed_planes_keep_window_empty() {
        let (k, pose) = small_camera();
        let mut l =
            OnlineLearner::new(NetworkParams::xavier(2), OnlineConfig::default(), LossConfig::default()).unwrap();
        let before = l.params.digest();
        let frames = (0..4).map(|i| Ok(flat_frame(i, &k, pose, false)));
        let mut predictions = 0;
        let records = run_sequence(frames, &k, &mut l, &LoopConfig::default(), |out| {
            predictions += out.segmentation.is_some() as usize;
            Ok(())
        })
        .unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(predictions, 4);
        assert!(l.window.is_empty());
        assert_eq!(l.params.digest(), before);
        assert!(records
            .iter()
            .all(|r| r.plane.status.starts_with("failed") && r.losses.is_empty()));
    }

    #[test]
    fn run_sequence_labels_flat_ground() {
        let (k, pose) = small_camera();
        let cfg = LoopConfig {
            ransac: RansacConfig {
                min_inliers: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut l =
            OnlineLearner::new(NetworkParams::xavier(2), OnlineConfig::default(), LossConfig::default()).unwrap();
        let frames = (0..3).map(|i| Ok(flat_frame(i, &k, pose, true)));
        let records = run_sequence(frames, &k, &mut l, &cfg, |out| {
            assert!(out.plane.is_some());
            assert_eq!(out.labels.labels.iter().filter(|&&x| x == Label::Obstacle).count(), 0);
            Ok(())
        })
        .unwrap();
        assert_eq!(l.window.frame_ids(), vec![0, 1, 2]);
        assert!(records.iter().all(|r| r.losses.len() == 5 && r.labels.free > 0));
        let line = records[0].to_json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["frame_id"], 0);
        assert_eq!(v["plane"]["status"], "ok");
    }

    #[test]
    fn infer_every_k_skips_frames() {
        let (k, pose) = small_camera();
        let cfg = LoopConfig {
            ransac: RansacConfig {
                min_inliers: 50,
                ..Default::default()
            },
            infer_every_k: 3,
            ..Default::default()
        };
        let mut l =
            OnlineLearner::new(NetworkParams::xavier(2), OnlineConfig::default(), LossConfig::default()).unwrap();
        let frames = (0..7).map(|i| Ok(flat_frame(i, &k, pose, true)));
        let records = run_sequence(frames, &k, &mut l, &cfg, |_| Ok(())).unwrap();
        let inferred: Vec<usize> = records
            .iter()
            .filter(|r| r.prediction.is_some())
            .map(|r| r.frame_id)
            .collect();
        assert_eq!(inferred, vec![0, 3, 6]);
        assert_eq!(l.window.len(), 7);
    }

    #[test]
    fn stream_errors_propagate() {
        let (k, pose) = small_camera();
        let mut l =
            OnlineLearner::new(NetworkParams::xavier(2), OnlineConfig::default(), LossConfig::default()).unwrap();
        let frames = vec![
            Ok(flat_frame(0, &k, pose, false)),
            Err(Error::format("depth/0001.png", "frame 1: bad PNG")),
        ];
        let err = run_sequence(frames, &k, &mut l, &LoopConfig::default(), |_| Ok(())).unwrap_err();
        assert!(err.to_string().contains("0001"));
    }
}
