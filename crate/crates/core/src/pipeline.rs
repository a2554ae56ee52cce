//! Staged real-time orchestration.
//!
//! ```text
//! ingest -> [q] -> preprocess+detect (worker pool) -> [q] -> match/estimate -> [q] -> composite
//! ```
//!
//! Queues are bounded and blocking. Match/estimate reorders its input by
//! frame id, and composite is a single writer, so the mosaic and every
//! acceptance decision are independent of the worker count.
//! [`run_sequential`] runs the same stage functions inline on one thread.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureConfig, OrbExtractor};
use crate::geometry::{
    ransac_homography, GeometryError, Point2, PointPair, RansacParams, RansacResult,
};
use crate::imaging::{enhance, load_image, to_working_resolution, ImageGray, ImagingConfig};
use crate::matching::{match_indexed, IndexedFeatures, MatchConfig};
use crate::mosaic::{
    chain_pose, snapshot_stem, write_snapshot, FramePose, MosaicCanvas, MosaicError,
};
use crate::par::Pool;

/// Inlier count that promotes an accepted frame to keyframe.
pub const KEYFRAME_MIN_INLIERS: usize = 40;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    FatalConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub workers: usize,
    pub queue_cap: usize,
    pub snapshot_every: usize,
    pub paced_delay_ms: u64,
    pub drop_when_full: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            queue_cap: 8,
            snapshot_every: 5,
            paced_delay_ms: 0,
            drop_when_full: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Where snapshots and telemetry go; `None` keeps the run in memory.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RunConfig {
    pub imaging: ImagingConfig,
    pub features: FeatureConfig,
    pub matching: MatchConfig,
    pub ransac: RansacParams,
    pub pipeline: PipelineConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let p = &self.pipeline;
        let checks = [
            self.imaging.validate(),
            self.features.validate(),
            self.matching.validate(),
            self.ransac.validate(),
            if (1..=256).contains(&p.workers) {
                Ok(())
            } else {
                Err(format!("pipeline.workers {} outside [1, 256]", p.workers))
            },
            if p.queue_cap >= 1 {
                Ok(())
            } else {
                Err("pipeline.queueCap must be >= 1".into())
            },
            if p.snapshot_every >= 1 {
                Ok(())
            } else {
                Err("pipeline.snapshotEvery must be >= 1".into())
            },
        ];
        checks
            .into_iter()
            .collect::<Result<Vec<()>, String>>()
            .map(|_| ())
            .map_err(PipelineError::FatalConfig)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| PipelineError::FatalConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain config")
    }
}

/// Frames in capture order.
#[derive(Debug, Clone)]
pub enum FrameSource {
    Files(Vec<PathBuf>),
    Memory(Vec<ImageGray>),
}

impl FrameSource {
    /// PNG and PGM files of `dir`, sorted by file name.
    pub fn from_dir(dir: &Path) -> Result<Self, PipelineError> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
            })
            .collect();
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        Ok(Self::Files(files))
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Files(f) => f.len(),
            Self::Memory(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn path(&self, i: usize) -> Option<PathBuf> {
        match self {
            Self::Files(f) => Some(f[i].clone()),
            Self::Memory(_) => None,
        }
    }

    fn read(&self, i: usize) -> Result<ImageGray, String> {
        match self {
            Self::Files(f) => load_image(&f[i]).map_err(|e| e.to_string()),
            Self::Memory(m) => Ok(m[i].clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Io,
    Alignment,
    Capacity,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum FrameStatus {
    Pending,
    Accepted,
    Rejected(RejectReason),
}

impl FrameStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Self::Pending)
    }
}

impl fmt::Display for FrameStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Pending => "pending",
            Self::Accepted => "accepted",
            Self::Rejected(RejectReason::Io) => "rejected(io)",
            Self::Rejected(RejectReason::Alignment) => "rejected(alignment)",
            Self::Rejected(RejectReason::Capacity) => "rejected(capacity)",
            Self::Rejected(RejectReason::Dropped) => "rejected(dropped)",
        };
        f.write_str(s)
    }
}

impl FromStr for FrameStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "pending" => Self::Pending,
            "accepted" => Self::Accepted,
            "rejected(io)" => Self::Rejected(RejectReason::Io),
            "rejected(alignment)" => Self::Rejected(RejectReason::Alignment),
            "rejected(capacity)" => Self::Rejected(RejectReason::Capacity),
            "rejected(dropped)" => Self::Rejected(RejectReason::Dropped),
            other => return Err(format!("unknown frame status {other:?}")),
        })
    }
}

impl From<FrameStatus> for String {
    fn from(s: FrameStatus) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for FrameStatus {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// Wall-clock marks in ms since run start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageMarks {
    pub ingest: Option<f64>,
    pub preprocessed: Option<f64>,
    pub detected: Option<f64>,
    pub matched: Option<f64>,
    pub composited: Option<f64>,
}

impl StageMarks {
    fn ordered(&self) -> [Option<f64>; 5] {
        [
            self.ingest,
            self.preprocessed,
            self.detected,
            self.matched,
            self.composited,
        ]
    }

    /// True when the recorded marks never go backwards.
    pub fn is_monotone(&self) -> bool {
        let marks: Vec<f64> = self.ordered().into_iter().flatten().collect();
        marks.windows(2).all(|w| w[0] <= w[1])
    }

    /// Durations of preprocess, detect, match and composite.
    pub fn stage_ms(&self) -> [Option<f64>; 4] {
        let m = self.ordered();
        let d = |a: Option<f64>, b: Option<f64>| Some(b? - a?);
        [d(m[0], m[1]), d(m[1], m[2]), d(m[2], m[3]), d(m[3], m[4])]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FrameTicket {
    pub frame_id: u64,
    pub path: Option<PathBuf>,
    pub timestamps: StageMarks,
    pub status: FrameStatus,
    pub matches: usize,
    pub inliers: Option<usize>,
    pub rms: Option<f64>,
    pub via_keyframe: bool,
}

impl FrameTicket {
    fn new(frame_id: u64, path: Option<PathBuf>) -> Self {
        Self {
            frame_id,
            path,
            timestamps: StageMarks::default(),
            status: FrameStatus::Pending,
            matches: 0,
            inliers: None,
            rms: None,
            via_keyframe: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyStats {
    pub mean: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageMs {
    pub preprocess: f64,
    pub detect: f64,
    #[serde(rename = "match")]
    pub match_: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MatchStats {
    pub mean_matches: f64,
    pub mean_inlier_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Telemetry {
    pub per_frame: Vec<FrameTicket>,
    pub fps: f64,
    pub end_to_end_latency_ms: LatencyStats,
    pub per_stage_ms: StageMs,
    pub match_stats: MatchStats,
    pub elapsed_ms: f64,
    pub workers: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub max_queue_occupancy: usize,
    pub snapshot_errors: Vec<String>,
}

impl Telemetry {
    fn summarize(
        mut per_frame: Vec<FrameTicket>,
        elapsed: Duration,
        workers: usize,
        max_queue_occupancy: usize,
        snapshot_errors: Vec<String>,
    ) -> Self {
        per_frame.sort_by_key(|t| t.frame_id);
        let elapsed_ms = elapsed.as_secs_f64() * 1e3;
        let completed = per_frame.iter().filter(|t| t.status.is_terminal()).count();
        let accepted = per_frame
            .iter()
            .filter(|t| t.status == FrameStatus::Accepted)
            .count();
        let fps = if completed == 0 || elapsed_ms <= 0.0 {
            0.0
        } else {
            completed as f64 / (elapsed_ms / 1e3)
        };

        let mut lat: Vec<f64> = per_frame
            .iter()
            .filter_map(|t| Some(t.timestamps.composited? - t.timestamps.ingest?))
            .map(|v| v.max(0.0))
            .collect();
        lat.sort_by(f64::total_cmp);
        let end_to_end_latency_ms = LatencyStats {
            mean: mean(&lat),
            p95: percentile(&lat, 0.95),
        };

        let stage_mean = |k: usize| {
            let v: Vec<f64> = per_frame
                .iter()
                .filter_map(|t| t.timestamps.stage_ms()[k])
                .collect();
            mean(&v)
        };
        let per_stage_ms = StageMs {
            preprocess: stage_mean(0),
            detect: stage_mean(1),
            match_: stage_mean(2),
            composite: stage_mean(3),
        };

        let aligned: Vec<&FrameTicket> = per_frame.iter().filter(|t| t.inliers.is_some()).collect();
        let match_stats = MatchStats {
            mean_matches: mean(&aligned.iter().map(|t| t.matches as f64).collect::<Vec<_>>()),
            mean_inlier_ratio: mean(
                &aligned
                    .iter()
                    .filter(|t| t.matches > 0)
                    .map(|t| t.inliers.unwrap_or(0) as f64 / t.matches as f64)
                    .collect::<Vec<_>>(),
            ),
        };

        Self {
            rejected: per_frame.len() - accepted,
            per_frame,
            fps,
            end_to_end_latency_ms,
            per_stage_ms,
            match_stats,
            elapsed_ms,
            workers,
            accepted,
            max_queue_occupancy,
            snapshot_errors,
        }
    }

    /// `frameId,status,msPerStage,inliers,rms` with stage durations joined by `;`.
    pub fn frames_csv(&self) -> String {
        let mut out = String::from("frameId,status,msPerStage,inliers,rms\n");
        for t in &self.per_frame {
            let stages: Vec<String> = t
                .timestamps
                .stage_ms()
                .iter()
                .map(|d| d.map_or(String::new(), |v| format!("{v:.3}")))
                .collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t.frame_id,
                t.status,
                stages.join(";"),
                t.inliers.map_or(String::new(), |v| v.to_string()),
                t.rms.map_or(String::new(), |v| format!("{v:.6}")),
            ));
        }
        out
    }

    pub fn write_files(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("telemetry.json"),
            serde_json::to_string_pretty(self).expect("plain struct"),
        )?;
        fs::write(dir.join("frames.csv"), self.frames_csv())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Surviving matches between a frame and the frame it was aligned to.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatches {
    pub query_frame: u64,
    pub train_frame: u64,
    /// (query point, train point) in working-resolution pixels.
    pub pairs: Vec<PointPair>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub canvas: MosaicCanvas,
    pub telemetry: Telemetry,
    /// One entry per frame; rejected frames carry `accepted = false`.
    pub poses: Vec<FramePose>,
    /// Matches of the attempt that decided each aligned frame.
    pub matches: Vec<PairMatches>,
    pub snapshots: Vec<PathBuf>,
}

/// Acceptance rule for one alignment attempt.
pub fn accept_or_reject(
    result: &Result<RansacResult, GeometryError>,
    params: &RansacParams,
) -> bool {
    match result {
        Ok(r) => r.inlier_count >= params.min_inliers && r.rms_error <= params.max_rms,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Attempt {
    target: u64,
    pairs: Vec<PointPair>,
    result: Result<RansacResult, GeometryError>,
}

/// Tries the previous frame, then the keyframe once. `try_keyframe` is
/// `None` when there is no distinct keyframe.
fn align_with_fallback(
    prev: Attempt,
    try_keyframe: Option<impl FnOnce() -> Attempt>,
    params: &RansacParams,
) -> (Attempt, bool, bool) {
    if accept_or_reject(&prev.result, params) {
        return (prev, true, false);
    }
    match try_keyframe {
        Some(f) => {
            let kf = f();
            let ok = accept_or_reject(&kf.result, params);
            (kf, ok, true)
        }
        None => (prev, false, false),
    }
}

fn ransac_seed(base: u64, frame: u64, target: u64) -> u64 {
    base ^ frame.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ target.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

struct RefFrame {
    frame_id: u64,
    pose: FramePose,
    feats: Arc<IndexedFeatures>,
}

/// Match/estimate state: the last accepted frame and the last keyframe.
struct Aligner<'a> {
    cfg: &'a RunConfig,
    prev: Option<Arc<RefFrame>>,
    keyframe: Option<Arc<RefFrame>>,
}

struct Alignment {
    pose: Option<FramePose>,
    matches: Option<PairMatches>,
}

impl<'a> Aligner<'a> {
    fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            prev: None,
            keyframe: None,
        }
    }

    fn attempt(&self, frame_id: u64, q: &IndexedFeatures, target: &RefFrame) -> Attempt {
        let m = match_indexed(q, &target.feats, &self.cfg.matching);
        let pairs: Vec<PointPair> = m
            .iter()
            .map(|p| {
                let a = &q.features.keypoints[p.query_idx];
                let b = &target.feats.features.keypoints[p.train_idx];
                (
                    Point2::new(a.x as f64, a.y as f64),
                    Point2::new(b.x as f64, b.y as f64),
                )
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(ransac_seed(
            self.cfg.matching.seed,
            frame_id,
            target.frame_id,
        ));
        let result = ransac_homography(&pairs, &self.cfg.ransac, &mut rng);
        Attempt {
            target: target.frame_id,
            pairs,
            result,
        }
    }

    fn step(&mut self, ticket: &mut FrameTicket, feats: IndexedFeatures) -> Alignment {
        let frame_id = ticket.frame_id;
        let Some(prev) = self.prev.clone() else {
            let anchor = Arc::new(RefFrame {
                frame_id,
                pose: FramePose::anchor(frame_id),
                feats: Arc::new(feats),
            });
            self.prev = Some(anchor.clone());
            self.keyframe = Some(anchor);
            return Alignment {
                pose: Some(FramePose::anchor(frame_id)),
                matches: None,
            };
        };
        let kf = self
            .keyframe
            .clone()
            .filter(|k| k.frame_id != prev.frame_id);
        let first = self.attempt(frame_id, &feats, &prev);
        let (att, ok, via_kf) = align_with_fallback(
            first,
            kf.as_ref().map(|k| || self.attempt(frame_id, &feats, k)),
            &self.cfg.ransac,
        );
        ticket.matches = att.pairs.len();
        ticket.inliers = Some(att.result.as_ref().map_or(0, |r| r.inlier_count));
        ticket.rms = att.result.as_ref().ok().map(|r| r.rms_error);
        ticket.via_keyframe = via_kf;
        let matches = Some(PairMatches {
            query_frame: frame_id,
            train_frame: att.target,
            pairs: att.pairs.clone(),
        });
        let reference = if via_kf {
            kf.expect("keyframe attempt")
        } else {
            prev
        };
        let pose = match (&att.result, ok) {
            (Ok(r), true) => chain_pose(&reference.pose, &r.h, frame_id).ok(),
            _ => None,
        };
        if let Some(p) = pose {
            let inliers = att.result.as_ref().map_or(0, |r| r.inlier_count);
            let entry = Arc::new(RefFrame {
                frame_id,
                pose: p,
                feats: Arc::new(feats),
            });
            if inliers >= KEYFRAME_MIN_INLIERS {
                self.keyframe = Some(entry.clone());
            }
            self.prev = Some(entry);
        }
        Alignment { pose, matches }
    }
}

/// Shared pure stage functions.
struct Stages<'a> {
    cfg: &'a RunConfig,
    extractor: OrbExtractor,
    start: Instant,
}

impl<'a> Stages<'a> {
    fn new(cfg: &'a RunConfig, start: Instant) -> Self {
        Self {
            cfg,
            extractor: OrbExtractor::new(cfg.features),
            start,
        }
    }

    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }

    fn ingest(&self, source: &FrameSource, i: usize) -> (FrameTicket, Option<ImageGray>) {
        let mut t = FrameTicket::new(i as u64, source.path(i));
        let img = match source.read(i) {
            Ok(img) => Some(img),
            Err(e) => {
                log::warn!("frame {i}: {e}");
                t.status = FrameStatus::Rejected(RejectReason::Io);
                None
            }
        };
        t.timestamps.ingest = Some(self.now());
        (t, img)
    }

    fn preprocess(&self, t: &mut FrameTicket, raw: &ImageGray) -> (ImageGray, ImageGray) {
        let working = to_working_resolution(raw, &self.cfg.imaging);
        let enhanced = enhance(&working, &self.cfg.imaging);
        t.timestamps.preprocessed = Some(self.now());
        (working, enhanced)
    }

    fn detect(&self, t: &mut FrameTicket, enhanced: &ImageGray) -> IndexedFeatures {
        let fs = self.extractor.extract(enhanced, t.frame_id);
        let idx = IndexedFeatures::new(fs, &self.cfg.matching);
        t.timestamps.detected = Some(self.now());
        idx
    }

    fn align(
        &self,
        aligner: &mut Aligner,
        t: &mut FrameTicket,
        feats: IndexedFeatures,
    ) -> Alignment {
        let a = aligner.step(t, feats);
        t.timestamps.matched = Some(self.now());
        if a.pose.is_none() {
            t.status = FrameStatus::Rejected(RejectReason::Alignment);
        }
        a
    }
}

/// Single-writer composite stage plus snapshot policy.
struct Compositor<'a> {
    cfg: &'a RunConfig,
    canvas: MosaicCanvas,
    accepted: usize,
    poses: Vec<FramePose>,
    matches: Vec<PairMatches>,
    tickets: Vec<FrameTicket>,
    snapshots: Vec<PathBuf>,
    snapshot_errors: Vec<String>,
}

impl<'a> Compositor<'a> {
    fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            canvas: MosaicCanvas::default(),
            accepted: 0,
            poses: Vec::new(),
            matches: Vec::new(),
            tickets: Vec::new(),
            snapshots: Vec::new(),
            snapshot_errors: Vec::new(),
        }
    }

    fn handle(&mut self, stages: &Stages, mut msg: Matched) {
        let t = &mut msg.ticket;
        if let Some(m) = msg.matches {
            self.matches.push(m);
        }
        let mut pose = FramePose {
            frame_id: t.frame_id,
            to_anchor: crate::geometry::Homography::identity(),
            accepted: false,
        };
        if let (Some(p), Some(img)) = (msg.pose, msg.working.as_ref()) {
            match self.canvas.composite(img, &p.to_anchor) {
                Ok(()) => {
                    t.status = FrameStatus::Accepted;
                    t.timestamps.composited = Some(stages.now());
                    pose = p;
                }
                Err(e) => {
                    log::warn!("frame {}: {e}", t.frame_id);
                    t.status = FrameStatus::Rejected(match e {
                        MosaicError::CapacityExceeded { .. } => RejectReason::Capacity,
                        _ => RejectReason::Alignment,
                    });
                }
            }
        }
        self.poses.push(pose);
        if t.status == FrameStatus::Accepted {
            self.accepted += 1;
            if self.accepted.is_multiple_of(self.cfg.pipeline.snapshot_every) {
                self.snapshot(&snapshot_stem(t.frame_id), t.frame_id);
            }
        }
        log::debug!("frame {} {}", t.frame_id, t.status);
        self.tickets.push(msg.ticket);
    }

    fn snapshot(&mut self, stem: &str, frame_id: u64) {
        let Some(dir) = self.cfg.output.dir.as_ref() else {
            return;
        };
        let snap = self.canvas.render_snapshot();
        match write_snapshot(&snap, dir, stem, frame_id) {
            Ok(p) => self.snapshots.push(p),
            Err(e) => {
                log::error!("snapshot {stem}: {e}");
                self.snapshot_errors.push(format!("{stem}: {e}"));
            }
        }
    }

    fn finish(mut self, start: Instant, max_queue: usize, workers: usize) -> RunOutput {
        let last = self
            .poses
            .iter()
            .rev()
            .find(|p| p.accepted)
            .map_or(0, |p| p.frame_id);
        self.snapshot("final_map", last);
        self.poses.sort_by_key(|p| p.frame_id);
        let telemetry = Telemetry::summarize(
            self.tickets,
            start.elapsed(),
            workers,
            max_queue,
            self.snapshot_errors,
        );
        if let Some(dir) = &self.cfg.output.dir {
            if let Err(e) = telemetry.write_files(dir) {
                log::error!("telemetry: {e}");
            }
        }
        RunOutput {
            canvas: self.canvas,
            telemetry,
            poses: self.poses,
            matches: self.matches,
            snapshots: self.snapshots,
        }
    }
}

struct Ingested {
    ticket: FrameTicket,
    raw: Option<ImageGray>,
}

struct Detected {
    ticket: FrameTicket,
    working: Option<ImageGray>,
    feats: Option<IndexedFeatures>,
}

struct Matched {
    ticket: FrameTicket,
    working: Option<ImageGray>,
    pose: Option<FramePose>,
    matches: Option<PairMatches>,
}

/// Lets the composite stage pre-empt detection work.
#[derive(Default)]
struct PriorityGate {
    busy: Mutex<usize>,
    cv: Condvar,
}

impl PriorityGate {
    fn enter(&self) {
        *self.busy.lock().expect("gate") += 1;
    }

    fn leave(&self) {
        let mut b = self.busy.lock().expect("gate");
        *b -= 1;
        if *b == 0 {
            self.cv.notify_all();
        }
    }

    fn wait_idle(&self) {
        let mut b = self.busy.lock().expect("gate");
        while *b > 0 {
            b = self.cv.wait(b).expect("gate");
        }
    }
}

/// Bounded queue that records its peak occupancy.
struct Queue<T> {
    tx: Sender<T>,
    peak: Arc<AtomicUsize>,
}

impl<T> Clone for Queue<T> {
    fn clone(&self) -> Self {
        Self {
            tx: self.tx.clone(),
            peak: self.peak.clone(),
        }
    }
}

impl<T> Queue<T> {
    fn new(cap: usize, peak: Arc<AtomicUsize>) -> (Self, Receiver<T>) {
        let (tx, rx) = bounded(cap);
        (Self { tx, peak }, rx)
    }

    fn send(&self, v: T) -> bool {
        let ok = self.tx.send(v).is_ok();
        self.peak.fetch_max(self.tx.len(), Ordering::Relaxed);
        ok
    }
}

/// Runs the staged concurrent pipeline with `cfg.pipeline.workers` threads.
pub fn run_pipeline(source: &FrameSource, cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let workers = cfg.pipeline.workers;
    let cap = cfg.pipeline.queue_cap;
    let stages = Stages::new(cfg, start);
    let pool = Pool::new(workers);
    let gate = PriorityGate::default();
    let peak = Arc::new(AtomicUsize::new(0));

    let (q_in, rx_in) = Queue::<Ingested>::new(cap, peak.clone());
    let (q_det, rx_det) = Queue::<Detected>::new(cap, peak.clone());
    let (q_match, rx_match) = Queue::<Matched>::new(cap, peak.clone());

    let mut compositor = Compositor::new(cfg);
    thread::scope(|s| {
        let (stages, pool, gate) = (&stages, &pool, &gate);

        s.spawn(move || ingest_loop(stages, source, cfg, q_in));

        for _ in 0..workers {
            let rx = rx_in.clone();
            let tx = q_det.clone();
            s.spawn(move || {
                for Ingested { mut ticket, raw } in rx {
                    let (working, feats) = match raw {
                        Some(raw) => {
                            let (working, enhanced) =
                                pool.install(|| stages.preprocess(&mut ticket, &raw));
                            gate.wait_idle();
                            let feats = pool.install(|| stages.detect(&mut ticket, &enhanced));
                            (Some(working), Some(feats))
                        }
                        None => (None, None),
                    };
                    if !tx.send(Detected {
                        ticket,
                        working,
                        feats,
                    }) {
                        break;
                    }
                }
            });
        }
        drop(rx_in);
        drop(q_det);

        s.spawn(move || {
            let mut aligner = Aligner::new(cfg);
            let mut pending: BTreeMap<u64, Detected> = BTreeMap::new();
            let mut next = 0u64;
            for d in rx_det {
                pending.insert(d.ticket.frame_id, d);
                while let Some(d) = pending.remove(&next) {
                    next += 1;
                    let m = pool.install(|| match_one(stages, &mut aligner, d));
                    if !q_match.send(m) {
                        return;
                    }
                }
            }
            debug_assert!(pending.is_empty(), "frame ids must be contiguous");
        });

        for m in rx_match {
            gate.enter();
            pool.install(|| compositor.handle(stages, m));
            gate.leave();
        }
    });

    Ok(compositor.finish(start, peak.load(Ordering::Relaxed), workers))
}

fn ingest_loop(stages: &Stages, source: &FrameSource, cfg: &RunConfig, q: Queue<Ingested>) {
    let delay = Duration::from_millis(cfg.pipeline.paced_delay_ms);
    for i in 0..source.len() {
        pace(stages.start, delay, i);
        if cfg.pipeline.drop_when_full && q.tx.is_full() {
            let mut ticket = FrameTicket::new(i as u64, source.path(i));
            ticket.timestamps.ingest = Some(stages.now());
            ticket.status = FrameStatus::Rejected(RejectReason::Dropped);
            // the ticket itself is never lost, only its payload
            if q.send(Ingested { ticket, raw: None }) {
                continue;
            }
            return;
        }
        let (ticket, raw) = stages.ingest(source, i);
        if !q.send(Ingested { ticket, raw }) {
            return;
        }
    }
}

fn pace(start: Instant, delay: Duration, i: usize) {
    if delay.is_zero() {
        return;
    }
    let due = start + delay * i as u32;
    let now = Instant::now();
    if due > now {
        thread::sleep(due - now);
    }
}

fn match_one(stages: &Stages, aligner: &mut Aligner, d: Detected) -> Matched {
    let Detected {
        mut ticket,
        working,
        feats,
    } = d;
    let (pose, matches) = match feats {
        Some(f) if !ticket.status.is_terminal() => {
            let a = stages.align(aligner, &mut ticket, f);
            (a.pose, a.matches)
        }
        _ => (None, None),
    };
    Matched {
        ticket,
        working,
        pose,
        matches,
    }
}

/// Reference execution: the same stages inline on the calling thread with
/// a single-threaded pool.
pub fn run_sequential(source: &FrameSource, cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let stages = Stages::new(cfg, start);
    let pool = Pool::new(1);
    let delay = Duration::from_millis(cfg.pipeline.paced_delay_ms);
    let mut aligner = Aligner::new(cfg);
    let mut compositor = Compositor::new(cfg);
    pool.install(|| {
        for i in 0..source.len() {
            pace(start, delay, i);
            let (mut ticket, raw) = stages.ingest(source, i);
            let (working, feats) = match raw {
                Some(raw) => {
                    let (working, enhanced) = stages.preprocess(&mut ticket, &raw);
                    let feats = stages.detect(&mut ticket, &enhanced);
                    (Some(working), Some(feats))
                }
                None => (None, None),
            };
            let m = match_one(
                &stages,
                &mut aligner,
                Detected {
                    ticket,
                    working,
                    feats,
                },
            );
            compositor.handle(&stages, m);
        }
    });
    Ok(compositor.finish(start, 0, 1))
}
