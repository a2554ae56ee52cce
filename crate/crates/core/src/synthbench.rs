//! Synthetic flights with exact ground truth, and the evaluators that score
//! a run against it.
//!
//! Frame `k` is resampled from a large source image through
//! `G_k = T(offset_k + c) * R(theta_k) * P(jitter_k) * T(-c)`, which maps
//! frame pixels to source pixels (`c` is the frame centre). Ground truth is
//! stored as `G_0^-1 * G_k`, the frame-to-anchor transform.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Matrix3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureConfig, OrbExtractor};
use crate::geometry::{corner_transfer_rms, project, Homography, Point2, PointPair};
use crate::imaging::{
    enhance, load_image, save_image, to_working_resolution, ImageGray, ImagingConfig, ImagingError,
};
use crate::matching::{match_frames, MatchConfig};
use crate::mosaic::{FramePose, MosaicCanvas, MosaicError};
use crate::pipeline::{
    run_pipeline, run_sequential, FrameSource, PairMatches, PipelineError, RunConfig, RunOutput,
    Telemetry,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("source too small: {0}")]
    SourceTooSmall(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("no covered pixels to compare")]
    EmptyOverlap,
    #[error("sequence has {expected} frames but the run has {actual}")]
    FrameCountMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Mosaic(#[from] MosaicError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Piecewise-constant noise in [0, 1): random values on square cells of
/// `cell` pixels, with the lattice shifted by a random offset.
fn block_noise(w: usize, h: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let gw = (w + ox) / cell + 1;
    let gh = (h + oy) / cell + 1;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = (y + oy) / cell * gw;
        out.extend((0..w).map(|x| grid[row + (x + ox) / cell]));
    }
    out
}

/// Checkerboard plus multi-scale seeded block noise plus a diagonal
/// gradient. Block edges give well-localized corners at every scale.
pub fn textured_source(w: usize, h: usize, seed: u64) -> ImageGray {
    const CHECKER: usize = 64;
    const OCTAVES: [(usize, f64); 4] = [(53, 70.0), (23, 70.0), (11, 60.0), (5, 40.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers: Vec<(Vec<f64>, f64)> = OCTAVES
        .iter()
        .map(|&(cell, amp)| (block_noise(w, h, cell, &mut rng), amp))
        .collect();
    let norm = (w + h).max(1) as f64;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let checker = if ((x / CHECKER) + (y / CHECKER)).is_multiple_of(2) {
                15.0
            } else {
                -15.0
            };
            let noise: f64 = layers.iter().map(|(l, a)| a * (l[i] - 0.5)).sum();
            let gradient = 30.0 * ((x + y) as f64 / norm - 0.5);
            data.push(
                (128.0 + checker + noise + gradient)
                    .round()
                    .clamp(0.0, 255.0) as u8,
            );
        }
    }
    ImageGray::new(w, h, data).expect("positive dims")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct GenConfig {
    pub frames: usize,
    pub window_w: usize,
    pub window_h: usize,
    pub overlap: f64,
    pub max_rot_deg: f64,
    pub max_persp_jitter: f64,
    pub brightness_jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            window_w: 640,
            window_h: 480,
            overlap: 0.6,
            max_rot_deg: 5.0,
            max_persp_jitter: 0.0,
            brightness_jitter: 0.1,
            noise_sigma: 2.0,
            seed: 7,
        }
    }
}

impl GenConfig {
    /// Stress variant: stronger rotation and noise.
    pub fn stress() -> Self {
        Self {
            max_rot_deg: 10.0,
            noise_sigma: 4.0,
            ..Self::default()
        }
    }

    /// Pure translation, no photometric changes.
    pub fn translation_only() -> Self {
        Self {
            max_rot_deg: 0.0,
            max_persp_jitter: 0.0,
            brightness_jitter: 0.0,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        if self.window_w < 16 || self.window_h < 16 {
            return bad("window must be at least 16x16".into());
        }
        if !(0.0..=0.95).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 0.95]", self.overlap));
        }
        if !(0.0..=45.0).contains(&self.max_rot_deg) {
            return bad(format!("maxRotDeg {} outside [0, 45]", self.max_rot_deg));
        }
        if !(0.0..=1e-3).contains(&self.max_persp_jitter) {
            return bad(format!(
                "maxPerspJitter {} outside [0, 1e-3]",
                self.max_persp_jitter
            ));
        }
        if !(0.0..=0.5).contains(&self.brightness_jitter) {
            return bad(format!(
                "brightnessJitter {} outside [0, 0.5]",
                self.brightness_jitter
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma <= 64.0) {
            return bad(format!("noiseSigma {} outside [0, 64]", self.noise_sigma));
        }
        Ok(())
    }

    pub fn stride_x(&self) -> usize {
        ((1.0 - self.overlap) * self.window_w as f64)
            .round()
            .max(1.0) as usize
    }

    pub fn stride_y(&self) -> usize {
        ((1.0 - self.overlap) * self.window_h as f64)
            .round()
            .max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GtFrame {
    pub frame_id: u64,
    pub path: Option<PathBuf>,
    pub gt_to_anchor: Homography,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundTruthSequence {
    pub source_path: Option<PathBuf>,
    pub params: GenConfig,
    /// Anchor frame pixels to source pixels (`G_0`).
    pub anchor_to_source: Homography,
    pub frames: Vec<GtFrame>,
    /// Frame images when held in memory.
    #[serde(skip)]
    pub images: Vec<ImageGray>,
}

/// Integer top-left corners of a serpentine path centred in the source.
pub fn serpentine_offsets(
    cfg: &GenConfig,
    src_w: usize,
    src_h: usize,
) -> Result<Vec<(i64, i64)>, SynthError> {
    let (w, h) = (cfg.window_w as f64, cfg.window_h as f64);
    let (s, c) = cfg.max_rot_deg.to_radians().sin_cos();
    // rotated half-extent beyond the axis-aligned window, plus a guard
    let mx = ((w / 2.0) * c + (h / 2.0) * s - w / 2.0).max(0.0).ceil() as usize + 2;
    let my = ((w / 2.0) * s + (h / 2.0) * c - h / 2.0).max(0.0).ceil() as usize + 2;
    let too_small = || {
        SynthError::SourceTooSmall(format!(
            "{src_w}x{src_h} cannot hold {} frames of {}x{}",
            cfg.frames, cfg.window_w, cfg.window_h
        ))
    };
    let usable_w = src_w.checked_sub(2 * mx).ok_or_else(too_small)?;
    let usable_h = src_h.checked_sub(2 * my).ok_or_else(too_small)?;
    if usable_w < cfg.window_w || usable_h < cfg.window_h {
        return Err(too_small());
    }
    let (sx, sy) = (cfg.stride_x(), cfg.stride_y());
    let cols = ((usable_w - cfg.window_w) / sx + 1).min(cfg.frames);
    let rows = cfg.frames.div_ceil(cols);
    let path_w = (cols - 1) * sx + cfg.window_w;
    let path_h = (rows - 1) * sy + cfg.window_h;
    if path_h > usable_h {
        return Err(too_small());
    }
    let x0 = ((src_w - path_w) / 2) as i64;
    let y0 = ((src_h - path_h) / 2) as i64;
    Ok((0..cfg.frames)
        .map(|k| {
            let (r, i) = (k / cols, k % cols);
            let col = if r % 2 == 0 { i } else { cols - 1 - i };
            (x0 + (col * sx) as i64, y0 + (r * sy) as i64)
        })
        .collect())
}

fn perspective(jx: f64, jy: f64) -> Homography {
    Homography(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, jx, jy, 1.0))
}

/// Frame-to-source transform for a window with top-left `offset`.
pub fn frame_to_source(
    cfg: &GenConfig,
    offset: (i64, i64),
    theta: f64,
    jitter: (f64, f64),
) -> Homography {
    let cx = (cfg.window_w as f64 - 1.0) / 2.0;
    let cy = (cfg.window_h as f64 - 1.0) / 2.0;
    let t_out = Homography::translation(offset.0 as f64 + cx, offset.1 as f64 + cy);
    let m = t_out.0
        * Homography::rotation(theta).0
        * perspective(jitter.0, jitter.1).0
        * Homography::translation(-cx, -cy).0;
    Homography(m)
}

/// Renders the frames of a flight over `source` with exact ground truth.
pub fn generate_sequence(
    source: &ImageGray,
    cfg: &GenConfig,
) -> Result<GroundTruthSequence, SynthError> {
    cfg.validate()?;
    let offsets = serpentine_offsets(cfg, source.width(), source.height())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let rot = cfg.max_rot_deg.to_radians();
    let (fw, fh) = (cfg.window_w, cfg.window_h);
    let (smax_x, smax_y) = (source.width() as f64 - 1.0, source.height() as f64 - 1.0);

    let mut g = Vec::with_capacity(cfg.frames);
    let mut images = Vec::with_capacity(cfg.frames);
    for &offset in &offsets {
        let theta = if rot > 0.0 {
            rng.random_range(-rot..=rot)
        } else {
            0.0
        };
        let j = cfg.max_persp_jitter;
        let jitter = if j > 0.0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        let bj = cfg.brightness_jitter;
        let gain = if bj > 0.0 {
            1.0 + rng.random_range(-bj..=bj)
        } else {
            1.0
        };
        let gk = frame_to_source(cfg, offset, theta, jitter);

        let (wf, hf) = (fw as f64 - 1.0, fh as f64 - 1.0);
        let probes = [
            (0.0, 0.0),
            (wf, 0.0),
            (0.0, hf),
            (wf, hf),
            (wf / 2.0, 0.0),
            (wf / 2.0, hf),
            (0.0, hf / 2.0),
            (wf, hf / 2.0),
        ];
        for (x, y) in probes {
            let p = project(&gk, Point2::new(x, y))
                .map_err(|_| SynthError::SourceTooSmall("window projects to infinity".into()))?;
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= smax_x && p.y <= smax_y) {
                return Err(SynthError::SourceTooSmall(format!(
                    "window at {offset:?} leaves the source"
                )));
            }
        }

        let mut data = Vec::with_capacity(fw * fh);
        for y in 0..fh {
            for x in 0..fw {
                let p = project(&gk, Point2::new(x as f64, y as f64)).expect("checked window");
                let mut v = source.sample_bilinear(p.x, p.y) * gain;
                if cfg.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        images.push(ImageGray::new(fw, fh, data)?);
        g.push(gk);
    }

    let g0_inv = g[0]
        .inverse()
        .ok_or_else(|| SynthError::InvalidConfig("singular anchor transform".into()))?;
    let frames = g
        .iter()
        .enumerate()
        .map(|(k, gk)| GtFrame {
            frame_id: k as u64,
            path: None,
            gt_to_anchor: if k == 0 {
                Homography::identity()
            } else {
                Homography(g0_inv.0 * gk.0).normalized()
            },
        })
        .collect();
    Ok(GroundTruthSequence {
        source_path: None,
        params: *cfg,
        anchor_to_source: g[0],
        frames,
        images,
    })
}

impl GroundTruthSequence {
    pub fn frame_name(k: usize) -> String {
        format!("frame_{k:04}.png")
    }

    /// Writes `frame_NNNN.png` files and `gt.json`; paths are stored
    /// relative to `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf, SynthError> {
        fs::create_dir_all(dir)?;
        for (k, img) in self.images.iter().enumerate() {
            let name = Self::frame_name(k);
            save_image(img, dir.join(&name))?;
            self.frames[k].path = Some(PathBuf::from(name));
        }
        let gt = dir.join("gt.json");
        fs::write(&gt, serde_json::to_string_pretty(self)?)?;
        Ok(gt)
    }

    /// Loads `gt.json` and the frames it lists.
    pub fn load(gt_path: &Path) -> Result<Self, SynthError> {
        let mut seq: Self = serde_json::from_str(&fs::read_to_string(gt_path)?)?;
        let base = gt_path.parent().unwrap_or(Path::new("."));
        let mut images = Vec::with_capacity(seq.frames.len());
        for f in &mut seq.frames {
            let p = f.path.as_ref().map(|p| base.join(p)).ok_or_else(|| {
                SynthError::InvalidConfig(format!("frame {} has no path", f.frame_id))
            })?;
            images.push(load_image(&p)?);
            f.path = Some(p);
        }
        seq.source_path = seq.source_path.map(|p| {
            let joined = base.join(&p);
            if joined.exists() {
                joined
            } else {
                p
            }
        });
        seq.images = images;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_source(&self) -> FrameSource {
        if self.images.len() == self.frames.len() {
            FrameSource::Memory(self.images.clone())
        } else {
            FrameSource::Files(self.frames.iter().filter_map(|f| f.path.clone()).collect())
        }
    }

    /// Ground truth seen through the pipeline's working resolution.
    pub fn view(&self, imaging: &ImagingConfig) -> GtView {
        let (fw, fh) = (self.params.window_w as f64, self.params.window_h as f64);
        let (tw, th) = (imaging.target_w as f64, imaging.target_h as f64);
        let (ax, ay) = (tw / fw, th / fh);
        // the resize's pixel-centre mapping
        let s = Homography(Matrix3::new(
            ax,
            0.0,
            0.5 * ax - 0.5,
            0.0,
            ay,
            0.5 * ay - 0.5,
            0.0,
            0.0,
            1.0,
        ));
        GtView {
            gt: self.frames.iter().map(|f| f.gt_to_anchor).collect(),
            s_inv: s.inverse().expect("positive scale"),
            s,
            width: tw,
            height: th,
            anchor_to_source: self.anchor_to_source,
        }
    }
}

/// Ground truth in working-resolution coordinates.
#[derive(Debug, Clone)]
pub struct GtView {
    gt: Vec<Homography>,
    s: Homography,
    s_inv: Homography,
    pub width: f64,
    pub height: f64,
    anchor_to_source: Homography,
}

impl GtView {
    fn to_working(&self, h: &Homography) -> Homography {
        Homography(self.s.0 * h.0 * self.s_inv.0)
    }

    /// Maps frame `from` into frame `to`.
    pub fn pairwise(&self, from: usize, to: usize) -> Homography {
        let to_inv = self.gt[to].inverse().expect("gt is invertible");
        self.to_working(&Homography(to_inv.0 * self.gt[from].0))
    }

    /// Maps frame `k` into the coordinates of anchor frame `anchor`.
    pub fn to_anchor(&self, k: usize, anchor: usize) -> Homography {
        self.pairwise(k, anchor)
    }

    /// Maps world (anchor working pixels) to source pixels.
    pub fn world_to_source(&self, anchor: usize) -> Homography {
        Homography(self.anchor_to_source.0 * self.gt[anchor].0 * self.s_inv.0)
    }
}

/// Fraction of `pairs` (query, train) that land within `eps` under `h_gt`.
pub fn pair_precision(pairs: &[PointPair], h_gt: &Homography, eps: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = pairs
        .iter()
        .filter(|(q, t)| project(h_gt, *q).is_ok_and(|p| p.dist(t) <= eps))
        .count();
    correct as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PairPrecision {
    pub query_frame: u64,
    pub train_frame: u64,
    pub surviving: usize,
    pub precision: f64,
    /// Set when no match survived.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MatchEval {
    pub precision: f64,
    pub pairs: Vec<PairPrecision>,
}

fn summarize_precision(pairs: Vec<PairPrecision>) -> MatchEval {
    let precision = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.precision).sum::<f64>() / pairs.len() as f64
    };
    MatchEval { precision, pairs }
}

/// Detects and matches every adjacent pair (k+1 against k) independently of
/// the pipeline.
pub fn eval_matching(
    seq: &GroundTruthSequence,
    imaging: &ImagingConfig,
    features: &FeatureConfig,
    matching: &MatchConfig,
    epsilon: f64,
) -> Result<MatchEval, SynthError> {
    let view = seq.view(imaging);
    let extractor = OrbExtractor::new(*features);
    let images = if seq.images.len() == seq.len() {
        seq.images.clone()
    } else {
        seq.frames
            .iter()
            .map(|f| load_image(f.path.as_ref().expect("frame path")))
            .collect::<Result<_, _>>()?
    };
    let sets: Vec<_> = images
        .iter()
        .enumerate()
        .map(|(k, img)| {
            let working = to_working_resolution(img, imaging);
            extractor.extract(&enhance(&working, imaging), k as u64)
        })
        .collect();
    let pairs = (1..sets.len())
        .map(|k| {
            let m = match_frames(&sets[k], &sets[k - 1], matching);
            let pts: Vec<PointPair> = m
                .iter()
                .map(|p| {
                    let a = &sets[k].keypoints[p.query_idx];
                    let b = &sets[k - 1].keypoints[p.train_idx];
                    (
                        Point2::new(a.x as f64, a.y as f64),
                        Point2::new(b.x as f64, b.y as f64),
                    )
                })
                .collect();
            PairPrecision {
                query_frame: k as u64,
                train_frame: k as u64 - 1,
                surviving: pts.len(),
                precision: pair_precision(&pts, &view.pairwise(k, k - 1), epsilon),
                flagged: pts.is_empty(),
            }
        })
        .collect();
    Ok(summarize_precision(pairs))
}

/// Precision of the matches a pipeline run actually used.
pub fn run_match_precision(
    seq: &GroundTruthSequence,
    imaging: &ImagingConfig,
    matches: &[PairMatches],
    epsilon: f64,
) -> MatchEval {
    let view = seq.view(imaging);
    summarize_precision(
        matches
            .iter()
            .map(|m| PairPrecision {
                query_frame: m.query_frame,
                train_frame: m.train_frame,
                surviving: m.pairs.len(),
                precision: pair_precision(
                    &m.pairs,
                    &view.pairwise(m.query_frame as usize, m.train_frame as usize),
                    epsilon,
                ),
                flagged: m.pairs.is_empty(),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AlignmentEval {
    /// One entry per adjacent pair of accepted frames.
    pub pairwise_corner_err_px: Vec<f64>,
    /// One entry per accepted frame.
    pub chain_corner_err_px: Vec<f64>,
    pub mean_pairwise_corner_err_px: f64,
    pub max_chain_corner_err_px: f64,
    pub excluded_frames: usize,
}

/// Corner-transfer errors of estimated poses against ground truth. Poses
/// are in working coordinates relative to the run's anchor.
pub fn eval_alignment(
    seq: &GroundTruthSequence,
    imaging: &ImagingConfig,
    poses: &[FramePose],
) -> Result<AlignmentEval, SynthError> {
    if poses.len() != seq.len() {
        return Err(SynthError::FrameCountMismatch {
            expected: seq.len(),
            actual: poses.len(),
        });
    }
    let view = seq.view(imaging);
    let accepted: Vec<&FramePose> = poses.iter().filter(|p| p.accepted).collect();
    let excluded = poses.len() - accepted.len();
    let Some(anchor) = accepted.first().map(|p| p.frame_id as usize) else {
        return Ok(AlignmentEval {
            pairwise_corner_err_px: Vec::new(),
            chain_corner_err_px: Vec::new(),
            mean_pairwise_corner_err_px: 0.0,
            max_chain_corner_err_px: 0.0,
            excluded_frames: excluded,
        });
    };
    let (w, h) = (view.width, view.height);
    let pairwise: Vec<f64> = accepted
        .windows(2)
        .map(|p| {
            let (a, b) = (p[0], p[1]);
            let est = a
                .to_anchor
                .inverse()
                .map(|inv| Homography(inv.0 * b.to_anchor.0));
            let gt = view.pairwise(b.frame_id as usize, a.frame_id as usize);
            est.map_or(f64::INFINITY, |e| corner_transfer_rms(&e, &gt, w, h))
        })
        .collect();
    let chain: Vec<f64> = accepted
        .iter()
        .map(|p| {
            corner_transfer_rms(
                &p.to_anchor,
                &view.to_anchor(p.frame_id as usize, anchor),
                w,
                h,
            )
        })
        .collect();
    let mean_pw = if pairwise.is_empty() {
        0.0
    } else {
        pairwise.iter().sum::<f64>() / pairwise.len() as f64
    };
    Ok(AlignmentEval {
        mean_pairwise_corner_err_px: mean_pw,
        max_chain_corner_err_px: chain.iter().copied().fold(0.0, f64::max),
        pairwise_corner_err_px: pairwise,
        chain_corner_err_px: chain,
        excluded_frames: excluded,
    })
}

/// Recomposites frames with the given poses, as the pipeline's composite
/// stage would.
pub fn recomposite(
    seq: &GroundTruthSequence,
    imaging: &ImagingConfig,
    poses: &[FramePose],
) -> Result<MosaicCanvas, SynthError> {
    let mut canvas = MosaicCanvas::default();
    for p in poses.iter().filter(|p| p.accepted) {
        let k = p.frame_id as usize;
        let img = match seq.images.get(k) {
            Some(img) => img.clone(),
            None => load_image(seq.frames[k].path.as_ref().expect("frame path"))?,
        };
        canvas.composite(&to_working_resolution(&img, imaging), &p.to_anchor)?;
    }
    Ok(canvas)
}

/// Mean absolute difference between the rendered mosaic and the source
/// resampled through ground truth, over pixels with weight > 0.1.
pub fn eval_mosaic(
    seq: &GroundTruthSequence,
    imaging: &ImagingConfig,
    source: &ImageGray,
    canvas: &MosaicCanvas,
    anchor: usize,
) -> Result<f64, SynthError> {
    let Some(ext) = canvas.extent() else {
        return Err(SynthError::EmptyOverlap);
    };
    let to_src = seq.view(imaging).world_to_source(anchor);
    let (smax_x, smax_y) = (source.width() as f64 - 1.0, source.height() as f64 - 1.0);
    let (mut sum, mut n) = (0.0, 0usize);
    for wy in ext.min_y..=ext.max_y {
        for wx in ext.min_x..=ext.max_x {
            if canvas.weight_at(wx, wy) <= 0.1 {
                continue;
            }
            let Some(v) = canvas.value_at(wx, wy) else {
                continue;
            };
            let Ok(p) = project(&to_src, Point2::new(wx as f64, wy as f64)) else {
                continue;
            };
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= smax_x && p.y <= smax_y) {
                continue;
            }
            sum += (v as f64 - source.sample_bilinear(p.x, p.y).round()).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(SynthError::EmptyOverlap);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub match_precision: f64,
    pub pairwise_corner_err_px: Vec<f64>,
    pub mean_pairwise_corner_err_px: f64,
    pub chain_corner_err_px: Vec<f64>,
    pub max_chain_corner_err_px: f64,
    pub mosaic_mad: Option<f64>,
    pub excluded_frames: usize,
    pub flagged_pairs: usize,
    pub timing: Option<Telemetry>,
}

/// Full evaluation of a finished run.
pub fn evaluate_run(
    seq: &GroundTruthSequence,
    cfg: &RunConfig,
    poses: &[FramePose],
    source: Option<&ImageGray>,
    timing: Option<Telemetry>,
) -> Result<EvalReport, SynthError> {
    let m = eval_matching(seq, &cfg.imaging, &cfg.features, &cfg.matching, 2.0)?;
    let a = eval_alignment(seq, &cfg.imaging, poses)?;
    let mosaic_mad = match (source, poses.iter().find(|p| p.accepted)) {
        (Some(src), Some(anchor)) => {
            let canvas = recomposite(seq, &cfg.imaging, poses)?;
            Some(eval_mosaic(
                seq,
                &cfg.imaging,
                src,
                &canvas,
                anchor.frame_id as usize,
            )?)
        }
        _ => None,
    };
    Ok(EvalReport {
        match_precision: m.precision,
        flagged_pairs: m.pairs.iter().filter(|p| p.flagged).count(),
        pairwise_corner_err_px: a.pairwise_corner_err_px,
        mean_pairwise_corner_err_px: a.mean_pairwise_corner_err_px,
        chain_corner_err_px: a.chain_corner_err_px,
        max_chain_corner_err_px: a.max_chain_corner_err_px,
        mosaic_mad,
        excluded_frames: a.excluded_frames,
        timing,
    })
}

/// Ground-truth poses in working coordinates, anchored at frame 0.
pub fn gt_poses(seq: &GroundTruthSequence, imaging: &ImagingConfig) -> Vec<FramePose> {
    let view = seq.view(imaging);
    (0..seq.len())
        .map(|k| FramePose {
            frame_id: k as u64,
            to_anchor: view.to_anchor(k, 0),
            accepted: true,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModeMetrics {
    pub match_precision: f64,
    pub pairwise_corner_err_px: f64,
    pub fps: f64,
    pub mean_latency_ms: f64,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchRow {
    pub metric: String,
    pub unit: String,
    pub pipeline: f64,
    pub baseline: f64,
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchTable {
    pub baseline_description: String,
    pub workers: usize,
    pub available_cores: usize,
    pub pipeline: ModeMetrics,
    pub baseline: ModeMetrics,
    pub rows: Vec<BenchRow>,
    pub speed_ratio: f64,
    /// True when both modes produced identical poses and mosaics.
    pub identical_results: bool,
}

impl fmt::Display for BenchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# baseline: {}", self.baseline_description)?;
        writeln!(
            f,
            "# workers: {}, available cores: {}",
            self.workers, self.available_cores
        )?;
        writeln!(
            f,
            "{:<28} {:>12} {:>12} {:>16}",
            "Metric", "Pipeline", "Baseline", "Improvement (%)"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:>12.3} {:>12.3} {:>16.1}",
                format!("{} ({})", r.metric, r.unit),
                r.pipeline,
                r.baseline,
                r.improvement_pct
            )?;
        }
        write!(f, "speed ratio: {:.3}", self.speed_ratio)
    }
}

fn mode_metrics(
    seq: &GroundTruthSequence,
    cfg: &RunConfig,
    out: &RunOutput,
) -> Result<ModeMetrics, SynthError> {
    let align = eval_alignment(seq, &cfg.imaging, &out.poses)?;
    Ok(ModeMetrics {
        match_precision: run_match_precision(seq, &cfg.imaging, &out.matches, 2.0).precision,
        pairwise_corner_err_px: align.mean_pairwise_corner_err_px,
        fps: out.telemetry.fps,
        mean_latency_ms: out.telemetry.end_to_end_latency_ms.mean,
        accepted: out.telemetry.accepted,
    })
}

fn improvement(pipeline: f64, baseline: f64, higher_is_better: bool) -> f64 {
    if baseline == 0.0 {
        return 0.0;
    }
    let d = if higher_is_better {
        pipeline - baseline
    } else {
        baseline - pipeline
    };
    100.0 * d / baseline
}

/// Runs the concurrent pipeline and the sequential reference one after the
/// other and tabulates accuracy and speed for both.
pub fn bench_compare(seq: &GroundTruthSequence, cfg: &RunConfig) -> Result<BenchTable, SynthError> {
    let mut cfg = cfg.clone();
    cfg.output.dir = None;
    let source = seq.frame_source();

    let t = Instant::now();
    let base = run_sequential(&source, &cfg)?;
    log::info!("sequential run took {:?}", t.elapsed());
    let t = Instant::now();
    let pipe = run_pipeline(&source, &cfg)?;
    log::info!("pipeline run took {:?}", t.elapsed());

    let p = mode_metrics(seq, &cfg, &pipe)?;
    let b = mode_metrics(seq, &cfg, &base)?;
    let identical =
        pipe.poses == base.poses && pipe.canvas.render_snapshot() == base.canvas.render_snapshot();
    let row = |metric: &str, unit: &str, pv: f64, bv: f64, hib: bool| BenchRow {
        metric: metric.into(),
        unit: unit.into(),
        pipeline: pv,
        baseline: bv,
        improvement_pct: improvement(pv, bv, hib),
    };
    let rows = vec![
        row(
            "Feature Detection Accuracy",
            "%",
            100.0 * p.match_precision,
            100.0 * b.match_precision,
            true,
        ),
        row(
            "Image Stitching Error",
            "px",
            p.pairwise_corner_err_px,
            b.pairwise_corner_err_px,
            false,
        ),
        row("Processing Speed", "fps", p.fps, b.fps, true),
        row(
            "End-to-End Latency",
            "ms",
            p.mean_latency_ms,
            b.mean_latency_ms,
            false,
        ),
    ];
    Ok(BenchTable {
        baseline_description: "single-threaded sequential execution of the same stages and matcher"
            .into(),
        workers: cfg.pipeline.workers,
        available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
        speed_ratio: if b.fps > 0.0 { p.fps / b.fps } else { 0.0 },
        pipeline: p,
        baseline: b,
        rows,
        identical_results: identical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose;

    fn small_cfg() -> GenConfig {
        GenConfig {
            frames: 6,
            window_w: 80,
            window_h: 60,
            ..GenConfig::translation_only()
        }
    }

    #[test]
    fn stride_example() {
        assert_eq!(GenConfig::default().stride_x(), 256);
        assert_eq!(GenConfig::default().stride_y(), 192);
    }

    #[test]
    fn texture_is_deterministic_and_varied() {
        let a = textured_source(200, 150, 3);
        assert_eq!(a, textured_source(200, 150, 3));
        assert_ne!(a, textured_source(200, 150, 4));
        let (lo, hi) = a
            .data()
            .iter()
            .fold((255u8, 0u8), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi - lo > 100);
    }

    #[test]
    fn reference_path_fits() {
        let offs = serpentine_offsets(&GenConfig::default(), 2000, 2000).unwrap();
        assert_eq!(offs.len(), 20);
        for w in offs.windows(2) {
            let (dx, dy) = ((w[1].0 - w[0].0).abs(), (w[1].1 - w[0].1).abs());
            assert!((dx == 256 && dy == 0) || (dx == 0 && dy == 192));
        }
        assert!(serpentine_offsets(&GenConfig::default(), 600, 2000).is_err());
    }

    #[test]
    fn degenerate_generator_crops_exactly() {
        let src = textured_source(300, 200, 1);
        let cfg = small_cfg();
        let seq = generate_sequence(&src, &cfg).unwrap();
        let offs = serpentine_offsets(&cfg, 300, 200).unwrap();
        for (k, img) in seq.images.iter().enumerate() {
            let (ox, oy) = offs[k];
            for y in 0..cfg.window_h {
                for x in 0..cfg.window_w {
                    assert_eq!(img.get(x, y), src.get(ox as usize + x, oy as usize + y));
                }
            }
            let rel = seq.frames[k].gt_to_anchor;
            let expect = Homography::translation((ox - offs[0].0) as f64, (oy - offs[0].1) as f64);
            assert!(rel.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn corner_round_trip() {
        let src = textured_source(400, 300, 2);
        let cfg = GenConfig {
            max_rot_deg: 0.0,
            ..small_cfg()
        };
        let seq = generate_sequence(&src, &cfg).unwrap();
        let offs = serpentine_offsets(&cfg, 400, 300).unwrap();
        let (w, h) = (cfg.window_w as f64 - 1.0, cfg.window_h as f64 - 1.0);
        for (k, f) in seq.frames.iter().enumerate() {
            let to_src = compose(&seq.anchor_to_source, &f.gt_to_anchor).unwrap();
            for (cx, cy) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
                let p = project(&to_src, Point2::new(cx, cy)).unwrap();
                assert!((p.x - (offs[k].0 as f64 + cx)).abs() <= 1e-9);
                assert!((p.y - (offs[k].1 as f64 + cy)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let src = textured_source(300, 200, 1);
        let cfg = GenConfig {
            max_rot_deg: 3.0,
            brightness_jitter: 0.1,
            noise_sigma: 2.0,
            ..small_cfg()
        };
        let a = generate_sequence(&src, &cfg).unwrap();
        let b = generate_sequence(&src, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames[0].gt_to_anchor, Homography::identity());
    }

    #[test]
    fn too_small_source() {
        let src = textured_source(50, 50, 1);
        assert!(matches!(
            generate_sequence(&src, &small_cfg()),
            Err(SynthError::SourceTooSmall(_))
        ));
    }

    #[test]
    fn alignment_against_itself_is_zero() {
        let src = textured_source(300, 200, 1);
        let seq = generate_sequence(
            &src,
            &GenConfig {
                max_rot_deg: 4.0,
                ..small_cfg()
            },
        )
        .unwrap();
        let imaging = ImagingConfig {
            target_w: 80,
            target_h: 60,
            ..ImagingConfig::default()
        };
        let poses = gt_poses(&seq, &imaging);
        let a = eval_alignment(&seq, &imaging, &poses).unwrap();
        assert!(a.pairwise_corner_err_px.iter().all(|&e| e < 1e-9));
        assert!(a.chain_corner_err_px.iter().all(|&e| e < 1e-9));

        let shifted: Vec<FramePose> = poses
            .iter()
            .map(|p| FramePose {
                to_anchor: compose(&Homography::translation(1.0, 0.0), &p.to_anchor).unwrap(),
                ..*p
            })
            .collect();
        let a = eval_alignment(&seq, &imaging, &shifted).unwrap();
        // anchor itself is shifted too, so only chained errors see it
        assert!(a
            .chain_corner_err_px
            .iter()
            .all(|&e| (e - 1.0).abs() < 1e-9));
    }

    #[test]
    fn working_scale_view() {
        let src = textured_source(300, 200, 1);
        let seq = generate_sequence(&src, &small_cfg()).unwrap();
        let half = ImagingConfig {
            target_w: 40,
            target_h: 30,
            ..ImagingConfig::default()
        };
        let full = ImagingConfig {
            target_w: 80,
            target_h: 60,
            ..ImagingConfig::default()
        };
        let hf = seq.view(&full).pairwise(1, 0);
        let hh = seq.view(&half).pairwise(1, 0);
        let (tx_f, tx_h) = (hf.0[(0, 2)] / hf.0[(2, 2)], hh.0[(0, 2)] / hh.0[(2, 2)]);
        assert!((tx_h - tx_f / 2.0).abs() < 1e-9);
    }

    #[test]
    fn precision_of_self_match() {
        let img = textured_source(160, 120, 5);
        let seq = GroundTruthSequence {
            source_path: None,
            params: GenConfig {
                frames: 2,
                window_w: 160,
                window_h: 120,
                ..GenConfig::translation_only()
            },
            anchor_to_source: Homography::identity(),
            frames: vec![
                GtFrame {
                    frame_id: 0,
                    path: None,
                    gt_to_anchor: Homography::identity(),
                },
                GtFrame {
                    frame_id: 1,
                    path: None,
                    gt_to_anchor: Homography::identity(),
                },
            ],
            images: vec![img.clone(), img],
        };
        let imaging = ImagingConfig {
            target_w: 160,
            target_h: 120,
            ..ImagingConfig::default()
        };
        let m = eval_matching(
            &seq,
            &imaging,
            &FeatureConfig::default(),
            &MatchConfig::default(),
            2.0,
        )
        .unwrap();
        assert!(m.pairs[0].surviving > 0);
        assert_eq!(m.precision, 1.0);
    }

    #[test]
    fn improvement_direction() {
        assert_eq!(improvement(12.0, 10.0, true), 20.0);
        assert_eq!(improvement(8.0, 10.0, false), 20.0);
        assert_eq!(improvement(1.0, 0.0, true), 0.0);
    }
}
