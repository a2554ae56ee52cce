//! ORB keypoints: FAST-9/16 corners ranked by arc score, intensity-centroid
//! orientation and a 256-bit steered BRIEF descriptor, over an image pyramid.

use std::cmp::Ordering;
use std::f64::consts::TAU;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{gaussian_blur, ImageGray, Pyramid};
use crate::par;

/// Bresenham circle of radius 3, clockwise from the top.
pub const FAST_CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const FAST_ARC: usize = 9;
pub const ORIENTATION_RADIUS: usize = 15;
pub const PATCH_HALF: f64 = 15.0;
pub const ANGLE_BINS: usize = 30;
const BRIEF_SMOOTH_SIGMA: f64 = 2.0;
const MIN_BORDER: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("patch around ({x}, {y}) leaves the image")]
    PatchOutOfBounds { x: isize, y: isize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Base-image coordinates.
    pub x: f32,
    pub y: f32,
    pub level: usize,
    pub score: u32,
    /// Radians in `[0, 2pi)`.
    pub angle: f32,
}

/// 256 BRIEF bits; bit `i` lives in word `i / 64`, position `i % 64`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Descriptor256(pub [u64; 4]);

impl std::fmt::Debug for Descriptor256 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Descriptor256({:016x}{:016x}{:016x}{:016x})",
            self.0[3], self.0[2], self.0[1], self.0[0]
        )
    }
}

impl Descriptor256 {
    pub const ZERO: Self = Self([0; 4]);
    pub const ONES: Self = Self([u64::MAX; 4]);

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_bit(&mut self, i: usize, on: bool) {
        let mask = 1u64 << (i % 64);
        if on {
            self.0[i / 64] |= mask;
        } else {
            self.0[i / 64] &= !mask;
        }
    }

    pub fn flip_bit(&mut self, i: usize) {
        self.0[i / 64] ^= 1u64 << (i % 64);
    }

    /// 32 bytes, byte `j` holding bits `8j..8j+8`.
    pub fn to_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (w, chunk) in self.0.iter().zip(out.chunks_mut(8)) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        let mut words = [0u64; 4];
        for (w, chunk) in words.iter_mut().zip(bytes.chunks(8)) {
            *w = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Self(words)
    }

    pub fn not(&self) -> Self {
        Self([!self.0[0], !self.0[1], !self.0[2], !self.0[3]])
    }
}

#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub frame_id: u64,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor256>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_features: usize,
    pub fast_threshold: u8,
    pub scale_factor: f64,
    pub n_levels: usize,
    /// Seed of the BRIEF sampling pattern.
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_features: 500,
            fast_threshold: 20,
            scale_factor: 1.2,
            n_levels: 8,
            seed: 42,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_features == 0 {
            return Err("nFeatures must be >= 1".into());
        }
        if self.fast_threshold == 0 {
            return Err("fastThreshold must be >= 1".into());
        }
        if !(self.scale_factor > 1.0 && self.scale_factor <= 4.0) {
            return Err(format!("scaleFactor {} outside (1, 4]", self.scale_factor));
        }
        if !(1..=32).contains(&self.n_levels) {
            return Err(format!("nLevels {} outside [1, 32]", self.n_levels));
        }
        Ok(())
    }
}

/// Segment-test score at `(x, y)`, or `None` when it is not a corner.
///
/// The score sums `|I(c) - I(p)| - threshold` over the contiguous arc that
/// passed the test. Caller guarantees a 3 px margin.
#[inline]
fn fast_score(img: &ImageGray, x: usize, y: usize, threshold: i32) -> Option<u32> {
    let w = img.width() as isize;
    let data = img.data();
    let center = (y as isize) * w + x as isize;
    let p = data[center as usize] as i32;
    let at = |i: usize| {
        let (dx, dy) = FAST_CIRCLE[i];
        data[(center + dy * w + dx) as usize] as i32
    };
    let state = |v: i32| -> i8 {
        if v > p + threshold {
            1
        } else if v < p - threshold {
            -1
        } else {
            0
        }
    };

    // any 9-arc covers at least two compass points
    let compass = [state(at(0)), state(at(4)), state(at(8)), state(at(12))];
    let bright = compass.iter().filter(|&&s| s == 1).count();
    let dark = compass.iter().filter(|&&s| s == -1).count();
    if bright < 2 && dark < 2 {
        return None;
    }

    let mut vals = [0i32; 16];
    let mut states = [0i8; 16];
    for i in 0..16 {
        vals[i] = at(i);
        states[i] = state(vals[i]);
    }
    if states.iter().all(|&s| s == states[0]) {
        if states[0] == 0 {
            return None;
        }
        let sum: i32 = vals.iter().map(|v| (v - p).abs() - threshold).sum();
        return Some(sum as u32);
    }
    // start scanning right after a state change so runs do not wrap
    let start = (0..16)
        .find(|&i| states[i] != states[(i + 15) % 16])
        .expect("non-uniform circle has a transition");
    let mut best: Option<u32> = None;
    let mut i = 0;
    while i < 16 {
        let s = states[(start + i) % 16];
        let mut len = 0;
        let mut sum = 0;
        while i + len < 16 && states[(start + i + len) % 16] == s {
            sum += (vals[(start + i + len) % 16] - p).abs() - threshold;
            len += 1;
        }
        if s != 0 && len >= FAST_ARC {
            best = Some(best.map_or(sum as u32, |b| b.max(sum as u32)));
        }
        i += len;
    }
    best
}

/// FAST-9/16 with 3x3 non-maximum suppression. Returns `(x, y, score)` in
/// raster order.
pub fn fast_detect(img: &ImageGray, threshold: u8) -> Vec<(usize, usize, u32)> {
    let (w, h) = (img.width(), img.height());
    if w < 7 || h < 7 {
        return Vec::new();
    }
    let t = threshold.max(1) as i32;
    let mut scores = vec![0u32; w * h];
    par::for_each_row(&mut scores, w, |y, row| {
        if y < 3 || y >= h - 3 {
            return;
        }
        for (x, cell) in row.iter_mut().enumerate().take(w - 3).skip(3) {
            if let Some(s) = fast_score(img, x, y, t) {
                // a zero-score corner would vanish in the map; keep it visible
                *cell = s.max(1);
            }
        }
    });

    let rows = par::map_range(h, |y| {
        let mut out = Vec::new();
        if y < 3 || y >= h - 3 {
            return out;
        }
        for x in 3..w - 3 {
            let s = scores[y * w + x];
            if s == 0 {
                continue;
            }
            let mut keep = true;
            'nbr: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = scores[((y as isize + dy) as usize) * w + (x as isize + dx) as usize];
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > s || (n == s && earlier) {
                        keep = false;
                        break 'nbr;
                    }
                }
            }
            if keep {
                out.push((x, y, s));
            }
        }
        out
    });
    rows.into_iter().flatten().collect()
}

/// Intensity-centroid angle in `[0, 2pi)` over the disc of `radius`.
pub fn orientation(
    img: &ImageGray,
    x: usize,
    y: usize,
    radius: usize,
) -> Result<f64, FeatureError> {
    let r = radius as isize;
    let (xi, yi) = (x as isize, y as isize);
    if xi < r || yi < r || xi + r >= img.width() as isize || yi + r >= img.height() as isize {
        return Err(FeatureError::PatchOutOfBounds { x: xi, y: yi });
    }
    let mut m10: i64 = 0;
    let mut m01: i64 = 0;
    for v in -r..=r {
        let umax = ((r * r - v * v) as f64).sqrt().floor() as isize;
        for u in -umax..=umax {
            let i = img.get((xi + u) as usize, (yi + v) as usize) as i64;
            m10 += u as i64 * i;
            m01 += v as i64 * i;
        }
    }
    if m10 == 0 && m01 == 0 {
        return Ok(0.0);
    }
    let a = (m01 as f64).atan2(m10 as f64).rem_euclid(TAU);
    Ok(if a >= TAU { 0.0 } else { a })
}

/// Nearest of the 30 angle bins.
pub fn angle_bin(angle: f64) -> usize {
    let step = TAU / ANGLE_BINS as f64;
    ((angle / step).round() as i64).rem_euclid(ANGLE_BINS as i64) as usize
}

type Offset = (i8, i8);

/// Point pairs for the binary tests, plus their rotations for every angle
/// bin rounded to integer offsets.
#[derive(Debug, Clone)]
pub struct BriefPattern {
    pairs: Vec<[(f64, f64); 2]>,
    rotated: Vec<Vec<[Offset; 2]>>,
    reach: isize,
}

impl BriefPattern {
    /// 256 pairs from an isotropic Gaussian with sigma 31/5 clamped to the
    /// 31x31 patch.
    pub fn gaussian(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::<f64>::new(0.0, 31.0 / 5.0).expect("valid sigma");
        let mut draw = || normal.sample(&mut rng).clamp(-PATCH_HALF, PATCH_HALF);
        let pairs = (0..256)
            .map(|_| {
                let a = (draw(), draw());
                let b = (draw(), draw());
                [a, b]
            })
            .collect();
        Self::from_pairs(pairs)
    }

    /// Builds a pattern from explicit pairs (at most 256 are used).
    pub fn from_pairs(mut pairs: Vec<[(f64, f64); 2]>) -> Self {
        pairs.truncate(256);
        let rotated: Vec<Vec<[Offset; 2]>> = (0..ANGLE_BINS)
            .map(|bin| {
                let theta = bin as f64 * TAU / ANGLE_BINS as f64;
                let (s, c) = theta.sin_cos();
                let rot = |(u, v): (f64, f64)| -> Offset {
                    ((c * u - s * v).round() as i8, (s * u + c * v).round() as i8)
                };
                pairs.iter().map(|[a, b]| [rot(*a), rot(*b)]).collect()
            })
            .collect();
        let reach = rotated
            .iter()
            .flatten()
            .flat_map(|p| p.iter())
            .map(|&(dx, dy)| (dx as isize).abs().max((dy as isize).abs()))
            .max()
            .unwrap_or(0);
        Self {
            pairs,
            rotated,
            reach,
        }
    }

    pub fn pairs(&self) -> &[[(f64, f64); 2]] {
        &self.pairs
    }

    /// Largest absolute offset over all rotations.
    pub fn reach(&self) -> usize {
        self.reach as usize
    }
}

fn default_pattern() -> &'static BriefPattern {
    static PATTERN: OnceLock<BriefPattern> = OnceLock::new();
    PATTERN.get_or_init(|| BriefPattern::gaussian(42))
}

/// Steered BRIEF at `(x, y)` of a pre-smoothed image.
pub fn brief_describe(
    img: &ImageGray,
    x: usize,
    y: usize,
    angle: f64,
    pattern: &BriefPattern,
) -> Result<Descriptor256, FeatureError> {
    let rotated = &pattern.rotated[angle_bin(angle)];
    let (xi, yi) = (x as isize, y as isize);
    let (w, h) = (img.width() as isize, img.height() as isize);
    let inside = |(dx, dy): Offset| {
        let (px, py) = (xi + dx as isize, yi + dy as isize);
        px >= 0 && py >= 0 && px < w && py < h
    };
    if !rotated.iter().all(|[a, b]| inside(*a) && inside(*b)) {
        return Err(FeatureError::PatchOutOfBounds { x: xi, y: yi });
    }
    let px = |(dx, dy): Offset| img.get((xi + dx as isize) as usize, (yi + dy as isize) as usize);
    let mut d = Descriptor256::ZERO;
    for (i, [a, b]) in rotated.iter().enumerate() {
        if px(*a) < px(*b) {
            d.set_bit(i, true);
        }
    }
    Ok(d)
}

/// ORB detector/descriptor with a fixed sampling pattern.
#[derive(Debug, Clone)]
pub struct OrbExtractor {
    cfg: FeatureConfig,
    pattern: BriefPattern,
}

impl OrbExtractor {
    pub fn new(cfg: FeatureConfig) -> Self {
        let pattern = if cfg.seed == 42 {
            default_pattern().clone()
        } else {
            BriefPattern::gaussian(cfg.seed)
        };
        Self { cfg, pattern }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn pattern(&self) -> &BriefPattern {
        &self.pattern
    }

    /// Distance a keypoint must keep from its level's borders.
    pub fn border(&self) -> usize {
        self.pattern.reach().max(ORIENTATION_RADIUS).max(MIN_BORDER)
    }

    /// Builds the pyramid for `img` and runs [`Self::detect_and_describe`].
    pub fn extract(&self, img: &ImageGray, frame_id: u64) -> FeatureSet {
        match crate::imaging::build_pyramid(img, self.cfg.scale_factor, self.cfg.n_levels) {
            Ok(pyr) => {
                let mut fs = self.detect_and_describe(&pyr);
                fs.frame_id = frame_id;
                fs
            }
            Err(_) => FeatureSet {
                frame_id,
                ..FeatureSet::default()
            },
        }
    }

    pub fn detect_and_describe(&self, pyr: &Pyramid) -> FeatureSet {
        let areas: Vec<f64> = pyr
            .levels
            .iter()
            .map(|l| (l.width() * l.height()) as f64)
            .collect();
        let total_area: f64 = areas.iter().sum();
        let base = &pyr.levels[0];
        let border = self.border();

        let per_level = par::map_range(pyr.levels.len(), |k| {
            let level = &pyr.levels[k];
            let budget = (self.cfg.n_features as f64 * areas[k] / total_area).round() as usize;
            let (w, h) = (level.width(), level.height());
            if budget == 0 || w <= 2 * border || h <= 2 * border {
                return Vec::new();
            }
            let mut cands: Vec<(usize, usize, u32)> = fast_detect(level, self.cfg.fast_threshold)
                .into_iter()
                .filter(|&(x, y, _)| x >= border && y >= border && x < w - border && y < h - border)
                .collect();
            cands.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
            cands.truncate(budget);
            if cands.is_empty() {
                return Vec::new();
            }
            let smoothed = gaussian_blur(level, BRIEF_SMOOTH_SIGMA);
            let sx = base.width() as f64 / w as f64;
            let sy = base.height() as f64 / h as f64;
            cands
                .into_iter()
                .filter_map(|(x, y, score)| {
                    let angle = orientation(level, x, y, ORIENTATION_RADIUS).ok()?;
                    let desc = brief_describe(&smoothed, x, y, angle, &self.pattern).ok()?;
                    // invert the resize's pixel-center mapping
                    let kp = Keypoint {
                        x: ((x as f64 + 0.5) * sx - 0.5) as f32,
                        y: ((y as f64 + 0.5) * sy - 0.5) as f32,
                        level: k,
                        score,
                        angle: angle as f32,
                    };
                    Some((kp, desc))
                })
                .collect::<Vec<_>>()
        });

        let mut all: Vec<(Keypoint, Descriptor256)> = per_level.into_iter().flatten().collect();
        all.sort_by(|(a, _), (b, _)| rank_order(a, b));
        all.truncate(self.cfg.n_features);
        let (keypoints, descriptors) = all.into_iter().unzip();
        FeatureSet {
            frame_id: 0,
            keypoints,
            descriptors,
        }
    }
}

/// Compares two keypoints by rank (score descending, then y, x, level).
pub fn rank_order(a: &Keypoint, b: &Keypoint) -> Ordering {
    b.score
        .cmp(&a.score)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
        .then(a.level.cmp(&b.level))
}
