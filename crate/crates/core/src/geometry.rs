//! Planar projective geometry: normalized DLT, reprojection error and
//! RANSAC with a final least-squares refit on the consensus set.

use nalgebra::{DMatrix, Matrix3};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const EPS: f64 = 1e-12;
/// Minimal samples whose triangle area is below this (px^2) are rejected.
const MIN_TRIANGLE_AREA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("degenerate point set")]
    DegenerateSet,
    #[error("degenerate configuration for homography estimation")]
    DegenerateConfiguration,
    #[error("need at least 4 correspondences, got {0}")]
    NotEnoughPairs(usize),
    #[error("no consensus: best model had {inliers} inliers")]
    NoConsensus { inliers: usize },
    #[error("composition is not invertible")]
    NonInvertibleResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, o: &Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// A correspondence `src -> dst`.
pub type PointPair = (Point2, Point2);

/// 3x3 projective transform, kept with `m[2][2] = 1` whenever possible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    /// Rotation about the origin; with y pointing down a positive angle turns
    /// clockwise on screen.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation by `theta` about `(cx, cy)`.
    pub fn rotation_about(theta: f64, cx: f64, cy: f64) -> Self {
        Self(Self::translation(cx, cy).0 * Self::rotation(theta).0 * Self::translation(-cx, -cy).0)
    }

    pub fn from_row_major(m: [f64; 9]) -> Self {
        Self(Matrix3::from_row_slice(&m))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Scales so that `m[2][2] = 1` when it is not (numerically) zero.
    pub fn normalized(self) -> Self {
        let s = self.0[(2, 2)];
        if s.abs() > EPS {
            Self(self.0 / s)
        } else {
            self
        }
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > EPS && self.0.iter().all(|v| v.is_finite())
    }

    pub fn inverse(&self) -> Option<Homography> {
        if !self.is_invertible() {
            return None;
        }
        self.0.try_inverse().map(|m| Homography(m).normalized())
    }

    pub fn project(&self, p: Point2) -> Result<Point2, GeometryError> {
        project(self, p)
    }

    /// Largest absolute entry difference after normalization.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        let a = self.normalized().0;
        let b = other.normalized().0;
        (a - b).amax()
    }
}

impl Serialize for Homography {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = <[f64; 9]>::deserialize(d)?;
        Ok(Homography::from_row_major(m))
    }
}

pub fn project(h: &Homography, p: Point2) -> Result<Point2, GeometryError> {
    let m = &h.0;
    let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
    if w.abs() <= EPS {
        return Err(GeometryError::PointAtInfinity);
    }
    Ok(Point2::new(
        (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
        (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
    ))
}

/// `a * b`, i.e. apply `b` first.
pub fn compose(a: &Homography, b: &Homography) -> Result<Homography, GeometryError> {
    let h = Homography(a.0 * b.0).normalized();
    if h.is_invertible() {
        Ok(h)
    } else {
        Err(GeometryError::NonInvertibleResult)
    }
}

/// Hartley conditioning: centroid to the origin, mean distance sqrt(2).
pub fn normalize_points(pts: &[Point2]) -> Result<(Vec<Point2>, Matrix3<f64>), GeometryError> {
    if pts.len() < 2 {
        return Err(GeometryError::DegenerateSet);
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    if mean_dist <= EPS {
        return Err(GeometryError::DegenerateSet);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts
        .iter()
        .map(|p| Point2::new(s * (p.x - cx), s * (p.y - cy)))
        .collect();
    Ok((out, t))
}

/// Normalized DLT over `n >= 4` correspondences.
pub fn dlt_homography(pairs: &[PointPair]) -> Result<Homography, GeometryError> {
    if pairs.len() < 4 {
        return Err(GeometryError::NotEnoughPairs(pairs.len()));
    }
    let src: Vec<Point2> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point2> = pairs.iter().map(|p| p.1).collect();
    let (ns, ts) = normalize_points(&src).map_err(|_| GeometryError::DegenerateConfiguration)?;
    let (nd, td) = normalize_points(&dst).map_err(|_| GeometryError::DegenerateConfiguration)?;

    // pad to at least 9 rows so the thin SVD exposes the full right basis
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in ns.iter().zip(nd.iter()).enumerate() {
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateConfiguration)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, next) = (order[0], order[1]);
    if sv[next] <= 1e-10 * sv[order[sv.len() - 1]] {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or(GeometryError::DegenerateConfiguration)?;
    let out = Homography(td_inv * hn * ts).normalized();
    if !out.is_invertible() {
        return Err(GeometryError::DegenerateConfiguration);
    }
    Ok(out)
}

/// Forward transfer error `|H src - dst|` per pair; infinity when `src`
/// maps to the line at infinity.
pub fn reprojection_errors(h: &Homography, pairs: &[PointPair]) -> Vec<f64> {
    pairs
        .iter()
        .map(|(s, d)| project(h, *s).map_or(f64::INFINITY, |p| p.dist(d)))
        .collect()
}

/// RMS over the four corners of a `w x h` frame between two transforms.
pub fn corner_transfer_rms(a: &Homography, b: &Homography, w: f64, h: f64) -> f64 {
    let corners = [
        Point2::new(0.0, 0.0),
        Point2::new(w - 1.0, 0.0),
        Point2::new(0.0, h - 1.0),
        Point2::new(w - 1.0, h - 1.0),
    ];
    let sq: f64 = corners
        .iter()
        .map(|c| match (project(a, *c), project(b, *c)) {
            (Ok(p), Ok(q)) => p.dist(&q).powi(2),
            _ => f64::INFINITY,
        })
        .sum();
    (sq / 4.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RansacParams {
    pub thresh: f64,
    pub conf: f64,
    pub max_iters: usize,
    pub min_inliers: usize,
    /// Acceptance limit on the refitted inlier RMS (used by the pipeline).
    pub max_rms: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            thresh: 3.0,
            conf: 0.995,
            max_iters: 2000,
            min_inliers: 15,
            max_rms: 3.0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.thresh.is_nan() || self.thresh <= 0.0 {
            return Err("ransac.thresh must be > 0".into());
        }
        if !(self.conf > 0.0 && self.conf < 1.0) {
            return Err("ransac.conf must be in (0, 1)".into());
        }
        if self.max_iters == 0 {
            return Err("ransac.maxIters must be >= 1".into());
        }
        if self.min_inliers < 4 {
            return Err("ransac.minInliers must be >= 4".into());
        }
        if self.max_rms.is_nan() || self.max_rms <= 0.0 {
            return Err("ransac.maxRms must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub h: Homography,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    /// Over inliers, with the refitted model.
    pub rms_error: f64,
    pub iterations_run: usize,
}

fn triangle_area(a: Point2, b: Point2, c: Point2) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs()
}

fn has_collinear_triple(p: &[Point2; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| triangle_area(p[t[0]], p[t[1]], p[t[2]]) < MIN_TRIANGLE_AREA)
}

fn score(h: &Homography, pairs: &[PointPair], thresh: f64) -> (usize, f64, Vec<bool>) {
    let errs = reprojection_errors(h, pairs);
    let mask: Vec<bool> = errs.iter().map(|&e| e <= thresh).collect();
    let (n, sq) = errs
        .iter()
        .filter(|&&e| e <= thresh)
        .fold((0usize, 0.0), |(n, s), e| (n + 1, s + e * e));
    let rms = if n > 0 {
        (sq / n as f64).sqrt()
    } else {
        f64::INFINITY
    };
    (n, rms, mask)
}

fn required_iterations(inlier_ratio: f64, conf: f64, cap: usize) -> usize {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 - 1e-15 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let n = ((1.0 - conf).ln() / (1.0 - p_good).ln()).ceil();
    if n.is_finite() {
        (n.max(1.0) as usize).min(cap)
    } else {
        cap
    }
}

/// Robust homography from putative correspondences.
pub fn ransac_homography<R: Rng + ?Sized>(
    pairs: &[PointPair],
    params: &RansacParams,
    rng: &mut R,
) -> Result<RansacResult, GeometryError> {
    let n = pairs.len();
    if n < 4 {
        return Err(GeometryError::NotEnoughPairs(n));
    }
    let mut best: Option<(Homography, usize, f64)> = None;
    let mut bound = params.max_iters;
    let mut iters = 0;
    // degenerate draws do not count, but the loop must still terminate
    let mut draws = 0;
    let max_draws = params.max_iters.saturating_mul(20).max(100);
    while iters < bound && draws < max_draws {
        draws += 1;
        let idx = sample(rng, n, 4);
        let sample_pairs: [PointPair; 4] = [
            pairs[idx.index(0)],
            pairs[idx.index(1)],
            pairs[idx.index(2)],
            pairs[idx.index(3)],
        ];
        let src = sample_pairs.map(|p| p.0);
        let dst = sample_pairs.map(|p| p.1);
        if has_collinear_triple(&src) || has_collinear_triple(&dst) {
            continue;
        }
        iters += 1;
        let Ok(h) = dlt_homography(&sample_pairs) else {
            continue;
        };
        let (count, rms, _) = score(&h, pairs, params.thresh);
        let better = match best {
            None => count > 0,
            Some((_, bc, br)) => count > bc || (count == bc && rms < br),
        };
        if better {
            best = Some((h, count, rms));
            bound = required_iterations(count as f64 / n as f64, params.conf, params.max_iters);
        }
    }

    let Some((h_min, best_count, _)) = best else {
        return Err(GeometryError::NoConsensus { inliers: 0 });
    };
    if best_count < params.min_inliers.max(4) {
        return Err(GeometryError::NoConsensus {
            inliers: best_count,
        });
    }
    let (_, _, mask) = score(&h_min, pairs, params.thresh);
    let inliers: Vec<PointPair> = pairs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect();
    let h = dlt_homography(&inliers).unwrap_or(h_min);
    let (count, rms, mask) = score(&h, pairs, params.thresh);
    if count < params.min_inliers.max(4) {
        return Err(GeometryError::NoConsensus { inliers: count });
    }
    Ok(RansacResult {
        h,
        inlier_mask: mask,
        inlier_count: count,
        rms_error: rms,
        iterations_run: iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{SMatrix, SVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    fn sample_h() -> Homography {
        Homography::from_row_major([1.02, 0.05, 12.0, -0.03, 0.98, -7.0, 1e-4, -5e-5, 1.0])
    }

    fn pairs_under(h: &Homography, pts: &[Point2]) -> Vec<PointPair> {
        pts.iter().map(|&s| (s, project(h, s).unwrap())).collect()
    }

    fn grid(n: usize, w: f64, h: f64) -> Vec<Point2> {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        (0..n)
            .map(|_| p(rng.random_range(0.0..w), rng.random_range(0.0..h)))
            .collect()
    }

    #[test]
    fn project_cases() {
        assert_eq!(
            project(&Homography::identity(), p(5.0, 7.0)).unwrap(),
            p(5.0, 7.0)
        );
        assert_eq!(
            project(&Homography::translation(3.0, -2.0), p(0.0, 0.0)).unwrap(),
            p(3.0, -2.0)
        );
        let h = Homography::from_row_major([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.01, 0.0, 1.0]);
        assert_eq!(project(&h, p(100.0, 0.0)).unwrap(), p(50.0, 0.0));
        assert_eq!(
            project(&h, p(-100.0, 0.0)),
            Err(GeometryError::PointAtInfinity)
        );
    }

    #[test]
    fn normalize_cases() {
        let (pts, t) =
            normalize_points(&[p(0.0, 0.0), p(2.0, 0.0), p(0.0, 2.0), p(2.0, 2.0)]).unwrap();
        let expected = Matrix3::new(1.0, 0.0, -1.0, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0);
        assert!((t - expected).amax() < 1e-15);
        assert_eq!(pts[0], p(-1.0, -1.0));

        let (again, t2) = normalize_points(&pts).unwrap();
        assert!((t2 - Matrix3::identity()).amax() < 1e-15);
        for (a, b) in again.iter().zip(&pts) {
            assert!(a.dist(b) < 1e-15);
        }

        let (two, _) = normalize_points(&[p(0.0, 0.0), p(10.0, 0.0)]).unwrap();
        let mean = two.iter().map(|q| q.x.hypot(q.y)).sum::<f64>() / 2.0;
        assert!((mean - 2f64.sqrt()).abs() < 1e-12);

        assert_eq!(
            normalize_points(&[p(1.0, 1.0), p(1.0, 1.0)]),
            Err(GeometryError::DegenerateSet)
        );
    }

    #[test]
    fn dlt_unit_square() {
        let sq = [p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0), p(0.0, 1.0)];
        let id = dlt_homography(&sq.map(|q| (q, q))).unwrap();
        assert!(id.max_abs_diff(&Homography::identity()) < 1e-9);
        let tr = dlt_homography(&sq.map(|q| (q, p(q.x + 5.0, q.y + 3.0)))).unwrap();
        assert!(tr.max_abs_diff(&Homography::translation(5.0, 3.0)) < 1e-9);
    }

    /// Independent route: fix h22 = 1 and solve the 8x8 system directly.
    fn direct_solve(pairs: &[PointPair; 4]) -> Homography {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (s, d)) in pairs.iter().enumerate() {
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[s.x, s.y, 1.0, 0.0, 0.0, 0.0, -d.x * s.x, -d.x * s.y]);
            a.row_mut(r + 1).copy_from_slice(&[
                0.0,
                0.0,
                0.0,
                s.x,
                s.y,
                1.0,
                -d.y * s.x,
                -d.y * s.y,
            ]);
            b[r] = d.x;
            b[r + 1] = d.y;
        }
        let h = a.lu().solve(&b).unwrap();
        Homography::from_row_major([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
    }

    #[test]
    fn dlt_quad_matches_direct_solve() {
        let src = [p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0), p(0.0, 1.0)];
        let dst = [p(0.0, 0.0), p(1.0, 0.0), p(1.2, 1.1), p(-0.1, 0.9)];
        let pairs = [
            (src[0], dst[0]),
            (src[1], dst[1]),
            (src[2], dst[2]),
            (src[3], dst[3]),
        ];
        let h = dlt_homography(&pairs).unwrap();
        for (s, d) in &pairs {
            assert!(project(&h, *s).unwrap().dist(d) < 1e-9);
        }
        let oracle = direct_solve(&pairs);
        assert!(h.max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn dlt_rejects_collinear() {
        let line: Vec<PointPair> = (0..6)
            .map(|i| (p(i as f64, 0.0), p(i as f64, 0.0)))
            .collect();
        assert_eq!(
            dlt_homography(&line),
            Err(GeometryError::DegenerateConfiguration)
        );
        assert_eq!(
            dlt_homography(&line[..3]),
            Err(GeometryError::NotEnoughPairs(3))
        );
    }

    #[test]
    fn reprojection_cases() {
        assert_eq!(
            reprojection_errors(&Homography::identity(), &[(p(0.0, 0.0), p(3.0, 4.0))]),
            vec![5.0]
        );
        let h = sample_h();
        let pairs = pairs_under(&h, &grid(50, 640.0, 480.0));
        assert!(reprojection_errors(&h, &pairs).iter().all(|&e| e <= 1e-9));
    }

    #[test]
    fn ransac_exact_data() {
        let h = sample_h();
        let pairs = pairs_under(&h, &grid(100, 640.0, 480.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = ransac_homography(&pairs, &RansacParams::default(), &mut rng).unwrap();
        assert_eq!(r.inlier_count, 100);
        assert!(corner_transfer_rms(&r.h, &h, 640.0, 480.0) <= 1e-6);
        assert_eq!(r.inlier_mask.iter().filter(|&&m| m).count(), r.inlier_count);
    }

    #[test]
    fn ransac_too_few() {
        let pairs = pairs_under(&sample_h(), &grid(3, 10.0, 10.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            ransac_homography(&pairs, &RansacParams::default(), &mut rng),
            Err(GeometryError::NotEnoughPairs(3))
        );
    }

    #[test]
    fn ransac_pure_outliers_has_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<PointPair> = (0..60)
            .map(|_| {
                (
                    p(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                    p(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                )
            })
            .collect();
        let r = ransac_homography(&pairs, &RansacParams::default(), &mut rng);
        assert!(matches!(r, Err(GeometryError::NoConsensus { .. })), "{r:?}");
    }

    pub(crate) fn noisy_mixture(seed: u64, h: &Homography) -> Vec<PointPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        (0..200)
            .map(|i| {
                let s = p(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                if i < 140 {
                    let d = project(h, s).unwrap();
                    (
                        s,
                        p(d.x + noise.sample(&mut rng), d.y + noise.sample(&mut rng)),
                    )
                } else {
                    (
                        s,
                        p(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                    )
                }
            })
            .collect()
    }

    #[test]
    fn ransac_noisy_mixture() {
        let h = sample_h();
        let pairs = noisy_mixture(21, &h);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = ransac_homography(&pairs, &RansacParams::default(), &mut rng).unwrap();
        assert!((120..=150).contains(&r.inlier_count), "{}", r.inlier_count);
        assert!(corner_transfer_rms(&r.h, &h, 640.0, 480.0) <= 1.0);
    }

    #[test]
    fn ransac_is_deterministic() {
        let pairs = noisy_mixture(8, &sample_h());
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            ransac_homography(&pairs, &RansacParams::default(), &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn compose_cases() {
        let a = sample_h();
        assert!(
            compose(&a, &Homography::identity())
                .unwrap()
                .max_abs_diff(&a)
                < 1e-15
        );
        let t = compose(
            &Homography::translation(2.0, 0.0),
            &Homography::translation(3.0, 0.0),
        )
        .unwrap();
        assert!(t.max_abs_diff(&Homography::translation(5.0, 0.0)) < 1e-15);
        let id = compose(&a, &a.inverse().unwrap()).unwrap();
        assert!(id.max_abs_diff(&Homography::identity()) < 1e-9);
        let singular = Homography::from_row_major([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            compose(&a, &singular),
            Err(GeometryError::NonInvertibleResult)
        );
    }

    #[test]
    fn homography_json_is_row_major() {
        let h = Homography::translation(3.0, -2.0);
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, "[1.0,0.0,3.0,0.0,1.0,-2.0,0.0,0.0,1.0]");
        let back: Homography = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn arb_h() -> impl Strategy<Value = Homography> {
            (
                0.8f64..1.2,
                -0.2f64..0.2,
                -50.0f64..50.0,
                -0.2f64..0.2,
                0.8f64..1.2,
                -50.0f64..50.0,
                -2e-4f64..2e-4,
                -2e-4f64..2e-4,
            )
                .prop_map(|(a, b, c, d, e, f, g, h)| {
                    Homography::from_row_major([a, b, c, d, e, f, g, h, 1.0])
                })
        }

        proptest! {
            #[test]
            fn dlt_exact_on_noiseless(h in arb_h(), seed in 0u64..10_000, n in 4usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let src: Vec<Point2> = (0..n)
                    .map(|_| p(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
                    .collect();
                let pairs = pairs_under(&h, &src);
                let s4 = [src[0], src[1], src[2], src[3]];
                prop_assume!(!has_collinear_triple(&s4) || n > 4);
                if let Ok(est) = dlt_homography(&pairs) {
                    for e in reprojection_errors(&est, &pairs) {
                        prop_assert!(e <= 1e-9, "error {e}");
                    }
                }
            }

            #[test]
            fn dlt_scale_conditioning(h in arb_h(), seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let src: Vec<Point2> = (0..12)
                    .map(|_| p(rng.random_range(0.0..64.0), rng.random_range(0.0..48.0)))
                    .collect();
                let pairs = pairs_under(&h, &src);
                let scaled: Vec<PointPair> = pairs
                    .iter()
                    .map(|(s, d)| (p(s.x * 10.0, s.y * 10.0), p(d.x * 10.0, d.y * 10.0)))
                    .collect();
                let a = dlt_homography(&pairs).unwrap();
                let b = dlt_homography(&scaled).unwrap();
                // scaling coordinates by k conjugates H: S H S^-1
                let s = Homography::from_row_major([10.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 1.0]);
                let s_inv = s.inverse().unwrap();
                let back = compose(&compose(&s_inv, &b).unwrap(), &s).unwrap();
                prop_assert!(back.max_abs_diff(&a) <= 1e-7, "{}", back.max_abs_diff(&a));
            }

            #[test]
            fn compose_matches_sequential_projection(a in arb_h(), b in arb_h(), x in 0.0f64..640.0, y in 0.0f64..480.0) {
                let ab = compose(&a, &b).unwrap();
                let direct = project(&ab, p(x, y)).unwrap();
                let chained = project(&a, project(&b, p(x, y)).unwrap()).unwrap();
                prop_assert!(direct.dist(&chained) <= 1e-9);
            }
        }
    }
}
