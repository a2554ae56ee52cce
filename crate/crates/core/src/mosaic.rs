//! The growing map: pose chaining, canvas management and feathered
//! inverse-warp compositing.
//!
//! World coordinates are the anchor frame's pixel grid. The canvas keeps
//! real-valued weighted sums and only quantizes when a snapshot is rendered,
//! so blending does not depend on the order pixels were accumulated in.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose, project, GeometryError, Homography, Point2};
use crate::imaging::{save_image, ImageGray, ImagingError};
use crate::par;

/// Default accumulator cell budget (16384^2).
pub const DEFAULT_CAP_CELLS: usize = 16384 * 16384;
const SLACK: f64 = 0.25;

#[derive(Debug, Error)]
pub enum MosaicError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("canvas would need {cells} cells, cap is {cap}")]
    CapacityExceeded { cells: usize, cap: usize },
    #[error("pose is not invertible")]
    NonInvertiblePose,
    #[error("cannot chain from a rejected pose")]
    RejectedPose,
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FramePose {
    pub frame_id: u64,
    /// Frame pixel coordinates to anchor (world) coordinates.
    pub to_anchor: Homography,
    pub accepted: bool,
}

impl FramePose {
    pub fn anchor(frame_id: u64) -> Self {
        Self {
            frame_id,
            to_anchor: Homography::identity(),
            accepted: true,
        }
    }
}

/// `pairwise` maps the new frame into `prev`'s coordinates.
pub fn chain_pose(
    prev: &FramePose,
    pairwise: &Homography,
    frame_id: u64,
) -> Result<FramePose, MosaicError> {
    if !prev.accepted {
        return Err(MosaicError::RejectedPose);
    }
    Ok(FramePose {
        frame_id,
        to_anchor: compose(&prev.to_anchor, pairwise)?,
        accepted: true,
    })
}

/// Inclusive integer bounding box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: i64,
    pub min_y: i64,
    pub max_x: i64,
    pub max_y: i64,
}

impl BBox {
    pub fn width(&self) -> usize {
        (self.max_x - self.min_x + 1).max(0) as usize
    }

    pub fn height(&self) -> usize {
        (self.max_y - self.min_y + 1).max(0) as usize
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox {
            min_x: self.min_x.min(o.min_x),
            min_y: self.min_y.min(o.min_y),
            max_x: self.max_x.max(o.max_x),
            max_y: self.max_y.max(o.max_y),
        }
    }
}

/// Floor/ceil bounds of the four projected frame corners.
pub fn projected_bounds(h: &Homography, w: usize, ht: usize) -> Result<BBox, GeometryError> {
    let (wf, hf) = ((w as f64 - 1.0).max(0.0), (ht as f64 - 1.0).max(0.0));
    let corners = [(0.0, 0.0), (wf, 0.0), (0.0, hf), (wf, hf)];
    let mut pts = Vec::with_capacity(4);
    for (x, y) in corners {
        let p = project(h, Point2::new(x, y))?;
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(GeometryError::PointAtInfinity);
        }
        pts.push(p);
    }
    // tolerate float fuzz so that exact integers stay put
    let fl = |v: f64| (v + 1e-9).floor() as i64;
    let cl = |v: f64| (v - 1e-9).ceil() as i64;
    Ok(BBox {
        min_x: pts.iter().map(|p| fl(p.x)).min().unwrap(),
        min_y: pts.iter().map(|p| fl(p.y)).min().unwrap(),
        max_x: pts.iter().map(|p| cl(p.x)).max().unwrap(),
        max_y: pts.iter().map(|p| cl(p.y)).max().unwrap(),
    })
}

/// Rendered map plus the world coordinate of its top-left pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub image: ImageGray,
    pub origin_x: i64,
    pub origin_y: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct SnapshotMeta {
    pub frame_id: u64,
    pub origin_x: i64,
    pub origin_y: i64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone)]
pub struct MosaicCanvas {
    origin_x: i64,
    origin_y: i64,
    width: usize,
    height: usize,
    accum: Vec<f64>,
    weight: Vec<f64>,
    cap_cells: usize,
}

impl Default for MosaicCanvas {
    fn default() -> Self {
        Self::new(DEFAULT_CAP_CELLS)
    }
}

impl MosaicCanvas {
    pub fn new(cap_cells: usize) -> Self {
        Self {
            origin_x: 0,
            origin_y: 0,
            width: 0,
            height: 0,
            accum: Vec::new(),
            weight: Vec::new(),
            cap_cells,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn origin(&self) -> (i64, i64) {
        (self.origin_x, self.origin_y)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn extent(&self) -> Option<BBox> {
        (!self.is_empty()).then(|| BBox {
            min_x: self.origin_x,
            min_y: self.origin_y,
            max_x: self.origin_x + self.width as i64 - 1,
            max_y: self.origin_y + self.height as i64 - 1,
        })
    }

    fn cell(&self, wx: i64, wy: i64) -> Option<usize> {
        let x = wx - self.origin_x;
        let y = wy - self.origin_y;
        (x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height)
            .then(|| y as usize * self.width + x as usize)
    }

    /// Accumulated weight at a world pixel (0 outside the canvas).
    pub fn weight_at(&self, wx: i64, wy: i64) -> f64 {
        self.cell(wx, wy).map_or(0.0, |i| self.weight[i])
    }

    /// Rendered intensity at a world pixel, `None` when nothing covers it.
    pub fn value_at(&self, wx: i64, wy: i64) -> Option<u8> {
        let i = self.cell(wx, wy)?;
        (self.weight[i] > 0.0).then(|| quantize(self.accum[i], self.weight[i]))
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// Grows the canvas so that `bbox` fits, keeping content in place.
    pub fn ensure_capacity(&mut self, bbox: &BBox) -> Result<(), MosaicError> {
        let Some(cur) = self.extent() else {
            let cells = bbox.width() * bbox.height();
            if cells > self.cap_cells {
                return Err(MosaicError::CapacityExceeded {
                    cells,
                    cap: self.cap_cells,
                });
            }
            self.origin_x = bbox.min_x;
            self.origin_y = bbox.min_y;
            self.width = bbox.width();
            self.height = bbox.height();
            self.accum = vec![0.0; cells];
            self.weight = vec![0.0; cells];
            return Ok(());
        };
        let needed = cur.union(bbox);
        if needed == cur {
            return Ok(());
        }
        let grown = self.with_slack(&cur, &needed);
        let target = if grown.width() * grown.height() <= self.cap_cells {
            grown
        } else if needed.width() * needed.height() <= self.cap_cells {
            needed
        } else {
            return Err(MosaicError::CapacityExceeded {
                cells: needed.width() * needed.height(),
                cap: self.cap_cells,
            });
        };
        self.reallocate(target);
        Ok(())
    }

    fn with_slack(&self, cur: &BBox, needed: &BBox) -> BBox {
        let sx = (SLACK * needed.width() as f64).ceil() as i64;
        let sy = (SLACK * needed.height() as f64).ceil() as i64;
        BBox {
            min_x: if needed.min_x < cur.min_x {
                needed.min_x - sx
            } else {
                cur.min_x
            },
            min_y: if needed.min_y < cur.min_y {
                needed.min_y - sy
            } else {
                cur.min_y
            },
            max_x: if needed.max_x > cur.max_x {
                needed.max_x + sx
            } else {
                cur.max_x
            },
            max_y: if needed.max_y > cur.max_y {
                needed.max_y + sy
            } else {
                cur.max_y
            },
        }
    }

    fn reallocate(&mut self, target: BBox) {
        let (w, h) = (target.width(), target.height());
        let mut accum = vec![0.0; w * h];
        let mut weight = vec![0.0; w * h];
        let dx = (self.origin_x - target.min_x) as usize;
        let dy = (self.origin_y - target.min_y) as usize;
        for y in 0..self.height {
            let src = y * self.width..(y + 1) * self.width;
            let dst = (y + dy) * w + dx;
            accum[dst..dst + self.width].copy_from_slice(&self.accum[src.clone()]);
            weight[dst..dst + self.width].copy_from_slice(&self.weight[src]);
        }
        self.origin_x = target.min_x;
        self.origin_y = target.min_y;
        self.width = w;
        self.height = h;
        self.accum = accum;
        self.weight = weight;
    }

    /// Inverse-warps `img` through `to_anchor` with linear border feathering.
    pub fn composite(
        &mut self,
        img: &ImageGray,
        to_anchor: &Homography,
    ) -> Result<(), MosaicError> {
        let inv = to_anchor.inverse().ok_or(MosaicError::NonInvertiblePose)?;
        let bbox = projected_bounds(to_anchor, img.width(), img.height())?;
        self.ensure_capacity(&bbox)?;

        let (iw, ih) = (img.width() as f64, img.height() as f64);
        let (xmax, ymax) = (iw - 1.0, ih - 1.0);
        let feather_span = iw.min(ih) / 2.0;
        let x0 = (bbox.min_x - self.origin_x) as usize;
        let x1 = (bbox.max_x - self.origin_x) as usize;
        let y0 = (bbox.min_y - self.origin_y) as usize;
        let y1 = (bbox.max_y - self.origin_y) as usize;
        let (ox, oy) = (self.origin_x, self.origin_y);

        par::for_each_row2(
            &mut self.accum,
            &mut self.weight,
            self.width,
            |y, acc, wt| {
                if y < y0 || y > y1 {
                    return;
                }
                let wy = (oy + y as i64) as f64;
                for x in x0..=x1 {
                    let wx = (ox + x as i64) as f64;
                    let Ok(s) = project(&inv, Point2::new(wx, wy)) else {
                        continue;
                    };
                    if !(s.x >= 0.0 && s.y >= 0.0 && s.x <= xmax && s.y <= ymax) {
                        continue;
                    }
                    let d = s.x.min(s.y).min(xmax - s.x).min(ymax - s.y);
                    let wf = (d / feather_span).clamp(0.0, 1.0);
                    if wf <= 0.0 {
                        continue;
                    }
                    acc[x] += wf * img.sample_bilinear(s.x, s.y);
                    wt[x] += wf;
                }
            },
        );
        Ok(())
    }

    /// Renders the whole canvas; uncovered pixels are 0. An empty canvas
    /// renders as a single background pixel at the origin.
    pub fn render_snapshot(&self) -> Snapshot {
        if self.is_empty() {
            return Snapshot {
                image: ImageGray::filled(1, 1, 0),
                origin_x: 0,
                origin_y: 0,
            };
        }
        let data = self
            .accum
            .iter()
            .zip(&self.weight)
            .map(|(&a, &w)| if w > 0.0 { quantize(a, w) } else { 0 })
            .collect();
        Snapshot {
            image: ImageGray::new(self.width, self.height, data).expect("canvas dims"),
            origin_x: self.origin_x,
            origin_y: self.origin_y,
        }
    }

    /// Renders a fixed world window regardless of the canvas allocation.
    pub fn render_window(&self, window: &BBox) -> ImageGray {
        ImageGray::from_fn(window.width(), window.height(), |x, y| {
            self.value_at(window.min_x + x as i64, window.min_y + y as i64)
                .unwrap_or(0)
        })
    }
}

#[inline]
fn quantize(accum: f64, weight: f64) -> u8 {
    (accum / weight).round().clamp(0.0, 255.0) as u8
}

pub fn snapshot_stem(frame_id: u64) -> String {
    format!("map_{frame_id:06}")
}

/// Writes `<stem>.png` plus a `<stem>.json` sidecar; returns the image path.
pub fn write_snapshot(
    snap: &Snapshot,
    dir: &Path,
    stem: &str,
    frame_id: u64,
) -> Result<PathBuf, MosaicError> {
    fs::create_dir_all(dir)?;
    let img_path = dir.join(format!("{stem}.png"));
    save_image(&snap.image, &img_path)?;
    let meta = SnapshotMeta {
        frame_id,
        origin_x: snap.origin_x,
        origin_y: snap.origin_y,
        width: snap.image.width(),
        height: snap.image.height(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("plain struct");
    fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(img_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> ImageGray {
        ImageGray::from_fn(w, h, |x, y| {
            ((x * 7 + y * 13 + (x * y) % 11) % 200 + 20) as u8
        })
    }

    #[test]
    fn chain_cases() {
        let p = chain_pose(
            &FramePose::anchor(0),
            &Homography::translation(10.0, 0.0),
            1,
        )
        .unwrap();
        assert!(
            p.to_anchor
                .max_abs_diff(&Homography::translation(10.0, 0.0))
                < 1e-15
        );

        let mut pose = FramePose::anchor(0);
        for k in 1..=7 {
            pose = chain_pose(&pose, &Homography::translation(5.0, 0.0), k).unwrap();
        }
        assert!(
            pose.to_anchor
                .max_abs_diff(&Homography::translation(35.0, 0.0))
                < 1e-12
        );

        let r = FramePose {
            frame_id: 0,
            to_anchor: Homography::rotation(std::f64::consts::FRAC_PI_2),
            accepted: true,
        };
        let back = chain_pose(&r, &Homography::rotation(-std::f64::consts::FRAC_PI_2), 1).unwrap();
        assert!(back.to_anchor.max_abs_diff(&Homography::identity()) < 1e-9);

        let rejected = FramePose {
            accepted: false,
            ..FramePose::anchor(0)
        };
        assert!(chain_pose(&rejected, &Homography::identity(), 1).is_err());
    }

    #[test]
    fn bounds_cases() {
        let b = projected_bounds(&Homography::identity(), 640, 480).unwrap();
        assert_eq!((b.min_x, b.min_y, b.max_x, b.max_y), (0, 0, 639, 479));
        let b = projected_bounds(&Homography::translation(-10.0, 5.0), 100, 100).unwrap();
        assert_eq!((b.min_x, b.min_y, b.max_x, b.max_y), (-10, 5, 89, 104));
        // (x, y) -> (-y, x)
        let b =
            projected_bounds(&Homography::rotation(std::f64::consts::FRAC_PI_2), 100, 50).unwrap();
        assert_eq!((b.min_x, b.min_y, b.max_x, b.max_y), (-49, 0, 0, 99));
    }

    #[test]
    fn capacity_cases() {
        let mut c = MosaicCanvas::default();
        let bb = BBox {
            min_x: 0,
            min_y: 0,
            max_x: 99,
            max_y: 99,
        };
        c.ensure_capacity(&bb).unwrap();
        assert_eq!(c.extent().unwrap(), bb);
        let ptr = c.accum.as_ptr();
        c.ensure_capacity(&BBox {
            min_x: 10,
            min_y: 10,
            max_x: 20,
            max_y: 20,
        })
        .unwrap();
        assert_eq!(c.accum.as_ptr(), ptr);

        let img = textured(40, 30);
        let mut c = MosaicCanvas::default();
        c.composite(&img, &Homography::translation(3.0, 4.0))
            .unwrap();
        let before = c.value_at(20, 20);
        let w_before = c.weight_at(20, 20);
        c.ensure_capacity(&BBox {
            min_x: -200,
            min_y: -50,
            max_x: 300,
            max_y: 10,
        })
        .unwrap();
        assert_eq!(c.value_at(20, 20), before);
        assert_eq!(c.weight_at(20, 20), w_before);
        assert!(c.extent().unwrap().min_x < -200);

        let mut small = MosaicCanvas::new(100);
        assert!(matches!(
            small.ensure_capacity(&bb),
            Err(MosaicError::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn constant_frames_blend() {
        let mut c = MosaicCanvas::default();
        c.composite(&ImageGray::filled(50, 40, 100), &Homography::identity())
            .unwrap();
        let snap = c.render_snapshot();
        for y in 0..40 {
            for x in 0..50 {
                if c.weight_at(x, y) > 0.0 {
                    assert_eq!(snap.image.get(x as usize, y as usize), 100);
                }
            }
        }
        // same geometry, so feather weights agree at every pixel
        c.composite(&ImageGray::filled(50, 40, 200), &Homography::identity())
            .unwrap();
        assert_eq!(c.value_at(25, 20), Some(150));
    }

    #[test]
    fn single_frame_reproduced() {
        let img = textured(64, 48);
        let mut c = MosaicCanvas::default();
        c.composite(&img, &Homography::identity()).unwrap();
        let snap = c.render_snapshot();
        assert_eq!((snap.origin_x, snap.origin_y), (0, 0));
        assert_eq!((snap.image.width(), snap.image.height()), (64, 48));
        for y in 0..48 {
            for x in 0..64 {
                if c.weight_at(x, y) >= 0.1 {
                    let d = snap.image.get(x as usize, y as usize) as i32
                        - img.get(x as usize, y as usize) as i32;
                    assert!(d.abs() <= 1);
                }
            }
        }
        assert_eq!(c.render_snapshot(), snap);
    }

    #[test]
    fn empty_snapshot_is_background() {
        let s = MosaicCanvas::default().render_snapshot();
        assert!(s.image.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn disjoint_frames_commute() {
        let frames = [
            (textured(30, 20), Homography::translation(0.0, 0.0)),
            (
                ImageGray::filled(30, 20, 90),
                Homography::translation(40.0, 0.0),
            ),
            (textured(25, 25), Homography::translation(-5.0, 30.0)),
        ];
        let window = BBox {
            min_x: -10,
            min_y: -5,
            max_x: 80,
            max_y: 60,
        };
        let render = |order: &[usize]| {
            let mut c = MosaicCanvas::default();
            for &i in order {
                c.composite(&frames[i].0, &frames[i].1).unwrap();
            }
            c.render_window(&window)
        };
        let base = render(&[0, 1, 2]);
        for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            assert_eq!(render(&order), base);
        }
    }

    #[test]
    fn weights_never_decrease() {
        let mut c = MosaicCanvas::default();
        c.composite(&textured(40, 40), &Homography::identity())
            .unwrap();
        let before: Vec<(i64, i64, f64)> = (0..40)
            .flat_map(|y| (0..40).map(move |x| (x, y)))
            .map(|(x, y)| (x, y, c.weight_at(x, y)))
            .collect();
        c.composite(
            &textured(40, 40),
            &Homography::rotation_about(0.3, 20.0, 20.0),
        )
        .unwrap();
        for (x, y, w) in before {
            assert!(c.weight_at(x, y) >= w);
        }
    }

    #[test]
    fn snapshot_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = MosaicCanvas::default();
        c.composite(&textured(20, 20), &Homography::translation(-3.0, 2.0))
            .unwrap();
        let snap = c.render_snapshot();
        let p = write_snapshot(&snap, dir.path(), &snapshot_stem(5), 5).unwrap();
        assert!(p.ends_with("map_000005.png"));
        let meta: SnapshotMeta =
            serde_json::from_str(&fs::read_to_string(dir.path().join("map_000005.json")).unwrap())
                .unwrap();
        assert_eq!(meta.origin_x, -3);
        assert_eq!(meta.width, 20);
        assert_eq!(crate::imaging::load_image(&p).unwrap(), snap.image);
    }
}
