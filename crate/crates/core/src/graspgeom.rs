//! Grasp representations, conversion to and from STN cascade parameters,
//! the aligned classifier crop and the rectangle metric.
//!
//! A cascade `(x, y, θ, s)` maps crop coordinates to normalized image
//! coordinates through `T·R·S`. The crop center lands at `(2x, 2y)`, the crop's
//! horizontal axis follows the gripper axis `(cos θ, sin θ)` in (column, row)
//! order, and the crop spans `s·(W−1)` pixels. The jaw opening covers a third
//! of that span.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::image::{DepthImage, ImageMeta};
use crate::stn::{self, AffineMatrix, AffineParams, DatasetStats};

/// Side of the square classifier crop.
pub const CROP_SIZE: usize = 32;
/// Fraction of the crop width covered by the jaw opening.
pub const OPENING_FRACTION: f64 = 1.0 / 3.0;
/// Rectangle height over width.
pub const RECT_ASPECT: f64 = 0.2;
pub const ANGLE_THRESHOLD: f64 = PI / 6.0;
pub const IOU_THRESHOLD: f64 = 0.25;

/// Reduces an angle to `(−π/2, π/2]`.
pub fn canonical_angle(theta: f64) -> f64 {
    if theta > -FRAC_PI_2 && theta <= FRAC_PI_2 {
        return theta;
    }
    let t = theta.rem_euclid(PI);
    if t > FRAC_PI_2 {
        t - PI
    } else {
        t
    }
}

/// Smallest difference between two gripper axes, in `[0, π/2]`.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Planar position in pixels, gripper height above the table in meters,
/// axis angle, and jaw opening in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspConfig {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
    pub w: f64,
}

impl GraspConfig {
    pub fn new(x: f64, y: f64, z: f64, theta: f64, w: f64) -> Result<Self> {
        let g = Self {
            x,
            y,
            z,
            theta: canonical_angle(theta),
            w,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.x, self.y, self.z, self.theta, self.w];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite grasp {self:?}")));
        }
        if !(self.w > 0.0) {
            return Err(Error::Invalid(format!(
                "grasp opening {} must be positive",
                self.w
            )));
        }
        Ok(())
    }

    /// Unit gripper axis in (column, row) order.
    pub fn axis(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (c, s)
    }

    pub fn rect(&self, meta: &ImageMeta) -> RectGrasp {
        RectGrasp::new(self.x, self.y, self.theta, self.w / meta.pixel_scale)
    }

    pub fn within(&self, meta: &ImageMeta) -> bool {
        (0.0..=(meta.width - 1) as f64).contains(&self.x)
            && (0.0..=(meta.height - 1) as f64).contains(&self.y)
    }
}

/// The three constrained stage transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub trans: AffineParams,
    pub rot: AffineParams,
    pub scale: AffineParams,
}

impl Cascade {
    pub fn new(x: f64, y: f64, theta: f64, s: f64) -> Result<Self> {
        Ok(Self {
            trans: AffineParams::translation(x, y)?,
            rot: AffineParams::rotation(theta)?,
            scale: AffineParams::scale(s)?,
        })
    }

    /// `(x, y, θ, s)`.
    pub fn raw(&self) -> [f64; 4] {
        let t = self.trans.raw();
        [t[0], t[1], self.rot.raw()[0], self.scale.raw()[0]]
    }

    pub fn matrix(&self) -> AffineMatrix {
        stn::compose_cascade(&self.trans, &self.rot, &self.scale)
            .expect("kinds fixed by construction")
    }
}

/// Recovers the grasp in image coordinates from a cascade and the
/// normalized height output.
pub fn grasp_from_cascade(
    t: &AffineParams,
    r: &AffineParams,
    c: &AffineParams,
    z_raw: f64,
    stats: &DatasetStats,
    meta: &ImageMeta,
) -> Result<GraspConfig> {
    meta.require_square()?;
    let m = stn::compose_cascade(t, r, c)?;
    let (cu, cv) = m.apply(0.0, 0.0);
    let span = meta.span();
    let x = (cu + 1.0) * 0.5 * span;
    let y = (cv + 1.0) * 0.5 * span;
    let theta = r.raw()[0];
    let s = c.raw()[0];
    let w = s * span * OPENING_FRACTION * meta.pixel_scale;
    GraspConfig::new(x, y, stats.denormalize_z(z_raw), theta, w)
}

/// Encodes a grasp as cascade parameters plus normalized height. This is the
/// target encoder used during training.
pub fn cascade_from_grasp(
    g: &GraspConfig,
    stats: &DatasetStats,
    meta: &ImageMeta,
) -> Result<(Cascade, f64)> {
    meta.require_square()?;
    g.validate()?;
    if !g.within(meta) {
        return Err(Error::OutOfFrame(format!(
            "grasp center ({}, {}) outside {}x{} image",
            g.x, g.y, meta.width, meta.height
        )));
    }
    let span = meta.span();
    let x = (g.x / span - 0.5).clamp(-0.5, 0.5);
    let y = (g.y / span - 0.5).clamp(-0.5, 0.5);
    let s = g.w / (meta.pixel_scale * span * OPENING_FRACTION);
    Ok((
        Cascade::new(x, y, canonical_angle(g.theta), s)?,
        stats.normalize_z(g.z),
    ))
}

/// Aligned crop of a normalized depth image: gripper axis horizontal, jaw
/// opening across the middle third.
pub fn crop_normalized(normalized: &Tensor, meta: &ImageMeta, g: &GraspConfig) -> Result<Tensor> {
    let unit = DatasetStats::new(1.0, 0.0, 1.0)?;
    let (cascade, _) = cascade_from_grasp(g, &unit, meta)?;
    let grid = stn::affine_grid_matrix(&cascade.matrix(), CROP_SIZE, CROP_SIZE)?;
    stn::bilinear_sample(normalized, &grid, 0.0)
}

/// [`crop_normalized`] on a raw depth image.
pub fn crop_for_classifier(image: &DepthImage, g: &GraspConfig) -> Result<Tensor> {
    crop_normalized(&image.normalized(), &image.meta, g)
}

/// Oriented grasp rectangle in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectGrasp {
    pub cx: f64,
    pub cy: f64,
    pub angle: f64,
    /// Extent along the gripper axis.
    pub width_px: f64,
    pub height_px: f64,
}

impl RectGrasp {
    pub fn new(cx: f64, cy: f64, angle: f64, width_px: f64) -> Self {
        Self {
            cx,
            cy,
            angle: canonical_angle(angle),
            width_px,
            height_px: width_px * RECT_ASPECT,
        }
    }

    /// Corners in order around the rectangle, (column, row).
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.angle.sin_cos();
        let (hw, hh) = (0.5 * self.width_px, 0.5 * self.height_px);
        let (ux, uy) = (c * hw, s * hw);
        let (vx, vy) = (-s * hh, c * hh);
        [
            (self.cx - ux - vx, self.cy - uy - vy),
            (self.cx + ux - vx, self.cy + uy - vy),
            (self.cx + ux + vx, self.cy + uy + vy),
            (self.cx - ux + vx, self.cy - uy + vy),
        ]
    }

    pub fn area(&self) -> f64 {
        self.width_px * self.height_px
    }
}

/// Signed shoelace area.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    0.5 * a
}

/// Sutherland–Hodgman clipping of `subject` by the convex polygon `clip`.
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let orient = polygon_area(clip).signum();
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: (f64, f64)| orient * ((b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0));
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

/// Jaccard index of two convex polygons.
pub fn convex_iou(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let inter = clip_convex(a, b);
    let i = if inter.len() < 3 {
        0.0
    } else {
        polygon_area(&inter).abs()
    };
    let u = polygon_area(a).abs() + polygon_area(b).abs() - i;
    if u <= 0.0 {
        0.0
    } else {
        (i / u).clamp(0.0, 1.0)
    }
}

pub fn rect_iou(p: &RectGrasp, g: &RectGrasp) -> f64 {
    convex_iou(&p.corners(), &g.corners())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub positive: bool,
    /// Largest Jaccard index over the ground truth.
    pub best_iou: f64,
    /// Angle difference to the ground truth rectangle with `best_iou`.
    pub angle_diff: f64,
}

/// Positive iff some ground truth is within 30° (modulo π) and has a
/// Jaccard index above 0.25. Height is ignored.
pub fn rect_metric(p: &RectGrasp, gs: &[RectGrasp]) -> Result<MetricResult> {
    if gs.is_empty() {
        return Err(Error::Invalid(
            "rect_metric needs at least one ground truth".into(),
        ));
    }
    let mut res = MetricResult {
        positive: false,
        best_iou: -1.0,
        angle_diff: 0.0,
    };
    for g in gs {
        let j = rect_iou(p, g);
        let d = angle_difference(p.angle, g.angle);
        if d < ANGLE_THRESHOLD && j > IOU_THRESHOLD {
            res.positive = true;
        }
        if j > res.best_iou {
            res.best_iou = j;
            res.angle_diff = d;
        }
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta96() -> ImageMeta {
        ImageMeta {
            height: 96,
            width: 96,
            pixel_scale: 0.001,
            camera_height: 0.7,
        }
    }

    #[test]
    fn canonical_range() {
        assert_eq!(canonical_angle(FRAC_PI_2), FRAC_PI_2);
        assert!((canonical_angle(-FRAC_PI_2) - FRAC_PI_2).abs() < 1e-15);
        assert!((canonical_angle(0.3 + PI) - 0.3).abs() < 1e-15);
        assert!((canonical_angle(2.0) - (2.0 - PI)).abs() < 1e-15);
        assert!((angle_difference(0.1, PI - 0.1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn identity_cascade_recovers_center() {
        let stats = DatasetStats::new(0.4, 0.01, 0.005).unwrap();
        let m = meta96();
        let c = Cascade::new(0.0, 0.0, 0.0, stats.gamma).unwrap();
        let g = grasp_from_cascade(&c.trans, &c.rot, &c.scale, 0.0, &stats, &m).unwrap();
        assert!((g.x - 47.5).abs() < 1e-12 && (g.y - 47.5).abs() < 1e-12);
        assert_eq!(g.theta, 0.0);
        assert!((g.w - 0.4 * 95.0 / 3.0 * 0.001).abs() < 1e-15);
        assert!((g.z - 0.01).abs() < 1e-15);
    }

    #[test]
    fn translation_offsets() {
        let stats = DatasetStats::new(0.4, 0.0, 1.0).unwrap();
        let m = meta96();
        let c = Cascade::new(0.1, 0.2, 0.0, 1.0).unwrap();
        let g = grasp_from_cascade(&c.trans, &c.rot, &c.scale, 0.0, &stats, &m).unwrap();
        assert!((g.x - (47.5 + 9.5)).abs() < 1e-12);
        assert!((g.y - (47.5 + 19.0)).abs() < 1e-12);
    }

    #[test]
    fn out_of_frame_crop_is_rejected() {
        let img = DepthImage::table(meta96()).unwrap();
        let g = GraspConfig::new(-1.0, 10.0, 0.0, 0.0, 0.02).unwrap();
        assert!(matches!(
            crop_for_classifier(&img, &g),
            Err(Error::OutOfFrame(_))
        ));
    }

    #[test]
    fn rect_height_is_fifth_of_width() {
        let r = RectGrasp::new(0.0, 0.0, 0.3, 25.0);
        assert_eq!(r.height_px, 5.0);
    }

    #[test]
    fn identical_rects() {
        let r = RectGrasp::new(10.0, 12.0, 0.4, 20.0);
        let m = rect_metric(&r, &[r]).unwrap();
        assert!(m.positive);
        assert!((m.best_iou - 1.0).abs() < 1e-12);
    }

    #[test]
    fn angle_rule() {
        let g = RectGrasp::new(10.0, 10.0, 0.0, 20.0);
        let p = RectGrasp::new(10.0, 10.0, PI / 4.0, 20.0);
        assert!(!rect_metric(&p, &[g]).unwrap().positive);
        assert!(rect_metric(&p, &[]).is_err());
    }

    #[test]
    fn half_offset_squares() {
        let a = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let b = [(0.5, 0.0), (1.5, 0.0), (1.5, 1.0), (0.5, 1.0)];
        assert!((convex_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let far = [(5.0, 5.0), (6.0, 5.0), (6.0, 6.0), (5.0, 6.0)];
        assert_eq!(convex_iou(&a, &far), 0.0);
    }
}
