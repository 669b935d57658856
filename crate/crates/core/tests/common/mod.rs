//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use std::f64::consts::PI;

use gqstn::graspgeom::{GraspConfig, RectGrasp};
use gqstn::scenegen::{OracleConfig, PartKind, PrimitiveShape};
use gqstn::ImageMeta;

/// A part footprint rebuilt from the shape description, without the
/// library's placement code.
enum Outline {
    Poly(Vec<(f64, f64)>),
    Circle((f64, f64), f64),
}

struct Piece {
    outline: Outline,
    height: f64,
}

fn pieces(shape: &PrimitiveShape, meta: &ImageMeta) -> Vec<Piece> {
    let k = 1.0 / meta.pixel_scale;
    let (ps, pc) = shape.pose.theta.sin_cos();
    shape
        .parts
        .iter()
        .map(|p| {
            let ox = p.offset.0 * k;
            let oy = p.offset.1 * k;
            let c = (
                shape.pose.x + pc * ox - ps * oy,
                shape.pose.y + ps * ox + pc * oy,
            );
            let a = shape.pose.theta + p.angle;
            let poly = |local: Vec<(f64, f64)>| {
                let (s, co) = a.sin_cos();
                Outline::Poly(
                    local
                        .into_iter()
                        .map(|(x, y)| (c.0 + co * x - s * y, c.1 + s * x + co * y))
                        .collect(),
                )
            };
            let outline = match p.kind {
                PartKind::Box { length, width } => {
                    let (hx, hy) = (0.5 * length * k, 0.5 * width * k);
                    poly(vec![(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)])
                }
                PartKind::Cylinder { radius } => Outline::Circle(c, radius * k),
                PartKind::Prism {
                    sides,
                    circumradius,
                } => poly(
                    (0..sides)
                        .map(|i| {
                            let t = 2.0 * PI * i as f64 / sides as f64;
                            (circumradius * k * t.cos(), circumradius * k * t.sin())
                        })
                        .collect(),
                ),
            };
            Piece {
                outline,
                height: p.height,
            }
        })
        .collect()
}

impl Piece {
    fn perimeter(&self) -> f64 {
        match &self.outline {
            Outline::Circle(_, r) => 2.0 * PI * r,
            Outline::Poly(v) => (0..v.len())
                .map(|i| {
                    let (a, b) = (v[i], v[(i + 1) % v.len()]);
                    (b.0 - a.0).hypot(b.1 - a.1)
                })
                .sum(),
        }
    }

    /// Interior test with a small inward tolerance.
    fn inside(&self, p: (f64, f64)) -> bool {
        const EPS: f64 = 1e-7;
        match &self.outline {
            Outline::Circle(c, r) => (p.0 - c.0).hypot(p.1 - c.1) < r - EPS,
            Outline::Poly(v) => {
                let n = v.len();
                let sign = |i: usize| {
                    let (a, b) = (v[i], v[(i + 1) % n]);
                    ((b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0))
                        / (b.0 - a.0).hypot(b.1 - a.1)
                };
                let s0 = sign(0);
                (0..n).all(|i| {
                    let s = sign(i);
                    s.signum() == s0.signum() && s.abs() > EPS
                })
            }
        }
    }

    /// `count` evenly spaced boundary points with outward normals.
    fn samples(&self, count: usize, out: &mut Vec<((f64, f64), (f64, f64), f64)>) {
        match &self.outline {
            Outline::Circle(c, r) => {
                for i in 0..count {
                    let t = 2.0 * PI * (i as f64 + 0.5) / count as f64;
                    let (s, co) = t.sin_cos();
                    out.push(((c.0 + r * co, c.1 + r * s), (co, s), self.height));
                }
            }
            Outline::Poly(v) => {
                let n = v.len();
                let per = self.perimeter();
                // Orientation decides which side the outward normal is on.
                let area: f64 = (0..n)
                    .map(|i| v[i].0 * v[(i + 1) % n].1 - v[(i + 1) % n].0 * v[i].1)
                    .sum();
                let orient = area.signum();
                let mut pos = 0.0;
                let step = per / count as f64;
                let mut next = 0.5 * step;
                for i in 0..n {
                    let (a, b) = (v[i], v[(i + 1) % n]);
                    let len = (b.0 - a.0).hypot(b.1 - a.1);
                    let nrm = (orient * (b.1 - a.1) / len, -orient * (b.0 - a.0) / len);
                    while next < pos + len {
                        let f = (next - pos) / len;
                        out.push((
                            (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1)),
                            nrm,
                            self.height,
                        ));
                        next += step;
                    }
                    pos += len;
                }
            }
        }
    }
}

/// Dense surface-sampling contact simulation: the union boundary at height
/// `z` is sampled with `n` points, samples within a thin tube around the
/// closing line are projected onto it, and each jaw meets the first sample
/// past its starting position. A sample whose normal points away from the
/// approaching jaw means the jaw started inside material.
pub fn brute_force_robust(
    shape: &PrimitiveShape,
    meta: &ImageMeta,
    g: &GraspConfig,
    cfg: &OracleConfig,
    n: usize,
) -> bool {
    if g.z < 0.0 {
        return false;
    }
    let all = pieces(shape, meta);
    let active: Vec<&Piece> = all.iter().filter(|p| p.height > g.z).collect();
    if active.is_empty() {
        return false;
    }
    let total: f64 = active.iter().map(|p| p.perimeter()).sum();
    let mut pts = Vec::with_capacity(n + 8);
    for (i, p) in active.iter().enumerate() {
        let before = pts.len();
        p.samples(
            ((n as f64) * p.perimeter() / total).ceil() as usize,
            &mut pts,
        );
        // Keep only points on the outer boundary of the union.
        let mut j = before;
        while j < pts.len() {
            let q = pts[j].0;
            if active
                .iter()
                .enumerate()
                .any(|(k, o)| k != i && o.inside(q))
            {
                pts.swap_remove(j);
            } else {
                j += 1;
            }
        }
    }
    let delta = 0.75 * total / n as f64;
    let (s, c) = g.theta.sin_cos();
    let u = (c, s);
    let v = (-s, c);
    let half = 0.5 * g.w / meta.pixel_scale;
    let tube: Vec<(f64, (f64, f64), f64)> = pts
        .iter()
        .filter_map(|&(p, nrm, h)| {
            let d = (p.0 - g.x, p.1 - g.y);
            let along = d.0 * u.0 + d.1 * u.1;
            let across = d.0 * v.0 + d.1 * v.1;
            (across.abs() < delta).then_some((along, nrm, h))
        })
        .collect();
    let left = tube
        .iter()
        .filter(|s| s.0 > -half)
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let right = tube
        .iter()
        .filter(|s| s.0 < half)
        .max_by(|a, b| a.0.total_cmp(&b.0));
    let (Some(l), Some(r)) = (left, right) else {
        return false;
    };
    if l.0 >= half || r.0 <= -half {
        return false;
    }
    let dot_l = l.1 .0 * u.0 + l.1 .1 * u.1;
    let dot_r = r.1 .0 * u.0 + r.1 .1 * u.1;
    // Parity: the first surface a jaw meets must face it.
    if dot_l > 0.0 || dot_r < 0.0 {
        return false;
    }
    let cone = cfg.friction_coeff.atan();
    let angle = (-dot_l).min(1.0).acos().max(dot_r.min(1.0).acos());
    let sep = (r.0 - l.0) * meta.pixel_scale;
    let gap = (l.0 + half).min(half - r.0) * meta.pixel_scale;
    angle < cone
        && sep < cfg.max_opening
        && gap > cfg.contact_tolerance
        && l.2.min(r.2) - g.z > cfg.clearance_depth
}

/// Jaccard index of two rectangles by counting pixel centers on a
/// `res × res` grid spanning their joint bounding box.
pub fn raster_iou(a: &RectGrasp, b: &RectGrasp, res: usize) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    let xs = ca.iter().chain(&cb).map(|p| p.0);
    let ys = ca.iter().chain(&cb).map(|p| p.1);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
        (l.min(x), h.max(x))
    });
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), y| {
        (l.min(y), h.max(y))
    });
    let inside = |r: &RectGrasp, x: f64, y: f64| {
        let (s, c) = r.angle.sin_cos();
        let (dx, dy) = (x - r.cx, y - r.cy);
        (c * dx + s * dy).abs() <= 0.5 * r.width_px && (-s * dx + c * dy).abs() <= 0.5 * r.height_px
    };
    let (mut inter, mut uni) = (0usize, 0usize);
    for i in 0..res {
        let y = y0 + (i as f64 + 0.5) * (y1 - y0) / res as f64;
        for j in 0..res {
            let x = x0 + (j as f64 + 0.5) * (x1 - x0) / res as f64;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            uni += (ia || ib) as usize;
        }
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}
