//! Primitive footprints, their placement in the image and rendering.
//!
//! Geometry is evaluated in pixel units, `(column, row)`. Every test against a
//! part first subtracts the part center and rotates into the part frame, and
//! centers are dyadic (multiples of 1/1024 px), so integer shifts of a shape
//! shift every derived quantity exactly.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthImage, ImageMeta};
use crate::rng;

/// Pose resolution in pixels.
pub const POSE_QUANTUM: f64 = 1.0 / 1024.0;

pub fn quantize(v: f64) -> f64 {
    (v / POSE_QUANTUM).round() * POSE_QUANTUM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartKind {
    /// Full side lengths, meters.
    Box {
        length: f64,
        width: f64,
    },
    Cylinder {
        radius: f64,
    },
    /// Regular n-gon prism.
    Prism {
        sides: u32,
        circumradius: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub kind: PartKind,
    /// Offset from the shape origin in the shape frame, meters.
    pub offset: (f64, f64),
    /// Rotation relative to the shape frame.
    pub angle: f64,
    pub height: f64,
}

/// Planar pose: center in pixels, orientation in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// One object: a single primitive or a union of up to three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveShape {
    pub pose: Pose,
    pub parts: Vec<Part>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Footprint {
    /// Vertices with positive signed area, and the outward unit normal of
    /// each edge `i → i+1`.
    Convex {
        verts: Vec<(f64, f64)>,
        normals: Vec<(f64, f64)>,
    },
    Disk {
        r: f64,
    },
}

/// A part placed in pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedPart {
    pub cx: f64,
    pub cy: f64,
    pub angle: f64,
    pub footprint: Footprint,
    /// Meters above the table.
    pub height: f64,
}

/// Entry and exit of a line through a part, with outward world normals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chord {
    pub t_in: f64,
    pub n_in: (f64, f64),
    pub t_out: f64,
    pub n_out: (f64, f64),
}

fn rotate((x, y): (f64, f64), a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x - s * y, s * x + c * y)
}

impl Footprint {
    fn convex(verts: Vec<(f64, f64)>) -> Self {
        let n = verts.len();
        let normals = (0..n)
            .map(|i| {
                let (a, b) = (verts[i], verts[(i + 1) % n]);
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let l = dx.hypot(dy);
                (dy / l, -dx / l)
            })
            .collect();
        Self::Convex { verts, normals }
    }

    fn contains(&self, (x, y): (f64, f64)) -> bool {
        match self {
            Self::Disk { r } => x * x + y * y <= r * r,
            Self::Convex { verts, normals } => verts
                .iter()
                .zip(normals)
                .all(|(a, n)| n.0 * (x - a.0) + n.1 * (y - a.1) <= 0.0),
        }
    }

    fn strictly_contains(&self, (x, y): (f64, f64), margin: f64) -> bool {
        match self {
            Self::Disk { r } => x.hypot(y) < r - margin,
            Self::Convex { verts, normals } => verts
                .iter()
                .zip(normals)
                .all(|(a, n)| n.0 * (x - a.0) + n.1 * (y - a.1) < -margin),
        }
    }

    fn chord(&self, o: (f64, f64), d: (f64, f64)) -> Option<(f64, (f64, f64), f64, (f64, f64))> {
        match self {
            Self::Disk { r } => {
                let b = o.0 * d.0 + o.1 * d.1;
                let c = o.0 * o.0 + o.1 * o.1 - r * r;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let q = disc.sqrt();
                let (t0, t1) = (-b - q, -b + q);
                let n = |t: f64| ((o.0 + t * d.0) / r, (o.1 + t * d.1) / r);
                Some((t0, n(t0), t1, n(t1)))
            }
            Self::Convex { verts, normals } => {
                let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n_in, mut n_out) = ((0.0, 0.0), (0.0, 0.0));
                for (a, n) in verts.iter().zip(normals) {
                    let num = n.0 * (a.0 - o.0) + n.1 * (a.1 - o.1);
                    let den = n.0 * d.0 + n.1 * d.1;
                    if den == 0.0 {
                        if num < 0.0 {
                            return None;
                        }
                    } else if den < 0.0 {
                        let t = num / den;
                        if t > t_in {
                            t_in = t;
                            n_in = *n;
                        }
                    } else {
                        let t = num / den;
                        if t < t_out {
                            t_out = t;
                            n_out = *n;
                        }
                    }
                }
                (t_in < t_out).then_some((t_in, n_in, t_out, n_out))
            }
        }
    }

    fn perimeter(&self) -> f64 {
        match self {
            Self::Disk { r } => 2.0 * PI * r,
            Self::Convex { verts, .. } => {
                let n = verts.len();
                (0..n)
                    .map(|i| {
                        let (a, b) = (verts[i], verts[(i + 1) % n]);
                        (b.0 - a.0).hypot(b.1 - a.1)
                    })
                    .sum()
            }
        }
    }

    /// Point and outward normal at arc length fraction `f ∈ [0, 1)`.
    fn boundary_at(&self, f: f64) -> ((f64, f64), (f64, f64)) {
        match self {
            Self::Disk { r } => {
                let a = 2.0 * PI * f;
                let (s, c) = a.sin_cos();
                ((r * c, r * s), (c, s))
            }
            Self::Convex { verts, normals } => {
                let mut l = f * self.perimeter();
                let n = verts.len();
                for i in 0..n {
                    let (a, b) = (verts[i], verts[(i + 1) % n]);
                    let e = (b.0 - a.0).hypot(b.1 - a.1);
                    if l <= e || i == n - 1 {
                        let t = (l / e).min(1.0);
                        return ((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)), normals[i]);
                    }
                    l -= e;
                }
                unreachable!("non-empty polygon")
            }
        }
    }

    fn radius(&self) -> f64 {
        match self {
            Self::Disk { r } => *r,
            Self::Convex { verts, .. } => verts.iter().map(|v| v.0.hypot(v.1)).fold(0.0, f64::max),
        }
    }
}

impl PlacedPart {
    fn local(&self, p: (f64, f64)) -> (f64, f64) {
        rotate((p.0 - self.cx, p.1 - self.cy), -self.angle)
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        self.footprint.contains(self.local(p))
    }

    /// Inside by more than `margin` pixels.
    pub fn strictly_contains(&self, p: (f64, f64), margin: f64) -> bool {
        self.footprint.strictly_contains(self.local(p), margin)
    }

    /// Intersection with the line `origin + t·dir`, `dir` a unit vector.
    pub fn chord(&self, origin: (f64, f64), dir: (f64, f64)) -> Option<Chord> {
        let o = self.local(origin);
        let d = rotate(dir, -self.angle);
        self.footprint
            .chord(o, d)
            .map(|(t_in, n_in, t_out, n_out)| Chord {
                t_in,
                n_in: rotate(n_in, self.angle),
                t_out,
                n_out: rotate(n_out, self.angle),
            })
    }

    pub fn perimeter(&self) -> f64 {
        self.footprint.perimeter()
    }

    /// World point and outward normal at arc length fraction `f`.
    pub fn boundary_at(&self, f: f64) -> ((f64, f64), (f64, f64)) {
        let (p, n) = self.footprint.boundary_at(f);
        let (x, y) = rotate(p, self.angle);
        ((self.cx + x, self.cy + y), rotate(n, self.angle))
    }

    pub fn radius(&self) -> f64 {
        self.footprint.radius()
    }
}

impl PrimitiveShape {
    pub fn single(pose: Pose, kind: PartKind, height: f64) -> Self {
        Self {
            pose,
            parts: vec![Part {
                kind,
                offset: (0.0, 0.0),
                angle: 0.0,
                height,
            }],
        }
    }

    /// Short description used in error messages.
    pub fn name(&self) -> String {
        if self.parts.len() > 1 {
            return format!("union of {} parts", self.parts.len());
        }
        match &self.parts[0].kind {
            PartKind::Box { .. } => "box".into(),
            PartKind::Cylinder { .. } => "cylinder".into(),
            PartKind::Prism { sides, .. } => format!("{sides}-gon prism"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() || self.parts.len() > 3 {
            return Err(Error::Invalid(format!(
                "shape needs 1 to 3 parts, got {}",
                self.parts.len()
            )));
        }
        for p in &self.parts {
            let ok = match p.kind {
                PartKind::Box { length, width } => length > 0.0 && width > 0.0,
                PartKind::Cylinder { radius } => radius > 0.0,
                PartKind::Prism {
                    sides,
                    circumradius,
                } => sides >= 3 && circumradius > 0.0,
            };
            if !ok || !(p.height > 0.0) {
                return Err(Error::Invalid(format!(
                    "degenerate part in {}",
                    self.name()
                )));
            }
        }
        Ok(())
    }

    /// Returns the same shape moved by whole pixels.
    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        let mut s = self.clone();
        s.pose.x += dx;
        s.pose.y += dy;
        s
    }

    pub fn place(&self, meta: &ImageMeta) -> Vec<PlacedPart> {
        let k = 1.0 / meta.pixel_scale;
        self.parts
            .iter()
            .map(|p| {
                let (ox, oy) = rotate((p.offset.0 * k, p.offset.1 * k), self.pose.theta);
                let footprint = match p.kind {
                    PartKind::Box { length, width } => {
                        let (hx, hy) = (0.5 * length * k, 0.5 * width * k);
                        Footprint::convex(vec![(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)])
                    }
                    PartKind::Cylinder { radius } => Footprint::Disk { r: radius * k },
                    PartKind::Prism {
                        sides,
                        circumradius,
                    } => {
                        let r = circumradius * k;
                        Footprint::convex(
                            (0..sides)
                                .map(|i| {
                                    let a = 2.0 * PI * i as f64 / sides as f64;
                                    (r * a.cos(), r * a.sin())
                                })
                                .collect(),
                        )
                    }
                };
                PlacedPart {
                    cx: self.pose.x + quantize(ox),
                    cy: self.pose.y + quantize(oy),
                    angle: self.pose.theta + p.angle,
                    footprint,
                    height: p.height,
                }
            })
            .collect()
    }

    /// Radius in pixels of a disk around the pose center covering the shape.
    pub fn bounding_radius(&self, meta: &ImageMeta) -> f64 {
        self.place(meta)
            .iter()
            .map(|p| (p.cx - self.pose.x).hypot(p.cy - self.pose.y) + p.radius())
            .fold(0.0, f64::max)
    }

    /// Height in meters of the tallest part covering `p`, or 0.
    pub fn height_at(placed: &[PlacedPart], p: (f64, f64)) -> f64 {
        placed
            .iter()
            .filter(|q| q.contains(p))
            .map(|q| q.height)
            .fold(0.0, f64::max)
    }
}

/// Orthographic top-down depth rendering with optional Gaussian noise.
pub fn render_scene(
    shape: &PrimitiveShape,
    meta: &ImageMeta,
    noise_std: f64,
    seed: u64,
) -> Result<DepthImage> {
    shape.validate()?;
    let mut img = DepthImage::table(*meta)?;
    let r = shape.bounding_radius(meta);
    let (x, y) = (shape.pose.x, shape.pose.y);
    if x - r < 0.0
        || y - r < 0.0
        || x + r > (meta.width - 1) as f64
        || y + r > (meta.height - 1) as f64
    {
        return Err(Error::OutOfFrame(format!(
            "{} at ({x:.2}, {y:.2}) with radius {r:.2} px leaves the {}x{} frame",
            shape.name(),
            meta.width,
            meta.height
        )));
    }
    let placed = shape.place(meta);
    let cam = meta.camera_height;
    for row in 0..meta.height {
        for col in 0..meta.width {
            let h = PrimitiveShape::height_at(&placed, (col as f64, row as f64));
            if h > 0.0 {
                img.depth[row * meta.width + col] = (cam - h) as f32;
            }
        }
    }
    if noise_std > 0.0 {
        let normal =
            Normal::new(0.0, noise_std).map_err(|e| Error::Config(format!("noise_std: {e}")))?;
        let mut rng = rng::rng(seed);
        for d in &mut img.depth {
            *d = (*d as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    Ok(img)
}

/// Relative frequencies of the four shape families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeMix {
    pub boxes: f64,
    pub cylinders: f64,
    pub prisms: f64,
    pub unions: f64,
}

impl Default for ShapeMix {
    fn default() -> Self {
        Self {
            boxes: 1.0,
            cylinders: 1.0,
            prisms: 1.0,
            unions: 1.0,
        }
    }
}

impl ShapeMix {
    pub fn validate(&self) -> Result<()> {
        let w = [self.boxes, self.cylinders, self.prisms, self.unions];
        if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "shape mix weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

fn random_part<R: rand::Rng>(rng: &mut R, family: usize, scale: f64) -> PartKind {
    match family {
        0 => {
            let width = rng.random_range(0.012..0.034) * scale;
            let length = width * rng.random_range(1.0..2.2);
            PartKind::Box { length, width }
        }
        1 => PartKind::Cylinder {
            radius: rng.random_range(0.007..0.019) * scale,
        },
        _ => PartKind::Prism {
            sides: [5, 6, 8][rng.random_range(0..3)],
            circumradius: rng.random_range(0.009..0.021) * scale,
        },
    }
}

fn kind_extent(k: &PartKind) -> f64 {
    match *k {
        PartKind::Box { length, .. } => 0.5 * length,
        PartKind::Cylinder { radius } => radius,
        PartKind::Prism { circumradius, .. } => circumradius,
    }
}

/// Draws a random shape whose bounding disk fits in the frame with `margin`
/// pixels to spare.
pub fn random_shape<R: rand::Rng>(
    rng: &mut R,
    mix: &ShapeMix,
    meta: &ImageMeta,
    margin: f64,
) -> Result<PrimitiveShape> {
    mix.validate()?;
    let w = [mix.boxes, mix.cylinders, mix.prisms, mix.unions];
    let total: f64 = w.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut family = 3;
    for (i, wi) in w.iter().enumerate() {
        if pick < *wi {
            family = i;
            break;
        }
        pick -= wi;
    }
    let mut parts = Vec::new();
    if family < 3 {
        parts.push(Part {
            kind: random_part(rng, family, 1.0),
            offset: (0.0, 0.0),
            angle: 0.0,
            height: rng.random_range(0.015..0.05),
        });
    } else {
        let n = rng.random_range(2..=3);
        let fam = rng.random_range(0..3);
        let base = random_part(rng, fam, 0.85);
        let reach = kind_extent(&base);
        parts.push(Part {
            kind: base,
            offset: (0.0, 0.0),
            angle: 0.0,
            height: rng.random_range(0.015..0.05),
        });
        for _ in 1..n {
            let fam = rng.random_range(0..3);
            let kind = random_part(rng, fam, 0.7);
            let a = rng.random_range(0.0..2.0 * PI);
            let d = reach * rng.random_range(0.5..1.1);
            parts.push(Part {
                kind,
                offset: (d * a.cos(), d * a.sin()),
                angle: rng.random_range(0.0..PI),
                height: rng.random_range(0.015..0.05),
            });
        }
    }
    let mut shape = PrimitiveShape {
        pose: Pose {
            x: 0.0,
            y: 0.0,
            theta: rng.random_range(0.0..2.0 * PI),
        },
        parts,
    };
    let r = shape.bounding_radius(meta) + margin;
    let (lo, hi_x, hi_y) = (r, (meta.width - 1) as f64 - r, (meta.height - 1) as f64 - r);
    if lo >= hi_x || lo >= hi_y {
        return Err(Error::OutOfFrame(format!(
            "{} with radius {r:.1} px cannot fit a {}x{} frame",
            shape.name(),
            meta.width,
            meta.height
        )));
    }
    shape.pose.x = quantize(rng.random_range(lo..hi_x));
    shape.pose.y = quantize(rng.random_range(lo..hi_y));
    Ok(shape)
}
