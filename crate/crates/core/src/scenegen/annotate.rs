//! Sparse grasp annotations: antipodal candidates for positives and a mix of
//! perturbed, nearby and random grasps for negatives, all labelled by the
//! oracle.
//!
//! Candidate geometry is computed on a copy of the shape posed at the origin
//! and then offset by the (dyadic) pose, so annotations of a shape shifted by
//! whole pixels shift by exactly the same amount.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::oracle::{oracle_placed, OracleConfig};
use super::shapes::{quantize, PlacedPart, PrimitiveShape};
use crate::error::{Error, Result};
use crate::graspgeom::GraspConfig;
use crate::image::ImageMeta;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub grasp: GraspConfig,
    pub robust: bool,
    pub quality: f64,
}

/// Largest f32 strictly inside `(−π/2, π/2)`.
const THETA_LIMIT: f64 = 1.570_796_2;

fn f32q(v: f64) -> f64 {
    v as f32 as f64
}

fn rotate((x, y): (f64, f64), a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// A candidate in the origin frame: center offset, angle, opening and height.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    cx: f64,
    cy: f64,
    theta: f64,
    w: f64,
    z: f64,
}

impl Candidate {
    /// Quantizes to the stored representation and moves to the shape pose.
    fn place(&self, shape: &PrimitiveShape) -> Option<GraspConfig> {
        let theta =
            f32q(crate::graspgeom::canonical_angle(self.theta).clamp(-THETA_LIMIT, THETA_LIMIT));
        GraspConfig::new(
            shape.pose.x + quantize(self.cx),
            shape.pose.y + quantize(self.cy),
            f32q(self.z),
            theta,
            f32q(self.w),
        )
        .ok()
    }
}

struct Sampler<'a> {
    placed0: Vec<PlacedPart>,
    perimeters: Vec<f64>,
    meta: &'a ImageMeta,
    cfg: &'a OracleConfig,
}

impl<'a> Sampler<'a> {
    fn new(shape: &PrimitiveShape, meta: &'a ImageMeta, cfg: &'a OracleConfig) -> Self {
        let origin = shape.shifted(-shape.pose.x, -shape.pose.y);
        let placed0 = origin.place(meta);
        let perimeters = placed0.iter().map(|p| p.perimeter()).collect();
        Self {
            placed0,
            perimeters,
            meta,
            cfg,
        }
    }

    fn px(&self, meters: f64) -> f64 {
        meters / self.meta.pixel_scale
    }

    /// Extent of material along `p + t·u` at height `z` that contains
    /// `t = 0`, as the far end `t > 0`.
    fn far_side(&self, p: (f64, f64), u: (f64, f64), z: f64) -> Option<f64> {
        let mut chords: Vec<(f64, f64)> = self
            .placed0
            .iter()
            .filter(|q| q.height > z)
            .filter_map(|q| q.chord(p, u).map(|c| (c.t_in, c.t_out)))
            .collect();
        chords.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut end: Option<f64> = None;
        for (a, b) in chords {
            match end {
                None if a <= 1e-6 && b > 1e-6 => end = Some(b),
                Some(e) if a <= e => end = Some(e.max(b)),
                _ => {}
            }
        }
        end
    }

    /// An antipodal candidate from a random boundary point, or `None` if the
    /// draw is unusable.
    fn antipodal<R: rand::Rng>(&self, rng: &mut R) -> Option<Candidate> {
        let total: f64 = self.perimeters.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut idx = self.placed0.len() - 1;
        for (i, l) in self.perimeters.iter().enumerate() {
            if pick < *l {
                idx = i;
                break;
            }
            pick -= l;
        }
        let part = &self.placed0[idx];
        let (p, n) = part.boundary_at(rng.random_range(0.0..1.0));
        let buried = self
            .placed0
            .iter()
            .enumerate()
            .any(|(j, q)| j != idx && q.strictly_contains(p, 0.5));
        let z_hi = part.height - 1.25 * self.cfg.clearance_depth;
        let tilt = rng.random_range(-0.7..0.7) * self.cfg.cone_half_angle();
        let z = rng.random_range(0.0..1.0) * z_hi.max(0.0);
        let gap = rng.random_range(2.5..9.0) * self.cfg.contact_tolerance;
        if buried || z_hi <= 0.0 {
            return None;
        }
        let u = rotate((-n.0, -n.1), tilt);
        let sep = self.far_side(p, u, z)?;
        let w_max = self.px(self.cfg.max_opening);
        let w = (sep + 2.0 * self.px(gap)).min(w_max);
        if sep + 2.0 * self.px(2.0 * self.cfg.contact_tolerance) > w_max {
            return None;
        }
        Some(Candidate {
            cx: p.0 + 0.5 * sep * u.0,
            cy: p.1 + 0.5 * sep * u.1,
            theta: u.1.atan2(u.0),
            w: w * self.meta.pixel_scale,
            z,
        })
    }

    fn random_z<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        let top = self.placed0.iter().map(|p| p.height).fold(0.0, f64::max);
        rng.random_range(0.0..top + 0.01)
    }

    fn random_w<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        rng.random_range(0.2..1.0) * self.cfg.max_opening
    }

    fn negative_candidate<R: rand::Rng>(
        &self,
        rng: &mut R,
        shape: &PrimitiveShape,
    ) -> Option<Candidate> {
        let mode = rng.random_range(0.0..1.0);
        if mode < 0.45 {
            let mut c = self.antipodal(rng)?;
            let (s, co) = c.theta.sin_cos();
            let half = 0.5 * c.w / self.meta.pixel_scale;
            match rng.random_range(0..5) {
                0 => {
                    let d = rng.random_range(0.3..1.2)
                        * half
                        * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    c.cx += d * co;
                    c.cy += d * s;
                }
                1 => {
                    let d =
                        rng.random_range(2.0..12.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    c.cx -= d * s;
                    c.cy += d * co;
                }
                2 => {
                    c.theta += rng.random_range(0.35..FRAC_PI_2)
                        * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                }
                3 => c.w *= rng.random_range(0.4..0.95),
                _ => {
                    let top = self.placed0.iter().map(|p| p.height).fold(0.0, f64::max);
                    c.z = rng.random_range(c.z..top + 0.01);
                }
            }
            Some(c)
        } else if mode < 0.8 {
            let r = shape.bounding_radius(self.meta) + 6.0;
            let a = rng.random_range(0.0..2.0 * PI);
            let d = r * rng.random_range(0.0f64..1.0).sqrt();
            Some(Candidate {
                cx: d * a.cos(),
                cy: d * a.sin(),
                theta: rng.random_range(-FRAC_PI_2..FRAC_PI_2),
                w: self.random_w(rng),
                z: self.random_z(rng),
            })
        } else {
            let r = shape.bounding_radius(self.meta);
            let a = rng.random_range(0.0..2.0 * PI);
            let d = r + rng.random_range(6.0..30.0);
            Some(Candidate {
                cx: d * a.cos(),
                cy: d * a.sin(),
                theta: rng.random_range(-FRAC_PI_2..FRAC_PI_2),
                w: self.random_w(rng),
                z: self.random_z(rng),
            })
        }
    }
}

fn label(
    placed: &[PlacedPart],
    meta: &ImageMeta,
    g: GraspConfig,
    cfg: &OracleConfig,
) -> Annotation {
    let o = oracle_placed(placed, meta, &g, cfg);
    Annotation {
        grasp: g,
        robust: o.robust,
        quality: f32q(o.quality),
    }
}

/// `n_pos` robust grasps followed by `n_neg` non-robust ones.
pub fn sample_annotations(
    shape: &PrimitiveShape,
    meta: &ImageMeta,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
    cfg: &OracleConfig,
) -> Result<Vec<Annotation>> {
    shape.validate()?;
    cfg.validate()?;
    let sampler = Sampler::new(shape, meta, cfg);
    let placed = shape.place(meta);
    let mut out = Vec::with_capacity(n_pos + n_neg);

    let mut rng = rng::rng(rng::derive(seed, 0));
    let budget = 400 * n_pos + 200;
    let mut tries = 0;
    while out.len() < n_pos {
        if tries == budget {
            return Err(Error::Sampling {
                shape: shape.name(),
                wanted: n_pos,
                tries,
            });
        }
        tries += 1;
        let Some(g) = sampler.antipodal(&mut rng).and_then(|c| c.place(shape)) else {
            continue;
        };
        if !g.within(meta) {
            continue;
        }
        let a = label(&placed, meta, g, cfg);
        if a.robust {
            out.push(a);
        }
    }

    let mut rng = rng::rng(rng::derive(seed, 1));
    let budget = 200 * n_neg + 200;
    let mut tries = 0;
    let mut negatives = 0;
    while negatives < n_neg {
        if tries == budget {
            return Err(Error::Sampling {
                shape: shape.name(),
                wanted: n_neg,
                tries,
            });
        }
        tries += 1;
        let Some(g) = sampler
            .negative_candidate(&mut rng, shape)
            .and_then(|c| c.place(shape))
        else {
            continue;
        };
        if !g.within(meta) {
            continue;
        }
        let a = label(&placed, meta, g, cfg);
        if !a.robust {
            out.push(a);
            negatives += 1;
        }
    }
    Ok(out)
}

/// Labelled grasps drawn from the negative mixture and the antipodal sampler
/// in equal measure, kept regardless of label. Used to build classifier
/// training crops with a realistic label balance.
pub fn sample_mixed(
    shape: &PrimitiveShape,
    meta: &ImageMeta,
    n: usize,
    seed: u64,
    cfg: &OracleConfig,
) -> Result<Vec<Annotation>> {
    shape.validate()?;
    cfg.validate()?;
    let sampler = Sampler::new(shape, meta, cfg);
    let placed = shape.place(meta);
    let mut rng = rng::rng(seed);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        if tries == 200 * n + 200 {
            return Err(Error::Sampling {
                shape: shape.name(),
                wanted: n,
                tries,
            });
        }
        tries += 1;
        let c = if rng.random_bool(0.5) {
            sampler.antipodal(&mut rng)
        } else {
            sampler.negative_candidate(&mut rng, shape)
        };
        let Some(g) = c.and_then(|c| c.place(shape)) else {
            continue;
        };
        if g.within(meta) {
            out.push(label(&placed, meta, g, cfg));
        }
    }
    Ok(out)
}
