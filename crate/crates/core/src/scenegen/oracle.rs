//! Analytic antipodal robustness oracle.
//!
//! The gripper closes along the line `c + t·u` from jaw positions
//! `t = ±w/2` at height `z` above the table. The cross-section at that height
//! is the union of parts taller than `z`; each jaw stops at the first chord
//! boundary it meets. Four margins are computed, each positive iff its
//! condition holds:
//!
//! * friction: `1 − max contact angle / atan μ`
//! * opening: `1 − separation / max_opening`
//! * clearance: `min(1, (jaw gap − tol) / tol)`, the free space between a jaw's
//!   landing position and the surface it closes onto
//! * depth: `min(1, (contact height − z − clearance_depth) / clearance_depth)`
//!
//! The grasp is robust iff every margin is positive, and its quality is the
//! smallest margin clamped to `[0, 1]`.

use serde::{Deserialize, Serialize};

use super::shapes::{PlacedPart, PrimitiveShape};
use crate::error::{Error, Result};
use crate::graspgeom::GraspConfig;
use crate::image::ImageMeta;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub friction_coeff: f64,
    /// Meters.
    pub max_opening: f64,
    /// Meters the jaws must reach below the contacted top surface.
    pub clearance_depth: f64,
    /// Meters of free space required around each jaw.
    pub contact_tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            friction_coeff: 0.5,
            max_opening: 0.05,
            clearance_depth: 0.008,
            contact_tolerance: 0.001,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.friction_coeff > 0.0) || !(self.max_opening > 0.0) {
            return Err(Error::Config(
                "oracle needs friction_coeff > 0 and max_opening > 0".into(),
            ));
        }
        if !(self.clearance_depth > 0.0) || !(self.contact_tolerance > 0.0) {
            return Err(Error::Config(
                "oracle needs positive clearance_depth and contact_tolerance".into(),
            ));
        }
        Ok(())
    }

    pub fn cone_half_angle(&self) -> f64 {
        self.friction_coeff.atan()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub friction: f64,
    pub opening: f64,
    pub clearance: f64,
    pub depth: f64,
}

impl Margins {
    pub fn min(&self) -> f64 {
        self.friction
            .min(self.opening)
            .min(self.clearance)
            .min(self.depth)
    }
}

/// Jaw landing points along the closing line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contacts {
    pub t_left: f64,
    pub t_right: f64,
    pub n_left: (f64, f64),
    pub n_right: (f64, f64),
    pub h_left: f64,
    pub h_right: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleOutcome {
    pub robust: bool,
    pub quality: f64,
    /// `None` when a hard gate failed (no contact, jaws below the table, or
    /// opening beyond the gripper).
    pub margins: Option<Margins>,
    pub contacts: Option<Contacts>,
}

impl OracleOutcome {
    const FAIL: Self = Self {
        robust: false,
        quality: 0.0,
        margins: None,
        contacts: None,
    };
}

/// Where the jaws of a gripper at `origin` with axis `u` and half opening
/// `half` (pixels) first meet material at height `z`.
pub fn find_contacts(
    placed: &[PlacedPart],
    origin: (f64, f64),
    u: (f64, f64),
    half: f64,
    z: f64,
) -> Option<Contacts> {
    let mut left: Option<(f64, (f64, f64), f64)> = None;
    let mut right: Option<(f64, (f64, f64), f64)> = None;
    for p in placed.iter().filter(|p| p.height > z) {
        let Some(ch) = p.chord(origin, u) else {
            continue;
        };
        if ch.t_out <= -half || ch.t_in >= half {
            continue;
        }
        if left.is_none_or(|l| ch.t_in < l.0) {
            left = Some((ch.t_in, ch.n_in, p.height));
        }
        if right.is_none_or(|r| ch.t_out > r.0) {
            right = Some((ch.t_out, ch.n_out, p.height));
        }
    }
    let (l, r) = (left?, right?);
    Some(Contacts {
        t_left: l.0,
        t_right: r.0,
        n_left: l.1,
        n_right: r.1,
        h_left: l.2,
        h_right: r.2,
    })
}

pub fn oracle_detail(
    shape: &PrimitiveShape,
    meta: &ImageMeta,
    g: &GraspConfig,
    cfg: &OracleConfig,
) -> OracleOutcome {
    oracle_placed(&shape.place(meta), meta, g, cfg)
}

pub fn oracle_placed(
    placed: &[PlacedPart],
    meta: &ImageMeta,
    g: &GraspConfig,
    cfg: &OracleConfig,
) -> OracleOutcome {
    if g.validate().is_err() || g.z < 0.0 {
        return OracleOutcome::FAIL;
    }
    let u = g.axis();
    let half = 0.5 * g.w / meta.pixel_scale;
    let Some(c) = find_contacts(placed, (g.x, g.y), u, half, g.z) else {
        return OracleOutcome::FAIL;
    };
    let cos_l = -(c.n_left.0 * u.0 + c.n_left.1 * u.1);
    let cos_r = c.n_right.0 * u.0 + c.n_right.1 * u.1;
    let angle = cos_l
        .clamp(-1.0, 1.0)
        .acos()
        .max(cos_r.clamp(-1.0, 1.0).acos());
    let sep = (c.t_right - c.t_left) * meta.pixel_scale;
    let gap = (c.t_left + half).min(half - c.t_right) * meta.pixel_scale;
    let tol = cfg.contact_tolerance;
    let m = Margins {
        friction: 1.0 - angle / cfg.cone_half_angle(),
        opening: 1.0 - sep / cfg.max_opening,
        clearance: ((gap - tol) / tol).min(1.0),
        depth: ((c.h_left.min(c.h_right) - g.z - cfg.clearance_depth) / cfg.clearance_depth)
            .min(1.0),
    };
    let q = m.min();
    OracleOutcome {
        robust: q > 0.0,
        quality: q.clamp(0.0, 1.0),
        margins: Some(m),
        contacts: Some(c),
    }
}

/// `(robust, quality)` for a grasp on a shape.
pub fn oracle_eval(
    shape: &PrimitiveShape,
    meta: &ImageMeta,
    g: &GraspConfig,
    cfg: &OracleConfig,
) -> (bool, f64) {
    let o = oracle_detail(shape, meta, g, cfg);
    (o.robust, o.quality)
}
