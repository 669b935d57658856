//! Spatial-transformer machinery: constrained affine parameterisations,
//! grid generation, bilinear sampling and the localization head mappings.
//!
//! Coordinates live in normalized image space `[-1, 1]²` with `(-1, -1)` at
//! the top-left pixel center and `y` pointing down. A translation parameter
//! `x ∈ [-0.5, 0.5]` moves the sampling window by `2x` normalized units, so
//! `±0.5` reaches the image borders.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffineKind {
    Translation,
    Rotation,
    Scale,
}

/// A 2×3 matrix acting on homogeneous normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix(pub [[f64; 3]; 2]);

impl AffineMatrix {
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    /// `self ∘ rhs`: first apply `rhs`, then `self`.
    pub fn compose(&self, rhs: &Self) -> Self {
        let (a, b) = (&self.0, &rhs.0);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] += a[r][2];
        }
        Self(m)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn flat(&self) -> [f64; 6] {
        let m = &self.0;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]]
    }
}

/// One constrained stage transform together with the raw scalars that
/// generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    kind: AffineKind,
    matrix: [[f64; 3]; 2],
    raw: Vec<f64>,
}

impl AffineParams {
    /// `[[1, 0, x], [0, 1, y]]` with `x, y ∈ [-0.5, 0.5]`.
    pub fn translation(x: f64, y: f64) -> Result<Self> {
        if !(-0.5..=0.5).contains(&x) || !(-0.5..=0.5).contains(&y) {
            return Err(Error::Invalid(format!(
                "translation ({x}, {y}) outside [-0.5, 0.5]"
            )));
        }
        Ok(Self {
            kind: AffineKind::Translation,
            matrix: [[1.0, 0.0, x], [0.0, 1.0, y]],
            raw: vec![x, y],
        })
    }

    /// Rotation by `theta ∈ (-π/2, π/2]`.
    pub fn rotation(theta: f64) -> Result<Self> {
        use std::f64::consts::FRAC_PI_2;
        if !(theta > -FRAC_PI_2 && theta <= FRAC_PI_2) {
            return Err(Error::Invalid(format!(
                "rotation {theta} outside (-pi/2, pi/2]"
            )));
        }
        let (s, c) = theta.sin_cos();
        Ok(Self {
            kind: AffineKind::Rotation,
            matrix: [[c, -s, 0.0], [s, c, 0.0]],
            raw: vec![theta],
        })
    }

    /// Isotropic scale `s > 0`.
    pub fn scale(s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Invalid(format!("scale {s} must be positive")));
        }
        Ok(Self {
            kind: AffineKind::Scale,
            matrix: [[s, 0.0, 0.0], [0.0, s, 0.0]],
            raw: vec![s],
        })
    }

    pub fn kind(&self) -> AffineKind {
        self.kind
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.matrix
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// The matrix as applied to normalized coordinates (translation column
    /// doubled).
    pub fn normalized(&self) -> AffineMatrix {
        let mut m = self.matrix;
        if self.kind == AffineKind::Translation {
            m[0][2] *= 2.0;
            m[1][2] *= 2.0;
        }
        AffineMatrix(m)
    }
}

/// Raw localization-network outputs of the three stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadOutputs {
    pub w_x: f64,
    pub w_y: f64,
    pub w_alpha: f64,
    pub w_beta: f64,
    pub w_s: f64,
    pub w_z: f64,
}

impl HeadOutputs {
    pub fn is_finite(&self) -> bool {
        [
            self.w_x,
            self.w_y,
            self.w_alpha,
            self.w_beta,
            self.w_s,
            self.w_z,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Training-set statistics used by the heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Mean scale factor of positive grasps.
    pub gamma: f64,
    pub z_mean: f64,
    pub z_std: f64,
}

impl DatasetStats {
    pub fn new(gamma: f64, z_mean: f64, z_std: f64) -> Result<Self> {
        let s = Self {
            gamma,
            z_mean,
            z_std,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.z_std > 0.0) || !self.z_mean.is_finite() {
            return Err(Error::Invalid(format!("invalid dataset stats {self:?}")));
        }
        Ok(())
    }

    pub fn normalize_z(&self, z: f64) -> f64 {
        (z - self.z_mean) / self.z_std
    }

    pub fn denormalize_z(&self, z: f64) -> f64 {
        self.z_mean + self.z_std * z
    }
}

/// How the rotation head maps raw outputs onto (α, β).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMapping {
    /// `2σ(w) − 1`, covering the full `(-π/2, π/2]` angle range.
    #[default]
    Signed,
    /// `σ(w)`, which confines θ to `(0, π/4)`.
    Literal,
}

impl RotationMapping {
    pub fn map(self, w: f64) -> f64 {
        match self {
            RotationMapping::Signed => 2.0 * sigmoid(w) - 1.0,
            RotationMapping::Literal => sigmoid(w),
        }
    }

    /// Raw output producing `v`; `v` must lie in the mapping's open range.
    pub fn inverse(self, v: f64) -> f64 {
        let p = match self {
            RotationMapping::Signed => (v + 1.0) / 2.0,
            RotationMapping::Literal => v,
        };
        (p / (1.0 - p)).ln()
    }

    fn map_var(self, g: &mut Graph, w: Var) -> Var {
        let s = g.sigmoid(w);
        match self {
            RotationMapping::Signed => {
                let two = g.scale(s, 2.0);
                g.offset(two, -1.0)
            }
            RotationMapping::Literal => s,
        }
    }
}

pub fn head_translation(w_x: f64, w_y: f64) -> (f64, f64) {
    (sigmoid(w_x) - 0.5, sigmoid(w_y) - 0.5)
}

pub fn head_rotation(w_alpha: f64, w_beta: f64, mapping: RotationMapping) -> f64 {
    let (a, b) = (mapping.map(w_alpha), mapping.map(w_beta));
    if a == 0.0 && b == 0.0 {
        0.0
    } else {
        a.atan2(b) / 2.0
    }
}

pub fn head_scale_z(w_s: f64, w_z: f64, stats: &DatasetStats) -> (f64, f64) {
    (stats.gamma * w_s.exp(), w_z)
}

/// Differentiable head mappings recorded on a graph.
pub mod heads {
    use super::*;

    pub fn translation(g: &mut Graph, w_x: Var, w_y: Var) -> (Var, Var) {
        let sx = g.sigmoid(w_x);
        let sy = g.sigmoid(w_y);
        (g.offset(sx, -0.5), g.offset(sy, -0.5))
    }

    /// Returns `(α, β, θ)`.
    pub fn rotation(
        g: &mut Graph,
        w_alpha: Var,
        w_beta: Var,
        mapping: RotationMapping,
    ) -> Result<(Var, Var, Var)> {
        let a = mapping.map_var(g, w_alpha);
        let b = mapping.map_var(g, w_beta);
        let two_theta = g.atan2(a, b)?;
        Ok((a, b, g.scale(two_theta, 0.5)))
    }

    pub fn scale(g: &mut Graph, w_s: Var, gamma: f64) -> Var {
        let e = g.exp(w_s);
        g.scale(e, gamma)
    }

    /// `[2, 3]` normalized-space matrix for a translation `(x, y)`.
    pub fn translation_theta(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
        let one = g.scalar(1.0);
        let zero = g.scalar(0.0);
        let tx = g.scale(x, 2.0);
        let ty = g.scale(y, 2.0);
        let v = g.stack(&[one, zero, tx, zero, one, ty])?;
        g.reshape(v, &[2, 3])
    }

    pub fn rotation_theta(g: &mut Graph, theta: Var) -> Result<Var> {
        let c = g.cos(theta);
        let s = g.sin(theta);
        let ns = g.neg(s);
        let zero = g.scalar(0.0);
        let v = g.stack(&[c, ns, zero, s, c, zero])?;
        g.reshape(v, &[2, 3])
    }

    pub fn scale_theta(g: &mut Graph, s: Var) -> Result<Var> {
        let zero = g.scalar(0.0);
        let v = g.stack(&[s, zero, zero, zero, s, zero])?;
        g.reshape(v, &[2, 3])
    }

    /// `[2, 3]` product `a ∘ b` of two recorded matrices.
    pub fn compose(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        // Lift b to 3×3 by appending the homogeneous row.
        let row = g.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0])?);
        let b3 = g.concat(&[b, row])?;
        g.matmul(a, b3)
    }

    pub fn constant_theta(g: &mut Graph, m: &AffineMatrix) -> Var {
        g.constant(Tensor::new(vec![2, 3], m.flat().to_vec()).expect("2x3"))
    }
}

/// Source positions for every output pixel, `[out_h, out_w, 2]` in
/// normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub out_h: usize,
    pub out_w: usize,
    pub coords: Vec<f64>,
}

impl SamplingGrid {
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let k = (i * self.out_w + j) * 2;
        (self.coords[k], self.coords[k + 1])
    }

    fn tensor(&self) -> Tensor {
        Tensor::new(vec![self.out_h, self.out_w, 2], self.coords.clone()).expect("grid shape")
    }
}

pub fn affine_grid_matrix(m: &AffineMatrix, out_h: usize, out_w: usize) -> Result<SamplingGrid> {
    let mut g = Graph::new();
    let th = heads::constant_theta(&mut g, m);
    let grid = g.affine_grid(th, out_h, out_w)?;
    Ok(SamplingGrid {
        out_h,
        out_w,
        coords: g.data(grid).to_vec(),
    })
}

pub fn affine_grid(params: &AffineParams, out_h: usize, out_w: usize) -> Result<SamplingGrid> {
    affine_grid_matrix(&params.normalized(), out_h, out_w)
}

/// Bilinear sampling of an `[H, W]` image; out-of-image taps read
/// `background`.
pub fn bilinear_sample(image: &Tensor, grid: &SamplingGrid, background: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let im = g.constant(image.clone());
    let gr = g.constant(grid.tensor());
    let out = g.bilinear_sample(im, gr, background)?;
    Ok(g.value(out).clone())
}

/// Samples `image` through a recorded `[2, 3]` matrix.
pub fn sample_stage(
    g: &mut Graph,
    image: Var,
    theta: Var,
    out_h: usize,
    out_w: usize,
    background: f64,
) -> Result<Var> {
    let grid = g.affine_grid(theta, out_h, out_w)?;
    g.bilinear_sample(image, grid, background)
}

/// The single normalized-space matrix of translation, then rotation, then
/// scale sampling.
pub fn compose_cascade(
    t: &AffineParams,
    r: &AffineParams,
    c: &AffineParams,
) -> Result<AffineMatrix> {
    for (p, want) in [
        (t, AffineKind::Translation),
        (r, AffineKind::Rotation),
        (c, AffineKind::Scale),
    ] {
        if p.kind() != want {
            return Err(Error::Invalid(format!(
                "cascade expects {want:?}, got {:?}",
                p.kind()
            )));
        }
    }
    Ok(t.normalized()
        .compose(&r.normalized())
        .compose(&c.normalized()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_inputs;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_8, PI};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn translation_head() {
        assert_eq!(head_translation(0.0, 0.0), (0.0, 0.0));
        let (x, y) = head_translation(60.0, -60.0);
        close(x, 0.5, 1e-12);
        close(y, -0.5, 1e-12);
        let (x, y) = head_translation(1.0, -1.0);
        close(x, 0.23106, 1e-5);
        close(y, -0.23106, 1e-5);
    }

    #[test]
    fn rotation_head() {
        let m = RotationMapping::Signed;
        close(head_rotation(0.0, 40.0, m), 0.0, 1e-12);
        // α → 1, β → 0 in the limit
        close(head_rotation(60.0, 0.0, m), FRAC_PI_4, 1e-12);
        let a = m.map(2.0);
        close(a, 0.76159, 1e-5);
        close(head_rotation(2.0, 2.0, m), FRAC_PI_8, 1e-6);
        assert_eq!(head_rotation(0.0, 0.0, m), 0.0);
        // literal mapping confines θ to (0, π/4)
        for w in [-5.0, -1.0, 0.0, 3.0] {
            let th = head_rotation(w, -w, RotationMapping::Literal);
            assert!(th > 0.0 && th < FRAC_PI_4);
        }
    }

    #[test]
    fn rotation_head_guards_origin_gradient() {
        let mut g = Graph::new();
        let wa = g.leaf(Tensor::scalar(0.0).requiring_grad());
        let wb = g.leaf(Tensor::scalar(0.0).requiring_grad());
        let (_, _, th) = heads::rotation(&mut g, wa, wb, RotationMapping::Signed).unwrap();
        assert_eq!(g.item(th), 0.0);
        g.backward(th).unwrap();
        assert_eq!(g.grad(wa).unwrap(), &[0.0]);
    }

    #[test]
    fn scale_head() {
        let stats = DatasetStats::new(0.3, 0.0, 1.0).unwrap();
        close(head_scale_z(0.0, 0.1, &stats).0, 0.3, 1e-15);
        close(head_scale_z(2f64.ln(), 0.0, &stats).0, 0.6, 1e-15);
        close(head_scale_z(-0.5, 0.0, &stats).0, 0.18196, 1e-5);
        assert_eq!(head_scale_z(1.0, 0.7, &stats).1, 0.7);
    }

    #[test]
    fn heads_are_monotone() {
        let xs: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.5).collect();
        let stats = DatasetStats::new(0.4, 0.0, 1.0).unwrap();
        for w in xs.windows(2) {
            assert!(head_translation(w[1], 0.0).0 > head_translation(w[0], 0.0).0);
            assert!(head_scale_z(w[1], 0.0, &stats).0 > head_scale_z(w[0], 0.0, &stats).0);
        }
    }

    #[test]
    fn param_invariants() {
        assert!(AffineParams::translation(0.6, 0.0).is_err());
        assert!(AffineParams::rotation(-FRAC_PI_2).is_err());
        assert!(AffineParams::rotation(FRAC_PI_2).is_ok());
        assert!(AffineParams::scale(0.0).is_err());
        let t = AffineParams::translation(0.1, -0.2).unwrap();
        assert_eq!(t.matrix(), [[1.0, 0.0, 0.1], [0.0, 1.0, -0.2]]);
        assert_eq!(t.normalized().0, [[1.0, 0.0, 0.2], [0.0, 1.0, -0.4]]);
    }

    #[test]
    fn identity_grid_is_mesh() {
        let grid = affine_grid_matrix(&AffineMatrix::IDENTITY, 4, 5).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let (x, y) = grid.at(i, j);
                close(x, -1.0 + 2.0 * j as f64 / 4.0, 1e-15);
                close(y, -1.0 + 2.0 * i as f64 / 3.0, 1e-15);
            }
        }
    }

    #[test]
    fn translation_shifts_by_quarter_extent() {
        // x = 0.25 → +0.5 normalized → 0.5 · (W−1)/2 pixels
        let t = AffineParams::translation(0.25, 0.0).unwrap();
        let grid = affine_grid(&t, 224, 224).unwrap();
        let id = affine_grid_matrix(&AffineMatrix::IDENTITY, 224, 224).unwrap();
        for j in [0, 100, 223] {
            let px = crate::autodiff::normalized_to_pixel(grid.at(5, j).0, 224);
            let p0 = crate::autodiff::normalized_to_pixel(id.at(5, j).0, 224);
            close(px - p0, 55.75, 1e-9);
        }
    }

    #[test]
    fn rotation_grid_applies_matrix() {
        let r = AffineParams::rotation(FRAC_PI_2).unwrap();
        let grid = affine_grid(&r, 3, 3).unwrap();
        // (x_t, y_t) → (−y_t, x_t)
        for i in 0..3 {
            for j in 0..3 {
                let (xt, yt) = (j as f64 - 1.0, i as f64 - 1.0);
                let (x, y) = grid.at(i, j);
                close(x, -yt, 1e-12);
                close(y, xt, 1e-12);
            }
        }
    }

    #[test]
    fn integer_translation_is_exact_shift() {
        let (h, w) = (9, 9);
        let img = Tensor::new(
            vec![h, w],
            (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        // 2 px right: normalized offset 2·2/(w−1) = 0.5 → x = 0.25
        let t = AffineParams::translation(0.25, -0.125).unwrap();
        let out = bilinear_sample(&img, &affine_grid(&t, h, w).unwrap(), -3.0).unwrap();
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = (i as isize - 1, j as isize + 2);
                let expect = if si >= 0 && sj < w as isize {
                    img.data()[si as usize * w + sj as usize]
                } else {
                    -3.0
                };
                assert_eq!(out.data()[i * w + j], expect);
            }
        }
    }

    #[test]
    fn sampling_is_linear_in_image() {
        let (h, w) = (7, 8);
        let i1: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.3).cos()).collect();
        let i2: Vec<f64> = (0..h * w).map(|i| (i as f64 * 1.1).sin()).collect();
        let m = AffineParams::translation(0.07, 0.11)
            .unwrap()
            .normalized()
            .compose(&AffineParams::rotation(0.4).unwrap().normalized())
            .compose(&AffineParams::scale(0.6).unwrap().normalized());
        let grid = affine_grid_matrix(&m, 5, 5).unwrap();
        let (a, b) = (0.5, -2.0);
        let mix: Vec<f64> = i1.iter().zip(&i2).map(|(x, y)| a * x + b * y).collect();
        let s = |d: &[f64]| {
            bilinear_sample(&Tensor::new(vec![h, w], d.to_vec()).unwrap(), &grid, 0.0).unwrap()
        };
        let (o1, o2, om) = (s(&i1), s(&i2), s(&mix));
        for k in 0..25 {
            close(om.data()[k], a * o1.data()[k] + b * o2.data()[k], 1e-14);
        }
    }

    #[test]
    fn cascade_composition() {
        let t = AffineParams::translation(0.0, 0.0).unwrap();
        let r = AffineParams::rotation(0.0).unwrap();
        let c = AffineParams::scale(1.0).unwrap();
        assert_eq!(compose_cascade(&t, &r, &c).unwrap(), AffineMatrix::IDENTITY);
        let t1 = AffineParams::translation(0.1, 0.0).unwrap();
        assert_eq!(
            compose_cascade(&t1, &r, &c).unwrap(),
            AffineMatrix([[1.0, 0.0, 0.2], [0.0, 1.0, 0.0]])
        );
        assert!(compose_cascade(&r, &t, &c).is_err());

        let t = AffineParams::translation(0.13, -0.21).unwrap();
        let r = AffineParams::rotation(0.7).unwrap();
        let c = AffineParams::scale(0.45).unwrap();
        let m = compose_cascade(&t, &r, &c).unwrap();
        // product of the three stage matrices, written out by hand
        let (s, co) = 0.7f64.sin_cos();
        let expect = [[0.45 * co, -0.45 * s, 0.26], [0.45 * s, 0.45 * co, -0.42]];
        for r in 0..2 {
            for c in 0..3 {
                close(m.0[r][c], expect[r][c], 1e-15);
            }
        }
    }

    #[test]
    fn recorded_compose_matches_plain() {
        let mut g = Graph::new();
        let a = AffineMatrix([[0.3, -0.2, 0.1], [0.5, 0.9, -0.4]]);
        let b = AffineMatrix([[1.1, 0.4, -0.3], [-0.6, 0.2, 0.7]]);
        let av = heads::constant_theta(&mut g, &a);
        let bv = heads::constant_theta(&mut g, &b);
        let c = heads::compose(&mut g, av, bv).unwrap();
        let expect = a.compose(&b).flat();
        for (x, y) in g.data(c).iter().zip(expect) {
            close(*x, y, 1e-15);
        }
    }

    #[test]
    fn half_turn_symmetry_of_crop() {
        // An image symmetric under a half turn about its center gives the
        // same crop for θ and θ − π (the canonical representative of θ + π).
        let n = 21;
        let mut img = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (y, x) = (i as f64 - 10.0, j as f64 - 10.0);
                img[i * n + j] = (x * 0.3).cos() * (y * 0.5).cos() + 0.1 * x * y;
            }
        }
        let img = Tensor::new(vec![n, n], img).unwrap();
        for th in [0.3, 1.2] {
            let crop = |t: f64| {
                let (sn, cs) = t.sin_cos();
                let m = AffineMatrix([[cs, -sn, 0.0], [sn, cs, 0.0]])
                    .compose(&AffineParams::scale(0.5).unwrap().normalized());
                let grid = affine_grid_matrix(&m, 32, 32).unwrap();
                bilinear_sample(&img, &grid, 0.0).unwrap()
            };
            let (a, b) = (crop(th), crop(th - PI));
            for (x, y) in a.data().iter().zip(b.data()) {
                close(*x, *y, 1e-9);
            }
        }
    }

    #[test]
    fn sampler_gradients_wrt_stage_params() {
        let (h, w) = (9, 10);
        let img = Tensor::new(
            vec![h, w],
            (0..h * w)
                .map(|i| (i as f64 * 0.37).sin() + 0.01 * i as f64)
                .collect(),
        )
        .unwrap();
        let params = Tensor::vector(vec![0.09, -0.13, 0.31, 0.63]);
        let r = grad_check_inputs(
            |g, v| {
                let p = v[1];
                let (x, y, th, s) = (
                    g.index(p, 0)?,
                    g.index(p, 1)?,
                    g.index(p, 2)?,
                    g.index(p, 3)?,
                );
                let tt = heads::translation_theta(g, x, y)?;
                let rt = heads::rotation_theta(g, th)?;
                let st = heads::scale_theta(g, s)?;
                let m = heads::compose(g, tt, rt)?;
                let m = heads::compose(g, m, st)?;
                let out = sample_stage(g, v[0], m, 6, 6, 0.2)?;
                let sq = g.square(out);
                Ok(g.sum(sq))
            },
            &[img, params],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
