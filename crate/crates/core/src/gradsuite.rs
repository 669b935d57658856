//! Seeded finite-difference checks of every differentiable operation, the
//! constrained sampler parameters and the classifier's input gradients.
//!
//! Each case reduces the op output to a scalar with a fixed random weighting
//! so that every output element contributes. Cases that would place a
//! finite-difference probe across a kink (ReLU at 0, ties in max pooling,
//! integer sampling positions) are redrawn.

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{
    grad_check_inputs, relative_error, CheckReport, Graph, Offender, Padding, Tensor, Var,
};
use crate::error::Result;
use crate::graspgeom::CROP_SIZE;
use crate::quality::{self, QualityModel};
use crate::rng::{self, Rng};
use crate::stn::heads;

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_CASES: usize = 100;
/// Finite-difference step.
pub const EPS: f64 = 1e-6;
/// Smallest distance from a kink accepted for a drawn case.
const KINK_MARGIN: f64 = 1e-3;

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    f: Objective,
    /// Coordinates whose probe straddles a kink are skipped instead of the
    /// whole case being redrawn.
    piecewise_linear: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OpResult {
    pub op: String,
    pub cases: usize,
    pub checked: usize,
    pub passed: bool,
    pub max_rel_err: f64,
    /// Coordinates excluded because their probe straddles a kink.
    pub kinked: usize,
    /// Case index and the worst element.
    pub worst: Option<(usize, Offender)>,
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Values in `±[margin, hi)`.
fn away_from_zero(r: &mut Rng, shape: &[usize], hi: f64) -> Tensor {
    let mut t = uniform(r, shape, KINK_MARGIN * 10.0, hi);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ w ⊙ out` for a fixed random `w` of the output's shape.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w.clone());
    let m = g.mul(out, c)?;
    Ok(g.sum(m))
}

/// Wraps an op so that its output is reduced with a weighting drawn from
/// `r` on first sight of its shape.
fn reduce_with(
    r: &mut Rng,
    out_shape: &[usize],
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Objective {
    let w = uniform(r, out_shape, -1.0, 1.0);
    Box::new(move |g, v| {
        let out = op(g, v)?;
        weighted(g, out, &w)
    })
}

fn unary(r: &mut Rng, x: Tensor, op: fn(&mut Graph, Var) -> Var) -> Case {
    let shape = x.shape().to_vec();
    Case {
        piecewise_linear: false,
        inputs: vec![x],
        f: reduce_with(r, &shape, move |g, v| Ok(op(g, v[0]))),
    }
}

fn fractional_ok(p: f64) -> bool {
    let f = p - p.floor();
    f > KINK_MARGIN && f < 1.0 - KINK_MARGIN
}

/// Whether every grid position of `theta` lies away from integer pixel
/// coordinates of an `h × w` image.
fn grid_is_smooth(theta: &[f64], out: usize, h: usize, w: usize) -> bool {
    let mut g = Graph::new();
    let t = g.constant(Tensor::new(vec![2, 3], theta.to_vec()).expect("2x3"));
    let grid = g.affine_grid(t, out, out).expect("grid");
    g.data(grid).chunks(2).all(|p| {
        fractional_ok(crate::autodiff::normalized_to_pixel(p[0], w))
            && fractional_ok(crate::autodiff::normalized_to_pixel(p[1], h))
    })
}

/// `(x, y, θ, s)` with every sampled position away from pixel centers.
fn smooth_cascade(r: &mut Rng, img: usize, out: usize) -> [f64; 4] {
    loop {
        let p = [
            r.random_range(-0.3..0.3),
            r.random_range(-0.3..0.3),
            r.random_range(-1.5..1.5),
            r.random_range(0.2..0.9),
        ];
        let m = cascade_matrix(p);
        if grid_is_smooth(&m, out, img, img) {
            return p;
        }
    }
}

fn cascade_matrix(p: [f64; 4]) -> Vec<f64> {
    let (s, c) = p[2].sin_cos();
    let k = p[3];
    vec![k * c, -k * s, 2.0 * p[0], k * s, k * c, 2.0 * p[1]]
}

/// Crop of `image` through the recorded translation, rotation and scale.
fn cascade_sample(
    g: &mut Graph,
    image: Var,
    x: Var,
    y: Var,
    theta: Var,
    s: Var,
    out: usize,
) -> Result<Var> {
    let t = heads::translation_theta(g, x, y)?;
    let rm = heads::rotation_theta(g, theta)?;
    let sm = heads::scale_theta(g, s)?;
    let tr = heads::compose(g, t, rm)?;
    let m = heads::compose(g, tr, sm)?;
    crate::stn::sample_stage(g, image, m, out, out, 0.0)
}

const SAMPLER_IMG: usize = 12;
const SAMPLER_OUT: usize = 6;

/// A sampler case differentiating with respect to input `which` (0 image,
/// 1..=4 the cascade parameters) while the others are constants.
fn sampler_case(r: &mut Rng, which: usize) -> Case {
    let p = smooth_cascade(r, SAMPLER_IMG, SAMPLER_OUT);
    let img = uniform(r, &[SAMPLER_IMG, SAMPLER_IMG], -1.0, 0.2);
    let all: Vec<Tensor> = std::iter::once(img)
        .chain(p.iter().map(|&v| Tensor::scalar(v)))
        .collect();
    let fixed = all.clone();
    let op = move |g: &mut Graph, v: &[Var]| {
        let vars: Vec<Var> = (0..5)
            .map(|i| {
                if i == which {
                    v[0]
                } else {
                    g.constant(fixed[i].clone())
                }
            })
            .collect();
        cascade_sample(g, vars[0], vars[1], vars[2], vars[3], vars[4], SAMPLER_OUT)
    };
    Case {
        piecewise_linear: false,
        inputs: vec![all[which].clone()],
        f: reduce_with(r, &[SAMPLER_OUT, SAMPLER_OUT], op),
    }
}

fn classifier_case(r: &mut Rng, model: &std::rc::Rc<QualityModel>) -> Case {
    let crop = uniform(r, &[CROP_SIZE, CROP_SIZE], -0.05, 0.0);
    let z = Tensor::scalar(r.random_range(0.0..0.04));
    let m = model.clone();
    Case {
        piecewise_linear: true,
        inputs: vec![crop, z],
        f: Box::new(move |g, v| {
            let p = m.bind(g, false)?;
            m.logit_var(g, &p, v[0], v[1])
        }),
    }
}

fn conv_case(r: &mut Rng) -> Case {
    let c = r.random_range(1..3);
    let o = r.random_range(1..4);
    let (h, w) = (r.random_range(3..7), r.random_range(3..7));
    let stride = r.random_range(1..3);
    let padding = if r.random_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    };
    let bias = r.random_bool(0.5);
    let x = uniform(r, &[c, h, w], -1.0, 1.0);
    let k = uniform(r, &[o, c, 3, 3], -1.0, 1.0);
    let mut inputs = vec![x, k];
    if bias {
        inputs.push(uniform(r, &[o], -1.0, 1.0));
    }
    let out_shape = {
        let mut g = Graph::new();
        let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = g
            .conv2d(v[0], v[1], v.get(2).copied(), stride, padding)
            .expect("conv shape");
        g.shape(y).to_vec()
    };
    Case {
        piecewise_linear: false,
        inputs,
        f: reduce_with(r, &out_shape, move |g, v| {
            g.conv2d(v[0], v[1], v.get(2).copied(), stride, padding)
        }),
    }
}

fn max_pool_case(r: &mut Rng) -> Case {
    let (c, h, w) = (
        r.random_range(1..3),
        r.random_range(4..7),
        r.random_range(4..7),
    );
    let n = c * h * w;
    // Distinct values spaced well beyond the probe step.
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(vec![c, h, w], vals).expect("shape");
    let (k, s) = if r.random_bool(0.5) { (2, 2) } else { (3, 1) };
    let out = vec![c, (h - k) / s + 1, (w - k) / s + 1];
    Case {
        piecewise_linear: false,
        inputs: vec![x],
        f: reduce_with(r, &out, move |g, v| g.max_pool2d(v[0], k, s)),
    }
}

fn binary_case(r: &mut Rng, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    // Same shapes, or a broadcast of a row, column or scalar.
    let (m, n) = (r.random_range(1..4), r.random_range(1..5));
    let b_shape = match r.random_range(0..4) {
        0 => vec![m, n],
        1 => vec![1, n],
        2 => vec![m, 1],
        _ => vec![],
    };
    let a = uniform(r, &[m, n], -2.0, 2.0);
    let b = uniform(r, &b_shape, -2.0, 2.0);
    let (a, b) = if r.random_bool(0.5) { (a, b) } else { (b, a) };
    Case {
        piecewise_linear: false,
        inputs: vec![a, b],
        f: reduce_with(r, &[m, n], move |g, v| op(g, v[0], v[1])),
    }
}

fn atan2_case(r: &mut Rng) -> Case {
    let n = r.random_range(1..6);
    let mut y = uniform(r, &[n], -1.0, 1.0);
    let x = uniform(r, &[n], -1.0, 1.0);
    // Keep away from the pole and from the branch cut on the negative x axis.
    for yv in y.data_mut() {
        if yv.abs() < 0.05 {
            *yv = 0.05f64.copysign(*yv);
        }
    }
    Case {
        piecewise_linear: false,
        inputs: vec![y, x],
        f: reduce_with(r, &[n], |g, v| g.atan2(v[0], v[1])),
    }
}

fn scalar_reduction(r: &mut Rng, op: fn(&mut Graph, Var) -> Var) -> Case {
    let shape = [r.random_range(1..4), r.random_range(1..5)];
    Case {
        piecewise_linear: false,
        inputs: vec![away_from_zero(r, &shape, 2.0)],
        f: Box::new(move |g, v| Ok(op(g, v[0]))),
    }
}

fn make_case(op: &str, r: &mut Rng, model: &std::rc::Rc<QualityModel>) -> Case {
    let vec_shape = |r: &mut Rng| vec![r.random_range(1..4), r.random_range(1..5)];
    match op {
        "add" => binary_case(r, Graph::add),
        "sub" => binary_case(r, Graph::sub),
        "mul" => binary_case(r, Graph::mul),
        "scale" => {
            let s = vec_shape(r);
            let c = r.random_range(-3.0..3.0);
            Case {
                piecewise_linear: false,
                f: reduce_with(r, &s, move |g, v| Ok(g.scale(v[0], c))),
                inputs: vec![uniform(r, &s, -2.0, 2.0)],
            }
        }
        "offset" => {
            let s = vec_shape(r);
            let c = r.random_range(-3.0..3.0);
            Case {
                piecewise_linear: false,
                f: reduce_with(r, &s, move |g, v| Ok(g.offset(v[0], c))),
                inputs: vec![uniform(r, &s, -2.0, 2.0)],
            }
        }
        "neg" => {
            let s = vec_shape(r);
            let x = uniform(r, &s, -2.0, 2.0);
            unary(r, x, Graph::neg)
        }
        "square" => {
            let s = vec_shape(r);
            let x = uniform(r, &s, -2.0, 2.0);
            unary(r, x, Graph::square)
        }
        "matmul" => {
            let (m, k, n) = (
                r.random_range(1..4),
                r.random_range(1..5),
                r.random_range(1..4),
            );
            Case {
                piecewise_linear: false,
                inputs: vec![
                    uniform(r, &[m, k], -1.0, 1.0),
                    uniform(r, &[k, n], -1.0, 1.0),
                ],
                f: reduce_with(r, &[m, n], |g, v| g.matmul(v[0], v[1])),
            }
        }
        "conv2d" => conv_case(r),
        "max_pool2d" => max_pool_case(r),
        "relu" => {
            let s = vec_shape(r);
            let x = away_from_zero(r, &s, 2.0);
            unary(r, x, Graph::relu)
        }
        "sigmoid" => {
            let s = vec_shape(r);
            let x = uniform(r, &s, -4.0, 4.0);
            unary(r, x, Graph::sigmoid)
        }
        "tanh" => {
            let s = vec_shape(r);
            let x = uniform(r, &s, -3.0, 3.0);
            unary(r, x, Graph::tanh)
        }
        "exp" => {
            let s = vec_shape(r);
            let x = uniform(r, &s, -2.0, 2.0);
            unary(r, x, Graph::exp)
        }
        "log" => {
            let s = vec_shape(r);
            let x = uniform(r, &s, 0.2, 3.0);
            unary(r, x, Graph::log)
        }
        "sin" => {
            let s = vec_shape(r);
            let x = uniform(r, &s, -4.0, 4.0);
            unary(r, x, Graph::sin)
        }
        "cos" => {
            let s = vec_shape(r);
            let x = uniform(r, &s, -4.0, 4.0);
            unary(r, x, Graph::cos)
        }
        "atan2" => atan2_case(r),
        "sum" => scalar_reduction(r, Graph::sum),
        "mean" => scalar_reduction(r, Graph::mean),
        "l2_norm" => scalar_reduction(r, Graph::l2_norm),
        "softmax" => {
            let s = vec_shape(r);
            let x = uniform(r, &s, -3.0, 3.0);
            unary(r, x, Graph::softmax)
        }
        "bce_with_logits" => {
            let n = r.random_range(1..6);
            let t: Vec<f64> = (0..n)
                .map(|_| {
                    if r.random_bool(0.3) {
                        r.random_range(0.0..1.0)
                    } else {
                        r.random_range(0..2) as f64
                    }
                })
                .collect();
            Case {
                piecewise_linear: false,
                inputs: vec![uniform(r, &[n], -5.0, 5.0)],
                f: Box::new(move |g, v| g.bce_with_logits(v[0], &t)),
            }
        }
        "reshape" => {
            let (a, b) = (r.random_range(1..4), r.random_range(1..4));
            Case {
                piecewise_linear: false,
                inputs: vec![uniform(r, &[a, b], -1.0, 1.0)],
                f: reduce_with(r, &[b, a], move |g, v| g.reshape(v[0], &[b, a])),
            }
        }
        "concat" => {
            let (a, b, n) = (
                r.random_range(1..3),
                r.random_range(1..3),
                r.random_range(1..4),
            );
            Case {
                piecewise_linear: false,
                inputs: vec![
                    uniform(r, &[a, n], -1.0, 1.0),
                    uniform(r, &[b, n], -1.0, 1.0),
                ],
                f: reduce_with(r, &[a + b, n], |g, v| g.concat(&[v[0], v[1]])),
            }
        }
        "index" => {
            let n = r.random_range(1..8);
            let i = r.random_range(0..n);
            Case {
                piecewise_linear: false,
                inputs: vec![uniform(r, &[n], -1.0, 1.0)],
                f: Box::new(move |g, v| {
                    let e = g.index(v[0], i)?;
                    Ok(g.square(e))
                }),
            }
        }
        "stack" => {
            let n = r.random_range(1..5);
            Case {
                piecewise_linear: false,
                inputs: (0..n)
                    .map(|_| Tensor::scalar(r.random_range(-1.0..1.0)))
                    .collect(),
                f: reduce_with(r, &[n], |g, v| g.stack(v)),
            }
        }
        "global_avg_pool" => {
            let (c, h, w) = (
                r.random_range(1..4),
                r.random_range(1..4),
                r.random_range(1..4),
            );
            Case {
                piecewise_linear: false,
                inputs: vec![uniform(r, &[c, h, w], -1.0, 1.0)],
                f: reduce_with(r, &[c], |g, v| g.global_avg_pool(v[0])),
            }
        }
        "affine_grid" => {
            let (h, w) = (r.random_range(1..5), r.random_range(1..5));
            Case {
                piecewise_linear: false,
                inputs: vec![uniform(r, &[2, 3], -1.0, 1.0)],
                f: reduce_with(r, &[h, w, 2], move |g, v| g.affine_grid(v[0], h, w)),
            }
        }
        "bilinear_sample" => {
            let (h, w) = (r.random_range(2..6), r.random_range(2..6));
            let (oh, ow) = (r.random_range(1..4), r.random_range(1..4));
            let mut grid = uniform(r, &[oh, ow, 2], -1.3, 1.3);
            for (k, v) in grid.data_mut().iter_mut().enumerate() {
                let size = if k % 2 == 0 { w } else { h };
                while !fractional_ok(crate::autodiff::normalized_to_pixel(*v, size)) {
                    *v += 0.01;
                }
            }
            let bg = r.random_range(-0.5..0.5);
            Case {
                piecewise_linear: false,
                inputs: vec![uniform(r, &[h, w], -1.0, 1.0), grid],
                f: reduce_with(r, &[oh, ow], move |g, v| g.bilinear_sample(v[0], v[1], bg)),
            }
        }
        "sampler.image" => sampler_case(r, 0),
        "sampler.x" => sampler_case(r, 1),
        "sampler.y" => sampler_case(r, 2),
        "sampler.theta" => sampler_case(r, 3),
        "sampler.s" => sampler_case(r, 4),
        "classifier.input" => classifier_case(r, model),
        other => unreachable!("unknown op {other}"),
    }
}

/// Every op set of the suite, in report order.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "offset",
    "neg",
    "square",
    "matmul",
    "conv2d",
    "max_pool2d",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sin",
    "cos",
    "atan2",
    "sum",
    "mean",
    "l2_norm",
    "softmax",
    "bce_with_logits",
    "reshape",
    "concat",
    "index",
    "stack",
    "global_avg_pool",
    "affine_grid",
    "bilinear_sample",
    "sampler.image",
    "sampler.x",
    "sampler.y",
    "sampler.theta",
    "sampler.s",
    "classifier.input",
];

/// A frozen classifier of the default architecture with seeded weights.
pub fn probe_classifier(seed: u64) -> Result<QualityModel> {
    let mut q = QualityModel::new(quality::default_backbone(), 0.7, 0.5, seed)?;
    q.freeze();
    Ok(q)
}

/// Runs `cases` seeded checks of each op whose name starts with one of
/// `filter` (all ops when empty).
pub fn run(cases: usize, seed: u64, tol: f64, filter: &[String]) -> Result<Vec<OpResult>> {
    let model = std::rc::Rc::new(probe_classifier(rng::derive(seed, 0))?);
    let mut out = Vec::new();
    for (k, &op) in OPS.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| op.starts_with(f.as_str())) {
            continue;
        }
        let mut res = OpResult {
            op: op.into(),
            cases,
            checked: 0,
            passed: true,
            max_rel_err: 0.0,
            kinked: 0,
            worst: None,
        };
        for c in 0..cases {
            let mut r = rng::rng(rng::derive_path(seed, &[k as u64 + 1, c as u64]));
            let case = make_case(op, &mut r, &model);
            let rep = if case.piecewise_linear {
                let (rep, kinked) = check_piecewise_linear(&case.f, &case.inputs, tol)?;
                res.kinked += kinked;
                rep
            } else {
                grad_check_inputs(&case.f, &case.inputs, EPS, tol)?
            };
            res.checked += rep.checked;
            if rep.max_rel_err > res.max_rel_err || res.worst.is_none() {
                res.max_rel_err = rep.max_rel_err;
                res.worst = rep.worst.map(|w| (c, w));
            }
        }
        res.passed = res.max_rel_err < tol;
        out.push(res);
    }
    Ok(out)
}

/// Central differences for a piecewise-linear `f`. A coordinate is compared
/// only when `f` is linear across its probe, i.e. the second difference
/// vanishes to rounding; the others are counted and skipped.
fn check_piecewise_linear(
    f: &Objective,
    inputs: &[Tensor],
    tol: f64,
) -> Result<(CheckReport, usize)> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().requiring_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.item(out);
    g.backward(out)?;
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        tol,
        passed: true,
        checked: 0,
    };
    let mut kinked = 0;
    let mut probe = inputs.to_vec();
    for (input, &var) in vars.iter().enumerate() {
        let analytic = g
            .grad(var)
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; inputs[input].numel()]);
        for (index, &a) in analytic.iter().enumerate() {
            let orig = inputs[input].data()[index];
            probe[input].data_mut()[index] = orig + EPS;
            let fp = eval(&probe)?;
            probe[input].data_mut()[index] = orig - EPS;
            let fm = eval(&probe)?;
            probe[input].data_mut()[index] = orig;
            if (fp - 2.0 * f0 + fm).abs() > 1e-12 * (1.0 + f0.abs()) {
                kinked += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * EPS);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if !(err <= report.max_rel_err) || report.worst.is_none() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some(Offender {
                    input,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok((report, kinked))
}
