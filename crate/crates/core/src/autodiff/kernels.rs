//! Raw numeric kernels shared by the graph ops. Everything here works on
//! flat row-major slices.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aik * bv);
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + kk] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            orow.iter_mut()
                .zip(brow)
                .for_each(|(o, &bv)| *o += aik * bv);
        }
    }
}

/// Convolution padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split evenly with the
    /// extra pixel at the bottom/right.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 {
            return None;
        }
        let (out_h, pad_top) = extent(height, kernel, stride, padding)?;
        let (out_w, pad_left) = extent(width, kernel, stride, padding)?;
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn extent(size: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if size < kernel {
                return None;
            }
            Some(((size - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = size.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(size);
            Some((out, needed / 2))
        }
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let ncols = g.cols();
    let mut cols = vec![0.0; g.rows() * ncols];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_acc(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let row = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[row + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear lookup in a `height × width` plane at fractional pixel
/// coordinates; neighbours outside the plane read as `background`.
/// Returns the interpolated value and its partial derivatives with respect to
/// `px` and `py`.
#[inline]
pub(crate) fn bilinear_at(
    img: &[f64],
    height: usize,
    width: usize,
    px: f64,
    py: f64,
    background: f64,
) -> (f64, f64, f64) {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let fetch = |x: i64, y: i64| -> f64 {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            img[y as usize * width + x as usize]
        } else {
            background
        }
    };
    let v00 = fetch(x0, y0);
    let v10 = fetch(x0 + 1, y0);
    let v01 = fetch(x0, y0 + 1);
    let v11 = fetch(x0 + 1, y0 + 1);
    let value = (1.0 - fx) * (1.0 - fy) * v00
        + fx * (1.0 - fy) * v10
        + (1.0 - fx) * fy * v01
        + fx * fy * v11;
    let dx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
    let dy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
    (value, dx, dy)
}

/// Maps a normalized coordinate in `[-1, 1]` to a pixel coordinate where
/// `-1` and `1` are the centers of the first and last pixels. Coordinates
/// within 1e-10 px of an integer snap onto it so that identity sampling
/// reproduces the source exactly.
#[inline]
pub fn normalized_to_pixel(u: f64, extent: usize) -> f64 {
    if extent <= 1 {
        return 0.0;
    }
    let p = (u + 1.0) * 0.5 * (extent - 1) as f64;
    let r = p.round();
    if (p - r).abs() < 1e-10 {
        r
    } else {
        p
    }
}

/// Inverse of [`normalized_to_pixel`] (without snapping).
#[inline]
pub fn pixel_to_normalized(p: f64, extent: usize) -> f64 {
    if extent <= 1 {
        return 0.0;
    }
    2.0 * p / (extent - 1) as f64 - 1.0
}
