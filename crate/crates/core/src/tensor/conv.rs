//! Convolution kernels. Dense and grouped convolutions go through
//! im2col + GEMM; depthwise convolutions use a direct loop.

use serde::{Deserialize, Serialize};

use super::{Element, Shape};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution (cross-correlation, no kernel flip).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel, one group, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: 0,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// `groups == in_channels == out_channels`.
    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec::new(channels, channels, kernel)
            .stride(stride)
            .padding(kernel / 2)
            .groups(channels)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad(format!(
                "channels must be positive ({} -> {})",
                self.in_channels, self.out_channels
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad("kernel extent must be positive".into());
        }
        if self.stride == 0 {
            return bad("stride must be >= 1".into());
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return bad(format!(
                "groups {} must divide in {} and out {} channels",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        )
    }

    /// `floor((size + 2·pad − k) / stride) + 1`, or `None` when the kernel
    /// does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel.0 || pw < self.kernel.1 {
            return None;
        }
        Some((
            (ph - self.kernel.0) / self.stride + 1,
            (pw - self.kernel.1) / self.stride + 1,
        ))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("{} input channels", self.in_channels),
                input,
            ));
        }
        match self.output_hw(input.h, input.w) {
            Some((oh, ow)) if oh > 0 && ow > 0 => Ok(Shape::new(input.n, self.out_channels, oh, ow)),
            _ => Err(Error::InvalidSpec(format!(
                "zero-sized output for input {input} with kernel {:?}, padding {}",
                self.kernel, self.padding
            ))),
        }
    }

    /// Trainable scalars: `out · in/groups · kh · kw (+ out)`.
    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for one forward pass (bias not counted).
    pub fn macs(&self, output: Shape) -> u64 {
        (self.weight_shape().numel() * output.n * output.plane()) as u64
    }
}

/// Column matrices hold row `r`, sample column block `off`, position `p`
/// at `r * ld + off + p`, so a whole batch can share one matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    (h, w): (usize, usize),
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    cols: &mut [T],
    ld: usize,
    off: usize,
) {
    let (kh, kw) = spec.kernel;
    let pad = spec.padding as isize;
    let s = spec.stride;
    let channels = x.len() / (h * w);
    let opl = oh * ow;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * ld + off..][..opl];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    (h, w): (usize, usize),
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    ld: usize,
    off: usize,
    dx: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let pad = spec.padding as isize;
    let s = spec.stride;
    let channels = dx.len() / (h * w);
    let opl = oh * ow;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * ld + off..][..opl];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == 1 && spec.padding == 0
}

/// Below this output plane size the batch is folded into the GEMM's column
/// dimension; per-sample products would be too skinny to run efficiently.
const MERGE_BELOW: usize = 256;

/// Geometry of a grouped, non-depthwise convolution.
struct Plan {
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    /// Reduction length `cin_g · kh · kw`.
    k: usize,
    opl: usize,
    /// Samples sharing one column matrix.
    batch: usize,
    pointwise: bool,
}

impl Plan {
    fn new(xs: Shape, spec: &ConvSpec, (oh, ow): (usize, usize)) -> Self {
        let opl = oh * ow;
        let cin_g = xs.c / spec.groups;
        Plan {
            groups: spec.groups,
            cin_g,
            cout_g: spec.out_channels / spec.groups,
            k: cin_g * spec.kernel.0 * spec.kernel.1,
            opl,
            batch: if opl < MERGE_BELOW { xs.n.max(1) } else { 1 },
            pointwise: is_pointwise(spec),
        }
    }

    fn ld(&self) -> usize {
        self.batch * self.opl
    }

    /// Fills `cols` with the column matrix of samples `n0..n0 + batch`,
    /// group `gi`.
    fn columns<T: Element>(&self, x: &[T], xs: Shape, spec: &ConvSpec, ohw: (usize, usize), n0: usize, gi: usize, cols: &mut [T]) {
        let ld = self.ld();
        for j in 0..self.batch {
            let xin = &x[((n0 + j) * xs.c + gi * self.cin_g) * xs.plane()..][..self.cin_g * xs.plane()];
            if self.pointwise {
                for r in 0..self.cin_g {
                    cols[r * ld + j * self.opl..][..self.opl].copy_from_slice(&xin[r * self.opl..][..self.opl]);
                }
            } else {
                im2col(xin, (xs.h, xs.w), spec, ohw, cols, ld, j * self.opl);
            }
        }
    }
}

/// Forward convolution. `out` must have the length of `spec.output_shape(xs)`.
pub(crate) fn forward<T: Element>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    out: &mut [T],
) {
    let (oh, ow) = spec.output_hw(xs.h, xs.w).expect("validated spec");
    if spec.is_depthwise() && oh * ow < MERGE_BELOW {
        depthwise_forward_cl(x, xs, weight, spec, (oh, ow), out);
    } else if spec.is_depthwise() {
        depthwise_forward(x, xs, weight, spec, (oh, ow), out);
    } else {
        let p = Plan::new(xs, spec, (oh, ow));
        let (k, opl, ld) = (p.k, p.opl, p.ld());
        let direct = p.pointwise && p.batch == 1;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); k * ld] };
        let mut y = if p.batch > 1 { vec![T::zero(); p.cout_g * ld] } else { Vec::new() };
        for n0 in (0..xs.n).step_by(p.batch) {
            for gi in 0..p.groups {
                let b: &[T] = if direct {
                    &x[(n0 * xs.c + gi * p.cin_g) * xs.plane()..][..p.cin_g * xs.plane()]
                } else {
                    p.columns(x, xs, spec, (oh, ow), n0, gi, &mut cols);
                    &cols
                };
                let wg = &weight[gi * p.cout_g * k..(gi + 1) * p.cout_g * k];
                let dst: &mut [T] = if p.batch > 1 {
                    &mut y
                } else {
                    &mut out[(n0 * spec.out_channels + gi * p.cout_g) * opl..][..p.cout_g * opl]
                };
                // SAFETY: row-major (cout_g × k)·(k × ld) into (cout_g × ld); all
                // slices have exactly those extents.
                unsafe {
                    T::gemm(
                        p.cout_g,
                        k,
                        ld,
                        wg.as_ptr(),
                        k as isize,
                        1,
                        b.as_ptr(),
                        ld as isize,
                        1,
                        T::zero(),
                        dst.as_mut_ptr(),
                        ld as isize,
                        1,
                    );
                }
                if p.batch > 1 {
                    for j in 0..p.batch {
                        for co in 0..p.cout_g {
                            out[((n0 + j) * spec.out_channels + gi * p.cout_g + co) * opl..][..opl]
                                .copy_from_slice(&y[co * ld + j * opl..][..opl]);
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        let opl = oh * ow;
        for (i, plane) in out.chunks_mut(opl).enumerate() {
            let bv = b[i % spec.out_channels];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Accumulates input, weight, and bias gradients for upstream `dy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Element>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    spec: &ConvSpec,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (oh, ow) = spec.output_hw(xs.h, xs.w).expect("validated spec");
    let opl = oh * ow;
    if let Some(db) = db {
        for (i, plane) in dy.chunks(opl).enumerate() {
            db[i % spec.out_channels] += plane.iter().copied().sum::<T>();
        }
    }
    if spec.is_depthwise() && opl < MERGE_BELOW {
        depthwise_backward_cl(x, xs, weight, spec, (oh, ow), dy, dx, dw);
        return;
    }
    if spec.is_depthwise() {
        depthwise_backward(x, xs, weight, spec, (oh, ow), dy, dx, dw);
        return;
    }
    let p = Plan::new(xs, spec, (oh, ow));
    let (k, ld) = (p.k, p.ld());
    let merged = p.batch > 1;
    let direct = p.pointwise && !merged;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); k * ld] };
    let mut dyg_buf = if merged { vec![T::zero(); p.cout_g * ld] } else { Vec::new() };
    let mut dx = dx;
    let mut dw = dw;
    for n0 in (0..xs.n).step_by(p.batch) {
        for gi in 0..p.groups {
            let dyg: &[T] = if merged {
                for j in 0..p.batch {
                    for co in 0..p.cout_g {
                        dyg_buf[co * ld + j * opl..][..opl]
                            .copy_from_slice(&dy[((n0 + j) * spec.out_channels + gi * p.cout_g + co) * opl..][..opl]);
                    }
                }
                &dyg_buf
            } else {
                &dy[(n0 * spec.out_channels + gi * p.cout_g) * opl..][..p.cout_g * opl]
            };
            let wg = &weight[gi * p.cout_g * k..(gi + 1) * p.cout_g * k];
            let xoff = |n: usize| (n * xs.c + gi * p.cin_g) * xs.plane();
            let xlen = p.cin_g * xs.plane();
            if let Some(dw) = dw.as_deref_mut() {
                let b: &[T] = if direct {
                    &x[xoff(n0)..xoff(n0) + xlen]
                } else {
                    p.columns(x, xs, spec, (oh, ow), n0, gi, &mut cols);
                    &cols
                };
                let dwg = &mut dw[gi * p.cout_g * k..(gi + 1) * p.cout_g * k];
                // SAFETY: (cout_g × ld)·(ld × k) with the column matrix read
                // transposed through its strides.
                unsafe {
                    T::gemm(
                        p.cout_g,
                        ld,
                        k,
                        dyg.as_ptr(),
                        ld as isize,
                        1,
                        b.as_ptr(),
                        1,
                        ld as isize,
                        T::one(),
                        dwg.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                if direct {
                    let dxg = &mut dx[xoff(n0)..xoff(n0) + xlen];
                    // SAFETY: (k × cout_g)·(cout_g × opl) accumulated into dx.
                    unsafe {
                        T::gemm(
                            k,
                            p.cout_g,
                            ld,
                            wg.as_ptr(),
                            1,
                            k as isize,
                            dyg.as_ptr(),
                            ld as isize,
                            1,
                            T::one(),
                            dxg.as_mut_ptr(),
                            ld as isize,
                            1,
                        );
                    }
                    continue;
                }
                // SAFETY: as above, written into the scratch column buffer.
                unsafe {
                    T::gemm(
                        k,
                        p.cout_g,
                        ld,
                        wg.as_ptr(),
                        1,
                        k as isize,
                        dyg.as_ptr(),
                        ld as isize,
                        1,
                        T::zero(),
                        cols.as_mut_ptr(),
                        ld as isize,
                        1,
                    );
                }
                for j in 0..p.batch {
                    let dxg = &mut dx[xoff(n0 + j)..xoff(n0 + j) + xlen];
                    if p.pointwise {
                        for r in 0..p.cin_g {
                            let src = &cols[r * ld + j * opl..][..opl];
                            dxg[r * opl..][..opl].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    } else {
                        col2im(&cols, (xs.h, xs.w), spec, (oh, ow), ld, j * opl, dxg);
                    }
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn tap_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `(N, C, P)` → `(N, P, C)`.
fn to_channels_last<T: Element>(x: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(c * plane).zip(out.chunks_mut(c * plane)) {
        for ch in 0..c {
            for (p, &v) in src[ch * plane..(ch + 1) * plane].iter().enumerate() {
                dst[p * c + ch] = v;
            }
        }
    }
    out
}

/// Adds an `(N, P, C)` tensor into its `(N, C, P)` counterpart.
fn add_channels_first<T: Element>(xt: &[T], c: usize, plane: usize, out: &mut [T]) {
    for (src, dst) in xt.chunks(c * plane).zip(out.chunks_mut(c * plane)) {
        for ch in 0..c {
            for (p, d) in dst[ch * plane..(ch + 1) * plane].iter_mut().enumerate() {
                *d += src[p * c + ch];
            }
        }
    }
}

/// Visits every (output pixel, input pixel, tap) triple of a depthwise conv
/// over one sample's spatial grid.
fn for_each_tap(
    spec: &ConvSpec,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    mut f: impl FnMut(usize, usize, usize),
) {
    let (kh, kw) = spec.kernel;
    let (s, pad) = (spec.stride as isize, spec.padding as isize);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..kh {
                let iy = oy as isize * s + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize * s + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    f(oy * ow + ox, iy as usize * w + ix as usize, ky * kw + kx);
                }
            }
        }
    }
}

/// Depthwise convolution with channels innermost; used for small planes
/// where per-row loops would be too short.
fn depthwise_forward_cl<T: Element>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let c = xs.c;
    let taps = spec.kernel.0 * spec.kernel.1;
    let xt = to_channels_last(x, c, xs.plane());
    let wt = to_channels_last(weight, c, taps);
    let (ipl, opl) = (xs.plane(), oh * ow);
    let mut ot = vec![T::zero(); xs.n * opl * c];
    for n in 0..xs.n {
        let xn = &xt[n * ipl * c..(n + 1) * ipl * c];
        let on = &mut ot[n * opl * c..(n + 1) * opl * c];
        for_each_tap(spec, (xs.h, xs.w), (oh, ow), |o, i, t| {
            let dst = &mut on[o * c..(o + 1) * c];
            let src = &xn[i * c..(i + 1) * c];
            let wr = &wt[t * c..(t + 1) * c];
            for ((d, &v), &wv) in dst.iter_mut().zip(src).zip(wr) {
                *d += wv * v;
            }
        });
    }
    out.fill(T::zero());
    add_channels_first(&ot, c, opl, out);
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward_cl<T: Element>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let c = xs.c;
    let taps = spec.kernel.0 * spec.kernel.1;
    let (ipl, opl) = (xs.plane(), oh * ow);
    let gt = to_channels_last(dy, c, opl);
    if let Some(dx) = dx {
        let wt = to_channels_last(weight, c, taps);
        let mut dxt = vec![T::zero(); xs.n * ipl * c];
        for n in 0..xs.n {
            let gn = &gt[n * opl * c..(n + 1) * opl * c];
            let dn = &mut dxt[n * ipl * c..(n + 1) * ipl * c];
            for_each_tap(spec, (xs.h, xs.w), (oh, ow), |o, i, t| {
                let dst = &mut dn[i * c..(i + 1) * c];
                let src = &gn[o * c..(o + 1) * c];
                let wr = &wt[t * c..(t + 1) * c];
                for ((d, &v), &wv) in dst.iter_mut().zip(src).zip(wr) {
                    *d += wv * v;
                }
            });
        }
        add_channels_first(&dxt, c, ipl, dx);
    }
    if let Some(dw) = dw {
        let xt = to_channels_last(x, c, ipl);
        let mut dwt = vec![T::zero(); taps * c];
        for n in 0..xs.n {
            let gn = &gt[n * opl * c..(n + 1) * opl * c];
            let xn = &xt[n * ipl * c..(n + 1) * ipl * c];
            for_each_tap(spec, (xs.h, xs.w), (oh, ow), |o, i, t| {
                let dst = &mut dwt[t * c..(t + 1) * c];
                for ((d, &gv), &xv) in dst.iter_mut().zip(&gn[o * c..(o + 1) * c]).zip(&xn[i * c..(i + 1) * c]) {
                    *d += gv * xv;
                }
            });
        }
        add_channels_first(&dwt, c, taps, dw);
    }
}

fn depthwise_forward<T: Element>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (s, pad) = (spec.stride, spec.padding);
    let (h, w) = (xs.h, xs.w);
    out.fill(T::zero());
    for n in 0..xs.n {
        for c in 0..xs.c {
            let plane = &x[(n * xs.c + c) * h * w..][..h * w];
            let dst = &mut out[(n * xs.c + c) * oh * ow..][..oh * ow];
            let wk = &weight[c * kh * kw..(c + 1) * kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = tap_range(ky, pad, s, h, oh);
                for kx in 0..kw {
                    let wv = wk[ky * kw + kx];
                    let (ox0, ox1) = tap_range(kx, pad, s, w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - pad;
                        let src = &plane[iy * w..(iy + 1) * w];
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let base = ox0 + kx - pad;
                            for (d, &v) in line[ox0..ox1].iter_mut().zip(&src[base..]) {
                                *d += wv * v;
                            }
                        } else {
                            let base = ox0 * s + kx - pad;
                            for (d, &v) in line[ox0..ox1].iter_mut().zip(src[base..].iter().step_by(s)) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Element>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (kh, kw) = spec.kernel;
    let (s, pad) = (spec.stride, spec.padding);
    let (h, w) = (xs.h, xs.w);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let off = (n * xs.c + c) * h * w;
            let plane = &x[off..off + h * w];
            let g = &dy[(n * xs.c + c) * oh * ow..][..oh * ow];
            let wk = &weight[c * kh * kw..(c + 1) * kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = tap_range(ky, pad, s, h, oh);
                for kx in 0..kw {
                    let (ox0, ox1) = tap_range(kx, pad, s, w, ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let wv = wk[ky * kw + kx];
                    let base = ox0 * s + kx - pad;
                    if let Some(dx) = dx.as_deref_mut() {
                        let dplane = &mut dx[off..off + h * w];
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - pad;
                            let gl = &g[oy * ow + ox0..oy * ow + ox1];
                            let dst = &mut dplane[iy * w + base..(iy + 1) * w];
                            if s == 1 {
                                dst.iter_mut().zip(gl).for_each(|(d, &v)| *d += wv * v);
                            } else {
                                dst.iter_mut().step_by(s).zip(gl).for_each(|(d, &v)| *d += wv * v);
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - pad;
                            let gl = &g[oy * ow + ox0..oy * ow + ox1];
                            let src = &plane[iy * w + base..(iy + 1) * w];
                            if s == 1 {
                                acc += gl.iter().zip(src).fold(T::zero(), |a, (&u, &v)| a + u * v);
                            } else {
                                acc += gl.iter().zip(src.iter().step_by(s)).fold(T::zero(), |a, (&u, &v)| a + u * v);
                            }
                        }
                        dw[c * kh * kw + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
}
