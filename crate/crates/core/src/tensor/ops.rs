//! Slice-level kernels shared by the graph's forward and backward passes.

use super::{Element, Shape};

/// Output shape of a broadcasting binary op, if the operands are compatible.
pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for (i, (x, y)) in a.dims().into_iter().zip(b.dims()).enumerate() {
        out[i] = match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return None,
        };
    }
    Some(Shape::from_dims(out))
}

/// Element strides of `s` when read as `out`-shaped (0 on stretched axes).
fn strides_for(s: Shape, out: Shape) -> [usize; 4] {
    let d = s.dims();
    let o = out.dims();
    let natural = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if d[i] == 1 && o[i] != 1 { 0 } else { natural[i] };
    }
    st
}

/// Visits every output index with the matching offsets into `a` and `b`.
#[inline]
fn for_each_broadcast(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = strides_for(a, out);
    let sb = strides_for(b, out);
    let mut o = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                let ba = n * sa[0] + c * sa[1] + h * sa[2];
                let bb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out.w {
                    f(o, ba + w * sa[3], bb + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

pub(crate) fn binary<T: Element>(
    a: &[T],
    sa: Shape,
    b: &[T],
    sb: Shape,
    out_shape: Shape,
    op: impl Fn(T, T) -> T,
) -> Vec<T> {
    if sa == sb {
        return a.iter().zip(b).map(|(&x, &y)| op(x, y)).collect();
    }
    let mut out = vec![T::zero(); out_shape.numel()];
    for_each_broadcast(sa, sb, out_shape, |o, ia, ib| out[o] = op(a[ia], b[ib]));
    out
}

/// Gradients of `a + b` reduced back onto each operand's shape.
pub(crate) fn add_backward<T: Element>(
    g: &[T],
    sa: Shape,
    sb: Shape,
    out: Shape,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let mut da = da;
    let mut db = db;
    if sa == out {
        if let Some(da) = da.as_deref_mut() {
            da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
        }
    }
    if sb == out {
        if let Some(db) = db.as_deref_mut() {
            db.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
        }
    }
    if sa != out || sb != out {
        for_each_broadcast(sa, sb, out, |o, ia, ib| {
            if sa != out {
                if let Some(da) = da.as_deref_mut() {
                    da[ia] += g[o];
                }
            }
            if sb != out {
                if let Some(db) = db.as_deref_mut() {
                    db[ib] += g[o];
                }
            }
        });
    }
}

/// Gradients of `a * b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mul_backward<T: Element>(
    g: &[T],
    a: &[T],
    sa: Shape,
    b: &[T],
    sb: Shape,
    out: Shape,
    mut da: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    if sa == sb {
        if let Some(da) = da.as_deref_mut() {
            for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(b) {
                *d += gv * bv;
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for ((d, &gv), &av) in db.iter_mut().zip(g).zip(a) {
                *d += gv * av;
            }
        }
        return;
    }
    for_each_broadcast(sa, sb, out, |o, ia, ib| {
        if let Some(da) = da.as_deref_mut() {
            da[ia] += g[o] * b[ib];
        }
        if let Some(db) = db.as_deref_mut() {
            db[ib] += g[o] * a[ia];
        }
    });
}

/// Source taps for half-pixel-center bilinear ×2 along one axis:
/// `(i0, i1, w0, w1)` for each output coordinate.
pub(crate) fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Element>(x: &[T], xs: Shape) -> Vec<T> {
    let (h, w) = (xs.h, xs.w);
    let ty = upsample_taps(h);
    let tx: Vec<_> = upsample_taps(w)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64(wa), T::from_f64(wb)))
        .collect();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); xs.n * xs.c * oh * ow];
    let mut row0 = vec![T::zero(); ow];
    let mut row1 = vec![T::zero(); ow];
    for (plane, dst) in x.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            let s0 = &plane[y0 * w..(y0 + 1) * w];
            let s1 = &plane[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                row0[ox] = wx0 * s0[x0] + wx1 * s0[x1];
                row1[ox] = wx0 * s1[x0] + wx1 * s1[x1];
            }
            let line = &mut dst[oy * ow..(oy + 1) * ow];
            for ((d, &a), &b) in line.iter_mut().zip(&row0).zip(&row1) {
                *d = wy0 * a + wy1 * b;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(g: &[T], xs: Shape, dx: &mut [T]) {
    let (h, w) = (xs.h, xs.w);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    for (gp, dp) in g.chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = gp[oy * ow + ox];
                dp[y0 * w + x0] += T::from_f64(wy0 * wx0) * v;
                dp[y0 * w + x1] += T::from_f64(wy0 * wx1) * v;
                dp[y1 * w + x0] += T::from_f64(wy1 * wx0) * v;
                dp[y1 * w + x1] += T::from_f64(wy1 * wx1) * v;
            }
        }
    }
}
