//! Raw loops behind the graph operations. All buffers are row-major and every
//! reduction runs in a fixed order, so results are bitwise reproducible.

use super::Real;

/// Dot product with eight independent partial sums, combined in a fixed order.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = F::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    let pairs = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    s + ((pairs[0] + pairs[2]) + (pairs[1] + pairs[3]))
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_a_bt_acc<F: Real>(
    a: &[F],
    b: &[F],
    m: usize,
    n: usize,
    k: usize,
    out: &mut [F],
) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(a_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_b_acc<F: Real>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a grouped, strided, dilated 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when nonpositive.
    pub fn out_len(n: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
        let span = dilation * (k - 1) + 1;
        let padded = n + 2 * padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    /// Output indices `o` along one axis for which `o*stride + off - padding`
    /// lands inside `[0, n)`.
    #[inline]
    fn valid_range(&self, off: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = off as isize - self.padding as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest o with o*s + shift <= n - 1
        let top = n as isize - 1 - shift;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(n_out as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    #[inline]
    fn src(&self, o: usize, off: usize) -> usize {
        o * self.stride + off - self.padding
    }
}

fn conv2d_forward_direct<F: Real>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
    out: &mut [F],
) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = g.k * g.k;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for co in 0..g.cout {
        let grp = co / cout_g;
        let out_c = &mut out[co * plane_out..(co + 1) * plane_out];
        if let Some(b) = bias {
            out_c.iter_mut().for_each(|o| *o = b[co]);
        }
        for cl in 0..cin_g {
            let ci = grp * cin_g + cl;
            let x_c = &x[ci * plane_in..(ci + 1) * plane_in];
            let w_base = (co * cin_g + cl) * kk;
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_range(ky * g.dilation, g.h, g.ho);
                for kx in 0..g.k {
                    let wv = w[w_base + ky * g.k + kx];
                    if wv == F::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_range(kx * g.dilation, g.w, g.wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = g.src(oy, ky * g.dilation);
                        let x_row = &x_c[iy * g.w..(iy + 1) * g.w];
                        let o_row = &mut out_c[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let ix0 = g.src(ox_lo, kx * g.dilation);
                            let n = ox_hi - ox_lo;
                            for (o, &xv) in o_row[ox_lo..ox_hi].iter_mut().zip(&x_row[ix0..ix0 + n]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                o_row[ox] += wv * x_row[g.src(ox, kx * g.dilation)];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_direct<F: Real>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = g.k * g.k;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    if let Some(db) = db {
        for co in 0..g.cout {
            db[co] += dy[co * plane_out..(co + 1) * plane_out].iter().copied().sum::<F>();
        }
    }
    for co in 0..g.cout {
        let grp = co / cout_g;
        let dy_c = &dy[co * plane_out..(co + 1) * plane_out];
        for cl in 0..cin_g {
            let ci = grp * cin_g + cl;
            let w_base = (co * cin_g + cl) * kk;
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_range(ky * g.dilation, g.h, g.ho);
                for kx in 0..g.k {
                    let (ox_lo, ox_hi) = g.valid_range(kx * g.dilation, g.w, g.wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = w[w_base + ky * g.k + kx];
                    let mut acc = F::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = g.src(oy, ky * g.dilation);
                        let d_row = &dy_c[oy * g.wo..(oy + 1) * g.wo];
                        let row_off = ci * plane_in + iy * g.w;
                        if let Some(dx) = dx.as_deref_mut() {
                            if wv != F::zero() {
                                let dx_row = &mut dx[row_off..row_off + g.w];
                                if g.stride == 1 {
                                    let ix0 = g.src(ox_lo, kx * g.dilation);
                                    let n = ox_hi - ox_lo;
                                    for (o, &d) in dx_row[ix0..ix0 + n].iter_mut().zip(&d_row[ox_lo..ox_hi]) {
                                        *o += wv * d;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        dx_row[g.src(ox, kx * g.dilation)] += wv * d_row[ox];
                                    }
                                }
                            }
                        }
                        if dw.is_some() {
                            let x_row = &x[row_off..row_off + g.w];
                            if g.stride == 1 {
                                let ix0 = g.src(ox_lo, kx * g.dilation);
                                let n = ox_hi - ox_lo;
                                acc += dot(&d_row[ox_lo..ox_hi], &x_row[ix0..ix0 + n]);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += d_row[ox] * x_row[g.src(ox, kx * g.dilation)];
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[w_base + ky * g.k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Patch matrix `[cin·k·k × ho·wo]` of an ungrouped convolution.
fn im2col<F: Real>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let p = g.ho * g.wo;
    let plane_in = g.h * g.w;
    for ci in 0..g.cin {
        let x_c = &x[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ky * g.dilation, g.h, g.ho);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kx * g.dilation, g.w, g.wo);
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let x_row = &x_c[g.src(oy, ky * g.dilation) * g.w..][..g.w];
                    let r = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = g.src(ox_lo, kx * g.dilation);
                        r[ox_lo..ox_hi].copy_from_slice(&x_row[ix0..ix0 + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            r[ox] = x_row[g.src(ox, kx * g.dilation)];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
fn col2im<F: Real>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let p = g.ho * g.wo;
    let plane_in = g.h * g.w;
    for ci in 0..g.cin {
        let dx_c = &mut dx[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ky * g.dilation, g.h, g.ho);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kx * g.dilation, g.w, g.wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = &cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let dx_row = &mut dx_c[g.src(oy, ky * g.dilation) * g.w..][..g.w];
                    let r = &row[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = g.src(ox_lo, kx * g.dilation);
                        for (o, &v) in dx_row[ix0..ix0 + ox_hi - ox_lo].iter_mut().zip(&r[ox_lo..ox_hi]) {
                            *o += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dx_row[g.src(ox, kx * g.dilation)] += r[ox];
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// 1×1, unit stride, no padding: the input already is the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }
}

/// Ungrouped convolutions run as a matrix product over the patch matrix;
/// grouped ones use direct loops.
pub(crate) fn conv2d_forward<F: Real>(g: &ConvGeom, x: &[F], w: &[F], bias: Option<&[F]>, out: &mut [F]) {
    if g.groups != 1 {
        return conv2d_forward_direct(g, x, w, bias, out);
    }
    let p = g.ho * g.wo;
    let kdim = g.cin * g.k * g.k;
    match bias {
        Some(b) => {
            for (co, o) in out.chunks_exact_mut(p).enumerate() {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        None => out.iter_mut().for_each(|v| *v = F::zero()),
    }
    if g.is_pointwise() {
        matmul_acc(w, x, g.cout, kdim, p, out);
    } else {
        let mut cols = vec![F::zero(); kdim * p];
        im2col(g, x, &mut cols);
        matmul_acc(w, &cols, g.cout, kdim, p, out);
    }
}

pub(crate) fn conv2d_backward<F: Real>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    if g.groups != 1 {
        return conv2d_backward_direct(g, x, w, dy, dx, dw, db);
    }
    let p = g.ho * g.wo;
    let kdim = g.cin * g.k * g.k;
    if let Some(db) = db {
        for (co, d) in dy.chunks_exact(p).enumerate() {
            db[co] += d.iter().copied().sum::<F>();
        }
    }
    if g.is_pointwise() {
        if let Some(dw) = dw {
            matmul_a_bt_acc(dy, x, g.cout, p, kdim, dw);
        }
        if let Some(dx) = dx {
            matmul_at_b_acc(w, dy, g.cout, kdim, p, dx);
        }
        return;
    }
    if let Some(dw) = dw {
        let mut cols = vec![F::zero(); kdim * p];
        im2col(g, x, &mut cols);
        matmul_a_bt_acc(dy, &cols, g.cout, p, kdim, dw);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![F::zero(); kdim * p];
        matmul_at_b_acc(w, dy, g.cout, kdim, p, &mut dcols);
        col2im(g, &dcols, dx);
    }
}

pub(crate) fn avg_pool_forward<F: Real>(x: &[F], c: usize, h: usize, w: usize, l: usize, out: &mut [F]) {
    let (ho, wo) = (h / l, w / l);
    let inv = F::of(1.0 / (l * l) as f64);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = F::zero();
                for dy in 0..l {
                    let row = ch * h * w + (oy * l + dy) * w + ox * l;
                    for v in &x[row..row + l] {
                        s += *v;
                    }
                }
                out[ch * ho * wo + oy * wo + ox] = s * inv;
            }
        }
    }
}

pub(crate) fn avg_pool_backward<F: Real>(dy: &[F], c: usize, h: usize, w: usize, l: usize, dx: &mut [F]) {
    let (ho, wo) = (h / l, w / l);
    let inv = F::of(1.0 / (l * l) as f64);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[ch * ho * wo + oy * wo + ox] * inv;
                for ddy in 0..l {
                    let row = ch * h * w + (oy * l + ddy) * w + ox * l;
                    for v in &mut dx[row..row + l] {
                        *v += g;
                    }
                }
            }
        }
    }
}

/// Source taps for align-corners-false linear interpolation along one axis.
pub(crate) fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lambda = src - i0 as f64;
            (i0, i1, lambda)
        })
        .collect()
}

pub(crate) fn upsample_forward<F: Real>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    out: &mut [F],
) {
    let ty = linear_taps(h, factor);
    let tx = linear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (wy0, wy1) = (F::of(1.0 - ly), F::of(ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (F::of(1.0 - lx), F::of(lx));
                oc[oy * wo + ox] = wy0 * (wx0 * xc[y0 * w + x0] + wx1 * xc[y0 * w + x1])
                    + wy1 * (wx0 * xc[y1 * w + x0] + wx1 * xc[y1 * w + x1]);
            }
        }
    }
}

pub(crate) fn upsample_backward<F: Real>(
    dy: &[F],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    dx: &mut [F],
) {
    let ty = linear_taps(h, factor);
    let tx = linear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    for ch in 0..c {
        let dc = &dy[ch * ho * wo..(ch + 1) * ho * wo];
        let xc = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (wy0, wy1) = (F::of(1.0 - ly), F::of(ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (F::of(1.0 - lx), F::of(lx));
                let g = dc[oy * wo + ox];
                xc[y0 * w + x0] += g * wy0 * wx0;
                xc[y0 * w + x1] += g * wy0 * wx1;
                xc[y1 * w + x0] += g * wy1 * wx0;
                xc[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for n in 1..9 {
            for k in 1..4 {
                for stride in 1..4 {
                    for dilation in 1..4 {
                        for padding in 0..6 {
                            let Some(no) = ConvGeom::out_len(n, k, stride, dilation, padding) else {
                                continue;
                            };
                            let g = ConvGeom {
                                cin: 1,
                                h: n,
                                w: n,
                                cout: 1,
                                k,
                                stride,
                                dilation,
                                padding,
                                groups: 1,
                                ho: no,
                                wo: no,
                            };
                            for kx in 0..k {
                                let off = kx * dilation;
                                let (lo, hi) = g.valid_range(off, n, no);
                                for o in 0..no {
                                    let src = (o * stride + off) as isize - padding as isize;
                                    let inside = src >= 0 && (src as usize) < n;
                                    assert_eq!(inside, (lo..hi).contains(&o), "n={n} k={k} s={stride} d={dilation} p={padding} o={o}");
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn taps_identity_at_factor_one() {
        for (o, (i0, _, l)) in linear_taps(5, 1).into_iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!(l, 0.0);
        }
    }
}
