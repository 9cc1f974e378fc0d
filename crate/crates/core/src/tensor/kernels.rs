//! Raw forward/backward kernels over flat row-major buffers.

use super::Real;

/// Stride, dilation and zero padding shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub const UNIT: ConvGeom = ConvGeom {
        stride: 1,
        dilation: 1,
        padding: 0,
    };

    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }
}

/// Output length along one axis, `None` if the dilated kernel does not fit.
pub fn conv_out_len(input: usize, kernel: usize, g: ConvGeom) -> Option<usize> {
    if g.stride == 0 || g.dilation == 0 || kernel == 0 {
        return None;
    }
    let span = g.dilation * (kernel - 1) + 1;
    let padded = input + 2 * g.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / g.stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.geom.stride + k * self.geom.dilation) as isize - self.geom.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims) -> Vec<T> {
    let n = d.out_len();
    let mut col = vec![T::zero(); d.patch_len() * n];
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..d.ho {
                    let Some(iy) = d.src(oy, ki, d.h) else { continue };
                    let src_row = &plane[iy * d.w..(iy + 1) * d.w];
                    let dst_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        if let Some(ix) = d.src(ox, kj, d.w) {
                            *v = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let n = d.out_len();
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..d.ho {
                    let Some(iy) = d.src(oy, ki, d.h) else { continue };
                    let base = (c * d.h + iy) * d.w;
                    for ox in 0..d.wo {
                        if let Some(ix) = d.src(ox, kj, d.w) {
                            dx[base + ix] = dx[base + ix] + src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], k: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let n = d.out_len();
    let kk = d.patch_len();
    let mut out = vec![T::zero(); d.cout * n];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if d.is_pointwise() {
        T::gemm(d.cout, kk, n, k, kk as isize, 1, x, n as isize, 1, beta, &mut out, n as isize, 1);
    } else {
        let col = im2col(x, d);
        T::gemm(d.cout, kk, n, k, kk as isize, 1, &col, n as isize, 1, beta, &mut out, n as isize, 1);
    }
    out
}

/// Accumulates gradients of a convolution into whichever buffers are present.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    gout: &[T],
    d: &ConvDims,
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let n = d.out_len();
    let kk = d.patch_len();
    if let Some(db) = dbias {
        for (co, chunk) in gout.chunks(n).enumerate() {
            db[co] = db[co] + chunk.iter().copied().sum::<T>();
        }
    }
    let pointwise = d.is_pointwise();
    if let Some(dk) = dk {
        // dK[Cout, kk] += gout[Cout, n] * col^T[n, kk]
        if pointwise {
            T::gemm(d.cout, n, kk, gout, n as isize, 1, x, 1, n as isize, T::one(), dk, kk as isize, 1);
        } else {
            let col = im2col(x, d);
            T::gemm(d.cout, n, kk, gout, n as isize, 1, &col, 1, n as isize, T::one(), dk, kk as isize, 1);
        }
    }
    if let Some(dx) = dx {
        // dcol[kk, n] = K^T[kk, Cout] * gout[Cout, n]
        if pointwise {
            T::gemm(kk, d.cout, n, k, 1, kk as isize, gout, n as isize, 1, T::one(), dx, n as isize, 1);
        } else {
            let mut dcol = vec![T::zero(); kk * n];
            T::gemm(kk, d.cout, n, k, 1, kk as isize, gout, n as isize, 1, T::zero(), &mut dcol, n as isize, 1);
            col2im(&dcol, d, dx);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct XcorrDims {
    pub c: usize,
    pub hs: usize,
    pub ws: usize,
    pub hz: usize,
    pub wz: usize,
}

impl XcorrDims {
    pub fn ho(&self) -> usize {
        self.hs - self.hz + 1
    }
    pub fn wo(&self) -> usize {
        self.ws - self.wz + 1
    }
}

pub(crate) fn xcorr_forward<T: Real>(s: &[T], z: &[T], d: &XcorrDims) -> Vec<T> {
    let (ho, wo) = (d.ho(), d.wo());
    let mut out = vec![T::zero(); d.c * ho * wo];
    for c in 0..d.c {
        let sp = &s[c * d.hs * d.ws..(c + 1) * d.hs * d.ws];
        let zp = &z[c * d.hz * d.wz..(c + 1) * d.hz * d.wz];
        let op = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for i in 0..ho {
            for u in 0..d.hz {
                let srow = &sp[(i + u) * d.ws..(i + u + 1) * d.ws];
                let zrow = &zp[u * d.wz..(u + 1) * d.wz];
                let orow = &mut op[i * wo..(i + 1) * wo];
                for (j, o) in orow.iter_mut().enumerate() {
                    let acc: T = srow[j..j + d.wz]
                        .iter()
                        .zip(zrow)
                        .map(|(&a, &b)| a * b)
                        .sum();
                    *o = *o + acc;
                }
            }
        }
    }
    out
}

pub(crate) fn xcorr_backward<T: Real>(
    s: &[T],
    z: &[T],
    gout: &[T],
    d: &XcorrDims,
    ds: Option<&mut [T]>,
    dz: Option<&mut [T]>,
) {
    let (ho, wo) = (d.ho(), d.wo());
    if let Some(ds) = ds {
        for c in 0..d.c {
            let zp = &z[c * d.hz * d.wz..(c + 1) * d.hz * d.wz];
            let gp = &gout[c * ho * wo..(c + 1) * ho * wo];
            let dsp = &mut ds[c * d.hs * d.ws..(c + 1) * d.hs * d.ws];
            for i in 0..ho {
                for j in 0..wo {
                    let g = gp[i * wo + j];
                    if g == T::zero() {
                        continue;
                    }
                    for u in 0..d.hz {
                        let row = &mut dsp[(i + u) * d.ws + j..(i + u) * d.ws + j + d.wz];
                        for (v, dst) in row.iter_mut().enumerate() {
                            *dst = *dst + g * zp[u * d.wz + v];
                        }
                    }
                }
            }
        }
    }
    if let Some(dz) = dz {
        for c in 0..d.c {
            let sp = &s[c * d.hs * d.ws..(c + 1) * d.hs * d.ws];
            let gp = &gout[c * ho * wo..(c + 1) * ho * wo];
            let dzp = &mut dz[c * d.hz * d.wz..(c + 1) * d.hz * d.wz];
            for u in 0..d.hz {
                for v in 0..d.wz {
                    let mut acc = T::zero();
                    for i in 0..ho {
                        let srow = &sp[(i + u) * d.ws + v..(i + u) * d.ws + v + wo];
                        let grow = &gp[i * wo..(i + 1) * wo];
                        acc = acc + srow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    dzp[u * d.wz + v] = dzp[u * d.wz + v] + acc;
                }
            }
        }
    }
}

/// Interpolation used by [`super::Tape::upsample2x`].
///
/// `Bilinear` follows the align-corners-false convention: output index `o`
/// samples source coordinate `s = (o + 0.5) / 2 - 0.5`, clamped to `[0, n - 1]`,
/// blending `floor(s)` and `floor(s) + 1` (the latter clamped to the last index)
/// with weights `1 - frac(s)` and `frac(s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Per output index: (lo, hi, weight_lo, weight_hi).
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = s - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, mode: UpsampleMode) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for y in 0..h2 {
                    for xo in 0..w2 {
                        out[(ch * h2 + y) * w2 + xo] = x[(ch * h + y / 2) * w + xo / 2];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h);
            let tx = bilinear_taps(w);
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::of_f64(wy0), T::of_f64(wy1));
                    for (xo, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::of_f64(wx0), T::of_f64(wx1));
                        let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                        let bot = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                        out[(ch * h2 + y) * w2 + xo] = top * wy0 + bot * wy1;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(
    gout: &[T],
    c: usize,
    h: usize,
    w: usize,
    mode: UpsampleMode,
    dx: &mut [T],
) {
    let (h2, w2) = (2 * h, 2 * w);
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for y in 0..h2 {
                    for xo in 0..w2 {
                        let i = (ch * h + y / 2) * w + xo / 2;
                        dx[i] = dx[i] + gout[(ch * h2 + y) * w2 + xo];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h);
            let tx = bilinear_taps(w);
            for ch in 0..c {
                let base = ch * h * w;
                for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::of_f64(wy0), T::of_f64(wy1));
                    for (xo, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::of_f64(wx0), T::of_f64(wx1));
                        let g = gout[(ch * h2 + y) * w2 + xo];
                        let gt = g * wy0;
                        let gb = g * wy1;
                        dx[base + y0 * w + x0] = dx[base + y0 * w + x0] + gt * wx0;
                        dx[base + y0 * w + x1] = dx[base + y0 * w + x1] + gt * wx1;
                        dx[base + y1 * w + x0] = dx[base + y1 * w + x0] + gb * wx0;
                        dx[base + y1 * w + x1] = dx[base + y1 * w + x1] + gb * wx1;
                    }
                }
            }
        }
    }
}
