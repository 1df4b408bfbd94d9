//! Slice-level numeric kernels backing the tape ops.

use super::Float;

/// Geometry of a 2D cross-correlation over a `[B, Cin, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.patch() * self.out_h() * self.out_w()) as u64
    }
}

/// Strided matrix operand: `(data, row stride, column stride)`.
type Operand<'a, F> = (&'a [F], usize, usize);

/// Safe wrapper over the strided GEMM: `c[m x n] = a[m x k] @ b[k x n] + beta * c`.
fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<F>,
    b: Operand<F>,
    beta: F,
    c: (&mut [F], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    let (c, rsc, csc) = c;
    assert!(
        k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(),
        "gemm: a out of range"
    );
    assert!(
        k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(),
        "gemm: b out of range"
    );
    assert!(
        (m - 1) * rsc + (n - 1) * csc < c.len(),
        "gemm: c out of range"
    );
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output columns `lo..hi` whose input column `ox + kx - pad` lies inside `0..w`.
fn valid_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
    (lo, hi)
}

fn im2col<F: Float>(g: &ConvGeom, img: &[F], cols: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_span(kx, g.pad, g.w, ow);
                    line[..lo].fill(F::zero());
                    line[hi..].fill(F::zero());
                    let off = lo + kx - g.pad;
                    line[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                }
            }
        }
    }
}

/// Blocked transpose of a row-major `rows x cols` matrix.
fn transpose<F: Float>(src: &[F], rows: usize, cols: usize, dst: &mut [F]) {
    const T: usize = 8;
    assert!(src.len() >= rows * cols && dst.len() >= rows * cols);
    let (rb, cb) = (rows / T * T, cols / T * T);
    for r0 in (0..rb).step_by(T) {
        for c0 in (0..cb).step_by(T) {
            let mut tile = [[F::zero(); T]; T];
            for (i, t) in tile.iter_mut().enumerate() {
                t.copy_from_slice(&src[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + T]);
            }
            for j in 0..T {
                let d = &mut dst[(c0 + j) * rows + r0..(c0 + j) * rows + r0 + T];
                for i in 0..T {
                    d[i] = tile[i][j];
                }
            }
        }
    }
    for r in 0..rows {
        let c_start = if r < rb { cb } else { 0 };
        for c in c_start..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn col2im_add<F: Float>(g: &ConvGeom, cols: &[F], img: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_span(kx, g.pad, g.w, ow);
                    let off = lo + kx - g.pad;
                    for (d, &v) in dst[off..off + hi - lo]
                        .iter_mut()
                        .zip(&src[oy * ow + lo..oy * ow + hi])
                    {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Float>(g: &ConvGeom, input: &[F], kernel: &[F], bias: &[F]) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let patch = g.patch();
    let mut out = vec![F::zero(); g.batch * g.cout * hw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); patch * hw]
    };
    for b in 0..g.batch {
        let img = &input[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let dst = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        for (co, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        let src: &[F] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm(
            hw,
            patch,
            g.cout,
            (src, 1, hw),
            (kernel, 1, patch),
            F::one(),
            (dst, 1, hw),
        );
    }
    out
}

/// Gradients of a conv with respect to whichever of (input, kernel, bias) are requested.
pub struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub kernel: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub fn conv2d_backward<F: Float>(
    g: &ConvGeom,
    input: &[F],
    kernel: &[F],
    grad_out: &[F],
    want: (bool, bool, bool),
) -> ConvGrads<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let patch = g.patch();
    let in_len = g.cin * g.h * g.w;
    let mut d_in = want.0.then(|| vec![F::zero(); g.batch * in_len]);
    let mut d_k = want.1.then(|| vec![F::zero(); g.cout * patch]);
    let mut d_b = want.2.then(|| vec![F::zero(); g.cout]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); patch * hw]
    };
    let mut cols_t = if want.1 {
        vec![F::zero(); patch * hw]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let go = &grad_out[b * g.cout * hw..(b + 1) * g.cout * hw];
        if let Some(db) = d_b.as_mut() {
            for (co, plane) in go.chunks(hw).enumerate() {
                db[co] += plane.iter().copied().sum::<F>();
            }
        }
        let img = &input[b * in_len..(b + 1) * in_len];
        if let Some(dk) = d_k.as_mut() {
            // dK (cout x patch) += dOut (cout x hw) @ cols^T (hw x patch); matrixmultiply
            // is several times faster here with both operands row-contiguous.
            if g.is_pointwise() {
                transpose(img, patch, hw, &mut cols_t);
            } else {
                im2col(g, img, &mut cols);
                transpose(&cols, patch, hw, &mut cols_t);
            }
            gemm(
                g.cout,
                hw,
                patch,
                (go, hw, 1),
                (&cols_t, patch, 1),
                F::one(),
                (dk, patch, 1),
            );
        }
        if let Some(di) = d_in.as_mut() {
            // dCols (patch x hw) = K^T (patch x cout) @ dOut (cout x hw)
            let dst = &mut di[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    patch,
                    g.cout,
                    hw,
                    (kernel, 1, patch),
                    (go, hw, 1),
                    F::one(),
                    (dst, hw, 1),
                );
            } else {
                gemm(
                    patch,
                    g.cout,
                    hw,
                    (kernel, 1, patch),
                    (go, hw, 1),
                    F::zero(),
                    (&mut cols, hw, 1),
                );
                col2im_add(g, &cols, dst);
            }
        }
    }
    ConvGrads {
        input: d_in,
        kernel: d_k,
        bias: d_b,
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Float>(x: F) -> F {
    let k = F::c(GELU_K);
    let a = F::c(GELU_A);
    let half = F::c(0.5);
    let u = k * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let k = F::c(GELU_K);
    let a = F::c(GELU_A);
    let half = F::c(0.5);
    let three = F::c(3.0);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + three * a * x * x)
}

/// 2x2 average pooling over the trailing two axes; `planes` = product of leading axes.
pub fn down2<F: Float>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::c(0.25);
    let mut out = vec![F::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] =
                    (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    out
}

pub fn down2_backward<F: Float>(g: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::c(0.25);
    let mut out = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    out
}

/// Nearest-neighbour x2 upsampling over the trailing two axes.
pub fn up2<F: Float>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![F::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn up2_backward<F: Float>(g: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    out
}
