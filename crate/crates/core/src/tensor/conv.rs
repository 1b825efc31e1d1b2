use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

/// Border handling for size-preserving convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PadMode {
    /// Out-of-range taps read zero.
    Zero,
    /// Indices wrap modulo the spatial extent (torus).
    Circular,
}

/// Up to two contiguous runs `[x0, x1)` reading source column `x + shift`.
#[derive(Clone, Copy)]
struct Run {
    x0: usize,
    x1: usize,
    src0: usize,
}

fn runs(offset: isize, len: usize, pad: PadMode) -> ([Run; 2], usize) {
    let empty = Run {
        x0: 0,
        x1: 0,
        src0: 0,
    };
    let n = len as isize;
    match pad {
        PadMode::Zero => {
            let x0 = (-offset).max(0);
            let x1 = (n - offset).min(n);
            if x0 >= x1 {
                ([empty, empty], 0)
            } else {
                let r = Run {
                    x0: x0 as usize,
                    x1: x1 as usize,
                    src0: (x0 + offset) as usize,
                };
                ([r, empty], 1)
            }
        }
        PadMode::Circular => {
            let d = offset.rem_euclid(n) as usize;
            let first = Run {
                x0: 0,
                x1: len - d,
                src0: d,
            };
            if d == 0 {
                ([first, empty], 1)
            } else {
                let second = Run {
                    x0: len - d,
                    x1: len,
                    src0: 0,
                };
                ([first, second], 2)
            }
        }
    }
}

#[inline]
fn src_row(y: usize, offset: isize, len: usize, pad: PadMode) -> Option<usize> {
    let s = y as isize + offset;
    match pad {
        PadMode::Zero => (0..len as isize).contains(&s).then_some(s as usize),
        PadMode::Circular => Some(s.rem_euclid(len as isize) as usize),
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    cin_g: usize,
    cout_g: usize,
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    groups: usize,
) -> Result<Geometry> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, kin, kh, kw) = kernel.dims4()?;
    if kh != kw {
        return Err(invalid!("kernel must be square, got {}x{}", kh, kw));
    }
    if kh % 2 == 0 {
        return Err(invalid!("kernel size must be odd, got {}", kh));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(invalid!(
            "groups {} must divide channels {} -> {}",
            groups,
            cin,
            cout
        ));
    }
    if kin != cin / groups {
        return Err(shape_err!(
            "kernel expects {} input channels per group, input has {} over {} groups",
            kin,
            cin,
            groups
        ));
    }
    Ok(Geometry {
        n,
        cin,
        cout,
        h,
        w,
        k: kh,
        cin_g: kin,
        cout_g: cout / groups,
    })
}

/// Grouped, size-preserving 2-D cross-correlation.
///
/// `kernel` is `[Cout, Cin / groups, k, k]` with odd `k`; padding is
/// `(k - 1) / 2` on every side.
pub fn conv2d_grouped<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    pad: PadMode,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, kernel, groups)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(shape_err!("bias length {} for {} outputs", b.len(), g.cout));
        }
    }
    let p = (g.k / 2) as isize;
    let plane = g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let (xd, kd) = (input.data(), kernel.data());
    for n in 0..g.n {
        for oc in 0..g.cout {
            let dst = &mut out[(n * g.cout + oc) * plane..(n * g.cout + oc + 1) * plane];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[oc]);
            }
            let grp = oc / g.cout_g;
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let src = &xd[(n * g.cin + ic) * plane..(n * g.cin + ic + 1) * plane];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = kd[((oc * g.cin_g + icl) * g.k + ky) * g.k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (rs, nr) = runs(kx as isize - p, g.w, pad);
                        for y in 0..g.h {
                            let Some(sy) = src_row(y, ky as isize - p, g.h, pad) else {
                                continue;
                            };
                            let drow = &mut dst[y * g.w..(y + 1) * g.w];
                            let srow = &src[sy * g.w..(sy + 1) * g.w];
                            for r in &rs[..nr] {
                                let s = &srow[r.src0..r.src0 + (r.x1 - r.x0)];
                                for (o, &v) in drow[r.x0..r.x1].iter_mut().zip(s) {
                                    *o += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.h, g.w], out)
}

/// Dense convolution: `[N,Cin,H,W] * [Cout,Cin,k,k] -> [N,Cout,H,W]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    pad: PadMode,
) -> Result<Tensor<T>> {
    conv2d_grouped(input, kernel, bias, pad, 1)
}

/// Per-channel convolution with a `[C, 1, k, k]` kernel.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: PadMode,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = input.dims4()?;
    let (kc, _, _, _) = kernel.dims4()?;
    if kc != c {
        return Err(shape_err!(
            "depthwise kernel has {} channels, input has {}",
            kc,
            c
        ));
    }
    conv2d_grouped(input, kernel, None, pad, c)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of [`conv2d_grouped`] given the upstream gradient `grad_out`.
pub fn conv2d_grouped_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: PadMode,
    groups: usize,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, kernel, groups)?;
    if grad_out.shape() != [g.n, g.cout, g.h, g.w] {
        return Err(shape_err!(
            "conv grad_out {:?} for output [{}, {}, {}, {}]",
            grad_out.shape(),
            g.n,
            g.cout,
            g.h,
            g.w
        ));
    }
    let p = (g.k / 2) as isize;
    let plane = g.h * g.w;
    let mut gin = vec![T::zero(); input.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); g.cout];
    let (xd, kd, god) = (input.data(), kernel.data(), grad_out.data());
    for n in 0..g.n {
        for oc in 0..g.cout {
            let go = &god[(n * g.cout + oc) * plane..(n * g.cout + oc + 1) * plane];
            gb[oc] += go.iter().copied().sum();
            let grp = oc / g.cout_g;
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let base = (n * g.cin + ic) * plane;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let kidx = ((oc * g.cin_g + icl) * g.k + ky) * g.k + kx;
                        let wv = kd[kidx];
                        let (rs, nr) = runs(kx as isize - p, g.w, pad);
                        let mut acc = T::zero();
                        for y in 0..g.h {
                            let Some(sy) = src_row(y, ky as isize - p, g.h, pad) else {
                                continue;
                            };
                            let grow = &go[y * g.w..(y + 1) * g.w];
                            for r in &rs[..nr] {
                                let span = r.x1 - r.x0;
                                let s0 = base + sy * g.w + r.src0;
                                let srow = &xd[s0..s0 + span];
                                for (&gv, &xv) in grow[r.x0..r.x1].iter().zip(srow) {
                                    acc += gv * xv;
                                }
                                let girow = &mut gin[s0..s0 + span];
                                for (gi, &gv) in girow.iter_mut().zip(&grow[r.x0..r.x1]) {
                                    *gi += wv * gv;
                                }
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        bias: gb,
    })
}
