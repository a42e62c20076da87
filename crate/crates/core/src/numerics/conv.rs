//! Square-kernel 2D convolutions over `H x W x C` maps.
//!
//! Dense weights are laid out `[k, k, c_in, c_out]`, depth-wise weights `[k, k, c]`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Padding rule for one spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    Zero,
    Replicate,
    Wrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub row_pad: Pad,
    pub col_pad: Pad,
}

impl ConvSpec {
    pub fn same(pad: Pad) -> Self {
        ConvSpec { stride: 1, row_pad: pad, col_pad: pad }
    }

    pub fn strided(stride: usize, pad: Pad) -> Self {
        ConvSpec { stride, row_pad: pad, col_pad: pad }
    }
}

fn resolve(idx: isize, n: usize, pad: Pad) -> Option<usize> {
    let n_i = n as isize;
    if (0..n_i).contains(&idx) {
        return Some(idx as usize);
    }
    match pad {
        Pad::Zero => None,
        Pad::Replicate => Some(idx.clamp(0, n_i - 1) as usize),
        Pad::Wrap => Some(idx.rem_euclid(n_i) as usize),
    }
}

/// Source index per (output position, kernel tap) along one axis.
fn source_table(n_in: usize, n_out: usize, k: usize, stride: usize, pad: Pad) -> Vec<Option<usize>> {
    let half = (k / 2) as isize;
    let mut table = Vec::with_capacity(n_out * k);
    for o in 0..n_out {
        for t in 0..k {
            table.push(resolve((o * stride) as isize + t as isize - half, n_in, pad));
        }
    }
    table
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(format!("{what}: expected HxWxC, got {:?}", t.shape()))),
    }
}

struct Geometry {
    ho: usize,
    wo: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

fn geometry(h: usize, w: usize, k: usize, spec: ConvSpec) -> Result<Geometry> {
    if k % 2 == 0 {
        return Err(Error::dim("kernel size must be odd"));
    }
    if spec.stride == 0 || h % spec.stride != 0 || w % spec.stride != 0 {
        return Err(Error::config(format!(
            "extent {h}x{w} is not divisible by stride {}",
            spec.stride
        )));
    }
    let (ho, wo) = (h / spec.stride, w / spec.stride);
    Ok(Geometry {
        ho,
        wo,
        rows: source_table(h, ho, k, spec.stride, spec.row_pad),
        cols: source_table(w, wo, k, spec.stride, spec.col_pad),
    })
}

/// Dense convolution. Output extent is `H/stride x W/stride`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let (h, w, cin) = dims3(input, "conv2d input")?;
    let [k, k2, wcin, cout] = *weight.shape() else {
        return Err(Error::dim("conv2d weight must be [k, k, c_in, c_out]"));
    };
    if k != k2 || wcin != cin {
        return Err(Error::dim(format!(
            "conv2d weight {:?} vs input channels {cin}",
            weight.shape()
        )));
    }
    let g = geometry(h, w, k, spec)?;
    let mut out = Tensor::zeros(&[g.ho, g.wo, cout]);
    let x = input.data();
    let wt = weight.data();
    let od = out.data_mut();
    for i in 0..g.ho {
        for j in 0..g.wo {
            let o = &mut od[(i * g.wo + j) * cout..(i * g.wo + j + 1) * cout];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for ky in 0..k {
                let Some(r) = g.rows[i * k + ky] else { continue };
                for kx in 0..k {
                    let Some(c) = g.cols[j * k + kx] else { continue };
                    let src = &x[(r * w + c) * cin..(r * w + c + 1) * cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in src.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wt[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (ov, wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`conv2d`]; accumulates weight and bias gradients and returns
/// the input gradient.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: ConvSpec,
    grad_out: &Tensor,
    d_weight: &mut Tensor,
    d_bias: Option<&mut Tensor>,
) -> Result<Tensor> {
    let (h, w, cin) = dims3(input, "conv2d input")?;
    let k = weight.shape()[0];
    let cout = weight.shape()[3];
    let g = geometry(h, w, k, spec)?;
    let mut d_input = Tensor::zeros(&[h, w, cin]);
    let x = input.data();
    let wt = weight.data();
    let gd = grad_out.data();
    if let Some(db) = d_bias {
        let dbd = db.data_mut();
        for p in 0..g.ho * g.wo {
            for (d, gv) in dbd.iter_mut().zip(&gd[p * cout..(p + 1) * cout]) {
                *d += gv;
            }
        }
    }
    let dw = d_weight.data_mut();
    let dx = d_input.data_mut();
    for i in 0..g.ho {
        for j in 0..g.wo {
            let go = &gd[(i * g.wo + j) * cout..(i * g.wo + j + 1) * cout];
            for ky in 0..k {
                let Some(r) = g.rows[i * k + ky] else { continue };
                for kx in 0..k {
                    let Some(c) = g.cols[j * k + kx] else { continue };
                    let base = (r * w + c) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[base + ci];
                        let wrow = &wt[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let dwrow = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for ((dwv, wv), gv) in dwrow.iter_mut().zip(wrow).zip(go) {
                            *dwv += xv * gv;
                            acc += wv * gv;
                        }
                        dx[base + ci] += acc;
                    }
                }
            }
        }
    }
    Ok(d_input)
}

/// Depth-wise convolution (one `k x k` filter per channel), stride 1.
pub fn depthwise_conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let (h, w, c) = dims3(input, "depthwise input")?;
    let [k, k2, wc] = *weight.shape() else {
        return Err(Error::dim("depthwise weight must be [k, k, c]"));
    };
    if k != k2 || wc != c {
        return Err(Error::dim("depthwise weight/input channel mismatch"));
    }
    let g = geometry(h, w, k, spec)?;
    let mut out = Tensor::zeros(&[g.ho, g.wo, c]);
    let x = input.data();
    let wt = weight.data();
    let od = out.data_mut();
    for i in 0..g.ho {
        for j in 0..g.wo {
            let o = &mut od[(i * g.wo + j) * c..(i * g.wo + j + 1) * c];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for ky in 0..k {
                let Some(r) = g.rows[i * k + ky] else { continue };
                for kx in 0..k {
                    let Some(cc) = g.cols[j * k + kx] else { continue };
                    let src = &x[(r * w + cc) * c..(r * w + cc + 1) * c];
                    let wrow = &wt[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for ((ov, xv), wv) in o.iter_mut().zip(src).zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: ConvSpec,
    grad_out: &Tensor,
    d_weight: &mut Tensor,
    d_bias: Option<&mut Tensor>,
) -> Result<Tensor> {
    let (h, w, c) = dims3(input, "depthwise input")?;
    let k = weight.shape()[0];
    let g = geometry(h, w, k, spec)?;
    let mut d_input = Tensor::zeros(&[h, w, c]);
    let x = input.data();
    let wt = weight.data();
    let gd = grad_out.data();
    if let Some(db) = d_bias {
        let dbd = db.data_mut();
        for p in 0..g.ho * g.wo {
            for (d, gv) in dbd.iter_mut().zip(&gd[p * c..(p + 1) * c]) {
                *d += gv;
            }
        }
    }
    let dw = d_weight.data_mut();
    let dx = d_input.data_mut();
    for i in 0..g.ho {
        for j in 0..g.wo {
            let go = &gd[(i * g.wo + j) * c..(i * g.wo + j + 1) * c];
            for ky in 0..k {
                let Some(r) = g.rows[i * k + ky] else { continue };
                for kx in 0..k {
                    let Some(cc) = g.cols[j * k + kx] else { continue };
                    let base = (r * w + cc) * c;
                    let wb = (ky * k + kx) * c;
                    for ch in 0..c {
                        dw[wb + ch] += x[base + ch] * go[ch];
                        dx[base + ch] += wt[wb + ch] * go[ch];
                    }
                }
            }
        }
    }
    Ok(d_input)
}
