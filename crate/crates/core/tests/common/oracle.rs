//! Straightforward nested-loop reimplementations used as test oracles. They
//! share no code with the library beyond plain tensor storage.

use ego3rt::attention::{DeformableParams, EyeViews, FeaturePyramid, FfnParams, MvaaParams, PolarParams};
use ego3rt::decoder::{DecoderParams, SceneInput};
use ego3rt::eyes::EyeGrid;
use ego3rt::numerics::Tensor;
use ego3rt::params::LayerNormParams;

/// Clamped bilinear lookup at normalized (u, v), written independently of the
/// library sampler.
pub fn oracle_sample(map: &Tensor, u: f64, v: f64) -> Vec<f64> {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let y = (v * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
    let x = (u * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, q: usize, ch: usize| map.data()[(r * w + q) * c + ch];
    (0..c)
        .map(|ch| {
            at(y0, x0, ch) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x1, ch) * (1.0 - fy) * fx
                + at(y1, x0, ch) * fy * (1.0 - fx)
                + at(y1, x1, ch) * fy * fx
        })
        .collect()
}

/// Direct nested-loop evaluation of the MVAA update for one eye.
pub fn oracle_mvaa(p: &MvaaParams, pyr: &FeaturePyramid, y: &[f64], seen: &[(usize, f64, f64)]) -> Vec<f64> {
    let c = p.config;
    let d = c.dim / c.heads;
    let mut out = vec![0.0; c.dim];
    if seen.is_empty() {
        return out;
    }
    let w = |t: &Tensor, i: usize, j: usize| t.data()[i * t.shape()[1] + j];
    for h in 0..c.heads {
        let mut logits = Vec::new();
        for l in 0..c.scales {
            for &(t, _, _) in seen {
                for k in 0..c.points {
                    let a = c.slot(h, l, t, k);
                    let z: f64 = (0..c.dim).map(|j| w(&p.weight_gen, a, j) * y[j]).sum::<f64>() + p.weight_bias.data()[a];
                    logits.push(z);
                }
            }
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
        let mut agg = vec![0.0; d];
        let mut idx = 0;
        for l in 0..c.scales {
            for &(t, u, v) in seen {
                for k in 0..c.points {
                    let a = c.slot(h, l, t, k);
                    let weight = (logits[idx] - m).exp() / z;
                    idx += 1;
                    let du: f64 = (0..c.dim).map(|j| w(&p.offset_gen, 2 * a, j) * y[j]).sum::<f64>()
                        + p.offset_bias.data()[2 * a];
                    let dv: f64 = (0..c.dim).map(|j| w(&p.offset_gen, 2 * a + 1, j) * y[j]).sum::<f64>()
                        + p.offset_bias.data()[2 * a + 1];
                    let s = oracle_sample(pyr.map(t, l), u + c.offset_scale * du, v + c.offset_scale * dv);
                    for i in 0..d {
                        let val: f64 = (0..c.value_dim).map(|j| w(&p.value_proj, h * d + i, j) * s[j]).sum();
                        agg[i] += weight * val;
                    }
                }
            }
        }
        for i in 0..d {
            out[h * d + i] = (0..d).map(|j| p.output_proj.data()[(h * d + i) * d + j] * agg[j]).sum();
        }
    }
    out
}

fn mat(t: &Tensor, i: usize, j: usize) -> f64 {
    t.data()[i * t.shape()[1] + j]
}

fn affine(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    (0..w.shape()[0])
        .map(|i| (0..w.shape()[1]).map(|j| mat(w, i, j) * x[j]).sum::<f64>() + b.map_or(0.0, |b| b.data()[i]))
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
    x.iter().map(|v| (v - m).exp() / z).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// 3x3 convolution with replicated borders; output `(i, j)` is centered on
/// input `(i * stride, j * stride)`.
pub fn oracle_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[3];
    let (ho, wo) = (h / stride, wd / stride);
    let mut out = Tensor::zeros(&[ho, wo, cout]);
    for i in 0..ho {
        for j in 0..wo {
            for o in 0..cout {
                let mut acc = b.data()[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let r = (i as isize * stride as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                        let c = (j as isize * stride as isize + kx as isize - 1).clamp(0, wd as isize - 1) as usize;
                        for ci in 0..cin {
                            acc += w.data()[((ky * 3 + kx) * cin + ci) * cout + o] * x.data()[(r * wd + c) * cin + ci];
                        }
                    }
                }
                out.data_mut()[(i * wo + j) * cout + o] = acc;
            }
        }
    }
    out
}

pub fn oracle_pyramid(images: &[Tensor], p: &ego3rt::decoder::PyramidParams) -> FeaturePyramid {
    let maps = images
        .iter()
        .map(|img| {
            let mut x = img.clone();
            let mut out = Vec::new();
            for (l, c) in p.convs.iter().enumerate() {
                if l > 0 {
                    x.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
                }
                x = oracle_conv(&x, &c.weight, &c.bias, if l == 0 { 1 } else { 2 });
                out.push(x.clone());
            }
            out
        })
        .collect();
    FeaturePyramid::new(maps).unwrap()
}

pub fn oracle_layer_norm(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * p.gamma.data()[j] + p.beta.data()[j])
        .collect()
}

/// Bilinear lookup on the eye map at index-space (radial, angular) with
/// clamped radial and periodic angular axes.
fn eye_map_sample(values: &[Vec<f64>], r: usize, s: usize, row: f64, col: f64) -> Vec<f64> {
    let row = row.clamp(0.0, (r - 1) as f64);
    let (r0, fr) = if r == 1 {
        (0, 0.0)
    } else {
        let r0 = (row.floor() as usize).min(r - 2);
        (r0, row - r0 as f64)
    };
    let r1 = (r0 + 1).min(r - 1);
    let col = col.rem_euclid(s as f64);
    let c0 = (col.floor() as usize).min(s - 1);
    let fc = col - c0 as f64;
    let c1 = (c0 + 1) % s;
    let dim = values[0].len();
    (0..dim)
        .map(|k| {
            values[r0 * s + c0][k] * (1.0 - fr) * (1.0 - fc)
                + values[r0 * s + c1][k] * (1.0 - fr) * fc
                + values[r1 * s + c0][k] * fr * (1.0 - fc)
                + values[r1 * s + c1][k] * fr * fc
        })
        .collect()
}

pub fn oracle_deformable(x: &[Vec<f64>], grid: &EyeGrid, p: &DeformableParams) -> Vec<Vec<f64>> {
    let (r, s) = (grid.radial(), grid.rays());
    let dim = p.dim();
    let d = dim / p.heads;
    let values: Vec<Vec<f64>> = x.iter().map(|y| affine(&p.value, Some(&p.value_bias), y)).collect();
    x.iter()
        .enumerate()
        .map(|(q, y)| {
            let logits = affine(&p.weight_gen, Some(&p.weight_bias), y);
            let off = affine(&p.offset_gen, Some(&p.offset_bias), y);
            let mut agg = vec![0.0; dim];
            for h in 0..p.heads {
                let a = softmax(&logits[h * p.points..(h + 1) * p.points]);
                for k in 0..p.points {
                    let slot = h * p.points + k;
                    let v = eye_map_sample(
                        &values,
                        r,
                        s,
                        (q / s) as f64 + off[2 * slot],
                        (q % s) as f64 + off[2 * slot + 1],
                    );
                    for i in 0..d {
                        agg[h * d + i] += a[k] * v[h * d + i];
                    }
                }
            }
            affine(&p.out, Some(&p.out_bias), &agg)
        })
        .collect()
}

pub fn oracle_polar(x: &[Vec<f64>], grid: &EyeGrid, p: &PolarParams) -> Vec<Vec<f64>> {
    let (r, s) = (grid.radial(), grid.rays());
    let dim = p.dim();
    let d = dim / p.heads;
    let q: Vec<Vec<f64>> = x.iter().map(|y| affine(&p.wq, Some(&p.bq), y)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|y| affine(&p.wk, Some(&p.bk), y)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|y| affine(&p.wv, Some(&p.bv), y)).collect();
    (0..r * s)
        .map(|e| {
            let ray = e % s;
            let mut mixed = vec![0.0; dim];
            for h in 0..p.heads {
                let scores: Vec<f64> = (0..r)
                    .map(|b| (0..d).map(|i| q[e][h * d + i] * k[b * s + ray][h * d + i]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for b in 0..r {
                    for i in 0..d {
                        mixed[h * d + i] += a[b] * v[b * s + ray][h * d + i];
                    }
                }
            }
            affine(&p.wo, Some(&p.bo), &mixed)
        })
        .collect()
}

pub fn oracle_ffn(x: &[Vec<f64>], grid: &EyeGrid, p: &FfnParams) -> Vec<Vec<f64>> {
    let (r, s) = (grid.radial(), grid.rays());
    let e = p.hidden();
    let h: Vec<Vec<f64>> = x.iter().map(|y| affine(&p.expand, Some(&p.expand_bias), y)).collect();
    (0..r * s)
        .map(|q| {
            let (i, j) = (q / s, q % s);
            let act: Vec<f64> = (0..e)
                .map(|ch| {
                    let mut acc = p.dw_bias.data()[ch];
                    for ky in 0..3 {
                        let ii = i as isize + ky as isize - 1;
                        if ii < 0 || ii >= r as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let jj = (j as isize + kx as isize - 1).rem_euclid(s as isize) as usize;
                            acc += p.dw.data()[(ky * 3 + kx) * e + ch] * h[ii as usize * s + jj][ch];
                        }
                    }
                    gelu(acc)
                })
                .collect();
            affine(&p.contract, Some(&p.contract_bias), &act)
        })
        .collect()
}

fn residual(
    x: &mut [Vec<f64>],
    norm: &LayerNormParams,
    block: impl Fn(&[Vec<f64>]) -> Vec<Vec<f64>>,
) {
    let normed: Vec<Vec<f64>> = x.iter().map(|y| oracle_layer_norm(y, norm)).collect();
    for (y, u) in x.iter_mut().zip(block(&normed)) {
        for (a, b) in y.iter_mut().zip(u) {
            *a += b;
        }
    }
}

/// Full image-to-eye forward pass.
pub fn oracle_forward(scene: &SceneInput, grid: &EyeGrid, p: &DecoderParams) -> Vec<Vec<f64>> {
    let pyr = oracle_pyramid(&scene.images, &p.pyramid);
    let views = EyeViews::compute(&scene.rig, grid.positions());
    let mut x: Vec<Vec<f64>> = vec![p.eye_init.data().to_vec(); grid.len()];
    for layer in &p.layers {
        residual(&mut x, &layer.norm_self, |n| oracle_deformable(n, grid, &layer.deform));
        residual(&mut x, &layer.norm_polar, |n| oracle_polar(n, grid, &layer.polar));
        residual(&mut x, &layer.norm_cross, |n| {
            n.iter().enumerate().map(|(q, y)| oracle_mvaa(&layer.mvaa, &pyr, y, &views.per_eye[q])).collect()
        });
        residual(&mut x, &layer.norm_ffn, |n| oracle_ffn(n, grid, &layer.ffn));
    }
    x
}
