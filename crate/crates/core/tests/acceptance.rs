//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
//! when a criterion fails that is not listed in `KNOWN_FAILURES`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::oracle::{oracle_deformable, oracle_forward, oracle_mvaa};
use common::{randomize, rng, Probe};
use ego3rt::attention::{
    attention_weights, deformable, ffn, init_offset_bias, mvaa, polar, DeformableParams, EyeViews, FeaturePyramid,
    FfnParams, MvaaConfig, MvaaParams, PolarParams,
};
use ego3rt::boxes::{Box3d, BoxTarget, REG_CHANNELS};
use ego3rt::camera::{CameraModel, CameraRig, Extrinsics, Intrinsics};
use ego3rt::decoder::{ego3rt_forward, DecoderConfig, DecoderParams, SceneInput};
use ego3rt::eyes::{BevGrid, BevSampler, EyeGrid};
use ego3rt::harness::config::RunConfig;
use ego3rt::harness::eval::evaluate;
use ego3rt::harness::model::{loss_and_grads, Model, Pipeline};
use ego3rt::harness::scene::gen_scene;
use ego3rt::harness::train::{prepare_scene, train_on, training_scenes, Sgd, TrainOutcome};
use ego3rt::heads::{detection, encoder, segmentation, DetOutput, DetectionParams, EncoderParams, SegmentationParams};
use ego3rt::losses::{bce_masked, box_l1_loss, focal_loss_logits, total_loss, LossConfig, Targets};
use ego3rt::metrics::compute_nds;
use ego3rt::numerics::gradcheck::grad_check_fn;
use ego3rt::numerics::ops::{grouped_softmax_backward, linear_backward};
use ego3rt::numerics::sample::bilinear_sample_backward;
use ego3rt::numerics::{bilinear_sample, grad_check, grouped_softmax, linear, Tensor};
use ego3rt::params::Params;
use rand::Rng;

const KNOWN_FAILURES: &[usize] = &[1];

const GRAD_STEP: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn nds_rows() -> Outcome {
    let rows = [
        ("row A", 0.375, [0.657, 0.268, 0.391, 0.850, 0.206], 0.450),
        ("row B", 0.389, [0.599, 0.268, 0.470, 1.169, 0.172], 0.443),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, map, tp, want) in rows {
        let got = compute_nds(map, &tp);
        let ok = (got - want).abs() <= 0.0005 + 1e-12;
        pass &= ok;
        parts.push(format!("{name} {got:.4} vs {want:.3} ±0.0005 ({})", if ok { "ok" } else { "off" }));
    }
    outcome(pass, format!("NDS {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 2

fn random_rotation(r: &mut impl Rng) -> [[f64; 3]; 3] {
    let q = loop {
        let q: [f64; 4] = std::array::from_fn(|_| r.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn projection_oracle() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 10_000 {
        let rot = random_rotation(&mut r);
        let t: [f64; 3] = std::array::from_fn(|_| r.gen_range(-5.0..5.0));
        let mut k = Intrinsics::new(r.gen_range(0.2..2.0), r.gen_range(0.2..2.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0))
            .unwrap();
        k.b_x = r.gen_range(-0.5..0.5);
        let cam = CameraModel { intrinsics: k, extrinsics: Extrinsics::new(rot, t).unwrap(), view: 0 };
        let p: [f64; 3] = std::array::from_fn(|_| r.gen_range(-20.0..20.0));

        let mut e = [[0.0; 4]; 4];
        for i in 0..3 {
            e[i][..3].copy_from_slice(&rot[i]);
            e[i][3] = t[i];
        }
        e[3][3] = 1.0;
        let mut kk = [[0.0; 4]; 4];
        kk[0] = [k.f_u, 0.0, k.c_u, -k.f_u * k.b_x];
        kk[1] = [0.0, k.f_v, k.c_v, 0.0];
        kk[2] = [0.0, 0.0, 1.0, 0.0];
        kk[3] = [0.0, 0.0, 0.0, 1.0];
        let ph = [p[0], p[1], p[2], 1.0];
        let cam_h: Vec<f64> = (0..4).map(|i| (0..4).map(|j| e[i][j] * ph[j]).sum()).collect();
        let img: Vec<f64> = (0..4).map(|i| (0..4).map(|j| kk[i][j] * cam_h[j]).sum()).collect();
        if img[2].abs() < 0.1 {
            continue;
        }
        let (u, v) = (img[0] / img[2], img[1] / img[2]);
        let got = cam.project(p).unwrap();
        worst = worst.max((got.u - u).abs()).max((got.v - v).abs()).max((got.depth - img[2]).abs());
        n += 1;
    }
    outcome(worst < 1e-9, format!("projection vs homogeneous oracle, {n} pairs, max abs err {worst:.2e} (< 1e-9)"))
}

// ---------------------------------------------------------------- 3

fn attention_normalization() -> Outcome {
    let mut r = rng(3);
    let (mut worst, mut leaked, mut blind_ok) = (0.0f64, 0usize, true);
    let mut blind_eyes = 0;
    for trial in 0..1000u64 {
        let heads = r.gen_range(1..=4);
        let cfg = MvaaConfig {
            dim: 2 * heads,
            value_dim: 2,
            heads,
            points: r.gen_range(1..=4),
            scales: r.gen_range(1..=4),
            views: r.gen_range(1..=6),
            offset_scale: 0.05,
        };
        let mut p = MvaaParams::new(cfg, &mut rng(trial)).unwrap();
        randomize(&mut p, 2.0, trial + 10_000);
        let y: Vec<f64> = (0..cfg.dim).map(|_| r.gen_range(-3.0..3.0)).collect();
        let visible: Vec<usize> = (0..cfg.views).filter(|_| r.gen_bool(0.5)).collect();
        let (a, blind) = attention_weights(&p, &y, &visible).unwrap();
        if visible.is_empty() {
            blind_eyes += 1;
            blind_ok &= blind && a.iter().all(|&w| w == 0.0);
            continue;
        }
        for h in 0..heads {
            let mut total = 0.0;
            for l in 0..cfg.scales {
                for t in 0..cfg.views {
                    for k in 0..cfg.points {
                        let w = a[cfg.slot(h, l, t, k)];
                        if visible.contains(&t) {
                            total += w;
                        } else if w != 0.0 {
                            leaked += 1;
                        }
                    }
                }
            }
            worst = worst.max((total - 1.0).abs());
        }
    }
    outcome(
        worst < 1e-9 && leaked == 0 && blind_ok,
        format!(
            "1000 eyes ({blind_eyes} blind), max |sum - 1| {worst:.2e} (< 1e-9), {leaked} nonzero masked weights"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn micro_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.scene.image_width = 16;
    c.scene.image_height = 16;
    c.grid.radial = 4;
    c.grid.rays = 8;
    c.grid.bev_side = 16;
    c.grid.bev_cell = 1.0;
    c.decoder = DecoderConfig { layers: 1, dim: 8, pyramid_channels: 4, ffn_hidden: 8, ..DecoderConfig::default() };
    c.heads.encoder_blocks = 1;
    c.heads.seg_hidden = 4;
    c.heads.seg_ratio = 2;
    c.heads.heatmap_radius = 1;
    c.train.steps = 1;
    c.train.scenes = 1;
    c
}

fn offset_bias_law() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for h in 1..=4 {
        for l in 1..=4 {
            for t in 1..=4 {
                for p in 1..=4 {
                    let b = init_offset_bias(h, l, t, p).unwrap();
                    for (i, pair) in b.data().chunks(2).enumerate() {
                        let k = (i % p + 1) as f64;
                        let ulps = (pair[0].hypot(pair[1]) - k).abs() / (k * f64::EPSILON);
                        worst = worst.max(ulps);
                    }
                    configs += 1;
                }
            }
        }
    }

    let cfg = micro_run_config();
    let mut model = Model::new(&cfg).unwrap();
    let before = model.clone();
    let pipe = Pipeline::new(&cfg).unwrap();
    let ts = prepare_scene(gen_scene(0, &cfg).unwrap(), &pipe, &cfg).unwrap();
    let (_, grads) = loss_and_grads(&model, &pipe, &ts.input, &ts.targets, None, &cfg).unwrap();
    let mut sgd = Sgd::new(&model, &cfg.train.freeze);
    sgd.step(&mut model, &grads, cfg.train.lr, cfg.train.momentum, cfg.train.grad_clip);
    let mut biases = 0;
    let mut zero_grad = true;
    for (name, g) in grads.named() {
        if name.ends_with("offset_bias") {
            biases += 1;
            zero_grad &= g.data().iter().all(|&v| v == 0.0);
        }
    }
    let unchanged = model
        .named()
        .iter()
        .zip(before.named())
        .filter(|((n, _), _)| n.ends_with("offset_bias"))
        .all(|((_, a), (_, b))| *a == b);
    let moved = model != before;
    outcome(
        worst <= 2.0 && biases > 0 && zero_grad && unchanged && moved,
        format!(
            "{configs} configs, max |‖b_k‖ - k| {worst:.1} ulp of k (<= 2, rounding of k·cos, k·sin); {biases} bias tensors with zero gradient: {zero_grad}, \
             unchanged after SGD step: {unchanged}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn weighted(out: &[f64], w: &[f64]) -> f64 {
    out.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn fd(x: &[f64], analytic: &[f64], f: impl FnMut(&[f64]) -> f64) -> f64 {
    grad_check_fn(x, analytic, GRAD_STEP, f).unwrap()
}

fn probe_err<P: Params + Clone>(mut probe: Probe<P>, per_block: Option<usize>) -> f64 {
    grad_check(&mut probe, GRAD_STEP, per_block).unwrap().max_rel_error()
}

fn grad_linear() -> f64 {
    let mut r = rng(50);
    let w = Tensor::uniform(&[3, 4], 1.0, &mut r);
    let b = Tensor::uniform(&[3], 1.0, &mut r);
    let x = Tensor::uniform(&[4], 1.0, &mut r);
    let g = Tensor::uniform(&[3], 1.0, &mut r);
    let mut dw = Tensor::zeros_like(&w);
    let mut db = vec![0.0; 3];
    let dx = linear_backward(&w, x.data(), g.data(), &mut dw, &mut db);
    let e1 = fd(x.data(), &dx, |v| weighted(&linear(&w, b.data(), v).unwrap(), g.data()));
    let e2 = fd(w.data(), dw.data(), |v| {
        let w = Tensor::from_vec(&[3, 4], v.to_vec()).unwrap();
        weighted(&linear(&w, b.data(), x.data()).unwrap(), g.data())
    });
    let e3 = fd(b.data(), &db, |v| weighted(&linear(&w, v, x.data()).unwrap(), g.data()));
    e1.max(e2).max(e3)
}

fn grad_softmax() -> f64 {
    let mut r = rng(51);
    let z = Tensor::uniform(&[7], 2.0, &mut r);
    let g = Tensor::uniform(&[7], 1.0, &mut r);
    let groups = vec![vec![0, 3, 5], vec![1, 2], vec![6]];
    let p = grouped_softmax(z.data(), &groups).unwrap();
    let d = grouped_softmax_backward(&p, g.data(), &groups);
    fd(z.data(), &d, |v| weighted(&grouped_softmax(v, &groups).unwrap(), g.data()))
}

fn grad_bilinear() -> f64 {
    let mut r = rng(52);
    let map = Tensor::uniform(&[5, 6, 3], 1.0, &mut r);
    let g = [0.3, -0.7, 1.1];
    let mut worst: f64 = 0.0;
    for &(u, v) in &[(0.37, 0.52), (0.81, 0.13), (0.05, 0.93)] {
        let (dm, du, dv) = bilinear_sample_backward(&map, u, v, &g).unwrap();
        worst = worst.max(fd(map.data(), dm.data(), |m| {
            let map = Tensor::from_vec(&[5, 6, 3], m.to_vec()).unwrap();
            weighted(&bilinear_sample(&map, u, v).unwrap(), &g)
        }));
        worst = worst.max(fd(&[u, v], &[du, dv], |p| weighted(&bilinear_sample(&map, p[0], p[1]).unwrap(), &g)));
    }
    worst
}

fn small_mvaa_config() -> MvaaConfig {
    MvaaConfig { dim: 4, value_dim: 3, heads: 2, points: 2, scales: 2, views: 2, offset_scale: 0.05 }
}

fn random_pyramid(cfg: &MvaaConfig, seed: u64) -> FeaturePyramid {
    let mut r = rng(seed);
    let maps = (0..cfg.views)
        .map(|_| {
            (0..cfg.scales)
                .map(|l| {
                    let side = 8 >> l;
                    Tensor::uniform(&[side, side + 1, cfg.value_dim], 1.0, &mut r)
                })
                .collect()
        })
        .collect();
    FeaturePyramid::new(maps).unwrap()
}

fn random_mvaa(cfg: MvaaConfig, seed: u64) -> MvaaParams {
    let mut p = MvaaParams::new(cfg, &mut rng(seed)).unwrap();
    randomize(&mut p, 0.7, seed + 1);
    p
}

fn two_eye_views() -> EyeViews {
    EyeViews { per_eye: vec![vec![(0, 0.31, 0.62), (1, 0.77, 0.18)], vec![(1, 0.45, 0.53)], vec![]] }
}

fn grad_mvaa() -> f64 {
    let cfg = small_mvaa_config();
    let p = random_mvaa(cfg, 53);
    let pyr = random_pyramid(&cfg, 54);
    let mut inputs = vec![Tensor::uniform(&[3, cfg.dim], 1.0, &mut rng(55))];
    inputs.extend(pyr.into_maps().into_iter().flatten());
    let split = |x: &[Tensor]| {
        let maps: Vec<Vec<Tensor>> = x[1..].chunks(2).map(|c| c.to_vec()).collect();
        FeaturePyramid::new(maps).unwrap()
    };
    probe_err(
        Probe::new(
            p,
            inputs,
            56,
            Box::new(move |p, x| mvaa::forward(p, &x[0], &split(x), &two_eye_views()).map(|r| r.0)),
            Box::new(move |p, x, g| {
                let pyr = split(x);
                let (_, cache) = mvaa::forward(p, &x[0], &pyr, &two_eye_views())?;
                let mut grads = p.zeros_like();
                let (dq, dpyr) = mvaa::backward(p, &x[0], &pyr, &cache, g, &mut grads)?;
                let mut ins = vec![dq];
                ins.extend(dpyr.into_maps().into_iter().flatten());
                Ok((grads, ins))
            }),
        ),
        None,
    )
}

fn grad_polar() -> f64 {
    let grid = EyeGrid::build(3, 4, 1.0, 4.0, 0.0).unwrap();
    let mut p = PolarParams::new(4, 2, &mut rng(57)).unwrap();
    randomize(&mut p, 0.8, 58);
    let x = Tensor::uniform(&[12, 4], 1.0, &mut rng(59));
    let g2 = grid.clone();
    probe_err(
        Probe::new(
            p,
            vec![x],
            60,
            Box::new(move |p, x| polar::forward(p, &grid, &x[0]).map(|r| r.0)),
            Box::new(move |p, x, g| {
                let (_, cache) = polar::forward(p, &g2, &x[0])?;
                let mut grads = p.zeros_like();
                let dx = polar::backward(p, &g2, &x[0], &cache, g, &mut grads)?;
                Ok((grads, vec![dx]))
            }),
        ),
        None,
    )
}

fn grad_deformable() -> f64 {
    let grid = EyeGrid::build(3, 5, 1.0, 4.0, 0.0).unwrap();
    let mut p = DeformableParams::new(4, 2, 2, &mut rng(61)).unwrap();
    randomize(&mut p, 0.5, 62);
    // every sample sits near a cell middle, away from lattice lines and the radial clamp
    p.offset_gen.scale_assign(0.05);
    p.offset_bias.data_mut().iter_mut().for_each(|b| *b = b.round() + 0.5);
    let x = Tensor::uniform(&[15, 4], 1.0, &mut rng(64));
    for q in 0..15 {
        let off = linear(&p.offset_gen, p.offset_bias.data(), x.row(q)).unwrap();
        for o in off {
            let frac = o - o.floor();
            assert!(frac > 0.1 && frac < 0.9, "sample within 0.1 of a lattice line");
        }
    }
    let g2 = grid.clone();
    probe_err(
        Probe::new(
            p,
            vec![x],
            65,
            Box::new(move |p, x| deformable::forward(p, &grid, &x[0]).map(|r| r.0)),
            Box::new(move |p, x, g| {
                let (_, cache) = deformable::forward(p, &g2, &x[0])?;
                let mut grads = p.zeros_like();
                let dx = deformable::backward(p, &g2, &x[0], &cache, g, &mut grads)?;
                Ok((grads, vec![dx]))
            }),
        ),
        None,
    )
}

fn grad_ffn() -> f64 {
    let grid = EyeGrid::build(3, 4, 1.0, 4.0, 0.0).unwrap();
    let mut p = FfnParams::new(3, 5, &mut rng(66)).unwrap();
    randomize(&mut p, 0.8, 67);
    let x = Tensor::uniform(&[12, 3], 1.0, &mut rng(68));
    let g2 = grid.clone();
    probe_err(
        Probe::new(
            p,
            vec![x],
            69,
            Box::new(move |p, x| ffn::forward(p, &grid, &x[0]).map(|r| r.0)),
            Box::new(move |p, x, g| {
                let (_, cache) = ffn::forward(p, &g2, &x[0])?;
                let mut grads = p.zeros_like();
                let dx = ffn::backward(p, &g2, &x[0], &cache, g, &mut grads)?;
                Ok((grads, vec![dx]))
            }),
        ),
        None,
    )
}

fn grad_bev_sample() -> f64 {
    let mut r = rng(70);
    let eyes = EyeGrid::build(4, 12, 1.0, 4.0, 0.0).unwrap();
    let sampler = BevSampler::new(&eyes, BevGrid::new(10, 0.8).unwrap());
    let x = Tensor::uniform(&[48, 3], 1.0, &mut r);
    let go = Tensor::uniform(&[10, 10, 3], 1.0, &mut r);
    let dx = sampler.backward(&go);
    fd(x.data(), dx.data(), |v| {
        let x = Tensor::from_vec(&[48, 3], v.to_vec()).unwrap();
        weighted(sampler.forward(&x).unwrap().data(), go.data())
    })
}

fn grad_encoder() -> f64 {
    let mut p = EncoderParams::new(4, 2, &mut rng(71)).unwrap();
    randomize(&mut p, 0.6, 72);
    let x = Tensor::uniform(&[4, 4, 4], 1.0, &mut rng(73));
    let mut r = rng(74);
    let mask: Vec<bool> = (0..16).map(|_| r.gen_bool(0.8)).collect();
    let m2 = mask.clone();
    probe_err(
        Probe::new(
            p,
            vec![x],
            75,
            Box::new(move |p, x| encoder::forward(p, &x[0], &mask).map(|r| r.0)),
            Box::new(move |p, x, g| {
                let (_, cache) = encoder::forward(p, &x[0], &m2)?;
                let mut grads = p.zeros_like();
                let dx = encoder::backward(p, &cache, g, &mut grads)?;
                Ok((grads, vec![dx]))
            }),
        ),
        None,
    )
}

fn flatten(out: &DetOutput) -> Tensor {
    concat(&out.groups)
}

fn unflatten(like: &DetOutput, flat: &[f64]) -> DetOutput {
    let mut out = like.zeros_like();
    let mut k = 0;
    for g in &mut out.groups {
        let n = g.len();
        g.data_mut().copy_from_slice(&flat[k..k + n]);
        k += n;
    }
    out
}

fn concat(ts: &[Tensor]) -> Tensor {
    let data: Vec<f64> = ts.iter().flat_map(|t| t.data().to_vec()).collect();
    let n = data.len();
    Tensor::from_vec(&[n], data).unwrap()
}

fn grad_heads() -> f64 {
    let mut p = DetectionParams::new(4, &[2, 1], &mut rng(76)).unwrap();
    randomize(&mut p, 0.7, 77);
    let x = Tensor::uniform(&[3, 3, 4], 1.0, &mut rng(78));
    let det = probe_err(
        Probe::new(
            p,
            vec![x],
            79,
            Box::new(|p, x| detection::forward(p, &x[0]).map(|r| flatten(&r.0))),
            Box::new(|p, x, g| {
                let (out, cache) = detection::forward(p, &x[0])?;
                let mut grads = p.zeros_like();
                let dx = detection::backward(p, &cache, &unflatten(&out, g.data()), &mut grads)?;
                Ok((grads, vec![dx]))
            }),
        ),
        None,
    );

    let mut p = SegmentationParams::new(3, 4, 2, 6, &mut rng(80)).unwrap();
    randomize(&mut p, 0.8, 81);
    let x = Tensor::uniform(&[2, 2, 3], 1.0, &mut rng(82));
    let seg = probe_err(
        Probe::new(
            p,
            vec![x],
            83,
            Box::new(|p, x| segmentation::forward(p, &x[0]).map(|r| concat(&r.0))),
            Box::new(|p, x, g| {
                let (outs, cache) = segmentation::forward(p, &x[0])?;
                let mut k = 0;
                let split: Vec<Tensor> = outs
                    .iter()
                    .map(|o| {
                        let t = Tensor::from_vec(o.shape(), g.data()[k..k + o.len()].to_vec()).unwrap();
                        k += o.len();
                        t
                    })
                    .collect();
                let mut grads = p.zeros_like();
                let dx = segmentation::backward(p, &cache, &split, &mut grads)?;
                Ok((grads, vec![dx]))
            }),
        ),
        Some(60),
    );
    det.max(seg)
}

fn grad_losses() -> f64 {
    let mut r = rng(84);
    let mut worst: f64 = 0.0;

    let z: Vec<f64> = (0..12).map(|_| r.gen_range(-4.0..4.0)).collect();
    let mut y: Vec<f64> = (0..12).map(|_| r.gen_range(0.0..0.99)).collect();
    y[3] = 1.0;
    y[7] = 1.0;
    for (alpha, beta) in [(2.0, 4.0), (0.0, 0.0), (1.5, 2.0)] {
        let (_, g) = focal_loss_logits(&z, &y, alpha, beta, 2.0);
        worst = worst.max(fd(&z, &g, |v| focal_loss_logits(v, &y, alpha, beta, 2.0).0));
    }

    let z: Vec<f64> = (0..10).map(|_| r.gen_range(-5.0..5.0)).collect();
    let y: Vec<f64> = (0..10).map(|_| r.gen_range(0..2) as f64).collect();
    let mask: Vec<bool> = (0..10).map(|i| i % 4 != 0).collect();
    let (_, g) = bce_masked(&z, &y, &mask);
    worst = worst.max(fd(&z, &g, |v| bce_masked(v, &y, &mask).0));

    // residuals kept away from the kink at 0
    let t: Vec<[f64; REG_CHANNELS]> = (0..3).map(|_| std::array::from_fn(|_| r.gen_range(-1.0..1.0))).collect();
    let p: Vec<[f64; REG_CHANNELS]> = t
        .iter()
        .map(|row| row.map(|v| v + if r.gen_bool(0.5) { 1.0 } else { -1.0 } * r.gen_range(0.05..0.5)))
        .collect();
    let (_, g) = box_l1_loss(&p, &t);
    let flat: Vec<f64> = p.iter().flatten().copied().collect();
    let gflat: Vec<f64> = g.iter().flatten().copied().collect();
    worst = worst.max(fd(&flat, &gflat, |v| {
        let rows: Vec<[f64; REG_CHANNELS]> = v.chunks(REG_CHANNELS).map(|c| c.try_into().unwrap()).collect();
        box_l1_loss(&rows, &t).0
    }));

    let side = 4;
    let det = DetOutput {
        side,
        groups: vec![
            Tensor::uniform(&[side * side, 2 + REG_CHANNELS], 2.0, &mut r),
            Tensor::uniform(&[side * side, 1 + REG_CHANNELS], 2.0, &mut r),
        ],
    };
    let seg = vec![Tensor::uniform(&[8, 8], 3.0, &mut r), Tensor::uniform(&[8, 8], 3.0, &mut r)];
    let grid = BevGrid::new(side, 1.0).unwrap();
    let boxes = [
        Box3d { class: 0, x: 0.7, y: -1.2, z: 0.5, l: 2.0, w: 1.0, h: 1.4, yaw: 0.3, vx: 0.0, vy: 0.0 },
        Box3d { class: 2, x: -1.4, y: 0.6, z: 0.4, l: 1.5, w: 1.2, h: 1.1, yaw: -0.8, vx: 0.0, vy: 0.0 },
    ];
    let objects =
        vec![BoxTarget::encode(&boxes[0], grid, 0).unwrap(), BoxTarget::encode(&boxes[1], grid, 1).unwrap()];
    let mut heat0 = Tensor::zeros(&[side * side, 2]);
    heat0.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.0..0.9));
    heat0.data_mut()[(objects[0].row * side + objects[0].col) * 2] = 1.0;
    let mut heat1 = Tensor::zeros(&[side * side, 1]);
    heat1.data_mut()[objects[1].row * side + objects[1].col] = 1.0;
    let seg_t = (0..2)
        .map(|_| Tensor::from_vec(&[8, 8], (0..64).map(|_| r.gen_range(0..2) as f64).collect()).unwrap())
        .collect();
    let targets = Targets {
        heatmaps: vec![heat0, heat1],
        objects,
        seg: seg_t,
        seg_mask: (0..64).map(|i| i % 5 != 0).collect(),
    };
    let cfg = LossConfig {
        classes: vec!["a".into(), "b".into(), "c".into()],
        groups: vec![vec![0, 1], vec![2]],
        lambda_cls: 0.7,
        lambda_box: 1.3,
        lambda_seg: vec![0.5, 2.0],
        ..LossConfig::default()
    };
    let (_, grads) = total_loss(&det, &seg, &targets, &cfg).unwrap();
    worst = worst.max(fd(flatten(&det).data(), flatten(&grads.det).data(), |v| {
        total_loss(&unflatten(&det, v), &seg, &targets, &cfg).unwrap().0.total
    }));
    worst = worst.max(fd(concat(&seg).data(), concat(&grads.seg).data(), |v| {
        let seg = vec![
            Tensor::from_vec(&[8, 8], v[..64].to_vec()).unwrap(),
            Tensor::from_vec(&[8, 8], v[64..].to_vec()).unwrap(),
        ];
        total_loss(&det, &seg, &targets, &cfg).unwrap().0.total
    }));
    worst
}

fn micro_scene(seed: u64) -> SceneInput {
    let rig = CameraRig::ring(4, 100.0, 1.6, 12.0, 16, 16).unwrap();
    let mut r = rng(seed);
    let images = (0..rig.n_views()).map(|_| Tensor::uniform(&[16, 16, 3], 0.5, &mut r)).collect();
    SceneInput::new(rig, images).unwrap()
}

fn micro_grid() -> EyeGrid {
    EyeGrid::build(4, 8, 2.0, 8.0, 0.8).unwrap()
}

fn micro_decoder(seed: u64) -> DecoderParams {
    let cfg = DecoderConfig { dim: 8, pyramid_channels: 4, ffn_hidden: 8, offset_scale: 0.05, ..DecoderConfig::default() };
    let mut p = DecoderParams::new(cfg, 4, &mut rng(seed)).unwrap();
    randomize(&mut p, 0.4, seed + 1);
    p
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks: [(&str, fn() -> f64); 11] = [
        ("linear", grad_linear),
        ("softmax", grad_softmax),
        ("bilinear", grad_bilinear),
        ("mvaa", grad_mvaa),
        ("polar", grad_polar),
        ("deformable", grad_deformable),
        ("ffn", grad_ffn),
        ("bev_sample", grad_bev_sample),
        ("encoder", grad_encoder),
        ("heads", grad_heads),
        ("losses", grad_losses),
    ];
    let mut worst = (0.0f64, "");
    let mut failing = Vec::new();
    for (name, f) in &checks {
        let e = f();
        if !(e < GRAD_TOL) {
            failing.push(format!("{name} {e:.2e}"));
        }
        if e > worst.0 || e.is_nan() {
            worst = (e, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failing.is_empty() && secs < 120.0;
    let mut detail = format!(
        "{} gradient checks at step 1e-3, worst rel err {:.2e} ({}) (< 1e-4), {secs:.1} s (< 120 s)",
        checks.len(),
        worst.0, worst.1
    );
    if !failing.is_empty() {
        detail.push_str(&format!("; failing: {}", failing.join(", ")));
    }
    outcome(pass, detail)
}

// ---------------------------------------------------------------- 6

fn max_row_diff(out: &Tensor, want: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (q, row) in want.iter().enumerate() {
        for (a, b) in out.row(q).iter().zip(row) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn oracle_equivalence() -> Outcome {
    let cfg = small_mvaa_config();
    let p = random_mvaa(cfg, 100);
    let pyr = random_pyramid(&cfg, 101);
    let views = two_eye_views();
    let q = Tensor::uniform(&[3, cfg.dim], 1.0, &mut rng(102));
    let out = mvaa::mvaa(&q, &pyr, &views, &p).unwrap();
    let want: Vec<Vec<f64>> = (0..3).map(|e| oracle_mvaa(&p, &pyr, q.row(e), &views.per_eye[e])).collect();
    let d_mvaa = max_row_diff(&out, &want);

    let grid = EyeGrid::build(3, 6, 1.0, 4.0, 0.0).unwrap();
    let mut p = DeformableParams::new(6, 3, 3, &mut rng(103)).unwrap();
    randomize(&mut p, 0.8, 104);
    let x = Tensor::uniform(&[18, 6], 1.0, &mut rng(105));
    let out = deformable::deformable_self_attention(&x, &grid, &p).unwrap();
    let rows: Vec<Vec<f64>> = (0..18).map(|q| x.row(q).to_vec()).collect();
    let d_def = max_row_diff(&out, &oracle_deformable(&rows, &grid, &p));

    let scene = micro_scene(106);
    let grid = micro_grid();
    let params = micro_decoder(107);
    let out = ego3rt_forward(&scene, &grid, &params).unwrap();
    let d_full = max_row_diff(&out, &oracle_forward(&scene, &grid, &params));

    let worst = d_mvaa.max(d_def).max(d_full);
    outcome(
        worst < 1e-8,
        format!("max abs diff mvaa {d_mvaa:.1e}, deformable {d_def:.1e}, ego3rt_forward {d_full:.1e} (< 1e-8)"),
    )
}

// ---------------------------------------------------------------- 7

fn polar_isolation() -> Outcome {
    let mut r = rng(7);
    let mut touched = 0;
    let mut violations = 0;
    for trial in 0..200u64 {
        let (radial, rays) = (r.gen_range(1..=5), r.gen_range(2..=8));
        let heads = r.gen_range(1..=3);
        let dim = 2 * heads;
        let grid = EyeGrid::build(radial, rays, 1.0, 6.0, 0.0).unwrap();
        let mut p = PolarParams::new(dim, heads, &mut rng(trial)).unwrap();
        randomize(&mut p, 0.8, trial + 1000);
        let x = Tensor::uniform(&[grid.len(), dim], 1.0, &mut r);
        let base = polar::polar_attention(&x, &grid, &p).unwrap();
        let (i, j) = (r.gen_range(0..radial), r.gen_range(0..rays));
        let mut y = x.clone();
        for v in y.row_mut(grid.index(i, j)) {
            *v += r.gen_range(-1.0..1.0);
        }
        let moved = polar::polar_attention(&y, &grid, &p).unwrap();
        for a in 0..radial {
            for b in 0..rays {
                let q = grid.index(a, b);
                let same = base.row(q).iter().zip(moved.row(q)).all(|(u, v)| u.to_bits() == v.to_bits());
                if b != j && !same {
                    violations += 1;
                }
                if b == j && !same {
                    touched += 1;
                }
            }
        }
    }
    outcome(
        violations == 0 && touched > 0,
        format!("200 perturbations, {violations} off-ray outputs changed (bitwise), {touched} on-ray outputs changed"),
    )
}

// ---------------------------------------------------------------- 8

fn bev_sampler() -> Outcome {
    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    let mut mask_mismatch = 0;
    let mut valid_cells = 0;
    for _ in 0..20 {
        let (radial, rays) = (r.gen_range(2..=8), r.gen_range(4..=32));
        let r_min = r.gen_range(0.5..3.0);
        let r_max = r_min + r.gen_range(1.0..10.0);
        let eyes = EyeGrid::build(radial, rays, r_min, r_max, 0.0).unwrap();
        let side = r.gen_range(4..=40);
        let bev = BevGrid::new(side, 2.0 * r_max * r.gen_range(0.6..1.4) / side as f64).unwrap();
        let sampler = BevSampler::new(&eyes, bev);
        let c: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut x = Tensor::zeros(&[eyes.len(), 3]);
        for q in 0..eyes.len() {
            x.row_mut(q).copy_from_slice(&c);
        }
        let out = sampler.forward(&x).unwrap();
        let mask = sampler.mask();
        for row in 0..side {
            for col in 0..side {
                let (px, py) = bev.cell_center(row, col);
                let rho = px.hypot(py);
                let inside = rho >= r_min && rho <= r_max;
                let cell = row * side + col;
                if inside != mask[cell] {
                    mask_mismatch += 1;
                }
                if mask[cell] {
                    valid_cells += 1;
                    for (k, want) in c.iter().enumerate() {
                        worst = worst.max((out.data()[cell * 3 + k] - want).abs());
                    }
                }
            }
        }
    }
    outcome(
        worst < 1e-9 && mask_mismatch == 0 && valid_cells > 0,
        format!(
            "20 grids, {valid_cells} valid cells, max |out - c| {worst:.1e} (< 1e-9), {mask_mismatch} mask mismatches \
             vs analytic annulus"
        ),
    )
}

// ---------------------------------------------------------------- 9, 10

struct Run {
    outcome: TrainOutcome,
    evaluation: ego3rt::harness::eval::Evaluation,
    secs: f64,
}

fn overfit_run(cfg: &RunConfig) -> Run {
    let start = Instant::now();
    let scenes = training_scenes(cfg).unwrap();
    let model = Model::new(cfg).unwrap();
    let outcome = train_on(cfg, scenes.clone(), model, None).unwrap();
    let evaluation = evaluate(&outcome.model, &scenes, cfg).unwrap();
    Run { outcome, evaluation, secs: start.elapsed().as_secs_f64() }
}

fn overfit(cfg: &RunConfig, run: &Run) -> Outcome {
    let ev = &run.evaluation;
    let iou_ok = ev.report.iou.iter().all(|(_, v)| *v >= 0.85);
    let centers: usize = ev.center_errors.iter().map(Vec::len).sum();
    let max_err = ev.max_center_error();
    let cell = cfg.grid.bev_cell;
    let ious: Vec<String> = ev.report.iou.iter().map(|(n, v)| format!("{n} {v:.3}")).collect();
    outcome(
        iou_ok && max_err <= cell && centers > 0 && run.secs < 600.0 && cfg.train.steps <= 2000,
        format!(
            "{} scenes, {} steps: IoU {} (>= 0.85), {centers} objects, max center err {max_err:.3} m (<= {cell} m), \
             {:.0} s (< 600 s)",
            cfg.train.scenes,
            run.outcome.log.len(),
            ious.join(", "),
            run.secs
        ),
    )
}

fn determinism(a: &Run, b: &Run) -> Outcome {
    let logs = a.outcome.log == b.outcome.log;
    let models = a.outcome.model == b.outcome.model;
    let metrics = format!("{:?}", a.evaluation) == format!("{:?}", b.evaluation);
    outcome(
        logs && models && metrics,
        format!(
            "identical loss logs ({} records): {logs}, identical weights: {models}, identical metrics: {metrics}",
            a.outcome.log.len()
        ),
    )
}

fn main() -> ExitCode {
    std::env::set_var("EGO3RT_THREADS", "1");
    let quick = std::env::args().any(|a| a == "--quick");
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, nds_rows());
    let t = Instant::now();
    let mut o = projection_oracle();
    o.detail.push_str(&format!(", {:.2} s (< 1 s)", t.elapsed().as_secs_f64()));
    o.pass &= t.elapsed().as_secs_f64() < 1.0;
    report(2, o);
    report(3, attention_normalization());
    report(4, offset_bias_law());
    report(5, gradient_suite());
    report(6, oracle_equivalence());
    report(7, polar_isolation());
    report(8, bev_sampler());
    if quick {
        println!("criteria 9 and 10 skipped (--quick)");
    } else {
        let cfg = RunConfig::default();
        let first = overfit_run(&cfg);
        report(9, overfit(&cfg, &first));
        let second = overfit_run(&cfg);
        report(10, determinism(&first, &second));
    }

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    let unexpected: Vec<usize> = failed.iter().copied().filter(|n| !KNOWN_FAILURES.contains(n)).collect();
    println!(
        "acceptance: {}/{} criteria pass; failing {:?}, of which documented {:?}, unexpected {:?}",
        results.len() - failed.len(),
        results.len(),
        failed,
        failed.iter().filter(|n| KNOWN_FAILURES.contains(n)).collect::<Vec<_>>(),
        unexpected
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
