//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every criterion executes even when an
//! earlier one fails. Oracles here are written independently of the library
//! code they check. `DFN_ACCEPTANCE_ONLY=1,4` restricts the run.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depthcast::autograd::{Graph, Var};
use depthcast::evaluation::{compute_metrics, EvalConfig};
use depthcast::geometry::{
    inverse_warp, pose_to_matrix, reproject_pixels, se3_compose, se3_invert, CameraIntrinsics,
    PixelGrid, Pose6DoF, RotationOrder, Se3,
};
use depthcast::losses::{
    automask, dissimilarity_loss, masked_photometric_loss, objective, pose_consistency_loss, smoothness_loss,
    smoothness_var, ssim_var, total_loss, LossConfig, LossWeights, PoseConsistency, Reduce, ViewTriplet, WarpSetup,
};
use depthcast::pipeline::{
    evaluate_records, forecast_infer, load_checkpoint, min_window_t, save_checkpoint, train_loop, window_indices,
    Checkpoint, ModelConfig, TrainConfig, TrainOutput, POSENET_PREFIX,
};
use depthcast::posenet::PoseNetConfig;
use depthcast::synthdata::{
    camera_object_mask, generate_dataset, generate_scene, render_sequence, world_to_camera, Anchor, GeneratorConfig,
    SceneSpec, SequenceRecord,
};
use depthcast::{DepthMap, Frame, Mask, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// shared helpers

fn random_intrinsics(rng: &mut ChaCha8Rng, h: usize, w: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(
        rng.gen_range(40.0..200.0),
        rng.gen_range(40.0..200.0),
        rng.gen_range(0.0..w as f64),
        rng.gen_range(0.0..h as f64),
    )
    .unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose6DoF {
    Pose6DoF::from_slice(&[
        rng.gen_range(-trans..trans),
        rng.gen_range(-trans..trans),
        rng.gen_range(-trans..trans),
        rng.gen_range(-rot..rot),
        rng.gen_range(-rot..rot),
        rng.gen_range(-rot..rot),
    ])
    .unwrap()
}

fn mat_mul4(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `Σ w ⊙ x` with fixed pseudo-random weights, so every output entry
/// contributes a distinct amount to the scalar.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = g.mul_const(x, w).unwrap();
    g.sum_all(y)
}

/// Central differences of `f` at `x0` against the graph gradient.
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-3 · max|n|)`.
fn fd_check(x0: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64, analytic: &[f64]) -> (f64, usize) {
    assert_eq!(x0.len(), analytic.len());
    let numeric: Vec<f64> = (0..x0.len())
        .map(|i| {
            let mut hi = x0.to_vec();
            hi[i] += eps;
            let mut lo = x0.to_vec();
            lo[i] -= eps;
            (f(&hi) - f(&lo)) / (2.0 * eps)
        })
        .collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    if std::env::var("DFN_FD_DEBUG").is_ok() {
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let r = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if r > 1e-3 {
                eprintln!("entry {i}: analytic {a:.6e} numeric {n:.6e} rel {r:.2e}");
            }
        }
    }
    (worst, numeric.len())
}

fn textured(h: usize, w: usize, phase: f64) -> Tensor {
    Tensor::from_fn3(3, h, w, |c, y, x| {
        0.5 + 0.22 * ((x as f64 + phase) * 0.41 + 0.9 * c as f64).sin() * ((y as f64) * 0.37 - 0.3 * phase).cos()
            + 0.05 * ((x + 2 * y) as f64 * 0.13).sin()
    })
}

// ---------------------------------------------------------------------------
// 1

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (h, w) = (12, 20);
    let grid = PixelGrid::new(h, w);
    let (mut id_err, mut x_err, mut z_err, mut se3_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let k = random_intrinsics(&mut rng, h, w);
        let depth: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.5..80.0)).collect();
        let d = DepthMap::new(Tensor::from_vec(&[1, h, w], depth.clone()).unwrap()).unwrap();

        let id = reproject_pixels(&grid, &d, &k, &Se3::identity()).unwrap();
        let tx = rng.gen_range(-3.0..3.0);
        let tz = rng.gen_range(-0.45..3.0);
        let cx = reproject_pixels(&grid, &d, &k, &Se3::from_translation([tx, 0.0, 0.0])).unwrap();
        let cz = reproject_pixels(&grid, &d, &k, &Se3::from_translation([0.0, 0.0, tz])).unwrap();
        for y in 0..h {
            for x in 0..w {
                let z = depth[y * w + x];
                let (u, v) = (x as f64, y as f64);
                id_err = id_err.max((id.at3(0, y, x) - u).abs()).max((id.at3(1, y, x) - v).abs());
                // a point at depth z moves by fx·tx/z along u
                x_err = x_err
                    .max((cx.at3(0, y, x) - (u + k.fx * tx / z)).abs())
                    .max((cx.at3(1, y, x) - v).abs());
                // forward motion scales offsets from the principal point by z/(z+tz)
                let s = z / (z + tz);
                z_err = z_err
                    .max((cz.at3(0, y, x) - (k.cx + (u - k.cx) * s)).abs())
                    .max((cz.at3(1, y, x) - (k.cy + (v - k.cy) * s)).abs());
            }
        }

        let t = pose_to_matrix(&random_pose(&mut rng, 3.0, 10.0), RotationOrder::default()).unwrap();
        let inv = se3_invert(&t).unwrap();
        for m in [se3_compose(&t, &inv).unwrap(), se3_compose(&inv, &t).unwrap()] {
            se3_err = se3_err.max(m.max_abs_diff(&Se3::identity()));
        }
        // cross-check composition against a plain 4x4 product
        let prod = mat_mul4(t.matrix(), inv.matrix());
        for (i, row) in prod.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                se3_err = se3_err.max((v - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    ensure(
        id_err < 1e-9 && x_err < 1e-9 && z_err < 1e-9 && se3_err < 1e-12,
        format!("identity {id_err:.1e}, x-translation {x_err:.1e}, z-translation {z_err:.1e}, SE(3) round trip {se3_err:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 2

const GH: usize = 16;
const GW: usize = 48;

fn grad_of(x0: &[f64], shape: &[usize], f: &dyn Fn(&mut Graph, Var) -> Var) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::from_vec(shape, x0.to_vec()).unwrap());
    let out = f(&mut g, v);
    let val = g.scalar(out);
    let grads = g.backward(out);
    let grad = grads.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x0.len()]);
    (val, grad)
}

fn value_of(x: &[f64], shape: &[usize], f: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_vec(shape, x.to_vec()).unwrap());
    let out = f(&mut g, v);
    g.scalar(out)
}

fn check_var(name: &str, x0: &[f64], shape: &[usize], f: &dyn Fn(&mut Graph, Var) -> Var) -> (String, f64) {
    let (_, analytic) = grad_of(x0, shape, f);
    let (worst, n) = fd_check(x0, 1e-6, |x| value_of(x, shape, f), &analytic);
    (format!("{name} {worst:.1e} over {n}"), worst)
}

/// Bilinear sampling has slope jumps on integer coordinate lines, where a
/// central difference is meaningless. Searches for a pose pair whose
/// sampling coordinates all stay further from those lines than any
/// single-entry perturbation of size `eps` can move them, and whose automask
/// decision has enough slack at every pixel not to flip under that motion.
fn differentiable_poses(sig: &[f64], setup: &WarpSetup, eps: f64, target: &Tensor, sources: &[Tensor; 2]) -> Option<[[f64; 6]; 2]> {
    let grid = PixelGrid::new(GH, GW);
    let depth_of = |s: &[f64]| {
        let (lo, hi) = (1.0 / setup.d_max, 1.0 / setup.d_min);
        DepthMap::new(Tensor::from_vec(&[1, GH, GW], s.iter().map(|v| 1.0 / (lo + v * (hi - lo))).collect()).unwrap())
            .unwrap()
    };
    let coords = |d: &DepthMap, p: &[f64; 6]| {
        let t = pose_to_matrix(&Pose6DoF::from_slice(p).unwrap(), setup.order).unwrap();
        reproject_pixels(&grid, d, &setup.intrinsics, &t).unwrap()
    };
    let base_depth = depth_of(sig);
    let bumped: Vec<f64> = sig.iter().map(|v| v + eps).collect();
    let bumped_depth = depth_of(&bumped);
    // bilinear samples change by at most this much per pixel of motion
    let lipschitz = sources
        .iter()
        .flat_map(|t| {
            (0..3).flat_map(move |c| {
                (0..GH).flat_map(move |y| {
                    (0..GW).map(move |x| {
                        let dx = if x + 1 < GW { (t.at3(c, y, x + 1) - t.at3(c, y, x)).abs() } else { 0.0 };
                        let dy = if y + 1 < GH { (t.at3(c, y + 1, x) - t.at3(c, y, x)).abs() } else { 0.0 };
                        dx + dy
                    })
                })
            })
        })
        .fold(0.0f64, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    for _ in 0..500 {
        let poses = [0, 1].map(|_| {
            let p = random_pose(&mut rng, 0.004, 0.02);
            p.to_array()
        });
        let mut clearance = f64::INFINITY;
        let mut shift = 0.0f64;
        for p in &poses {
            let c = coords(&base_depth, p);
            clearance = c.data().iter().map(|v| (v - v.round()).abs()).fold(clearance, f64::min);
            shift = shift.max(coords(&bumped_depth, p).max_abs_diff(&c));
            for i in 0..6 {
                let mut q = *p;
                q[i] += eps;
                shift = shift.max(coords(&base_depth, &q).max_abs_diff(&c));
            }
        }
        if clearance > 2.0 * shift && automask_slack(&base_depth, &poses, setup, target, sources) > 4.0 * lipschitz * shift {
            return Some(poses);
        }
    }
    None
}

/// Smallest gap, over pixels, between the best reconstruction error and the
/// best raw-source error.
fn automask_slack(depth: &DepthMap, poses: &[[f64; 6]; 2], setup: &WarpSetup, target: &Tensor, sources: &[Tensor; 2]) -> f64 {
    let hw = GH * GW;
    let pe = |a: &Tensor, p: usize| (0..3).map(|c| (target.data()[c * hw + p] - a.data()[c * hw + p]).abs()).sum::<f64>() / 3.0;
    let recons: Vec<(Tensor, Mask)> = poses
        .iter()
        .zip(sources)
        .map(|(p, src)| {
            let t = pose_to_matrix(&Pose6DoF::from_slice(p).unwrap(), setup.order).unwrap();
            inverse_warp(&Frame::new(src.clone()).unwrap(), depth, &setup.intrinsics, &t).unwrap()
        })
        .collect();
    (0..hw)
        .map(|p| {
            let lhs = recons
                .iter()
                .filter(|(_, m)| m.data()[p])
                .map(|(r, _)| pe(r, p))
                .fold(f64::INFINITY, f64::min);
            let rhs = sources.iter().map(|s| pe(s, p)).fold(f64::INFINITY, f64::min);
            if lhs.is_finite() { (lhs - rhs).abs() } else { f64::INFINITY }
        })
        .fold(f64::INFINITY, f64::min)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let order = RotationOrder::default();
    let k = CameraIntrinsics::new(40.0, 40.0, 23.5, 7.5).unwrap();
    let img = textured(GH, GW, 0.0);
    let src = [textured(GH, GW, 0.8), textured(GH, GW, -0.7)];
    let mut parts = Vec::new();
    let mut worst = 0.0f64;

    // sampling coordinates kept off integer lattice lines, where bilinear
    // interpolation is not differentiable
    let coords: Vec<f64> = (0..2 * GH * GW)
        .map(|i| {
            let (c, p) = (i / (GH * GW), i % (GH * GW));
            let base = if c == 0 { (p % GW) as f64 } else { (p / GW) as f64 };
            let hi = if c == 0 { GW - 1 } else { GH - 1 } as f64;
            (base + rng.gen_range(0.1..0.9)).min(hi - 0.1)
        })
        .collect();
    let (s, e) = check_var("bilinear_sample/coords", &coords, &[2, GH, GW], &|g, c| {
        let i = g.constant(img.clone());
        let (out, _) = g.grid_sample(i, c).unwrap();
        weighted_sum(g, out, 1)
    });
    parts.push(s);
    worst = worst.max(e);

    // inverse warp of both sources: depth map plus both 6-vectors
    let depth: Vec<f64> = (0..GH * GW).map(|_| rng.gen_range(4.0..9.0)).collect();
    let poses = [[0.04, -0.02, 0.08, 0.01, -0.012, 0.006], [-0.035, 0.015, -0.07, -0.008, 0.01, -0.005]];
    let warp_both = |g: &mut Graph, d: Var, p: [Var; 2]| -> Var {
        let mut total: Option<Var> = None;
        for (i, pv) in p.into_iter().enumerate() {
            let c = g.reproject(d, pv, k, order).unwrap();
            let s = g.constant(src[i].clone());
            let (r, _) = g.grid_sample(s, c).unwrap();
            let term = weighted_sum(g, r, 10 + i as u64);
            total = Some(match total {
                Some(t) => g.add(t, term).unwrap(),
                None => term,
            });
        }
        total.unwrap()
    };
    let (s, e) = check_var("inverse_warp/depth", &depth, &[1, GH, GW], &|g, d| {
        let p = poses.map(|p| g.constant(Tensor::from_vec(&[6], p.to_vec()).unwrap()));
        warp_both(g, d, p)
    });
    parts.push(s);
    worst = worst.max(e);
    let flat_pose: Vec<f64> = poses.concat();
    let (s, e) = check_var("inverse_warp/pose(12)", &flat_pose, &[12], &|g, p| {
        let d = g.constant(Tensor::from_vec(&[1, GH, GW], depth.clone()).unwrap());
        let col = g.reshape(p, &[12, 1, 1]).unwrap();
        let halves = [0, 6].map(|start| {
            let h = g.slice_channels(col, start, 6).unwrap();
            g.reshape(h, &[6]).unwrap()
        });
        warp_both(g, d, halves)
    });
    parts.push(s);
    worst = worst.max(e);

    let other = src[0].clone();
    let (s, e) = check_var("ssim", img.data(), &[3, GH, GW], &|g, x| {
        let y = g.constant(other.clone());
        let m = ssim_var(g, x, y).unwrap();
        weighted_sum(g, m, 3)
    });
    parts.push(s);
    worst = worst.max(e);

    let smap: Vec<f64> = (0..GH * GW).map(|_| rng.gen_range(0.2..0.8)).collect();
    let (s, e) = check_var("smoothness", &smap, &[1, GH, GW], &|g, m| smoothness_var(g, m, &img).unwrap());
    parts.push(s);
    worst = worst.max(e);

    // total objective, sigmoid map and both poses, automask held fixed
    let setup = WarpSetup {
        intrinsics: k,
        order,
        d_min: 0.1,
        d_max: 100.0,
    };
    let sig: Vec<f64> = (0..GH * GW)
        .map(|i| 0.3 + 0.1 * ((i % GW) as f64 * 0.2).sin() + 0.03 * ((i / GW) as f64 * 0.3).cos())
        .collect();
    let poses_total = differentiable_poses(&sig, &setup, 1e-6, &img, &src).ok_or("no pose pair keeps sampling clear of lattice lines")?;
    let mut x0 = sig.clone();
    x0.extend(poses_total.concat());
    let n = GH * GW;
    let mut reference_mask: Option<Mask> = None;
    let tot = |x: &[f64], grad: bool| -> (f64, Vec<f64>, Mask) {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, t: Tensor| if grad { g.leaf(t) } else { g.constant(t) };
        let s = mk(&mut g, Tensor::from_vec(&[1, GH, GW], x[..n].to_vec()).unwrap());
        let p1 = mk(&mut g, Tensor::from_vec(&[6], x[n..n + 6].to_vec()).unwrap());
        let p2 = mk(&mut g, Tensor::from_vec(&[6], x[n + 6..].to_vec()).unwrap());
        let views = ViewTriplet {
            target: &img,
            sources: [&src[0], &src[1]],
        };
        let obj = objective(&mut g, s, [p1, p2], &views, &setup, &LossConfig::default()).unwrap();
        let val = g.scalar(obj.total);
        let mut out = Vec::new();
        if grad {
            let gr = g.backward(obj.total);
            for v in [s, p1, p2] {
                out.extend_from_slice(gr.get(v).unwrap().data());
            }
        }
        (val, out, obj.automask)
    };
    let (_, analytic, mask) = tot(&x0, true);
    reference_mask.get_or_insert(mask);
    let flips = std::cell::Cell::new(0usize);
    let (e, cnt) = fd_check(
        &x0,
        1e-6,
        |x| {
            let (v, _, m) = tot(x, false);
            if Some(&m) != reference_mask.as_ref() {
                flips.set(flips.get() + 1);
            }
            v
        },
        &analytic,
    );
    parts.push(format!("L_tot/map+poses {e:.1e} over {cnt}"));
    worst = worst.max(e);
    if flips.get() > 0 {
        return Err(format!("automask flipped in {} perturbations; {}", flips.get(), parts.join(", ")));
    }
    ensure(worst < 1e-3, parts.join(", "))
}

// ---------------------------------------------------------------------------
// 3

/// Nearest positive ray/patch intersection in world coordinates, written
/// from the plane equations alone.
fn closed_form_depth(spec: &SceneSpec, frame: usize, x: usize, y: usize) -> Option<f64> {
    let k = &spec.intrinsics;
    let ray_c = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
    let t = &spec.world_to_camera[frame];
    let r = t.rotation();
    let tr = t.translation();
    // camera centre and ray direction in the world frame: c = -Rᵀt, d = Rᵀr
    let rt = |v: [f64; 3]| -> [f64; 3] { [0, 1, 2].map(|j| (0..3).map(|i| r[i][j] * v[i]).sum()) };
    let centre = rt(tr).map(|v| -v);
    let dir = rt(ray_c);
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = |a: &[f64; 3], b: &[f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let mut best: Option<f64> = None;
    for p in &spec.patches {
        let (c, d) = match p.anchor {
            Anchor::World => (centre, dir),
            Anchor::Camera => ([0.0; 3], ray_c),
        };
        let n = cross(&p.u, &p.v);
        let denom = dot(&n, &d);
        if denom.abs() < 1e-12 {
            continue;
        }
        let diff = [p.origin[0] - c[0], p.origin[1] - c[1], p.origin[2] - c[2]];
        let s = dot(&n, &diff) / denom;
        if s <= 0.0 {
            continue;
        }
        let hit = [c[0] + s * d[0] - p.origin[0], c[1] + s * d[1] - p.origin[1], c[2] + s * d[2] - p.origin[2]];
        if dot(&hit, &p.u).abs() > p.half_extent[0] || dot(&hit, &p.v).abs() > p.half_extent[1] {
            continue;
        }
        // the camera ray has unit z, so the ray parameter is the depth
        if best.map_or(true, |b| s < b) {
            best = Some(s);
        }
    }
    best
}

fn warp_error(rec: &SequenceRecord, i: usize) -> f64 {
    let t_rel = rec.relative_pose(i, i + 1).unwrap();
    let (recon, valid) = inverse_warp(&rec.frames[i + 1], &rec.depths[i], &rec.intrinsics, &t_rel).unwrap();
    let target = rec.frames[i].tensor();
    let hw = rec.height() * rec.width();
    let (mut sum, mut n) = (0.0, 0usize);
    for p in 0..hw {
        if valid.data()[p] {
            for c in 0..3 {
                sum += (recon.data()[c * hw + p] - target.data()[c * hw + p]).abs();
            }
            n += 3;
        }
    }
    sum / n as f64
}

fn dataset_self_check() -> Outcome {
    let cfg = GeneratorConfig::default();
    let data = generate_dataset(&cfg, 20, 303).map_err(|e| e.to_string())?;
    let (mut worst_warp, mut worst_depth) = (0.0f64, 0.0f64);
    for (spec, rec) in &data {
        for i in 0..rec.len() - 1 {
            worst_warp = worst_warp.max(warp_error(rec, i));
        }
        for f in 0..rec.len() {
            let d = rec.depths[f].values();
            for y in 0..rec.height() {
                for x in 0..rec.width() {
                    let Some(z) = closed_form_depth(spec, f, x, y) else {
                        return Err(format!("frame {f} pixel ({x}, {y}) has no closed-form surface"));
                    };
                    worst_depth = worst_depth.max((d.at3(0, y, x) - z).abs());
                }
            }
        }
    }
    ensure(
        worst_warp < 0.02 && worst_depth < 1e-9,
        format!("{} sequences; worst warp error {worst_warp:.4}, worst depth deviation {worst_depth:.1e}", data.len()),
    )
}

// ---------------------------------------------------------------------------
// 4

fn naive_metrics(p: &[f64], g: &[f64], lo: f64, hi: f64) -> [f64; 7] {
    let mut n = 0.0;
    let mut s = [0.0; 7];
    for i in 0..p.len() {
        let gt = g[i];
        if gt < lo || gt > hi {
            continue;
        }
        let mut pr = p[i];
        if pr < lo {
            pr = lo;
        }
        if pr > hi {
            pr = hi;
        }
        n += 1.0;
        s[0] += (pr - gt).abs() / gt;
        s[1] += (pr - gt) * (pr - gt) / gt;
        s[2] += (pr - gt) * (pr - gt);
        s[3] += (pr.ln() - gt.ln()) * (pr.ln() - gt.ln());
        let r = if pr / gt > gt / pr { pr / gt } else { gt / pr };
        let mut th = 1.0;
        for j in 0..3 {
            th *= 1.25;
            if r < th {
                s[4 + j] += 1.0;
            }
        }
    }
    [s[0] / n, s[1] / n, (s[2] / n).sqrt(), (s[3] / n).sqrt(), s[4] / n, s[5] / n, s[6] / n]
}

fn metric_oracle() -> Outcome {
    let cfg = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        // some ground truth outside the caps, some predictions to clamp
        let g: Vec<f64> = (0..64).map(|_| rng.gen_range(0.05..120.0)).collect();
        let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.01..150.0)).collect();
        let m = compute_metrics(
            &DepthMap::new(Tensor::from_vec(&[1, 8, 8], p.clone()).unwrap()).unwrap(),
            &DepthMap::new(Tensor::from_vec(&[1, 8, 8], g.clone()).unwrap()).unwrap(),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let lib = [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3];
        let naive = naive_metrics(&p, &g, cfg.d_min_eval, cfg.d_max_eval);
        for (a, b) in lib.iter().zip(&naive) {
            worst = worst.max((a - b).abs());
        }
    }
    let two = DepthMap::new(Tensor::full(&[1, 1, 1], 2.0)).unwrap();
    let one = DepthMap::new(Tensor::full(&[1, 1, 1], 1.0)).unwrap();
    let h = compute_metrics(&two, &one, &cfg).map_err(|e| e.to_string())?;
    let hand_ok = (h.abs_rel - 1.0).abs() < 1e-12 && (h.rmse_log - 2f64.ln()).abs() < 1e-12 && h.delta1 == 0.0;
    ensure(
        worst < 1e-9 && hand_ok,
        format!("naive-loop deviation {worst:.1e}; hand case abs_rel {}, rmse_log {:.6}", h.abs_rel, h.rmse_log),
    )
}

// ---------------------------------------------------------------------------
// 5

fn lateral_scene(camera_object: bool, seed: u64, speed: f64) -> SceneSpec {
    let cfg = GeneratorConfig {
        camera_object,
        frames: 3,
        ..GeneratorConfig::default()
    };
    let mut spec = generate_scene(&cfg, seed).unwrap();
    let ident = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    spec.world_to_camera = (0..3).map(|i| world_to_camera(&ident, &[speed * i as f64, 0.0, 0.0])).collect();
    spec
}

/// Automask of frame 1 reconstructed from frames 0 and 2 with true depth
/// and poses.
fn true_automask(rec: &SequenceRecord) -> Mask {
    let mut recons = Vec::new();
    let mut valid = Vec::new();
    for s in [0, 2] {
        let t = rec.relative_pose(1, s).unwrap();
        let (r, m) = inverse_warp(&rec.frames[s], &rec.depths[1], &rec.intrinsics, &t).unwrap();
        recons.push(Frame::new(r).unwrap());
        valid.push(m);
    }
    automask(&rec.frames[1], &[rec.frames[0].clone(), rec.frames[2].clone()], &recons, &valid).unwrap()
}

/// Pixels whose colour differs from a horizontal or vertical neighbour.
fn textured_pixels(f: &Frame) -> Vec<bool> {
    let t = f.tensor();
    let (h, w) = (f.height(), f.width());
    let mut out = vec![false; h * w];
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let d = (0..3)
                .map(|c| (t.at3(c, y, x) - t.at3(c, y, x + 1)).abs().max((t.at3(c, y, x) - t.at3(c, y + 1, x)).abs()))
                .fold(0.0, f64::max);
            out[y * w + x] = d > 0.01;
        }
    }
    out
}

fn fraction(mask: &Mask, select: &[bool]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (m, s) in mask.data().iter().zip(select) {
        if *s {
            n += 1;
            hit += usize::from(*m);
        }
    }
    hit as f64 / n.max(1) as f64
}

fn automask_behaviour() -> Outcome {
    let static_rec = render_sequence(&lateral_scene(false, 505, 0.0)).unwrap();
    let still = true_automask(&static_rec).fraction_true();

    let moving = render_sequence(&lateral_scene(false, 505, 0.6)).unwrap();
    let tex = textured_pixels(&moving.frames[1]);
    let moving_frac = fraction(&true_automask(&moving), &tex);

    let spec = lateral_scene(true, 506, 0.6);
    let rec = render_sequence(&spec).unwrap();
    let obj = camera_object_mask(&spec, 1);
    let tex = textured_pixels(&rec.frames[1]);
    let on_obj: Vec<bool> = obj.iter().zip(&tex).map(|(o, t)| *o && *t).collect();
    let on_bg: Vec<bool> = obj.iter().zip(&tex).map(|(o, t)| !*o && *t).collect();
    let m = true_automask(&rec);
    let (f_obj, f_bg) = (fraction(&m, &on_obj), fraction(&m, &on_bg));
    ensure(
        still < 0.01 && moving_frac > 0.9 && f_bg - f_obj >= 0.5,
        format!(
            "static camera {:.1}% true; moving camera {:.1}% of textured pixels; object {:.1}% vs background {:.1}%",
            100.0 * still,
            100.0 * moving_frac,
            100.0 * f_obj,
            100.0 * f_bg
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

/// Desk-scale training configuration for the overfit runs.
fn overfit_config(k: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        k,
        batch_size: 1,
        learning_rate: 1e-3,
        epochs: 1000,
        max_steps: Some(3000),
        seed: 606,
        model: ModelConfig {
            rgb_channels: vec![8, 12, 16, 24],
            flow_channels: vec![4, 8, 12, 16],
            pose: PoseNetConfig {
                channels: vec![8, 16, 32, 64],
                hidden: 128,
            },
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    // literal consistency penalises real constant-velocity motion, and at the
    // default smoothness weight the loss minimum drifts away from true depth
    cfg.loss.pose_consistency = PoseConsistency::Inverted;
    cfg.loss.weights.lambda = 0.05;
    cfg
}

fn overfit_smoke() -> Outcome {
    let records: Vec<SequenceRecord> = generate_dataset(&GeneratorConfig::default(), 20, 6)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let mut lines = Vec::new();
    let mut ok = true;
    for k in [5, 10] {
        let start = Instant::now();
        let cfg = overfit_config(k);
        let run = train_loop(&records, &cfg, &TrainOutput::default()).map_err(|e| e.to_string())?;
        let n = run.curve.rows.len();
        let window = (n / 20).max(1);
        let first = run.curve.mean_total(0..window);
        let last = run.curve.mean_total(n - window..n);
        let view = run.checkpoint.inference_view().map_err(|e| e.to_string())?;
        let report = evaluate_records(&view, &records, k, cfg.frame_interval, 1, &EvalConfig::default())
            .map_err(|e| e.to_string())?;
        let model = report.row("model").unwrap().metrics.abs_rel;
        let copy = report.row("copy_last").unwrap().metrics.abs_rel;
        let elapsed = start.elapsed();
        let pass = last < 0.4 * first && model < copy && elapsed < Duration::from_secs(30 * 60) && n <= 3000;
        ok &= pass;
        lines.push(format!(
            "k={k}: {n} steps, L_tot {first:.4} -> {last:.4} ({:.0}%), Abs Rel model {model:.4} vs copy-last {copy:.4}, {:.0} s",
            100.0 * last / first,
            elapsed.as_secs_f64()
        ));
    }
    ensure(ok, lines.join("; "))
}

// ---------------------------------------------------------------------------
// 7

fn inference_contract() -> Outcome {
    let model = ModelConfig::default();
    let full = Checkpoint::initial(&model, 707).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("stripped.ckpt");
    save_checkpoint(&full.stripped(), &path).map_err(|e| e.to_string())?;
    let stripped = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let prefix = format!("{POSENET_PREFIX}.");
    if stripped.params.names().any(|n| n.starts_with(&prefix)) {
        return Err("stripped checkpoint still holds pose network parameters".into());
    }
    let rec = generate_dataset(&GeneratorConfig::default(), 1, 7).map_err(|e| e.to_string())?.remove(0).1;
    let t = min_window_t(3) + 2;
    let idx = window_indices(t, 3);
    let rgb: Vec<Frame> = idx.iter().map(|&i| rec.frames[i].clone()).collect();
    let flow: Vec<_> = idx.iter().map(|&i| rec.flows[i].clone()).collect();
    let view = stripped.inference_view().map_err(|e| e.to_string())?;
    let a = forecast_infer(&view, &rgb, &flow).map_err(|e| e.to_string())?;
    let b = forecast_infer(&view, &rgb, &flow).map_err(|e| e.to_string())?;
    let c = forecast_infer(&full.inference_view().map_err(|e| e.to_string())?, &rgb, &flow).map_err(|e| e.to_string())?;
    let bits = |d: &DepthMap| d.values().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let in_range = a.values().data().iter().all(|&d| (model.d_min..=model.d_max).contains(&d));
    ensure(
        bits(&a) == bits(&b) && bits(&a) == bits(&c) && in_range,
        format!(
            "{} parameters without the pose network; repeat and full-checkpoint forecasts bit-identical: {}",
            stripped.params.len(),
            bits(&a) == bits(&b) && bits(&a) == bits(&c)
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

fn loss_fixed_points() -> Outcome {
    let img = Frame::new(textured(16, 48, 0.3)).unwrap();
    let all = Mask::filled(16, 48, true);
    let others = [Frame::new(textured(16, 48, 1.0)).unwrap(), Frame::new(textured(16, 48, -1.0)).unwrap()];
    let mpe = masked_photometric_loss(
        &img,
        &[img.clone(), img.clone()],
        &[all.clone(), all.clone()],
        &others,
        Reduce::Sum,
    )
    .map_err(|e| e.to_string())?;
    let ds = dissimilarity_loss(&img, &img, &all).map_err(|e| e.to_string())?;
    let sm = smoothness_loss(&Tensor::full(&[1, 16, 48], 0.37), &img).map_err(|e| e.to_string())?;
    let p = Pose6DoF::from_slice(&[0.3, -0.1, 0.7, 0.02, -0.05, 0.01]).unwrap();
    let pc = pose_consistency_loss(&p, &p, PoseConsistency::Literal, RotationOrder::default()).map_err(|e| e.to_string())?;
    // weights as published: alpha / lambda / gamma = 0.4 / 0.5 / 0.6
    let w = LossWeights::default();
    let published = (w.alpha, w.lambda, w.gamma) == (0.4, 0.5, 0.6);
    let tot = total_loss(1.0, 1.0, 1.0, 1.0, &w);
    // by hand: 0.4·1 + 0.6·1 + 0.5·1 + 0.6·1
    let ok = mpe == 0.0 && ds.abs() < 1e-12 && sm == 0.0 && pc == 0.0 && published && (tot - 2.1).abs() < 1e-12;
    ensure(ok, format!("L_mpe {mpe:.1e}, L_ds {ds:.1e}, L_sm {sm:.1e}, L_pc {pc:.1e}, L_tot(1,1,1,1) {tot}"))
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "geometry oracles", budget: Duration::from_secs(10), run: geometry_oracles },
        Criterion { id: 2, name: "gradient checks", budget: Duration::from_secs(120), run: gradient_checks },
        Criterion { id: 3, name: "self-certifying dataset", budget: Duration::from_secs(60), run: dataset_self_check },
        Criterion { id: 4, name: "metric oracle", budget: Duration::from_secs(5), run: metric_oracle },
        Criterion { id: 5, name: "automask behaviour", budget: Duration::from_secs(30), run: automask_behaviour },
        Criterion { id: 6, name: "overfit smoke", budget: Duration::from_secs(60 * 60), run: overfit_smoke },
        Criterion { id: 7, name: "inference contract", budget: Duration::from_secs(10), run: inference_contract },
        Criterion { id: 8, name: "loss fixed points", budget: Duration::from_secs(5), run: loss_fixed_points },
    ];
    let only: Option<Vec<u32>> = std::env::var("DFN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    // libtest-style listing probes get an empty answer
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let elapsed = start.elapsed();
        let over = elapsed > c.budget;
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {} s budget", c.budget.as_secs())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        println!(
            "criterion {} [{status}] {} ({:.1} s): {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
        if status == "FAIL" {
            failed.push(c.id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
