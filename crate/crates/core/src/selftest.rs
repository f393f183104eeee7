//! Fast invariant checks run by `depthcast selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::evaluation::{compute_metrics, EvalConfig};
use crate::frames::{DepthMap, Frame, Mask};
use crate::geometry::{
    pose_to_matrix, reproject_pixels, se3_compose, se3_invert, CameraIntrinsics, PixelGrid, Pose6DoF, RotationOrder,
    Se3,
};
use crate::gradcheck::check_gradient;
use crate::losses::{
    dissimilarity_loss, masked_photometric_loss, pose_consistency_loss, smoothness_loss, ssim, ssim_var,
    smoothness_var, total_loss, LossWeights, PoseConsistency, Reduce,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const GRAD_TOL: f64 = 1e-3;

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_intrinsics(rng: &mut ChaCha8Rng, h: usize, w: usize) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: rng.gen_range(50.0..150.0),
        fy: rng.gen_range(50.0..150.0),
        cx: (w as f64 - 1.0) / 2.0 + rng.gen_range(-1.0..1.0),
        cy: (h as f64 - 1.0) / 2.0 + rng.gen_range(-1.0..1.0),
    }
}

fn random_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap {
    DepthMap::new(Tensor::from_fn3(1, h, w, |_, _, _| rng.gen_range(1.0..20.0))).expect("positive depth")
}

fn textured(h: usize, w: usize, phase: f64) -> Tensor {
    Tensor::from_fn3(3, h, w, |c, y, x| {
        0.5 + 0.2 * ((x as f64 + phase) * 0.8 + c as f64).sin() + 0.2 * (y as f64 * 0.6 - phase).cos()
    })
}

fn geometry_reprojection() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (6, 8);
    let grid = PixelGrid::new(h, w);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = random_intrinsics(&mut rng, h, w);
        let d = random_depth(&mut rng, h, w);
        let id = reproject_pixels(&grid, &d, &k, &Se3::identity())?;
        worst = worst.max(id.max_abs_diff(&grid.uv()));
        let tx = rng.gen_range(-1.0..1.0);
        let tz = rng.gen_range(-0.5..0.5);
        let cx = reproject_pixels(&grid, &d, &k, &Se3::from_translation([tx, 0.0, 0.0]))?;
        let cz = reproject_pixels(&grid, &d, &k, &Se3::from_translation([0.0, 0.0, tz]))?;
        for y in 0..h {
            for x in 0..w {
                let dd = d.values().at3(0, y, x);
                worst = worst.max((cx.at3(0, y, x) - (x as f64 + k.fx * tx / dd)).abs());
                worst = worst.max((cx.at3(1, y, x) - y as f64).abs());
                let s = dd / (dd + tz);
                worst = worst.max((cz.at3(0, y, x) - (k.cx + (x as f64 - k.cx) * s)).abs());
                worst = worst.max((cz.at3(1, y, x) - (k.cy + (y as f64 - k.cy) * s)).abs());
            }
        }
    }
    Ok((worst < 1e-9, format!("max deviation {worst:.2e}")))
}

fn se3_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = Pose6DoF::from_slice(&[0.0; 6].map(|_: f64| rng.gen_range(-1.0..1.0)))?;
        let t = pose_to_matrix(&p, RotationOrder::Xyz)?;
        let id = se3_compose(&t, &se3_invert(&t)?)?;
        worst = worst.max(id.max_abs_diff(&Se3::identity()));
    }
    Ok((worst < 1e-12, format!("max deviation {worst:.2e}")))
}

fn grad_report(name: &str, r: &crate::gradcheck::GradCheck) -> (bool, String) {
    (r.passes(GRAD_TOL), format!("{name}: max rel error {:.2e}", r.max_rel_error))
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let n = shape.iter().product();
    let wts = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let y = g.mul_const(x, wts)?;
    Ok(g.sum_all(y))
}

fn grad_bilinear_sample() -> Result<(bool, String)> {
    let (h, w) = (5, 7);
    let img = textured(h, w, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coords = Tensor::from_fn3(2, h, w, |c, y, x| {
        let base = if c == 0 { x as f64 } else { y as f64 };
        let hi = if c == 0 { w - 1 } else { h - 1 } as f64;
        (base + rng.gen_range(-0.4..0.4)).clamp(0.05, hi - 0.05)
    });
    let r = check_gradient(&coords, 1e-6, |g, c| {
        let i = g.constant(img.clone());
        let (s, _) = g.grid_sample(i, c)?;
        weighted_sum(g, s, 4)
    });
    Ok(grad_report("coords", &r))
}

fn grad_inverse_warp() -> Result<(bool, String)> {
    let (h, w) = (6, 8);
    let src = textured(h, w, 1.1);
    let k = CameraIntrinsics::new(20.0, 20.0, 3.5, 2.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let depth = Tensor::from_fn3(1, h, w, |_, _, _| rng.gen_range(4.0..6.0));
    let pose = Tensor::from_vec(&[6], vec![0.03, -0.02, 0.05, 0.01, -0.015, 0.02])?;
    let warp = |g: &mut Graph, d: Var, p: Var| -> Result<Var> {
        let c = g.reproject(d, p, k, RotationOrder::Xyz)?;
        let s = g.constant(src.clone());
        let (r, _) = g.grid_sample(s, c)?;
        weighted_sum(g, r, 6)
    };
    let rd = check_gradient(&depth, 1e-6, |g, d| {
        let p = g.constant(pose.clone());
        warp(g, d, p)
    });
    let rp = check_gradient(&pose, 1e-6, |g, p| {
        let d = g.constant(depth.clone());
        warp(g, d, p)
    });
    let (a, da) = grad_report("depth", &rd);
    let (b, db) = grad_report("pose", &rp);
    Ok((a && b, format!("{da}; {db}")))
}

fn grad_ssim() -> Result<(bool, String)> {
    let a = textured(5, 6, 0.0);
    let b = textured(5, 6, 0.9);
    let r = check_gradient(&a, 1e-6, |g, x| {
        let y = g.constant(b.clone());
        let s = ssim_var(g, x, y)?;
        weighted_sum(g, s, 7)
    });
    Ok(grad_report("image", &r))
}

fn grad_smoothness() -> Result<(bool, String)> {
    let img = textured(5, 6, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s0 = Tensor::from_fn3(1, 5, 6, |_, _, _| rng.gen_range(0.2..0.8));
    let r = check_gradient(&s0, 1e-6, |g, s| smoothness_var(g, s, &img));
    Ok(grad_report("map", &r))
}

fn ssim_constants() -> Result<(bool, String)> {
    // zero-variance windows reduce SSIM to its luminance term
    let (ca, cb) = (0.2, 0.7);
    let a = Frame::new(Tensor::full(&[3, 4, 4], ca))?;
    let b = Frame::new(Tensor::full(&[3, 4, 4], cb))?;
    let c1 = 1e-4;
    let expect = (2.0 * ca * cb + c1) / (ca * ca + cb * cb + c1);
    let s = ssim(&a, &b)?;
    let worst = s.data().iter().map(|v| (v - expect).abs()).fold(0.0, f64::max);
    Ok((worst < 1e-12, format!("deviation from closed form {worst:.2e}")))
}

fn metric_oracle() -> Result<(bool, String)> {
    let cfg = EvalConfig::default();
    let two = DepthMap::new(Tensor::full(&[1, 3, 3], 2.0))?;
    let one = DepthMap::new(Tensor::full(&[1, 3, 3], 1.0))?;
    let m = compute_metrics(&two, &one, &cfg)?;
    let hand = (m.abs_rel - 1.0).abs() < 1e-12 && (m.rmse_log - 2f64.ln()).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.5..50.0)).collect();
        let t: Vec<f64> = (0..64).map(|_| rng.gen_range(0.5..50.0)).collect();
        let m = compute_metrics(
            &DepthMap::new(Tensor::from_vec(&[1, 8, 8], p.clone())?)?,
            &DepthMap::new(Tensor::from_vec(&[1, 8, 8], t.clone())?)?,
            &cfg,
        )?;
        let abs_rel = p.iter().zip(&t).map(|(a, b)| (a - b).abs() / b).sum::<f64>() / 64.0;
        let rmse = (p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0).sqrt();
        worst = worst.max((abs_rel - m.abs_rel).abs()).max((rmse - m.rmse).abs());
    }
    Ok((hand && worst < 1e-9, format!("hand case {hand}, naive-loop deviation {worst:.2e}")))
}

fn loss_fixed_points() -> Result<(bool, String)> {
    let img = Frame::new(textured(6, 8, 0.2))?;
    let all = Mask::filled(6, 8, true);
    let ds = dissimilarity_loss(&img, &img, &all)?;
    let mpe = masked_photometric_loss(
        &img,
        &[img.clone(), img.clone()],
        &[all.clone(), all.clone()],
        &[Frame::new(textured(6, 8, 0.9))?, Frame::new(textured(6, 8, 1.7))?],
        Reduce::Sum,
    )?;
    let sm = smoothness_loss(&Tensor::full(&[1, 6, 8], 0.3), &img)?;
    let p = Pose6DoF::from_slice(&[0.1, 0.2, -0.1, 0.01, 0.02, 0.03])?;
    let pc = pose_consistency_loss(&p, &p, PoseConsistency::Literal, RotationOrder::Xyz)?;
    let w = LossWeights {
        alpha: 0.4,
        lambda: 0.5,
        gamma: 0.6,
    };
    let tot = total_loss(1.0, 1.0, 1.0, 1.0, &w);
    let ok = mpe == 0.0 && ds.abs() < 1e-12 && sm == 0.0 && pc == 0.0 && (tot - 2.1).abs() < 1e-12;
    Ok((ok, format!("mpe {mpe:.1e}, ds {ds:.1e}, sm {sm:.1e}, pc {pc:.1e}, total {tot}")))
}

/// Runs every check; none of them panic on failure.
pub fn run_checks() -> Vec<CheckResult> {
    vec![
        outcome("geometry_reprojection", geometry_reprojection()),
        outcome("se3_round_trip", se3_round_trip()),
        outcome("grad_bilinear_sample", grad_bilinear_sample()),
        outcome("grad_inverse_warp", grad_inverse_warp()),
        outcome("grad_ssim", grad_ssim()),
        outcome("grad_smoothness", grad_smoothness()),
        outcome("ssim_constants", ssim_constants()),
        outcome("metric_oracle", metric_oracle()),
        outcome("loss_fixed_points", loss_fixed_points()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_a_clean_build() {
        for c in run_checks() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
