//! Self-supervision objective.
//!
//! Every loss exists twice: as graph operations used in training, and as a
//! plain function on tensors that builds a throwaway graph of constants.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::sigmoid_to_depth_var;
use crate::error::{Error, Result};
use crate::frames::{Frame, Mask};
use crate::geometry::{pose_to_matrix, CameraIntrinsics, Pose6DoF, RotationOrder};
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

static SSIM_CORRUPTED: AtomicBool = AtomicBool::new(false);

/// Test hook for the self-test command: while set, SSIM uses a wrong `C1`.
#[doc(hidden)]
pub fn set_ssim_corruption(on: bool) {
    SSIM_CORRUPTED.store(on, Ordering::SeqCst);
}

fn ssim_c1() -> f64 {
    if SSIM_CORRUPTED.load(Ordering::SeqCst) {
        SSIM_C1 * 100.0
    } else {
        SSIM_C1
    }
}
/// Added to the error of an invalid reconstruction in `min` reduction.
const INVALID_PENALTY: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    /// Per-source errors are summed.
    #[default]
    Sum,
    /// Per-pixel minimum over sources.
    Min,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseConsistency {
    /// L1 distance of the two 6-vectors as predicted.
    #[default]
    Literal,
    /// L1 distance of the first pose and the inverse of the second.
    Inverted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.4,
            lambda: 0.5,
            gamma: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0 && self.lambda.is_finite() && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda and gamma must be finite and non-negative, got {} and {}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub reduce: Reduce,
    pub pose_consistency: PoseConsistency,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mpe: f64,
    pub l_ds: f64,
    pub l_sm: f64,
    pub l_pc: f64,
    pub l_tot: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_mpe, self.l_ds, self.l_sm, self.l_pc, self.l_tot]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::invalid(format!(
            "{what}: shapes differ, {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn check_mask(g: &Graph, x: Var, m: &Mask, what: &str) -> Result<()> {
    let (_, h, w) = g.value(x).dims3()?;
    if (m.height(), m.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "{what}: mask is {}x{}, image is {h}x{w}",
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// Sum of `x` over mask pixels divided by their count, or 0 for an empty
/// mask.
fn masked_mean(g: &mut Graph, x: Var, m: &Mask) -> Result<Var> {
    let n = m.count_true();
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let masked = g.mul_const(x, m.to_tensor())?;
    let s = g.sum_all(masked);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// `[1, H, W]` channel-mean absolute error, zero where `valid` is false.
pub fn photometric_error_var(g: &mut Graph, target: Var, recon: Var, valid: &Mask) -> Result<Var> {
    same_shape(g, target, recon, "photometric_error")?;
    check_mask(g, target, valid, "photometric_error")?;
    let d = g.sub(target, recon)?;
    let a = g.abs(d);
    let m = g.mean_channels(a)?;
    g.mul_const(m, valid.to_tensor())
}

/// Per-pixel SSIM `[1, H, W]`, averaged over channels.
pub fn ssim_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "ssim")?;
    let mu_a = g.avg_pool3(a)?;
    let mu_b = g.avg_pool3(b)?;
    let aa = g.square(a);
    let bb = g.square(b);
    let ab = g.mul(a, b)?;
    let e_aa = g.avg_pool3(aa)?;
    let e_bb = g.avg_pool3(bb)?;
    let e_ab = g.avg_pool3(ab)?;
    let mu_a2 = g.square(mu_a);
    let mu_b2 = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_a2)?;
    let var_b = g.sub(e_bb, mu_b2)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let c1 = ssim_c1();
    let l_num = g.affine(mu_ab, 2.0, c1);
    let c_num = g.affine(cov, 2.0, SSIM_C2);
    let num = g.mul(l_num, c_num)?;
    let mu_sum = g.add(mu_a2, mu_b2)?;
    let l_den = g.add_scalar(mu_sum, c1);
    let var_sum = g.add(var_a, var_b)?;
    let c_den = g.add_scalar(var_sum, SSIM_C2);
    let den = g.mul(l_den, c_den)?;
    let s = g.div(num, den)?;
    g.mean_channels(s)
}

/// Mean of `0.5 (1 - ssim)` over valid pixels.
pub fn dissimilarity_var(g: &mut Graph, target: Var, recon: Var, valid: &Mask) -> Result<Var> {
    check_mask(g, target, valid, "dissimilarity")?;
    let s = ssim_var(g, recon, target)?;
    let e = g.affine(s, -0.5, 0.5);
    masked_mean(g, e, valid)
}

/// Pixels whose best reconstruction beats every raw source. Invalid
/// reconstructions never win.
pub fn automask_values(target: &Tensor, sources: &[&Tensor], recons: &[&Tensor], valid: &[&Mask]) -> Result<Mask> {
    if sources.is_empty() {
        return Err(Error::invalid("automask needs at least one source"));
    }
    if recons.len() != sources.len() || valid.len() != sources.len() {
        return Err(Error::invalid("automask: sources, reconstructions and masks must align"));
    }
    let (c, h, w) = target.dims3()?;
    for t in sources.iter().chain(recons) {
        target.expect_same_shape(t)?;
    }
    let pe = |a: &Tensor, p: usize| -> f64 {
        (0..c)
            .map(|ci| (target.data()[ci * h * w + p] - a.data()[ci * h * w + p]).abs())
            .sum::<f64>()
            / c as f64
    };
    let data = (0..h * w)
        .map(|p| {
            let lhs = recons
                .iter()
                .zip(valid)
                .map(|(r, m)| if m.data()[p] { pe(r, p) } else { f64::INFINITY })
                .fold(f64::INFINITY, f64::min);
            let rhs = sources.iter().map(|s| pe(s, p)).fold(f64::INFINITY, f64::min);
            lhs < rhs
        })
        .collect();
    Ok(Mask::new(h, w, data))
}

/// Masked photometric loss over any number of reconstruction streams.
pub fn masked_photometric_var(
    g: &mut Graph,
    target: Var,
    recons: &[Var],
    valid: &[Mask],
    mask: &Mask,
    mode: Reduce,
) -> Result<Var> {
    if recons.is_empty() || recons.len() != valid.len() {
        return Err(Error::invalid("masked photometric loss needs aligned, non-empty streams"));
    }
    let errs = recons
        .iter()
        .zip(valid)
        .map(|(&r, m)| photometric_error_var(g, target, r, m))
        .collect::<Result<Vec<_>>>()?;
    let combined = match mode {
        Reduce::Sum => {
            let mut acc = errs[0];
            for &e in &errs[1..] {
                acc = g.add(acc, e)?;
            }
            acc
        }
        Reduce::Min => {
            let mut acc: Option<Var> = None;
            for (&e, m) in errs.iter().zip(valid) {
                let pen = g.constant(m.to_tensor().map(|v| (1.0 - v) * INVALID_PENALTY));
                let e = g.add(e, pen)?;
                acc = Some(match acc {
                    None => e,
                    Some(a) => g.minimum(a, e)?,
                });
            }
            acc.expect("at least one stream")
        }
    };
    check_mask(g, combined, mask, "masked photometric loss")?;
    masked_mean(g, combined, mask)
}

/// Edge-aware smoothness of the mean-normalised map `s` against `image`.
pub fn smoothness_var(g: &mut Graph, s: Var, image: &Tensor) -> Result<Var> {
    let (c, h, w) = g.value(s).dims3()?;
    let (_, ih, iw) = image.dims3()?;
    if c != 1 || (h, w) != (ih, iw) {
        return Err(Error::invalid(format!(
            "smoothness: map {:?} does not match image {:?}",
            g.shape(s),
            image.shape()
        )));
    }
    let m = g.mean_all(s);
    let inv = g.recip(m);
    let d = g.mul_scalar_var(s, inv)?;

    let ic = image.shape()[0];
    let weight = |dy: usize, dx: usize| {
        Tensor::from_fn3(1, h - dy, w - dx, |_, y, x| {
            let grad = (0..ic)
                .map(|ci| (image.at3(ci, y + dy, x + dx) - image.at3(ci, y, x)).abs())
                .sum::<f64>()
                / ic as f64;
            (-grad).exp()
        })
    };
    let gx = g.diff_x(d)?;
    let gx = g.abs(gx);
    let gx = g.mul_const(gx, weight(0, 1))?;
    let gy = g.diff_y(d)?;
    let gy = g.abs(gy);
    let gy = g.mul_const(gy, weight(1, 0))?;
    let mx = g.mean_all(gx);
    let my = g.mean_all(gy);
    g.add(mx, my)
}

pub fn pose_consistency_var(g: &mut Graph, p1: Var, p2: Var, mode: PoseConsistency, order: RotationOrder) -> Result<Var> {
    let other = match mode {
        PoseConsistency::Literal => p2,
        PoseConsistency::Inverted => g.invert_pose(p2, order)?,
    };
    let d = g.sub(p1, other)?;
    let a = g.abs(d);
    Ok(g.sum_all(a))
}

/// `α L_mpe + (1 - α) L_ds + λ L_sm + γ L_pc`.
pub fn total_var(g: &mut Graph, mpe: Var, ds: Var, sm: Var, pc: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(mpe, w.alpha);
    let b = g.scale(ds, 1.0 - w.alpha);
    let c = g.scale(sm, w.lambda);
    let d = g.scale(pc, w.gamma);
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    g.add(ab, cd)
}

pub fn total_loss(l_mpe: f64, l_ds: f64, l_sm: f64, l_pc: f64, w: &LossWeights) -> f64 {
    w.alpha * l_mpe + (1.0 - w.alpha) * l_ds + w.lambda * l_sm + w.gamma * l_pc
}

fn eval<F>(inputs: &[&Tensor], f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

pub fn photometric_error(target: &Frame, recon: &Frame, validity: &Mask) -> Result<Tensor> {
    eval(&[target.tensor(), recon.tensor()], |g, v| photometric_error_var(g, v[0], v[1], validity))
}

pub fn ssim(a: &Frame, b: &Frame) -> Result<Tensor> {
    eval(&[a.tensor(), b.tensor()], |g, v| ssim_var(g, v[0], v[1]))
}

pub fn dissimilarity_loss(target: &Frame, recon: &Frame, validity: &Mask) -> Result<f64> {
    Ok(eval(&[target.tensor(), recon.tensor()], |g, v| dissimilarity_var(g, v[0], v[1], validity))?.item())
}

pub fn automask(target: &Frame, sources: &[Frame], recons: &[Frame], validity: &[Mask]) -> Result<Mask> {
    let s: Vec<&Tensor> = sources.iter().map(|f| f.tensor()).collect();
    let r: Vec<&Tensor> = recons.iter().map(|f| f.tensor()).collect();
    let v: Vec<&Mask> = validity.iter().collect();
    automask_values(target.tensor(), &s, &r, &v)
}

/// The automask is computed here from the same inputs.
pub fn masked_photometric_loss(
    target: &Frame,
    recons: &[Frame],
    validity: &[Mask],
    sources: &[Frame],
    mode: Reduce,
) -> Result<f64> {
    let mask = automask(target, sources, recons, validity)?;
    let mut ins = vec![target.tensor()];
    ins.extend(recons.iter().map(|f| f.tensor()));
    Ok(eval(&ins, |g, v| masked_photometric_var(g, v[0], &v[1..], validity, &mask, mode))?.item())
}

pub fn smoothness_loss(s: &Tensor, image: &Frame) -> Result<f64> {
    Ok(eval(&[s], |g, v| smoothness_var(g, v[0], image.tensor()))?.item())
}

pub fn pose_consistency_loss(p1: &Pose6DoF, p2: &Pose6DoF, mode: PoseConsistency, order: RotationOrder) -> Result<f64> {
    if !(p1.is_finite() && p2.is_finite()) {
        return Err(Error::invalid("pose consistency needs finite poses"));
    }
    if mode == PoseConsistency::Inverted {
        // surfaces degenerate rotations as an error rather than NaN
        pose_to_matrix(p2, order)?;
    }
    let a = Tensor::from_vec(&[6], p1.to_array().to_vec())?;
    let b = Tensor::from_vec(&[6], p2.to_array().to_vec())?;
    Ok(eval(&[&a, &b], |g, v| pose_consistency_var(g, v[0], v[1], mode, order))?.item())
}

/// Camera model and depth range for view synthesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpSetup {
    pub intrinsics: CameraIntrinsics,
    pub order: RotationOrder,
    pub d_min: f64,
    pub d_max: f64,
}

/// Target frame and the two source frames (`I_t`, `I_{t+2k}`).
#[derive(Clone, Copy, Debug)]
pub struct ViewTriplet<'a> {
    pub target: &'a Tensor,
    pub sources: [&'a Tensor; 2],
}

pub struct Objective {
    pub total: Var,
    pub report: LossReport,
    pub automask: Mask,
    pub recons: Vec<(Var, Mask)>,
}

/// Full training objective for one sample. `s_full` is the fused sigmoid map
/// at frame resolution; `poses[i]` maps target points into `sources[i]`.
pub fn objective(
    g: &mut Graph,
    s_full: Var,
    poses: [Var; 2],
    views: &ViewTriplet,
    setup: &WarpSetup,
    cfg: &LossConfig,
) -> Result<Objective> {
    cfg.weights.validate()?;
    let (_, h, w) = views.target.dims3()?;
    if g.shape(s_full) != [1, h, w] {
        return Err(Error::invalid(format!(
            "objective: map {:?} does not match frames {:?}",
            g.shape(s_full),
            views.target.shape()
        )));
    }
    let depth = sigmoid_to_depth_var(g, s_full, setup.d_min, setup.d_max)?;
    let target = g.constant(views.target.clone());
    let mut recons = Vec::with_capacity(2);
    for (src, &pose) in views.sources.iter().zip(&poses) {
        views.target.expect_same_shape(src)?;
        let coords = g.reproject(depth, pose, setup.intrinsics, setup.order)?;
        let img = g.constant((*src).clone());
        recons.push(g.grid_sample(img, coords)?);
    }
    let rv: Vec<&Tensor> = recons.iter().map(|(r, _)| g.value(*r)).collect();
    let masks: Vec<Mask> = recons.iter().map(|(_, m)| m.clone()).collect();
    let mrefs: Vec<&Mask> = masks.iter().collect();
    let amask = automask_values(views.target, &views.sources, &rv, &mrefs)?;

    let rvars: Vec<Var> = recons.iter().map(|(r, _)| *r).collect();
    let mpe = masked_photometric_var(g, target, &rvars, &masks, &amask, cfg.reduce)?;
    let mut ds_terms = Vec::with_capacity(2);
    for (&r, m) in rvars.iter().zip(&masks) {
        ds_terms.push(dissimilarity_var(g, target, r, m)?);
    }
    let ds_sum = g.add(ds_terms[0], ds_terms[1])?;
    let ds = g.scale(ds_sum, 0.5);
    let sm = smoothness_var(g, s_full, views.target)?;
    let pc = pose_consistency_var(g, poses[0], poses[1], cfg.pose_consistency, setup.order)?;
    let total = total_var(g, mpe, ds, sm, pc, &cfg.weights)?;
    let report = LossReport {
        l_mpe: g.scalar(mpe),
        l_ds: g.scalar(ds),
        l_sm: g.scalar(sm),
        l_pc: g.scalar(pc),
        l_tot: g.scalar(total),
    };
    Ok(Objective {
        total,
        report,
        automask: amask,
        recons,
    })
}
