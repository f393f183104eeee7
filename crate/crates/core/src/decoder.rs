//! Depth and flow decoders over a forecast pyramid, and the fusion of their
//! outputs into the final forecast.

use crate::autograd::{Graph, Var};
use crate::encoders::FeaturePyramid;
use crate::error::{Error, Result};
use crate::frames::{DepthMap, FlowField};
use crate::geometry::PixelGrid;
use crate::nn::{Binder, Conv2d, Init, ParamSpec, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const CORRELATION_RADIUS: usize = 3;
pub const DEFAULT_MIN_DEPTH: f64 = 0.1;
pub const DEFAULT_MAX_DEPTH: f64 = 100.0;
/// Added to the mean magnitude before normalising a fusion input.
pub const NORM_EPS: f64 = 1e-7;

fn check_levels(levels: usize, expected: usize) -> Result<()> {
    if levels != expected {
        return Err(Error::invalid(format!(
            "decoder built for {expected} pyramid levels, got {levels}"
        )));
    }
    Ok(())
}

/// Coarse-to-fine sigmoid-map decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthDecoder {
    pub top: Conv2d,
    /// Per finer level (index = level): hidden conv, then output conv.
    pub refine: Vec<(Conv2d, Conv2d)>,
}

impl DepthDecoder {
    pub fn new(prefix: &str, channels: &[usize]) -> Self {
        let n = channels.len();
        let top = Conv2d::new(&format!("{prefix}.level{}.out", n - 1), channels[n - 1], 1, 3, 1);
        let refine = (0..n - 1)
            .map(|l| {
                let c = channels[l];
                (
                    Conv2d::new(&format!("{prefix}.level{l}.hidden"), c + 1, c, 3, 1),
                    Conv2d::new(&format!("{prefix}.level{l}.out"), c, 1, 3, 1),
                )
            })
            .collect();
        DepthDecoder { top, refine }
    }

    pub fn levels(&self) -> usize {
        self.refine.len() + 1
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.top.specs_with(Init::Lecun { fan_in: self.top.fan_in() }, out);
        for (h, o) in &self.refine {
            h.specs(out);
            o.specs_with(Init::Lecun { fan_in: o.fan_in() }, out);
        }
    }

    /// Sigmoid maps, index = level; entry 0 is the final map.
    pub fn forward(&self, b: &mut Binder, feats: &[Var]) -> Result<Vec<Var>> {
        check_levels(feats.len(), self.levels())?;
        let n = feats.len();
        let mut maps = vec![None; n];
        let top = self.top.forward(b, feats[n - 1])?;
        let mut cur = b.graph.sigmoid(top);
        maps[n - 1] = Some(cur);
        for l in (0..n - 1).rev() {
            let up = b.graph.upsample_bilinear2(cur)?;
            let x = b.graph.concat(&[feats[l], up])?;
            let (hid, out) = &self.refine[l];
            let y = hid.forward(b, x)?;
            let y = b.graph.leaky_relu(y, LEAKY_SLOPE);
            let y = out.forward(b, y)?;
            cur = b.graph.sigmoid(y);
            maps[l] = Some(cur);
        }
        Ok(maps.into_iter().map(|m| m.expect("every level decoded")).collect())
    }
}

/// Coarse flow from the top level, refined by warping and local correlation
/// at each finer level.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDecoder {
    pub radius: usize,
    pub top: Conv2d,
    pub refine: Vec<(Conv2d, Conv2d)>,
}

impl FlowDecoder {
    pub fn new(prefix: &str, channels: &[usize], radius: usize) -> Self {
        let n = channels.len();
        let corr = (2 * radius + 1).pow(2);
        let top = Conv2d::new(&format!("{prefix}.level{}.out", n - 1), channels[n - 1], 2, 3, 1);
        let refine = (0..n - 1)
            .map(|l| {
                let c = channels[l];
                (
                    Conv2d::new(&format!("{prefix}.level{l}.hidden"), corr + c + 2, c, 3, 1),
                    Conv2d::new(&format!("{prefix}.level{l}.residual"), c, 2, 3, 1),
                )
            })
            .collect();
        FlowDecoder { radius, top, refine }
    }

    pub fn levels(&self) -> usize {
        self.refine.len() + 1
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.top.specs_with(Init::Lecun { fan_in: self.top.fan_in() }, out);
        for (h, o) in &self.refine {
            h.specs(out);
            o.specs_with(
                Init::Small {
                    fan_in: o.fan_in(),
                    factor: 0.1,
                },
                out,
            );
        }
    }

    /// Flow per level in that level's pixel units; entry 0 is the final flow.
    pub fn forward(&self, b: &mut Binder, feats: &[Var]) -> Result<Vec<Var>> {
        check_levels(feats.len(), self.levels())?;
        let n = feats.len();
        let mut flows = vec![None; n];
        let mut cur = self.top.forward(b, feats[n - 1])?;
        flows[n - 1] = Some(cur);
        for l in (0..n - 1).rev() {
            let up = b.graph.upsample_bilinear2(cur)?;
            let up = b.graph.scale(up, 2.0);
            let (_, h, w) = b.graph.value(feats[l]).dims3()?;
            let grid = b.graph.constant(PixelGrid::new(h, w).uv());
            let coords = b.graph.add(grid, up)?;
            let (warped, _) = b.graph.grid_sample(feats[l], coords)?;
            let corr = b.graph.correlation(feats[l], warped, self.radius)?;
            let x = b.graph.concat(&[corr, feats[l], up])?;
            let (hid, res) = &self.refine[l];
            let y = hid.forward(b, x)?;
            let y = b.graph.leaky_relu(y, LEAKY_SLOPE);
            let r = res.forward(b, y)?;
            cur = b.graph.add(up, r)?;
            flows[l] = Some(cur);
        }
        Ok(flows.into_iter().map(|f| f.expect("every level decoded")).collect())
    }
}

/// The single convolution Θ over normalised depth and flow.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub theta: Conv2d,
}

impl Fusion {
    pub fn new(prefix: &str) -> Self {
        Fusion {
            theta: Conv2d::new(&format!("{prefix}.theta"), 3, 1, 3, 1),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.theta.specs_with(Init::Lecun { fan_in: self.theta.fan_in() }, out);
    }

    /// `σ(Θ([‖d‖, ‖w‖]))` at the decoder resolution.
    pub fn forward(&self, b: &mut Binder, depth: Var, flow: Var) -> Result<Var> {
        let ds = b.graph.shape(depth).to_vec();
        let fs = b.graph.shape(flow).to_vec();
        if ds.len() != 3 || fs.len() != 3 || ds[0] != 1 || fs[0] != 2 || ds[1..] != fs[1..] {
            return Err(Error::Internal(format!(
                "fusion inputs disagree: depth {ds:?}, flow {fs:?}"
            )));
        }
        let d = normalize(b, depth)?;
        let f = normalize(b, flow)?;
        let x = b.graph.concat(&[d, f])?;
        let y = self.theta.forward(b, x)?;
        Ok(b.graph.sigmoid(y))
    }
}

/// `x / (mean |x| + ε)` per channel.
pub fn normalize(b: &mut Binder, x: Var) -> Result<Var> {
    let a = b.graph.abs(x);
    let m = b.graph.mean_spatial(a)?;
    let m = b.graph.add_scalar(m, NORM_EPS);
    let inv = b.graph.recip(m);
    b.graph.mul_channel(x, inv)
}

fn check_bounds(d_min: f64, d_max: f64) -> Result<()> {
    if !(d_min > 0.0 && d_max > d_min && d_max.is_finite()) {
        return Err(Error::invalid(format!(
            "depth bounds need 0 < d_min < d_max, got ({d_min}, {d_max})"
        )));
    }
    Ok(())
}

/// `1/d = s (1/d_min - 1/d_max) + 1/d_max` inside a graph.
pub fn sigmoid_to_depth_var(g: &mut Graph, s: Var, d_min: f64, d_max: f64) -> Result<Var> {
    check_bounds(d_min, d_max)?;
    let disp = g.affine(s, 1.0 / d_min - 1.0 / d_max, 1.0 / d_max);
    Ok(g.recip(disp))
}

pub fn sigmoid_to_depth(s: &Tensor, d_min: f64, d_max: f64) -> Result<DepthMap> {
    check_bounds(d_min, d_max)?;
    if let Some(v) = s.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("sigmoid map value {v} outside [0, 1]")));
    }
    let (lo, hi) = (1.0 / d_max, 1.0 / d_min);
    let depth = s.map(|v| 1.0 / (v * (hi - lo) + lo));
    Ok(DepthMap::new(depth)?.with_sigmoid(s.clone()))
}

fn bind(b: &mut Binder, fp: &FeaturePyramid) -> Vec<Var> {
    fp.levels.iter().map(|t| b.graph.constant(t.clone())).collect()
}

/// Per-level sigmoid maps (index = level) and the final map.
pub fn decode_depth(dec: &DepthDecoder, params: &ParamStore, fp: &FeaturePyramid) -> Result<(Vec<Tensor>, Tensor)> {
    let mut b = Binder::new(params, false);
    let feats = bind(&mut b, fp);
    let maps = dec.forward(&mut b, &feats)?;
    let maps: Vec<Tensor> = maps.iter().map(|&v| b.graph.value(v).clone()).collect();
    let last = maps[0].clone();
    Ok((maps, last))
}

pub fn decode_flow(dec: &FlowDecoder, params: &ParamStore, fp: &FeaturePyramid) -> Result<FlowField> {
    let mut b = Binder::new(params, false);
    let feats = bind(&mut b, fp);
    let flows = dec.forward(&mut b, &feats)?;
    FlowField::new(b.graph.value(flows[0]).clone())
}

/// Fused sigmoid map. The flow is resized to the depth map when they differ.
pub fn fuse(fusion: &Fusion, params: &ParamStore, d_hat: &Tensor, w: &FlowField) -> Result<Tensor> {
    let mut b = Binder::new(params, false);
    let d = b.graph.constant(d_hat.clone());
    let mut f = b.graph.constant(w.tensor().clone());
    let (_, dh, dw) = d_hat.dims3()?;
    while b.graph.shape(f)[1] < dh && b.graph.shape(f)[2] < dw {
        let up = b.graph.upsample_bilinear2(f)?;
        f = b.graph.scale(up, 2.0);
    }
    let out = fusion.forward(&mut b, d, f)?;
    Ok(b.graph.value(out).clone())
}
