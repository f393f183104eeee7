//! Image-like value types shared across the pipeline.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image `[3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(Tensor);

impl Frame {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c != 3 {
            return Err(Error::invalid(format!("a frame has 3 channels, got {c}")));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("frame values must lie in [0, 1], found {v}")));
        }
        Ok(Frame(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Per-pixel displacement `[2, H, W]` in pixels (channel 0 along `u`).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c != 2 {
            return Err(Error::invalid(format!("a flow field has 2 channels, got {c}")));
        }
        if !t.all_finite() {
            return Err(Error::invalid("flow field has non-finite values"));
        }
        Ok(FlowField(t))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(&[2, h, w]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Strictly positive scene depth `[1, H, W]`, optionally carrying the
/// sigmoid map it was decoded from.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    depth: Tensor,
    sigmoid: Option<Tensor>,
}

impl DepthMap {
    pub fn new(depth: Tensor) -> Result<Self> {
        let (c, _, _) = depth.dims3()?;
        if c != 1 {
            return Err(Error::invalid(format!("a depth map has 1 channel, got {c}")));
        }
        if let Some(v) = depth.data().iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("depth must be positive and finite, found {v}")));
        }
        Ok(DepthMap { depth, sigmoid: None })
    }

    pub fn with_sigmoid(mut self, sigmoid: Tensor) -> Self {
        self.sigmoid = Some(sigmoid);
        self
    }

    /// Skips validation; used where the caller wants the downstream operation
    /// to report the problem.
    pub fn from_tensor_unchecked(depth: Tensor) -> Self {
        DepthMap { depth, sigmoid: None }
    }

    pub fn values(&self) -> &Tensor {
        &self.depth
    }

    pub fn sigmoid(&self) -> Option<&Tensor> {
        self.sigmoid.as_ref()
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[2]
    }

    pub fn scaled(&self, factor: f64) -> DepthMap {
        DepthMap {
            depth: self.depth.map(|d| d * factor),
            sigmoid: None,
        }
    }
}

/// Boolean per-pixel mask, row-major `H × W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), h * w, "mask data length");
        Mask { h, w, data }
    }

    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Mask::new(h, w, vec![value; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction_true(&self) -> f64 {
        self.count_true() as f64 / self.data.len() as f64
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask::new(
            self.h,
            self.w,
            self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        )
    }

    /// `[1, H, W]` tensor with 1.0 where true.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.h, self.w],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape")
    }
}
