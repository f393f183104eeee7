//! Multi-scale feature extractors for RGB frames and flow fields, and the
//! temporal channel concatenation of their pyramids.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::frames::{FlowField, Frame};
use crate::nn::{Binder, Conv2d, ParamSpec, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Number of past observations the forecaster consumes.
pub const PAST_STEPS: usize = 4;

/// Level `i` has spatial size `(H / 2^(i+1), W / 2^(i+1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        for pair in levels.windows(2) {
            let (_, h0, w0) = pair[0].dims3()?;
            let (_, h1, w1) = pair[1].dims3()?;
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(Error::invalid(format!(
                    "pyramid levels must halve: {:?} then {:?}",
                    pair[0].shape(),
                    pair[1].shape()
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// `(h, w, c)` per level.
    pub fn level_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels
            .iter()
            .map(|t| (t.shape()[1], t.shape()[2], t.shape()[0]))
            .collect()
    }
}

/// Per-level channel concatenation of the past pyramids, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedPyramid {
    pub levels: Vec<Tensor>,
}

/// One stem convolution, then one stride-2 stage per pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidEncoder {
    pub c_in: usize,
    pub stem: Conv2d,
    pub stages: Vec<Conv2d>,
}

impl PyramidEncoder {
    pub fn new(prefix: &str, c_in: usize, channels: &[usize]) -> Self {
        let stem = Conv2d::new(&format!("{prefix}.stem"), c_in, channels[0], 3, 1);
        let mut prev = channels[0];
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&format!("{prefix}.stage{i}"), prev, c, 3, 2);
                prev = c;
                conv
            })
            .collect();
        PyramidEncoder { c_in, stem, stages }
    }

    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.stem.specs(out);
        for s in &self.stages {
            s.specs(out);
        }
    }

    pub fn forward(&self, b: &mut Binder, x: Var) -> Result<Vec<Var>> {
        let (c, h, w) = b.graph.value(x).dims3()?;
        let div = 1 << self.levels();
        if c != self.c_in || h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!(
                "encoder expects {} channels and sizes divisible by {div}, got {:?}",
                self.c_in,
                b.graph.shape(x)
            )));
        }
        let s = self.stem.forward(b, x)?;
        let mut cur = b.graph.leaky_relu(s, LEAKY_SLOPE);
        let mut out = Vec::with_capacity(self.levels());
        for stage in &self.stages {
            let y = stage.forward(b, cur)?;
            cur = b.graph.leaky_relu(y, LEAKY_SLOPE);
            out.push(cur);
        }
        Ok(out)
    }

    /// Runs the encoder on plain tensors without tracking gradients.
    pub fn encode(&self, params: &ParamStore, inputs: &[&Tensor]) -> Result<Vec<FeaturePyramid>> {
        if inputs.len() != PAST_STEPS {
            return Err(Error::invalid(format!(
                "expected {PAST_STEPS} inputs, got {}",
                inputs.len()
            )));
        }
        let shape = inputs[0].shape();
        if inputs.iter().any(|t| t.shape() != shape) {
            return Err(Error::invalid("all inputs must share one shape"));
        }
        inputs
            .iter()
            .map(|t| {
                let mut b = Binder::new(params, false);
                let x = b.graph.constant((*t).clone());
                let levels = self.forward(&mut b, x)?;
                FeaturePyramid::new(levels.iter().map(|&v| b.graph.value(v).clone()).collect())
            })
            .collect()
    }
}

pub fn encode_rgb(enc: &PyramidEncoder, params: &ParamStore, frames: &[Frame]) -> Result<Vec<FeaturePyramid>> {
    let ts: Vec<&Tensor> = frames.iter().map(|f| f.tensor()).collect();
    enc.encode(params, &ts)
}

pub fn encode_flow(enc: &PyramidEncoder, params: &ParamStore, flows: &[FlowField]) -> Result<Vec<FeaturePyramid>> {
    let ts: Vec<&Tensor> = flows.iter().map(|f| f.tensor()).collect();
    enc.encode(params, &ts)
}

pub fn aggregate(pyramids: &[FeaturePyramid]) -> Result<AggregatedPyramid> {
    if pyramids.len() != PAST_STEPS {
        return Err(Error::invalid(format!(
            "expected {PAST_STEPS} pyramids, got {}",
            pyramids.len()
        )));
    }
    let shapes = pyramids[0].level_shapes();
    if pyramids.iter().any(|p| p.level_shapes() != shapes) {
        return Err(Error::invalid("pyramids to aggregate must have identical level shapes"));
    }
    let levels = (0..shapes.len())
        .map(|l| {
            let parts: Vec<&Tensor> = pyramids.iter().map(|p| &p.levels[l]).collect();
            Tensor::concat_channels(&parts)
        })
        .collect::<Result<_>>()?;
    Ok(AggregatedPyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient_at;
    use crate::nn::Init;

    fn frames(h: usize, w: usize) -> Vec<Frame> {
        (0..PAST_STEPS)
            .map(|t| {
                Frame::new(Tensor::from_fn3(3, h, w, |c, y, x| {
                    0.5 + 0.4 * ((x as f64 * 0.3 + y as f64 * 0.2 + c as f64 + t as f64).sin())
                }))
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn pyramid_shapes_follow_the_channel_plan() {
        let enc = PyramidEncoder::new("rgb", 3, &[16, 32, 64, 128]);
        let mut specs = Vec::new();
        enc.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 0);
        let out = encode_rgb(&enc, &p, &frames(64, 192)).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(
            out[0].level_shapes(),
            vec![(32, 96, 16), (16, 48, 32), (8, 24, 64), (4, 12, 128)]
        );
    }

    #[test]
    fn identical_frames_give_identical_pyramids() {
        let enc = PyramidEncoder::new("rgb", 3, &[4, 4, 4]);
        let mut specs = Vec::new();
        enc.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 3);
        let f = frames(16, 24);
        let same = vec![f[0].clone(); 4];
        let out = encode_rgb(&enc, &p, &same).unwrap();
        assert!(out.iter().all(|o| *o == out[0]));
    }

    #[test]
    fn zero_inputs_and_biases_give_zero_features() {
        let enc = PyramidEncoder::new("flow", 2, &[4, 8, 8]);
        let mut specs = Vec::new();
        enc.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 5);
        let flows = vec![FlowField::zeros(16, 24); 4];
        for pyr in encode_flow(&enc, &p, &flows).unwrap() {
            assert!(pyr.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        }
        // and with all-zero weights the output is zero for any input
        let zero_specs: Vec<_> = specs
            .iter()
            .map(|s| ParamSpec {
                init: Init::Zeros,
                ..s.clone()
            })
            .collect();
        let pz = ParamStore::initialize(&zero_specs, 0);
        let f: Vec<Tensor> = (0..4).map(|_| Tensor::full(&[2, 16, 24], 0.7)).collect();
        let refs: Vec<&Tensor> = f.iter().collect();
        for pyr in enc.encode(&pz, &refs).unwrap() {
            assert!(pyr.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn wrong_count_or_shape_is_rejected() {
        let enc = PyramidEncoder::new("rgb", 3, &[4, 4]);
        let mut specs = Vec::new();
        enc.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 0);
        let f = frames(8, 8);
        assert!(encode_rgb(&enc, &p, &f[..3]).is_err());
        let mut mixed = f.clone();
        mixed[2] = frames(16, 8)[0].clone();
        assert!(encode_rgb(&enc, &p, &mixed).is_err());
        // 6 is not divisible by 2^2
        assert!(encode_rgb(&enc, &p, &frames(6, 8)).is_err());
    }

    #[test]
    fn aggregation_concatenates_in_temporal_order() {
        let mk = |s: f64| {
            FeaturePyramid::new(vec![
                Tensor::from_fn3(16, 4, 6, |c, y, x| s + (c * 31 + y * 7 + x) as f64),
                Tensor::from_fn3(8, 2, 3, |c, y, x| -s - (c + y + x) as f64),
            ])
            .unwrap()
        };
        let pyrs: Vec<_> = (0..4).map(|i| mk(i as f64 * 1000.0)).collect();
        let agg = aggregate(&pyrs).unwrap();
        assert_eq!(agg.levels[0].shape(), &[64, 4, 6]);
        assert_eq!(agg.levels[1].shape(), &[32, 2, 3]);
        for (k, p) in pyrs.iter().enumerate() {
            assert_eq!(agg.levels[0].slice_channels(16 * k, 16).unwrap(), p.levels[0]);
            assert_eq!(agg.levels[1].slice_channels(8 * k, 8).unwrap(), p.levels[1]);
        }
        let before: f64 = pyrs.iter().flat_map(|p| &p.levels).map(|t| t.abs_sum()).sum();
        let after: f64 = agg.levels.iter().map(|t| t.abs_sum()).sum();
        assert!((before - after).abs() <= 1e-9 * before);

        let copies = vec![pyrs[1].clone(); 4];
        let agg = aggregate(&copies).unwrap();
        for k in 1..4 {
            assert_eq!(
                agg.levels[0].slice_channels(16 * k, 16).unwrap(),
                agg.levels[0].slice_channels(0, 16).unwrap()
            );
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let enc = PyramidEncoder::new("rgb", 3, &[4, 6]);
        let mut specs = Vec::new();
        enc.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 11);
        let x0 = frames(8, 12)[1].tensor().clone();
        let idx: Vec<usize> = (0..x0.len()).step_by(5).collect();
        let r = check_gradient_at(&x0, &idx, 1e-6, |g, x| {
            let mut b = Binder::new(&p, false);
            std::mem::swap(&mut b.graph, g);
            let xv = b.graph.reshape(x, x0.shape())?;
            let out = enc.forward(&mut b, xv)?;
            let s0 = b.graph.square(out[0]);
            let s1 = b.graph.square(out[1]);
            let a = b.graph.sum_all(s0);
            let c = b.graph.sum_all(s1);
            let loss = b.graph.add(a, c)?;
            std::mem::swap(&mut b.graph, g);
            Ok(loss)
        });
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn aggregation_rejects_mismatched_levels() {
        let a = FeaturePyramid::new(vec![Tensor::zeros(&[2, 4, 4])]).unwrap();
        let b = FeaturePyramid::new(vec![Tensor::zeros(&[3, 4, 4])]).unwrap();
        assert!(aggregate(&[a.clone(), a.clone(), a.clone(), b]).is_err());
        assert!(aggregate(&[a.clone(), a]).is_err());
    }
}
