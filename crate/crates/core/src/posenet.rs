//! Ego-motion network conditioned on future frames.
//!
//! A frame pair is stacked into six channels, encoded by a strided
//! convolution stack, re-weighted channel-wise by an attention block, and
//! regressed to a 6-DoF pose by two fully connected layers. The same
//! parameters serve the pairs `(I_t, I_{t+k})` and `(I_{t+2k}, I_{t+k})`.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::geometry::Pose6DoF;
use crate::nn::{Binder, Conv2d, Init, Linear, ParamSpec, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Rotation outputs are multiplied by this before use.
pub const ROTATION_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNetConfig {
    /// One stride-2 stage per entry; the last entry is `C_p`.
    pub channels: Vec<usize>,
    pub hidden: usize,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig {
            channels: vec![16, 32, 64, 128],
            hidden: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseNet {
    pub stages: Vec<Conv2d>,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
    pub feature_shape: (usize, usize, usize),
}

impl PoseNet {
    /// `height` and `width` fix the size of the first fully connected layer.
    pub fn new(prefix: &str, cfg: &PoseNetConfig, height: usize, width: usize) -> Result<Self> {
        let div = 1usize << cfg.channels.len();
        if cfg.channels.is_empty() || height % div != 0 || width % div != 0 {
            return Err(Error::invalid(format!(
                "pose network with {} stages needs sizes divisible by {div}, got {height}x{width}",
                cfg.channels.len()
            )));
        }
        let mut prev = 6;
        let stages = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&format!("{prefix}.stage{i}"), prev, c, 3, 2);
                prev = c;
                conv
            })
            .collect();
        let cp = prev;
        let (fh, fw) = (height / div, width / div);
        Ok(PoseNet {
            stages,
            query: Conv2d::new(&format!("{prefix}.pcab.query"), cp, cp, 3, 1),
            key: Conv2d::new(&format!("{prefix}.pcab.key"), cp, cp, 3, 1),
            value: Conv2d::new(&format!("{prefix}.pcab.value"), cp, cp, 3, 1),
            fc1: Linear::new(&format!("{prefix}.fc1"), cp * fh * fw, cfg.hidden),
            fc2: Linear::new(&format!("{prefix}.fc2"), cfg.hidden, 6),
            feature_shape: (cp, fh, fw),
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for s in &self.stages {
            s.specs(out);
        }
        for c in [&self.query, &self.key, &self.value] {
            c.specs_with(Init::Lecun { fan_in: c.fan_in() }, out);
        }
        self.fc1.specs_with(Init::He { fan_in: self.fc1.n_in }, out);
        self.fc2.specs_with(
            Init::Small {
                fan_in: self.fc2.n_in,
                factor: 0.01,
            },
            out,
        );
    }

    pub fn encode(&self, b: &mut Binder, source: Var, target: Var) -> Result<Var> {
        if b.graph.shape(source) != b.graph.shape(target) {
            return Err(Error::invalid(format!(
                "pose pair shapes differ: {:?} vs {:?}",
                b.graph.shape(source),
                b.graph.shape(target)
            )));
        }
        let mut x = b.graph.concat(&[source, target])?;
        for s in &self.stages {
            let y = s.forward(b, x)?;
            x = b.graph.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(x)
    }

    /// Returns `(X', ω)`.
    pub fn attend(&self, b: &mut Binder, x: Var) -> Result<(Var, Var)> {
        let (c, h, w) = b.graph.value(x).dims3()?;
        let n = h * w;
        let q = self.query.forward(b, x)?;
        let k = self.key.forward(b, x)?;
        let v = self.value.forward(b, x)?;
        let q = b.graph.reshape(q, &[c, n])?;
        let k = b.graph.reshape(k, &[c, n])?;
        let v = b.graph.reshape(v, &[c, n])?;
        let qk = b.graph.matmul_nt(q, k)?;
        let qk = b.graph.scale(qk, 1.0 / (n as f64).sqrt());
        let a = b.graph.softmax_rows(qk)?;
        let att = b.graph.matmul(a, v)?;
        let att = b.graph.reshape(att, &[c, h, w])?;
        let m = b.graph.mean_spatial(att)?;
        let omega = b.graph.sigmoid(m);
        let out = b.graph.mul_channel(x, omega)?;
        Ok((out, omega))
    }

    pub fn head(&self, b: &mut Binder, x: Var) -> Result<Var> {
        let y = self.fc1.forward(b, x)?;
        let y = b.graph.leaky_relu(y, LEAKY_SLOPE);
        let y = self.fc2.forward(b, y)?;
        let s = ROTATION_SCALE;
        b.graph.mul_const(y, Tensor::from_vec(&[6], vec![1.0, 1.0, 1.0, s, s, s])?)
    }

    /// Pose `[6]` of the transform taking `target` camera points to `source`.
    pub fn forward_pair(&self, b: &mut Binder, source: Var, target: Var) -> Result<Var> {
        let x = self.encode(b, source, target)?;
        let (x, _) = self.attend(b, x)?;
        self.head(b, x)
    }
}

pub fn pose_encode(net: &PoseNet, params: &ParamStore, source: &Frame, target: &Frame) -> Result<Tensor> {
    let mut b = Binder::new(params, false);
    let s = b.graph.constant(source.tensor().clone());
    let t = b.graph.constant(target.tensor().clone());
    let x = net.encode(&mut b, s, t)?;
    Ok(b.graph.value(x).clone())
}

/// Returns `(X', ω)`.
pub fn pcab_attend(net: &PoseNet, params: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
    if !x.all_finite() {
        return Err(Error::invalid("pose feature contains non-finite values"));
    }
    let mut b = Binder::new(params, false);
    let xv = b.graph.constant(x.clone());
    let (out, omega) = net.attend(&mut b, xv)?;
    Ok((b.graph.value(out).clone(), b.graph.value(omega).clone()))
}

pub fn pose_head(net: &PoseNet, params: &ParamStore, x: &Tensor) -> Result<Pose6DoF> {
    if !x.all_finite() {
        return Err(Error::invalid("pose feature contains non-finite values"));
    }
    let mut b = Binder::new(params, false);
    let xv = b.graph.constant(x.clone());
    let p = net.head(&mut b, xv)?;
    Pose6DoF::from_slice(b.graph.value(p).data())
}

/// `(I_t, I_{t+k}, I_{t+2k})` for pose estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTriplet {
    pub before: Frame,
    pub target: Frame,
    pub after: Frame,
}

impl PoseTriplet {
    pub fn new(before: Frame, target: Frame, after: Frame) -> Result<Self> {
        let s = before.tensor().shape();
        if target.tensor().shape() != s || after.tensor().shape() != s {
            return Err(Error::invalid("triplet frames must share one shape"));
        }
        Ok(PoseTriplet { before, target, after })
    }
}

/// `(P_{t→t+k}, P_{t+2k→t+k})`, each mapping target-frame points into the
/// corresponding source frame.
pub fn estimate_pair_poses(net: &PoseNet, params: &ParamStore, tri: &PoseTriplet) -> Result<(Pose6DoF, Pose6DoF)> {
    let run = |src: &Frame| -> Result<Pose6DoF> {
        let mut b = Binder::new(params, false);
        let s = b.graph.constant(src.tensor().clone());
        let t = b.graph.constant(tri.target.tensor().clone());
        let p = net.forward_pair(&mut b, s, t)?;
        Pose6DoF::from_slice(b.graph.value(p).data())
    };
    Ok((run(&tri.before)?, run(&tri.after)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient_at;

    fn frame(h: usize, w: usize, seed: f64) -> Frame {
        Frame::new(Tensor::from_fn3(3, h, w, |c, y, x| {
            0.5 + 0.45 * ((x as f64 * 0.37 + y as f64 * 0.23 + c as f64 * 1.3 + seed).sin())
        }))
        .unwrap()
    }

    fn net(h: usize, w: usize, cfg: &PoseNetConfig) -> (PoseNet, Vec<ParamSpec>) {
        let n = PoseNet::new("posenet", cfg, h, w).unwrap();
        let mut specs = Vec::new();
        n.specs(&mut specs);
        (n, specs)
    }

    fn zeroed(specs: &[ParamSpec]) -> ParamStore {
        let z: Vec<_> = specs
            .iter()
            .map(|s| ParamSpec {
                init: Init::Zeros,
                ..s.clone()
            })
            .collect();
        ParamStore::initialize(&z, 0)
    }

    #[test]
    fn default_stack_reduces_by_sixteen() {
        let (n, specs) = net(64, 192, &PoseNetConfig::default());
        let p = ParamStore::initialize(&specs, 0);
        let x = pose_encode(&n, &p, &frame(64, 192, 0.0), &frame(64, 192, 1.0)).unwrap();
        assert_eq!(x.shape(), &[128, 4, 12]);
        let again = pose_encode(&n, &p, &frame(64, 192, 0.0), &frame(64, 192, 1.0)).unwrap();
        assert_eq!(x, again);
        let z = pose_encode(&n, &zeroed(&specs), &frame(64, 192, 0.0), &frame(64, 192, 1.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_pair_or_size_is_rejected() {
        let cfg = PoseNetConfig {
            channels: vec![4, 4],
            hidden: 8,
        };
        let (n, specs) = net(8, 8, &cfg);
        let p = ParamStore::initialize(&specs, 0);
        assert!(pose_encode(&n, &p, &frame(8, 8, 0.0), &frame(8, 12, 0.0)).is_err());
        assert!(PoseNet::new("posenet", &cfg, 10, 8).is_err());
    }

    #[test]
    fn zero_value_conv_halves_the_feature() {
        let cfg = PoseNetConfig {
            channels: vec![4, 6],
            hidden: 8,
        };
        let (n, specs) = net(8, 12, &cfg);
        let mut p = ParamStore::initialize(&specs, 3);
        p.get_mut(&n.value.weight).unwrap().data_mut().fill(0.0);
        let x = Tensor::from_fn3(6, 2, 3, |c, y, xx| (c as f64 - y as f64 * 0.5 + xx as f64).cos());
        let (out, omega) = pcab_attend(&n, &p, &x).unwrap();
        assert!(omega.data().iter().all(|&w| w == 0.5));
        for (o, v) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, 0.5 * v);
        }
    }

    #[test]
    fn attention_weights_are_in_the_open_unit_interval() {
        let cfg = PoseNetConfig {
            channels: vec![4, 5],
            hidden: 8,
        };
        let (n, specs) = net(8, 8, &cfg);
        let p = ParamStore::initialize(&specs, 7);
        let x = Tensor::from_fn3(5, 2, 2, |c, y, xx| 3.0 * ((c * 4 + y * 2 + xx) as f64).sin());
        let (out, omega) = pcab_attend(&n, &p, &x).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert_eq!(omega.shape(), &[5]);
        assert!(omega.data().iter().all(|&w| w > 0.0 && w < 1.0));
        let mut bad = x.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(pcab_attend(&n, &p, &bad).is_err());
    }

    #[test]
    fn affinity_rows_sum_to_one() {
        let cfg = PoseNetConfig {
            channels: vec![4, 5],
            hidden: 8,
        };
        let (n, specs) = net(8, 8, &cfg);
        let p = ParamStore::initialize(&specs, 7);
        let mut b = Binder::new(&p, false);
        let x = b.graph.constant(Tensor::from_fn3(5, 2, 2, |c, y, xx| ((c + y + xx) as f64).sin() * 4.0));
        let q = n.query.forward(&mut b, x).unwrap();
        let k = n.key.forward(&mut b, x).unwrap();
        let q = b.graph.reshape(q, &[5, 4]).unwrap();
        let k = b.graph.reshape(k, &[5, 4]).unwrap();
        let qk = b.graph.matmul_nt(q, k).unwrap();
        let a = b.graph.softmax_rows(qk).unwrap();
        for row in b.graph.value(a).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_gives_identity_and_rotation_scales_linearly() {
        let cfg = PoseNetConfig {
            channels: vec![4, 4],
            hidden: 8,
        };
        let (n, specs) = net(8, 8, &cfg);
        let x = Tensor::from_fn3(4, 2, 2, |c, y, xx| ((c * 4 + y * 2 + xx) as f64 * 0.7).sin());
        let pose = pose_head(&n, &zeroed(&specs), &x).unwrap();
        assert_eq!(pose.to_array(), [0.0; 6]);

        let p = ParamStore::initialize(&specs, 2);
        let base = pose_head(&n, &p, &x).unwrap().to_array();
        let mut doubled = p.clone();
        let w = doubled.get_mut(&n.fc2.weight).unwrap();
        for v in &mut w.data_mut()[3 * 8..] {
            *v *= 2.0;
        }
        let out = pose_head(&n, &doubled, &x).unwrap().to_array();
        assert_eq!(&out[..3], &base[..3]);
        for i in 3..6 {
            assert_eq!(out[i], 2.0 * base[i]);
        }
    }

    #[test]
    fn pair_poses_are_independent_of_order() {
        let cfg = PoseNetConfig {
            channels: vec![4, 8],
            hidden: 8,
        };
        let (n, specs) = net(8, 12, &cfg);
        let p = ParamStore::initialize(&specs, 4);
        let (a, b, c) = (frame(8, 12, 0.0), frame(8, 12, 0.5), frame(8, 12, 1.1));
        let (p1, p2) = estimate_pair_poses(&n, &p, &PoseTriplet::new(a.clone(), b.clone(), c.clone()).unwrap()).unwrap();
        let (q2, q1) = estimate_pair_poses(&n, &p, &PoseTriplet::new(c, b, a).unwrap()).unwrap();
        assert_eq!(p1, q1);
        assert_eq!(p2, q2);
        assert!(p1.is_finite() && p2.is_finite());
        let (z1, z2) = estimate_pair_poses(
            &n,
            &zeroed(&specs),
            &PoseTriplet::new(frame(8, 12, 0.0), frame(8, 12, 0.5), frame(8, 12, 1.1)).unwrap(),
        )
        .unwrap();
        assert_eq!((z1, z2), (Pose6DoF::default(), Pose6DoF::default()));
    }

    #[test]
    fn pose_gradient_matches_finite_differences() {
        let cfg = PoseNetConfig {
            channels: vec![3, 4],
            hidden: 5,
        };
        let (n, specs) = net(8, 8, &cfg);
        let mut p = ParamStore::initialize(&specs, 6);
        // a larger last layer keeps the readout well above rounding noise
        p.get_mut(&n.fc2.weight).unwrap().scale(100.0);
        let tgt = frame(8, 8, 0.3);
        let src = frame(8, 8, 0.9);
        let x0 = src.tensor().clone();
        let idx: Vec<usize> = (0..x0.len()).step_by(7).collect();
        let r = check_gradient_at(&x0, &idx, 1e-6, |g, x| {
            let mut b = Binder::new(&p, false);
            std::mem::swap(&mut b.graph, g);
            let t = b.graph.constant(tgt.tensor().clone());
            let pose = n.forward_pair(&mut b, x, t)?;
            let sq = b.graph.square(pose);
            let out = b.graph.sum_all(sq);
            std::mem::swap(&mut b.graph, g);
            Ok(out)
        });
        assert!(r.passes(1e-3), "{r:?}");
    }
}
