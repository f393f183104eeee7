//! Feature forecasting: past pyramids to the pyramid of frame `t + k`.
//!
//! The RGB branch runs one convolutional GRU per level over the four past
//! steps. Within a step, levels are updated coarse to fine and each level
//! also sees the freshly updated hidden state of the level above, upsampled
//! to its size. The flow branch runs one convolutional LSTM per level with no
//! cross-level links. Both branches end in a 1×1 projection per level.

use crate::autograd::Var;
use crate::encoders::{FeaturePyramid, PAST_STEPS};
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2d, Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

/// Hidden state of a convolutional GRU, `[C_hidden, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGruState {
    pub hidden: Tensor,
}

/// Hidden and cell state of a convolutional LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

/// Forecast features, same layout and per-frame channel widths as an encoder
/// pyramid.
pub type ForecastedPyramid = FeaturePyramid;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGru {
    pub c_in: usize,
    pub c_hidden: usize,
    /// Update and reset gates, stacked.
    pub gates: Conv2d,
    pub candidate: Conv2d,
}

impl ConvGru {
    pub fn new(prefix: &str, c_in: usize, c_hidden: usize) -> Self {
        ConvGru {
            c_in,
            c_hidden,
            gates: Conv2d::new(&format!("{prefix}.gates"), c_in + c_hidden, 2 * c_hidden, 3, 1),
            candidate: Conv2d::new(&format!("{prefix}.candidate"), c_in + c_hidden, c_hidden, 3, 1),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.gates.specs_with(Init::Lecun { fan_in: self.gates.fan_in() }, out);
        self.candidate.specs_with(Init::Lecun { fan_in: self.candidate.fan_in() }, out);
    }

    /// `h' = (1 - z) ⊙ h + z ⊙ tanh(conv([x, r ⊙ h]))` with
    /// `z, r = σ(conv([x, h]))`.
    pub fn step(&self, b: &mut Binder, x: Var, h: Var) -> Result<Var> {
        let xh = b.graph.concat(&[x, h])?;
        let zr = self.gates.forward(b, xh)?;
        let zr = b.graph.sigmoid(zr);
        let z = b.graph.slice_channels(zr, 0, self.c_hidden)?;
        let r = b.graph.slice_channels(zr, self.c_hidden, self.c_hidden)?;
        let rh = b.graph.mul(r, h)?;
        let xrh = b.graph.concat(&[x, rh])?;
        let cand = self.candidate.forward(b, xrh)?;
        let cand = b.graph.tanh(cand);
        let delta = b.graph.sub(cand, h)?;
        let zd = b.graph.mul(z, delta)?;
        b.graph.add(h, zd)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstm {
    pub c_in: usize,
    pub c_hidden: usize,
    /// Input, forget, output and candidate gates, stacked.
    pub gates: Conv2d,
}

impl ConvLstm {
    pub fn new(prefix: &str, c_in: usize, c_hidden: usize) -> Self {
        ConvLstm {
            c_in,
            c_hidden,
            gates: Conv2d::new(&format!("{prefix}.gates"), c_in + c_hidden, 4 * c_hidden, 3, 1),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.gates.specs_with(Init::Lecun { fan_in: self.gates.fan_in() }, out);
    }

    /// Returns `(h', c')`.
    pub fn step(&self, b: &mut Binder, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.c_hidden;
        let xh = b.graph.concat(&[x, h])?;
        let pre = self.gates.forward(b, xh)?;
        let sig = b.graph.slice_channels(pre, 0, 3 * n)?;
        let sig = b.graph.sigmoid(sig);
        let i = b.graph.slice_channels(sig, 0, n)?;
        let f = b.graph.slice_channels(sig, n, n)?;
        let o = b.graph.slice_channels(sig, 2 * n, n)?;
        let g = b.graph.slice_channels(pre, 3 * n, n)?;
        let g = b.graph.tanh(g);
        let fc = b.graph.mul(f, c)?;
        let ig = b.graph.mul(i, g)?;
        let c_new = b.graph.add(fc, ig)?;
        let tc = b.graph.tanh(c_new);
        let h_new = b.graph.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}

fn check_past(past: &[Vec<Var>], levels: usize) -> Result<()> {
    if past.len() != PAST_STEPS {
        return Err(Error::invalid(format!(
            "forecaster expects {PAST_STEPS} time steps, got {}",
            past.len()
        )));
    }
    if let Some(p) = past.iter().find(|p| p.len() != levels) {
        return Err(Error::invalid(format!(
            "forecaster expects {levels} pyramid levels, got {}",
            p.len()
        )));
    }
    Ok(())
}

/// Inter-connected GRU forecasting block for RGB features.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbForecaster {
    pub channels: Vec<usize>,
    pub cells: Vec<ConvGru>,
    pub projections: Vec<Conv2d>,
}

impl RgbForecaster {
    pub fn new(prefix: &str, channels: &[usize]) -> Self {
        let n = channels.len();
        let cells = (0..n)
            .map(|l| {
                let coarse = if l + 1 < n { channels[l + 1] } else { 0 };
                ConvGru::new(&format!("{prefix}.level{l}.cgru"), channels[l] + coarse, channels[l])
            })
            .collect();
        let projections = (0..n)
            .map(|l| Conv2d::new(&format!("{prefix}.level{l}.proj"), channels[l], channels[l], 1, 1))
            .collect();
        RgbForecaster {
            channels: channels.to_vec(),
            cells,
            projections,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for c in &self.cells {
            c.specs(out);
        }
        for p in &self.projections {
            p.specs_with(Init::Lecun { fan_in: p.fan_in() }, out);
        }
    }

    /// `past[step][level]`, oldest step first.
    pub fn forward(&self, b: &mut Binder, past: &[Vec<Var>]) -> Result<Vec<Var>> {
        let n = self.channels.len();
        check_past(past, n)?;
        let mut hidden: Vec<Var> = (0..n)
            .map(|l| {
                let (_, h, w) = b.graph.value(past[0][l]).dims3()?;
                Ok(b.graph.constant(Tensor::zeros(&[self.channels[l], h, w])))
            })
            .collect::<Result<_>>()?;
        for step in past {
            for l in (0..n).rev() {
                let x = if l + 1 < n {
                    let up = b.graph.upsample_nearest2(hidden[l + 1])?;
                    b.graph.concat(&[step[l], up])?
                } else {
                    step[l]
                };
                hidden[l] = self.cells[l].step(b, x, hidden[l])?;
            }
        }
        hidden
            .iter()
            .zip(&self.projections)
            .map(|(&h, p)| p.forward(b, h))
            .collect()
    }
}

/// Independent per-level LSTM forecasting blocks for flow features.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowForecaster {
    pub channels: Vec<usize>,
    pub cells: Vec<ConvLstm>,
    pub projections: Vec<Conv2d>,
}

impl FlowForecaster {
    pub fn new(prefix: &str, channels: &[usize]) -> Self {
        let cells = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| ConvLstm::new(&format!("{prefix}.level{l}.clstm"), c, c))
            .collect();
        let projections = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Conv2d::new(&format!("{prefix}.level{l}.proj"), c, c, 1, 1))
            .collect();
        FlowForecaster {
            channels: channels.to_vec(),
            cells,
            projections,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for c in &self.cells {
            c.specs(out);
        }
        for p in &self.projections {
            p.specs_with(Init::Lecun { fan_in: p.fan_in() }, out);
        }
    }

    /// Forecast of a single level from its own four past features.
    pub fn forward_level(&self, b: &mut Binder, level: usize, seq: &[Var]) -> Result<Var> {
        let (_, h, w) = b.graph.value(seq[0]).dims3()?;
        let zeros = Tensor::zeros(&[self.channels[level], h, w]);
        let mut hid = b.graph.constant(zeros.clone());
        let mut cell = b.graph.constant(zeros);
        for &x in seq {
            (hid, cell) = self.cells[level].step(b, x, hid, cell)?;
        }
        self.projections[level].forward(b, hid)
    }

    pub fn forward(&self, b: &mut Binder, past: &[Vec<Var>]) -> Result<Vec<Var>> {
        check_past(past, self.channels.len())?;
        (0..self.channels.len())
            .map(|l| {
                let seq: Vec<Var> = past.iter().map(|p| p[l]).collect();
                self.forward_level(b, l, &seq)
            })
            .collect()
    }
}

fn bind_past(b: &mut Binder, past: &[FeaturePyramid]) -> Vec<Vec<Var>> {
    past.iter()
        .map(|p| p.levels.iter().map(|t| b.graph.constant(t.clone())).collect())
        .collect()
}

/// One GRU update on plain tensors.
pub fn cgru_step(cell: &ConvGru, params: &ParamStore, x: &Tensor, h: &ConvGruState) -> Result<ConvGruState> {
    let (_, xh, xw) = x.dims3()?;
    let (hc, hh, hw) = h.hidden.dims3()?;
    if (xh, xw) != (hh, hw) || hc != cell.c_hidden || x.shape()[0] != cell.c_in {
        return Err(Error::invalid(format!(
            "cgru_step: input {:?} / hidden {:?} do not fit the cell",
            x.shape(),
            h.hidden.shape()
        )));
    }
    let mut b = Binder::new(params, false);
    let xv = b.graph.constant(x.clone());
    let hv = b.graph.constant(h.hidden.clone());
    let out = cell.step(&mut b, xv, hv)?;
    Ok(ConvGruState {
        hidden: b.graph.value(out).clone(),
    })
}

/// One LSTM update on plain tensors.
pub fn convlstm_step(cell: &ConvLstm, params: &ParamStore, x: &Tensor, s: &ConvLstmState) -> Result<ConvLstmState> {
    let (_, xh, xw) = x.dims3()?;
    let (hc, hh, hw) = s.hidden.dims3()?;
    if (xh, xw) != (hh, hw) || hc != cell.c_hidden || x.shape()[0] != cell.c_in || s.cell.shape() != s.hidden.shape() {
        return Err(Error::invalid(format!(
            "convlstm_step: input {:?} / state {:?} do not fit the cell",
            x.shape(),
            s.hidden.shape()
        )));
    }
    let mut b = Binder::new(params, false);
    let xv = b.graph.constant(x.clone());
    let hv = b.graph.constant(s.hidden.clone());
    let cv = b.graph.constant(s.cell.clone());
    let (h, c) = cell.step(&mut b, xv, hv, cv)?;
    Ok(ConvLstmState {
        hidden: b.graph.value(h).clone(),
        cell: b.graph.value(c).clone(),
    })
}

pub fn rfb_forward(net: &RgbForecaster, params: &ParamStore, past: &[FeaturePyramid]) -> Result<ForecastedPyramid> {
    let mut b = Binder::new(params, false);
    let vars = bind_past(&mut b, past);
    let out = net.forward(&mut b, &vars)?;
    FeaturePyramid::new(out.iter().map(|&v| b.graph.value(v).clone()).collect())
}

pub fn ffb_forward(net: &FlowForecaster, params: &ParamStore, past: &[FeaturePyramid]) -> Result<ForecastedPyramid> {
    let mut b = Binder::new(params, false);
    let vars = bind_past(&mut b, past);
    let out = net.forward(&mut b, &vars)?;
    FeaturePyramid::new(out.iter().map(|&v| b.graph.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient_at;

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

    fn past(channels: &[usize], h: usize, w: usize, seed: f64) -> Vec<FeaturePyramid> {
        (0..PAST_STEPS)
            .map(|t| {
                FeaturePyramid::new(
                    channels
                        .iter()
                        .enumerate()
                        .map(|(l, &c)| {
                            Tensor::from_fn3(c, h >> l, w >> l, |ci, y, x| {
                                ((ci * 7 + y * 3 + x + t * 11) as f64 * 0.37 + seed).sin()
                            })
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_gru_halves_the_hidden_state() {
        let cell = ConvGru::new("g", 3, 2);
        let mut specs = Vec::new();
        cell.specs(&mut specs);
        let p = zeroed(&specs);
        let h0 = Tensor::from_fn3(2, 3, 4, |c, y, x| ((c + y + x) as f64 * 0.3).sin() * 0.9);
        let out = cgru_step(&cell, &p, &Tensor::zeros(&[3, 3, 4]), &ConvGruState { hidden: h0.clone() }).unwrap();
        assert_eq!(out.hidden.shape(), h0.shape());
        for (a, b) in out.hidden.data().iter().zip(h0.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_state_stays_in_unit_interval() {
        let cell = ConvGru::new("g", 3, 4);
        let mut specs = Vec::new();
        cell.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 11);
        let mut h = ConvGruState {
            hidden: Tensor::from_fn3(4, 5, 5, |c, y, x| ((c * 5 + y * 2 + x) as f64).sin() * 0.99),
        };
        for s in 0..5 {
            let x = Tensor::from_fn3(3, 5, 5, |c, y, xx| 5.0 * ((c + y * xx + s) as f64).cos());
            h = cgru_step(&cell, &p, &x, &h).unwrap();
            assert!(h.hidden.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn zero_lstm_halves_the_cell() {
        let cell = ConvLstm::new("l", 2, 3);
        let mut specs = Vec::new();
        cell.specs(&mut specs);
        let p = zeroed(&specs);
        let c0 = Tensor::from_fn3(3, 4, 4, |c, y, x| (c * 16 + y * 4 + x) as f64 * 0.1 - 2.0);
        let s = ConvLstmState {
            hidden: Tensor::zeros(&[3, 4, 4]),
            cell: c0.clone(),
        };
        let out = convlstm_step(&cell, &p, &Tensor::zeros(&[2, 4, 4]), &s).unwrap();
        assert_eq!(out.cell.shape(), &[3, 4, 4]);
        for (a, b) in out.cell.data().iter().zip(c0.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        let again = convlstm_step(&cell, &p, &Tensor::zeros(&[2, 4, 4]), &s).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn step_shape_mismatch_is_rejected() {
        let cell = ConvGru::new("g", 3, 2);
        let mut specs = Vec::new();
        cell.specs(&mut specs);
        let p = zeroed(&specs);
        let h = ConvGruState {
            hidden: Tensor::zeros(&[2, 4, 4]),
        };
        assert!(cgru_step(&cell, &p, &Tensor::zeros(&[3, 4, 5]), &h).is_err());
    }

    #[test]
    fn rfb_preserves_encoder_shapes_and_is_deterministic() {
        let ch = [16, 32, 64, 128];
        let net = RgbForecaster::new("rfb", &ch);
        let mut specs = Vec::new();
        net.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 2);
        let input = past(&ch, 32, 96, 0.0);
        let out = rfb_forward(&net, &p, &input).unwrap();
        assert_eq!(out.level_shapes(), input[0].level_shapes());
        assert_eq!(out, rfb_forward(&net, &p, &input).unwrap());
        let z = rfb_forward(&net, &zeroed(&specs), &input).unwrap();
        assert!(z.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rfb_information_flows_only_coarse_to_fine() {
        let ch = [3, 4, 5];
        let net = RgbForecaster::new("rfb", &ch);
        let mut specs = Vec::new();
        net.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 4);
        let base = past(&ch, 8, 16, 0.0);
        let ref_out = rfb_forward(&net, &p, &base).unwrap();
        for l in 0..3 {
            let mut pert = base.clone();
            pert[1].levels[l].data_mut()[0] += 0.5;
            let out = rfb_forward(&net, &p, &pert).unwrap();
            for m in 0..3 {
                let changed = out.levels[m] != ref_out.levels[m];
                assert_eq!(changed, m <= l, "perturb level {l}, output level {m}");
            }
        }
    }

    #[test]
    fn ffb_levels_are_independent() {
        let ch = [3, 4, 5, 6];
        let net = FlowForecaster::new("ffb", &ch);
        let mut specs = Vec::new();
        net.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 4);
        let base = past(&ch, 16, 16, 1.0);
        let full = ffb_forward(&net, &p, &base).unwrap();
        assert_eq!(full.level_shapes(), base[0].level_shapes());

        // without the level-3 input the other levels come out the same
        let mut b = Binder::new(&p, false);
        for l in 0..3 {
            let seq: Vec<Var> = base.iter().map(|pp| b.graph.constant(pp.levels[l].clone())).collect();
            let v = net.forward_level(&mut b, l, &seq).unwrap();
            assert_eq!(b.graph.value(v), &full.levels[l]);
        }

        let mut pert = base.clone();
        pert[2].levels[2].data_mut()[5] -= 1.0;
        let out = ffb_forward(&net, &p, &pert).unwrap();
        for m in 0..4 {
            assert_eq!(out.levels[m] != full.levels[m], m == 2);
        }

        let mut zp = p.clone();
        for proj in &net.projections {
            let w = zp.get_mut(&proj.weight).unwrap();
            w.data_mut().fill(0.0);
        }
        let z = ffb_forward(&net, &zp, &base).unwrap();
        assert!(z.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rfb_gradient_matches_finite_differences() {
        let ch = [2, 3];
        let net = RgbForecaster::new("rfb", &ch);
        let mut specs = Vec::new();
        net.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 8);
        let base = past(&ch, 4, 6, 0.3);
        let x0 = base[0].levels[0].clone();
        let idx: Vec<usize> = (0..x0.len()).step_by(3).collect();
        let r = check_gradient_at(&x0, &idx, 1e-6, |g, x| {
            let mut b = Binder::new(&p, false);
            std::mem::swap(&mut b.graph, g);
            let xv = b.graph.reshape(x, x0.shape())?;
            let mut vars = bind_past(&mut b, &base);
            vars[0][0] = xv;
            let out = net.forward(&mut b, &vars)?;
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
}
