//! Model assembly, training windows, joint optimisation and the pose-free
//! inference path.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::decoder::{
    sigmoid_to_depth, DepthDecoder, FlowDecoder, Fusion, CORRELATION_RADIUS, DEFAULT_MAX_DEPTH, DEFAULT_MIN_DEPTH,
};
use crate::encoders::{PyramidEncoder, PAST_STEPS};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, EvalConfig, EvalReport, EvalSample};
use crate::forecaster::{FlowForecaster, RgbForecaster};
use crate::frames::{DepthMap, FlowField, Frame};
use crate::geometry::{CameraIntrinsics, RotationOrder};
use crate::losses::{objective, LossConfig, LossReport, ViewTriplet, WarpSetup};
use crate::nn::{Binder, ParamSpec, ParamStore};
use crate::optim::{AdamConfig, AdamState};
use crate::posenet::{PoseNet, PoseNetConfig};
use crate::synthdata::SequenceRecord;
use crate::tensor::Tensor;

pub const DEFNET_PREFIX: &str = "defnet";
pub const POSENET_PREFIX: &str = "posenet";

/// Network sizes and the depth range. Both encoders share the pyramid depth
/// `L = rgb_channels.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub rgb_channels: Vec<usize>,
    pub flow_channels: Vec<usize>,
    pub pose: PoseNetConfig,
    pub correlation_radius: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub rotation_order: RotationOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 192,
            rgb_channels: vec![16, 24, 32, 48],
            flow_channels: vec![8, 16, 24, 32],
            pose: PoseNetConfig::default(),
            correlation_radius: CORRELATION_RADIUS,
            d_min: DEFAULT_MIN_DEPTH,
            d_max: DEFAULT_MAX_DEPTH,
            rotation_order: RotationOrder::default(),
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.rgb_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 || self.flow_channels.len() != l {
            return Err(Error::invalid(format!(
                "rgb and flow channel plans need the same non-zero length, got {} and {}",
                l,
                self.flow_channels.len()
            )));
        }
        if self.rgb_channels.iter().chain(&self.flow_channels).any(|&c| c == 0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        let div = 1usize << l;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} must be divisible by 2^L = {div}",
                self.height, self.width
            )));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::invalid(format!(
                "depth range needs 0 < d_min < d_max, got ({}, {})",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }
}

/// The depth forecasting network: encoders, forecasters, decoders, fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct DefNet {
    pub enc_rgb: PyramidEncoder,
    pub enc_flow: PyramidEncoder,
    pub rfb: RgbForecaster,
    pub ffb: FlowForecaster,
    pub dec_depth: DepthDecoder,
    pub dec_flow: FlowDecoder,
    pub fusion: Fusion,
}

/// Sigmoid maps produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DefNetOutput {
    /// Fused map at half resolution.
    pub fused: Var,
    /// Fused map upsampled to frame resolution.
    pub full: Var,
}

impl DefNet {
    pub fn new(cfg: &ModelConfig) -> Self {
        let p = DEFNET_PREFIX;
        DefNet {
            enc_rgb: PyramidEncoder::new(&format!("{p}.enc_rgb"), 3, &cfg.rgb_channels),
            enc_flow: PyramidEncoder::new(&format!("{p}.enc_flow"), 2, &cfg.flow_channels),
            rfb: RgbForecaster::new(&format!("{p}.rfb"), &cfg.rgb_channels),
            ffb: FlowForecaster::new(&format!("{p}.ffb"), &cfg.flow_channels),
            dec_depth: DepthDecoder::new(&format!("{p}.dec_depth"), &cfg.rgb_channels),
            dec_flow: FlowDecoder::new(&format!("{p}.dec_flow"), &cfg.flow_channels, cfg.correlation_radius),
            fusion: Fusion::new(&format!("{p}.fusion")),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.enc_rgb.specs(out);
        self.enc_flow.specs(out);
        self.rfb.specs(out);
        self.ffb.specs(out);
        self.dec_depth.specs(out);
        self.dec_flow.specs(out);
        self.fusion.specs(out);
    }

    /// `rgb` and `flow` are the four past observations, oldest first.
    pub fn forward(&self, b: &mut Binder, rgb: &[Var], flow: &[Var]) -> Result<DefNetOutput> {
        if rgb.len() != PAST_STEPS || flow.len() != PAST_STEPS {
            return Err(Error::invalid(format!(
                "expected {PAST_STEPS} frames and flows, got {} and {}",
                rgb.len(),
                flow.len()
            )));
        }
        let rgb_feats = rgb.iter().map(|&x| self.enc_rgb.forward(b, x)).collect::<Result<Vec<_>>>()?;
        let flow_feats = flow.iter().map(|&x| self.enc_flow.forward(b, x)).collect::<Result<Vec<_>>>()?;
        let f_rgb = self.rfb.forward(b, &rgb_feats)?;
        let f_flow = self.ffb.forward(b, &flow_feats)?;
        let depth = self.dec_depth.forward(b, &f_rgb)?;
        let flows = self.dec_flow.forward(b, &f_flow)?;
        let fused = self.fusion.forward(b, depth[0], flows[0])?;
        let full = b.graph.upsample_bilinear2(fused)?;
        Ok(DefNetOutput { fused, full })
    }
}

/// DeFNet plus the pose network used only during training.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub defnet: DefNet,
    pub posenet: PoseNet,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config: config.clone(),
            defnet: DefNet::new(config),
            posenet: PoseNet::new(POSENET_PREFIX, &config.pose, config.height, config.width)?,
        })
    }

    pub fn defnet_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.defnet.specs(&mut out);
        out
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = self.defnet_specs();
        self.posenet.specs(&mut out);
        out
    }

    pub fn initialize(&self, seed: u64) -> ParamStore {
        ParamStore::initialize(&self.specs(), seed)
    }

    fn check_frames(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.config.height, self.config.width) {
            return Err(Error::invalid(format!(
                "frames are {h}x{w} but the model was built for {}x{}",
                self.config.height, self.config.width
            )));
        }
        Ok(())
    }
}

/// Frames the pose network and the losses may see, `I_{t+k}` and `I_{t+2k}`.
/// They are kept apart from the past window so no DeFNet input can reach
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureViews {
    pub target: Frame,
    pub after: Frame,
}

/// One training window.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub sequence: usize,
    pub t: usize,
    pub k: usize,
    /// `I_{t-9}, I_{t-6}, I_{t-3}, I_t` for a frame interval of 3.
    pub rgb: Vec<Frame>,
    /// Flow `i → i+1` at the same indices as `rgb`.
    pub flow: Vec<FlowField>,
    pub future: FutureViews,
    pub intrinsics: CameraIntrinsics,
    /// Evaluation only.
    pub gt_depth_t: DepthMap,
    pub gt_depth_future: DepthMap,
}

impl SequenceSample {
    /// The frame `I_t`, first element of the pose triplet.
    pub fn current(&self) -> &Frame {
        &self.rgb[PAST_STEPS - 1]
    }
}

/// Indices of the past window ending at `t`.
pub fn window_indices(t: usize, frame_interval: usize) -> Vec<usize> {
    (0..PAST_STEPS).rev().map(|i| t - i * frame_interval).collect()
}

/// Smallest usable `t` for a frame interval.
pub fn min_window_t(frame_interval: usize) -> usize {
    (PAST_STEPS - 1) * frame_interval
}

/// Sequence length needed to form at least one window.
pub fn min_sequence_len(k: usize, frame_interval: usize) -> usize {
    min_window_t(frame_interval) + 2 * k + 1
}

pub fn sample_training_window(seq: &SequenceRecord, t: usize, k: usize) -> Result<SequenceSample> {
    sample_window(seq, 0, t, k, 3)
}

/// Window `t` of sequence `seq` with horizon `k`.
pub fn sample_window(
    seq: &SequenceRecord,
    sequence: usize,
    t: usize,
    k: usize,
    frame_interval: usize,
) -> Result<SequenceSample> {
    if k == 0 || frame_interval == 0 {
        return Err(Error::invalid(format!(
            "horizon and frame interval must be positive, got k = {k}, interval = {frame_interval}"
        )));
    }
    let lo = min_window_t(frame_interval);
    if t < lo {
        return Err(Error::invalid(format!("window start t = {t} is below the minimum {lo}")));
    }
    let n = seq.len();
    if t + 2 * k >= n {
        return Err(Error::invalid(format!(
            "window t = {t}, k = {k} needs t + 2k < {n} (sequence length); minimum length is {}",
            min_sequence_len(k, frame_interval)
        )));
    }
    let idx = window_indices(t, frame_interval);
    Ok(SequenceSample {
        sequence,
        t,
        k,
        rgb: idx.iter().map(|&i| seq.frames[i].clone()).collect(),
        flow: idx.iter().map(|&i| seq.flows[i].clone()).collect(),
        future: FutureViews {
            target: seq.frames[t + k].clone(),
            after: seq.frames[t + 2 * k].clone(),
        },
        intrinsics: seq.intrinsics,
        gt_depth_t: seq.depths[t].clone(),
        gt_depth_future: seq.depths[t + k].clone(),
    })
}

/// All `(sequence, t)` pairs with a complete window, stride 1.
pub fn dense_windows(lengths: &[usize], k: usize, frame_interval: usize) -> Vec<(usize, usize)> {
    let lo = min_window_t(frame_interval);
    let mut out = Vec::new();
    for (s, &n) in lengths.iter().enumerate() {
        let mut t = lo;
        while t + 2 * k < n {
            out.push((s, t));
            t += 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub frame_interval: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stops early once this many steps have run.
    pub max_steps: Option<usize>,
    pub loss: LossConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic ones).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 5,
            frame_interval: 3,
            batch_size: 4,
            learning_rate: 1e-4,
            epochs: 30,
            max_steps: None,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.k, 5 | 10) {
            return Err(Error::invalid(format!("horizon k must be 5 or 10, got {}", self.k)));
        }
        if self.frame_interval == 0 || self.batch_size == 0 {
            return Err(Error::invalid("frame interval and batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        self.loss.weights.validate()?;
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Parameters plus optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
}

struct SampleResult {
    report: LossReport,
    grads: BTreeMap<String, Tensor>,
}

fn warp_setup(model: &Model, k: CameraIntrinsics) -> WarpSetup {
    WarpSetup {
        intrinsics: k,
        order: model.config.rotation_order,
        d_min: model.config.d_min,
        d_max: model.config.d_max,
    }
}

/// Loss and parameter gradients of one sample.
fn sample_gradients(model: &Model, params: &ParamStore, s: &SequenceSample, loss: &LossConfig) -> Result<SampleResult> {
    model.check_frames(s.current().height(), s.current().width())?;
    let mut b = Binder::new(params, true);
    let rgb: Vec<Var> = s.rgb.iter().map(|f| b.graph.constant(f.tensor().clone())).collect();
    let flow: Vec<Var> = s.flow.iter().map(|f| b.graph.constant(f.tensor().clone())).collect();
    let out = model.defnet.forward(&mut b, &rgb, &flow)?;

    let current = b.graph.constant(s.current().tensor().clone());
    let target = b.graph.constant(s.future.target.tensor().clone());
    let after = b.graph.constant(s.future.after.tensor().clone());
    let p_before = model.posenet.forward_pair(&mut b, current, target)?;
    let p_after = model.posenet.forward_pair(&mut b, after, target)?;

    let views = ViewTriplet {
        target: s.future.target.tensor(),
        sources: [s.current().tensor(), s.future.after.tensor()],
    };
    let obj = objective(
        &mut b.graph,
        out.full,
        [p_before, p_after],
        &views,
        &warp_setup(model, s.intrinsics),
        loss,
    )?;
    if !obj.report.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss at sequence {} t = {}: {:?}; {}",
            s.sequence,
            s.t,
            obj.report,
            norm_summary(params)
        )));
    }
    let mut grads = b.graph.backward(obj.total);
    Ok(SampleResult {
        report: obj.report,
        grads: b.collect(&mut grads),
    })
}

/// Parameter norms per top-level module, for diagnostics.
pub fn norm_summary(params: &ParamStore) -> String {
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for (name, t) in params.iter() {
        let key: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
        *groups.entry(key).or_default() += t.data().iter().map(|v| v * v).sum::<f64>();
    }
    let mut s = String::from("parameter norms:");
    for (k, v) in groups {
        let _ = write!(s, " {k}={:.4e}", v.sqrt());
    }
    s
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.l_mpe += r.l_mpe / n;
        m.l_ds += r.l_ds / n;
        m.l_sm += r.l_sm / n;
        m.l_pc += r.l_pc / n;
        m.l_tot += r.l_tot / n;
    }
    m
}

/// One Adam update on the mean loss of `batch`. Samples may run in
/// parallel; gradients are summed in batch order so the result does not
/// depend on the thread count.
pub fn train_step(
    model: &Model,
    state: &mut TrainState,
    batch: &[&SequenceSample],
    loss: &LossConfig,
    adam: &AdamConfig,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let params = &state.params;
    let results: Vec<SampleResult> = batch
        .par_iter()
        .map(|s| sample_gradients(model, params, s, loss))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        reports.push(r.report);
        for (name, g) in r.grads {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    for g in grads.values_mut() {
        g.scale(scale);
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient for {name}; {}",
            norm_summary(&state.params)
        )));
    }
    state.adam.update(adam, &mut state.params, &grads);
    state.step += 1;
    Ok(mean_report(&reports))
}

pub const CURVE_HEADER: &str = "step,l_mpe,l_ds,l_sm,l_pc,l_tot";

/// Per-step losses; `step` counts from 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    pub rows: Vec<(u64, LossReport)>,
}

impl TrainingCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CURVE_HEADER);
        s.push('\n');
        for (step, r) in &self.rows {
            let _ = writeln!(s, "{step},{},{},{},{},{}", r.l_mpe, r.l_ds, r.l_sm, r.l_pc, r.l_tot);
        }
        s
    }

    /// Mean `l_tot` over a window of rows.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let rows = &self.rows[range];
        rows.iter().map(|(_, r)| r.l_tot).sum::<f64>() / rows.len() as f64
    }
}

/// Where `train_loop` writes its artefacts, if anywhere.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub curve: TrainingCurve,
}

/// Epochs over the dense window set, shuffled per epoch from `cfg.seed`.
pub fn train_loop(records: &[SequenceRecord], cfg: &TrainConfig, out: &TrainOutput) -> Result<TrainResult> {
    train_loop_with(records, cfg, out, |_, _| {})
}

/// As [`train_loop`], calling `on_step` after every update.
pub fn train_loop_with(
    records: &[SequenceRecord],
    cfg: &TrainConfig,
    out: &TrainOutput,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<TrainResult> {
    cfg.validate()?;
    let model = Model::new(&cfg.model)?;
    let need = min_sequence_len(cfg.k, cfg.frame_interval);
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.len() < need) {
        return Err(Error::invalid(format!(
            "sequence {i} has {} frames; k = {} needs at least {need} (= {} + 2k + 1)",
            r.len(),
            cfg.k,
            min_window_t(cfg.frame_interval)
        )));
    }
    let lengths: Vec<usize> = records.iter().map(|r| r.len()).collect();
    let windows = dense_windows(&lengths, cfg.k, cfg.frame_interval);
    if windows.is_empty() && cfg.epochs > 0 {
        return Err(Error::invalid("no training windows"));
    }
    let mut state = TrainState {
        params: model.initialize(cfg.seed),
        adam: AdamState::new(),
        step: 0,
    };
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut curve = TrainingCurve::default();
    let mut csv = match &out.dir {
        Some(dir) => {
            let path = dir.join("curve.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{CURVE_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let adam = cfg.adam();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order = windows.clone();
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000 + epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if state.step as usize >= max_steps {
                break 'epochs;
            }
            let samples = chunk
                .iter()
                .map(|&(s, t)| sample_window(&records[s], s, t, cfg.k, cfg.frame_interval))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SequenceSample> = samples.iter().collect();
            let report = train_step(&model, &mut state, &refs, &cfg.loss, &adam)?;
            curve.rows.push((state.step, report));
            if let Some((path, f)) = &mut csv {
                writeln!(
                    f,
                    "{},{},{},{},{},{}",
                    state.step, report.l_mpe, report.l_ds, report.l_sm, report.l_pc, report.l_tot
                )
                .map_err(|e| Error::io(&*path, e))?;
            }
            on_step(state.step, &report);
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
                if let Some(dir) = &out.dir {
                    let ck = Checkpoint::from_state(&model.config, cfg, &state);
                    save_checkpoint(&ck, dir.join(format!("step_{:06}.ckpt", state.step)))?;
                }
            }
        }
    }
    let checkpoint = Checkpoint::from_state(&model.config, cfg, &state);
    if let Some(dir) = &out.dir {
        save_checkpoint(&checkpoint, dir.join("final.ckpt"))?;
    }
    Ok(TrainResult { checkpoint, curve })
}

/// DeFNet parameters with everything the pose network owns removed.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub config: ModelConfig,
    defnet: DefNet,
    params: ParamStore,
}

impl InferenceModel {
    /// Fails if any DeFNet parameter is missing or misshapen. Pose network
    /// parameters are never read.
    pub fn new(config: &ModelConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let defnet = DefNet::new(config);
        let mut specs = Vec::new();
        defnet.specs(&mut specs);
        let params = params.without_prefix(&format!("{POSENET_PREFIX}."));
        params.check(&specs)?;
        Ok(InferenceModel {
            config: config.clone(),
            defnet,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

/// Forecast `D_{t+k}` at frame resolution from the past window.
pub fn forecast_infer(model: &InferenceModel, rgb: &[Frame], flow: &[FlowField]) -> Result<DepthMap> {
    let cfg = &model.config;
    for (h, w) in rgb
        .iter()
        .map(|f| (f.height(), f.width()))
        .chain(flow.iter().map(|f| (f.height(), f.width())))
    {
        if (h, w) != (cfg.height, cfg.width) {
            return Err(Error::invalid(format!(
                "input is {h}x{w} but the checkpoint was trained at {}x{}",
                cfg.height, cfg.width
            )));
        }
    }
    let mut b = Binder::new(&model.params, false);
    let rv: Vec<Var> = rgb.iter().map(|f| b.graph.constant(f.tensor().clone())).collect();
    let fv: Vec<Var> = flow.iter().map(|f| b.graph.constant(f.tensor().clone())).collect();
    let out = model.defnet.forward(&mut b, &rv, &fv)?;
    sigmoid_to_depth(b.graph.value(out.full), cfg.d_min, cfg.d_max)
}

/// Forecasts every `stride`-th window of every record and builds the
/// model / copy-last / oracle report.
pub fn evaluate_records(
    model: &InferenceModel,
    records: &[SequenceRecord],
    k: usize,
    frame_interval: usize,
    stride: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let lengths: Vec<usize> = records.iter().map(|r| r.len()).collect();
    let windows: Vec<(usize, usize)> = dense_windows(&lengths, k, frame_interval)
        .into_iter()
        .filter(|&(_, t)| (t - min_window_t(frame_interval)) % stride.max(1) == 0)
        .collect();
    if windows.is_empty() {
        return Err(Error::Evaluation(format!(
            "no evaluation windows for k = {k}; sequences need at least {} frames",
            min_sequence_len(k, frame_interval)
        )));
    }
    let samples = windows
        .par_iter()
        .map(|&(s, t)| {
            let w = sample_window(&records[s], s, t, k, frame_interval)?;
            Ok(EvalSample {
                sequence: format!("seq_{s:04}"),
                t,
                prediction: forecast_infer(model, &w.rgb, &w.flow)?,
                gt_future: w.gt_depth_future,
                gt_last: w.gt_depth_t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_run(&samples, cfg)?;
    report.context.insert("k".into(), k.into());
    report.context.insert("frame_interval".into(), frame_interval.into());
    report.context.insert("stride".into(), stride.into());
    Ok(report)
}

/// Worker threads from `DFN_THREADS` (default 1).
pub fn configure_threads() -> Result<usize> {
    let n = match std::env::var("DFN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(format!("DFN_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    // a second call in one process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
