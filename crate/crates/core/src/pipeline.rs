//! Per-frame forward pass, unsupervised training, and online / reverse
//! inference over sequences.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tapegrad::{Float, Graph, Tensor, Var};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::flow::{align_previous, occlusion_mask, FlowEstimator, FlowField};
use crate::frame::{Frame, FrameSequence, Plane};
use crate::losses::{
    exposure_alpha, mean_luminance, total_loss, Branch, LossInputs, LossParams, LossReport, LossTerms,
    SmoothnessConfig,
};
use crate::networks::{
    ld_graph, rd_apply, rd_condition, rd_noise, re_graph, BoundNetworks, Networks, RetinexPair,
};
use crate::preprocessing::{compute_gain_with, compute_valid_brightness, sub_image};

pub const MANIFEST_SCHEMA: &str = "manifest-v1";
/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// The previous frame's denoised outputs, or nothing at the start of a
/// sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalState {
    prev: Option<RetinexPair>,
}

impl TemporalState {
    pub fn zero() -> Self {
        Self { prev: None }
    }

    pub fn from_pair(pair: RetinexPair) -> Self {
        Self { prev: Some(pair) }
    }

    pub fn is_zero(&self) -> bool {
        self.prev.is_none()
    }

    pub fn previous(&self) -> Option<&RetinexPair> {
        self.prev.as_ref()
    }
}

/// Every intermediate of one frame. The enhanced output is `r_rd`.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub i_ld: Frame,
    pub r0: Frame,
    pub r_re: Frame,
    pub s_re: Frame,
    pub r_rd: Frame,
    pub s_rd: Frame,
    pub flow: FlowField,
    pub mask: Plane,
    pub losses: Option<LossReport>,
}

/// Quantities that are computed from values during the forward pass and
/// then enter the graph as constants.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub gamma: f32,
    pub alpha: f64,
    pub warped: RetinexPair,
    pub flow: FlowField,
    pub mask: Plane,
    /// Whether the temporal loss applies to this frame.
    pub temporal: bool,
    /// Stage boundaries: LD output as seen by RE and RD, and the RE
    /// outputs as seen by RD.
    pub i_ld: Frame,
    pub r_re: Frame,
    pub s_re: Frame,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub input: Var,
    pub i_ld: Var,
    pub r0: Var,
    pub r_re: Var,
    pub s_re: Var,
    pub r_rd: Var,
    pub s_rd: Var,
    pub losses: Option<LossTerms>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub with_losses: bool,
    /// Flow is estimated at `1/flow_downscale` resolution.
    pub flow_downscale: usize,
}

fn frame_const<T: Float>(g: &mut Graph<T>, f: &Frame) -> Var {
    g.constant(f.to_tensor())
}

fn plane_const<T: Float>(g: &mut Graph<T>, p: &Plane) -> Result<Var> {
    let data = p.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Ok(g.constant(Tensor::new(&[1, p.height, p.width], data)?))
}

fn loss_params(cfg: &RunConfig, alpha: f64) -> LossParams {
    LossParams {
        y_high: cfg.y_high as f64,
        mtc_levels: cfg.mtc_levels,
        smooth: SmoothnessConfig::default(),
        alpha: Some(alpha),
    }
}

/// Builds the whole per-frame computation on `g`. With `frozen = None` the
/// constants are derived from this pass (calling the flow estimator when
/// there is history); otherwise the given ones are reused.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph<T: Float>(
    g: &mut Graph<T>,
    nets: &BoundNetworks,
    frame: &Frame,
    state: &TemporalState,
    est: &mut dyn FlowEstimator,
    cfg: &RunConfig,
    opts: ForwardOptions,
    frozen: Option<&Frozen>,
) -> Result<(ForwardVars, Frozen)> {
    let input = frame_const(g, frame);
    let (ld_out, i_ld_live) = ld_graph(g, nets, input)?;
    // Each network is optimized only by its own objectives, so gradients stop
    // where one stage hands its output to the next.
    let i_ld = match frozen {
        Some(f) => frame_const(g, &f.i_ld),
        None => g.detach(i_ld_live),
    };
    let i_ld_frame = Frame::from_tensor(g.value(i_ld))?;
    let (gamma, alpha, warped, flow) = match frozen {
        Some(f) => (f.gamma, f.alpha, f.warped.clone(), f.flow.clone()),
        None => {
            let v = compute_valid_brightness(&i_ld_frame, cfg.cdf_threshold);
            let gamma = compute_gain_with(v, cfg.cdf_threshold, cfg.safety_factor)?;
            let alpha = exposure_alpha(mean_luminance(g, i_ld)?, cfg.y_high as f64);
            let (warped, flow) = align_previous(state, &i_ld_frame, est, opts.flow_downscale)?;
            (gamma, alpha, warped, flow)
        }
    };
    let scaled = g.mul_scalar(i_ld, T::from_f64_lossy(gamma as f64));
    let r0 = g.clamp(scaled, T::zero(), T::one());
    let wr = frame_const(g, &warped.r);
    let ws = frame_const(g, &warped.s);
    let (r_re, s_re) = re_graph(g, nets, r0, i_ld, wr)?;
    let (rd_r, rd_s) = match frozen {
        Some(f) => (frame_const(g, &f.r_re), frame_const(g, &f.s_re)),
        None => (g.detach(r_re), g.detach(s_re)),
    };
    let (mask, temporal) = match frozen {
        Some(f) => (f.mask.clone(), f.temporal),
        None => (
            occlusion_mask(&Frame::from_tensor(g.value(r_re))?, &warped.r, cfg.omega)?,
            !state.is_zero() && cfg.use_mtc,
        ),
    };
    let cond = rd_condition(g, rd_s, wr, ws)?;
    let rd_out = rd_noise(g, nets, rd_r, cond, cfg.self_ensemble)?;
    let (r_rd, s_rd) = rd_apply(g, rd_r, rd_out, i_ld)?;

    let losses = if opts.with_losses {
        let mask_var = plane_const(g, &mask)?;
        let inputs = LossInputs {
            input,
            i_ld,
            r_re,
            s_re,
            rd_r_re: rd_r,
            rd_s_re: rd_s,
            r_rd,
            s_rd,
            temporal: temporal.then_some((wr, mask_var)),
        };
        let mut ld_fn = |g: &mut Graph<T>, x: Var, b: Branch| match b {
            Branch::Full => Ok(ld_out),
            Branch::Sub(_) => nets.ld.forward(g, x),
        };
        let ensemble = cfg.self_ensemble;
        let mut rd_fn = |g: &mut Graph<T>, x: Var, b: Branch| match b {
            Branch::Full => Ok(rd_out),
            Branch::Sub(which) => {
                let c = sub_image(g, cond, which)?;
                rd_noise(g, nets, x, c, ensemble)
            }
        };
        Some(total_loss(g, &inputs, &mut ld_fn, &mut rd_fn, &loss_params(cfg, alpha))?)
    } else {
        None
    };
    let vars = ForwardVars {
        input,
        i_ld,
        r0,
        r_re,
        s_re,
        r_rd,
        s_rd,
        losses,
    };
    let frozen = Frozen {
        gamma,
        alpha,
        warped,
        flow,
        mask,
        temporal,
        r_re: Frame::from_tensor(g.value(rd_r))?,
        s_re: Frame::from_tensor(g.value(rd_s))?,
        i_ld: i_ld_frame,
    };
    Ok((vars, frozen))
}

fn collect_result<T: Float>(g: &Graph<T>, v: &ForwardVars, frozen: Frozen) -> Result<FrameResult> {
    let get = |var: Var, stage: &str| -> Result<Frame> {
        let f = Frame::from_tensor(g.value(var))?;
        if f.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(stage.to_string()));
        }
        Ok(f)
    };
    Ok(FrameResult {
        i_ld: get(v.i_ld, "i_ld")?,
        r0: get(v.r0, "r0")?,
        r_re: get(v.r_re, "r_re")?,
        s_re: get(v.s_re, "s_re")?,
        r_rd: get(v.r_rd, "r_rd")?,
        s_rd: get(v.s_rd, "s_rd")?,
        flow: frozen.flow,
        mask: frozen.mask,
        losses: v.losses.map(|l| l.report(g)).transpose()?,
    })
}

fn next_state(result: &FrameResult) -> TemporalState {
    TemporalState::from_pair(RetinexPair {
        r: result.r_rd.clone(),
        s: result.s_rd.clone(),
    })
}

/// Runs the full pipeline on one frame at full flow resolution.
pub fn enhance_frame(
    nets: &Networks,
    frame: &Frame,
    state: &TemporalState,
    est: &mut dyn FlowEstimator,
    cfg: &RunConfig,
    with_losses: bool,
) -> Result<(FrameResult, TemporalState)> {
    let opts = ForwardOptions {
        with_losses,
        flow_downscale: 1,
    };
    enhance_frame_with(nets, frame, state, est, cfg, opts)
}

pub fn enhance_frame_with(
    nets: &Networks,
    frame: &Frame,
    state: &TemporalState,
    est: &mut dyn FlowEstimator,
    cfg: &RunConfig,
    opts: ForwardOptions,
) -> Result<(FrameResult, TemporalState)> {
    nets.check_finite()?;
    let mut g = Graph::<f32>::new();
    let bound = nets.bind(&mut g, false);
    let (vars, frozen) = forward_graph(&mut g, &bound, frame, state, est, cfg, opts, None)?;
    let result = collect_result(&g, &vars, frozen)?;
    let state = next_state(&result);
    Ok((result, state))
}

/// Causal processing: frame `t` only sees frames `0..=t`.
pub fn enhance_sequence(
    nets: &Networks,
    seq: &FrameSequence,
    est: &mut dyn FlowEstimator,
    cfg: &RunConfig,
) -> Result<FrameSequence> {
    let mut state = TemporalState::zero();
    let mut out = Vec::with_capacity(seq.len());
    for frame in &seq.frames {
        let (res, next) = enhance_frame(nets, frame, &state, est, cfg, false)?;
        out.push(res.r_rd);
        state = next;
    }
    let mut result = FrameSequence::new(seq.name.clone(), out)?;
    result.fps = seq.fps;
    Ok(result)
}

/// Both directional passes and their mean.
#[derive(Clone, Debug)]
pub struct ReverseOutput {
    pub forward: FrameSequence,
    /// Backward-pass outputs, re-ordered to match the input.
    pub backward: FrameSequence,
    pub merged: FrameSequence,
}

pub fn reverse_inference_detailed(
    nets: &Networks,
    seq: &FrameSequence,
    est: &mut dyn FlowEstimator,
    cfg: &RunConfig,
) -> Result<ReverseOutput> {
    let forward = enhance_sequence(nets, seq, est, cfg)?;
    let backward = enhance_sequence(nets, &seq.reversed(), est, cfg)?.reversed();
    let merged = forward
        .frames
        .iter()
        .zip(&backward.frames)
        .map(|(a, b)| a.zip_map(b, |x, y| (x + y) / 2.0))
        .collect::<Result<Vec<_>>>()?;
    let mut merged = FrameSequence::new(seq.name.clone(), merged)?;
    merged.fps = seq.fps;
    Ok(ReverseOutput {
        forward,
        backward,
        merged,
    })
}

/// Offline mode: mean of a forward and a backward causal pass.
pub fn reverse_inference(
    nets: &Networks,
    seq: &FrameSequence,
    est: &mut dyn FlowEstimator,
    cfg: &RunConfig,
) -> Result<FrameSequence> {
    Ok(reverse_inference_detailed(nets, seq, est, cfg)?.merged)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. A missing gradient counts as zero.
    pub fn step(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Option<&Tensor<f32>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} params, {} grads", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr / bc1) as f32;
        let decay = (self.lr * self.weight_decay) as f32;
        let (eps, inv_bc2) = (self.eps as f32, (1.0 / bc2) as f32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                data[i] -= step * m[i] / denom + decay * data[i];
            }
        }
        Ok(())
    }
}

/// Forward, backward and one optimizer update on a single frame. Returns the
/// loss before the update and the state for the next frame. The weights are
/// left untouched when the loss diverges.
pub fn train_step(
    nets: &mut Networks,
    opt: &mut AdamW,
    frame: &Frame,
    state: &TemporalState,
    est: &mut dyn FlowEstimator,
    cfg: &RunConfig,
) -> Result<(LossReport, TemporalState)> {
    let mut g = Graph::<f32>::new();
    let bound = nets.bind(&mut g, true);
    let opts = ForwardOptions {
        with_losses: true,
        flow_downscale: cfg.flow_train_downscale,
    };
    let (vars, _) = forward_graph(&mut g, &bound, frame, state, est, cfg, opts, None)?;
    let terms = vars.losses.expect("losses requested");
    let report = terms.report(&g)?;
    if !(report.total <= DIVERGENCE_LIMIT) {
        return Err(Error::Divergence {
            step: 0,
            total: report.total,
        });
    }
    let grads = g.backward(terms.total)?;
    let leaves = bound.vars();
    let grad_refs: Vec<Option<&Tensor<f32>>> = leaves.iter().map(|&v| grads.get(v)).collect();
    if grad_refs.iter().flatten().any(|t| !t.all_finite()) {
        return Err(Error::Numerical("gradients".into()));
    }
    opt.step(nets.tensors_mut(), &grad_refs)?;
    let state = TemporalState::from_pair(RetinexPair {
        r: Frame::from_tensor(g.value(vars.r_rd))?,
        s: Frame::from_tensor(g.value(vars.s_rd))?,
    });
    Ok((report, state))
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step}.tpx"))
}

pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub nets: Networks,
    pub reports: Vec<LossReport>,
    pub checkpoint: PathBuf,
}

/// Unsupervised training: frames are visited in temporal order, sequence
/// after sequence (cycling until `steps` is reached), with the temporal
/// state reset at every sequence start. One optimizer step per frame.
///
/// Writes `train_log.csv` and `ckpt_<steps>.tpx` into `out_dir`. On
/// divergence the last good weights are saved as `ckpt_<step>.tpx` and
/// [`Error::Divergence`] is returned.
pub fn train(
    sequences: &[FrameSequence],
    cfg: &RunConfig,
    steps: usize,
    out_dir: &Path,
    est: &mut dyn FlowEstimator,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sequences.is_empty() || sequences.iter().any(|s| s.len() < 2) {
        return Err(Error::Config("training needs at least one sequence of at least 2 frames".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(format!("creating {}", out_dir.display())))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = BufWriter::new(
        File::create(&log_path).map_err(io_err(format!("creating {}", log_path.display())))?,
    );
    let log_err = |e: std::io::Error| io_err(format!("writing {}", log_path.display()))(e);
    writeln!(log, "{}", LossReport::csv_header()).map_err(log_err)?;

    let mut nets = Networks::new(cfg.seed);
    let mut opt = AdamW::from_config(cfg);
    let mut reports = Vec::with_capacity(steps);
    let schedule = sequences
        .iter()
        .flat_map(|s| (0..s.len()).map(move |i| (s, i)))
        .cycle()
        .take(steps);
    let mut state = TemporalState::zero();
    for (step, (seq, i)) in schedule.enumerate() {
        if i == 0 {
            state = TemporalState::zero();
        }
        match train_step(&mut nets, &mut opt, &seq.frames[i], &state, est, cfg) {
            Ok((report, next)) => {
                writeln!(log, "{}", report.csv_row(step)).map_err(log_err)?;
                reports.push(report);
                state = next;
            }
            Err(e @ (Error::Numerical(_) | Error::Divergence { .. })) => {
                log.flush().map_err(log_err)?;
                let path = checkpoint_path(out_dir, step);
                nets.save(&path)?;
                log::error!("step {step}: {e}; saved last good weights to {}", path.display());
                let total = match e {
                    Error::Divergence { total, .. } => total,
                    _ => f64::NAN,
                };
                return Err(Error::Divergence { step, total });
            }
            Err(e) => return Err(e),
        }
        if (step + 1) % 50 == 0 {
            log::info!("step {} total {:.5}", step + 1, reports[step].total);
        }
    }
    log.flush().map_err(log_err)?;
    let checkpoint = checkpoint_path(out_dir, steps);
    nets.save(&checkpoint)?;
    Ok(TrainOutcome {
        nets,
        reports,
        checkpoint,
    })
}

/// A run manifest: enough to re-run a command.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub schema: &'static str,
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    /// Command-specific details (paths, mode, step count, ...).
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(command: impl Into<String>, cfg: &RunConfig, details: serde_json::Value) -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config: cfg.clone(),
            details,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest is serializable");
        std::fs::write(&path, text + "\n").map_err(io_err(format!("writing {}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ZeroFlow;
    use crate::networks::FinalInit;

    struct CountingFlow(usize);

    impl FlowEstimator for CountingFlow {
        fn estimate(&mut self, reference: &Frame, _target: &Frame) -> Result<FlowField> {
            self.0 += 1;
            let (h, w) = reference.dims();
            Ok(FlowField::zeros(h, w))
        }
    }

    fn cfg() -> RunConfig {
        RunConfig {
            cdf_threshold: 1.0,
            ..RunConfig::default()
        }
    }

    #[test]
    fn first_frame_uses_zero_history() {
        let nets = Networks::new(0);
        let mut est = CountingFlow(0);
        let f = Frame::filled(16, 16, 0.2);
        let (res, state) = enhance_frame(&nets, &f, &TemporalState::zero(), &mut est, &cfg(), true).unwrap();
        assert_eq!(est.0, 0);
        assert!(res.flow.max_abs() == 0.0);
        assert!(!state.is_zero());
        assert_eq!(res.losses.unwrap().mtc, 0.0);
        let (_, _) = enhance_frame(&nets, &f, &state, &mut est, &cfg(), false).unwrap();
        assert_eq!(est.0, 1);
    }

    #[test]
    fn zero_nets_on_gray_frame_return_aba() {
        let nets = Networks::new(3);
        let f = Frame::filled(16, 16, 0.2);
        let (res, _) = enhance_frame(&nets, &f, &TemporalState::zero(), &mut ZeroFlow, &cfg(), false).unwrap();
        for x in res.r_rd.data().iter().chain(res.r0.data()) {
            assert!((x - 0.8).abs() < 1e-5, "{x}");
        }
        assert_eq!(res.r_rd, res.r_re);
        assert_eq!(res.mask.data.len(), 256);
        assert_eq!(res.flow.dims(), (16, 16));
        assert_eq!(res.s_rd.dims(), (16, 16));
    }

    #[test]
    fn loss_report_sums_exactly() {
        let nets = Networks::with_final_init(1, FinalInit::Random);
        let f = Frame::from_fn(16, 16, |y, x, c| 0.05 + 0.01 * ((x * 3 + y * 5 + c) % 7) as f32);
        let prev = TemporalState::from_pair(RetinexPair {
            r: f.map(|v| v * 4.0),
            s: f.map(|_| 0.25),
        });
        let (res, _) = enhance_frame(&nets, &f, &prev, &mut ZeroFlow, &RunConfig::default(), true).unwrap();
        let r = res.losses.unwrap();
        assert_eq!(r.total, r.terms().iter().sum::<f64>());
        assert!(r.terms().iter().all(|&t| t >= 0.0 && t.is_finite()));
        assert!(r.mtc > 0.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Tensor::new(&[3], vec![1.0f32, -1.0, 0.5]).unwrap();
        let g = Tensor::new(&[3], vec![0.2f32, -3.0, 0.0]).unwrap();
        let mut opt = AdamW::from_config(&RunConfig {
            learning_rate: 0.01,
            weight_decay: 0.1,
            ..RunConfig::default()
        });
        opt.step(vec![&mut p], &[Some(&g)]).unwrap();
        // Bias-corrected first step is lr·sign(g) plus decoupled decay.
        let expect = [1.0 - 0.01 - 0.001, -1.0 + 0.01 + 0.001, 0.5 - 0.0005];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let seq = FrameSequence::new("s", vec![Frame::filled(16, 16, 0.1); 2]).unwrap();
        let out = train(&[seq], &RunConfig::default(), 0, dir.path(), &mut ZeroFlow).unwrap();
        assert_eq!(Networks::load(&out.checkpoint).unwrap(), Networks::new(0));
        let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 1);
    }

    #[test]
    fn training_needs_two_frames() {
        let dir = tempfile::tempdir().unwrap();
        let seq = FrameSequence::new("s", vec![Frame::filled(16, 16, 0.1)]).unwrap();
        let r = train(&[seq], &RunConfig::default(), 1, dir.path(), &mut ZeroFlow);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn divergence_keeps_last_good_weights() {
        let dir = tempfile::tempdir().unwrap();
        let seq = FrameSequence::new("s", vec![Frame::filled(16, 16, 0.1); 2]).unwrap();
        let cfg = RunConfig {
            learning_rate: 1e30,
            ..RunConfig::default()
        };
        match train(&[seq], &cfg, 6, dir.path(), &mut ZeroFlow) {
            Err(Error::Divergence { step, .. }) => {
                assert!(step >= 1);
                let saved = Networks::load(&checkpoint_path(dir.path(), step)).unwrap();
                saved.check_finite().unwrap();
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
