//! Training loops: the end-to-end arm that learns through a surrogate of the
//! contour solver, and the two pixel-loss baselines.

use std::f64::consts::TAU;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_update, sigmoid, AdamConfig, AdamState, Checkpoint, ParamSet, Tape, Tensor, Var};
use crate::dp::{dp_solve, dp_solve_batch, smooth_indices, EdgePolarity, LineGrid};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{indices_to_polygon, jitter_center, mask_to_indices, polygon_to_mask, ContourIndices, Point, StarPattern};
use crate::grid::{Image, Mask};
use crate::metrics::{select_component, MetricReport, SampleMetrics, Summary};
use crate::nets::{baseline_seg_loss, stack_images, ApproxNet, EncoderDecoder, NetConfig, SegNet};
use crate::synth::{Dataset, Sample};
use crate::warp::{source_indices, warp_forward};

/// Which model is trained and how its output is decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    /// Segmentation net trained through the solver surrogate; decoded by DP.
    #[serde(rename = "edpcnn")]
    Edpcnn,
    /// Pixel classifier; decoded by thresholding and component selection.
    #[serde(rename = "unet")]
    Unet,
    /// Pixel classifier; decoded by DP on its probability map.
    #[serde(rename = "unet+dp")]
    UnetDp,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Edpcnn, Arm::Unet, Arm::UnetDp];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Edpcnn => "edpcnn",
            Arm::Unet => "unet",
            Arm::UnetDp => "unet+dp",
        }
    }

    fn code(self) -> f64 {
        match self {
            Arm::Edpcnn => 0.0,
            Arm::Unet => 1.0,
            Arm::UnetDp => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.code() == c)
            .ok_or_else(|| Error::Checkpoint(format!("unknown arm code {c}")))
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("arm must be edpcnn, unet or unet+dp, got `{s}`")))
    }
}

/// Star geometry and solver settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourConfig {
    pub num_lines: usize,
    pub points_per_line: usize,
    pub radius: f64,
    pub delta: usize,
    pub window: usize,
    pub polarity: EdgePolarity,
}

impl Default for ContourConfig {
    fn default() -> Self {
        Self { num_lines: 24, points_per_line: 32, radius: 28.0, delta: 2, window: 5, polarity: EdgePolarity::Negated }
    }
}

impl ContourConfig {
    pub fn star(&self, center: Point, rotation: f64) -> Result<StarPattern> {
        StarPattern::new(center, self.radius, self.num_lines, self.points_per_line, rotation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_lines < 3 || self.points_per_line < 2 {
            return Err(Error::InvalidArgument("need at least 3 lines and 2 points per line".into()));
        }
        if self.delta < 1 || self.delta >= self.points_per_line {
            return Err(Error::InvalidArgument(format!("delta {} outside 1..{}", self.delta, self.points_per_line)));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("smoothing window must be odd, got {}", self.window)));
        }
        if !self.radius.is_finite() || self.radius <= 0.0 {
            return Err(Error::InvalidArgument(format!("star radius must be positive, got {}", self.radius)));
        }
        Ok(())
    }

    /// Smoothed DP indices for one warped map (before polarity).
    pub fn solve(&self, g: &[f64]) -> Result<ContourIndices> {
        let seen = self.polarity.apply(g);
        let sol = dp_solve(LineGrid::new(&seen, self.num_lines, self.points_per_line)?, self.delta)?;
        smooth_indices(&sol.indices, self.window, self.points_per_line)
    }

    fn solve_batch(&self, exec: Exec, maps: &[f64]) -> Result<Vec<usize>> {
        let per = self.num_lines * self.points_per_line;
        let seen: Vec<Vec<f64>> = maps.chunks(per).map(|c| self.polarity.apply(c)).collect();
        let sols = dp_solve_batch(exec, &seen, self.num_lines, self.points_per_line, self.delta)?;
        let mut out = Vec::with_capacity(maps.len() / self.points_per_line);
        for s in sols {
            out.extend(smooth_indices(&s.indices, self.window, self.points_per_line)?.into_vec());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub iters: usize,
    /// Exploration noise standard deviation.
    pub sigma: f64,
    /// Noise samples per outer step.
    pub samples: usize,
    /// Surrogate updates per noise sample.
    pub inner_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Center jitter during training, as a fraction of the object radius.
    pub jitter: f64,
    pub contour: ContourConfig,
    pub seg_net: NetConfig,
    pub approx_net: NetConfig,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch: 10,
            iters: 2000,
            sigma: 1.0,
            samples: 10,
            inner_steps: 10,
            eval_every: 50,
            seed: 0,
            jitter: 0.2,
            contour: ContourConfig::default(),
            seg_net: NetConfig::SEG_DEFAULT,
            approx_net: NetConfig::APPROX_DEFAULT,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return bad(format!("sigma must be a finite value ≥ 0, got {}", self.sigma));
        }
        if self.samples < 1 || self.inner_steps < 1 || self.batch < 1 || self.eval_every < 1 {
            return bad("samples, inner_steps, batch and eval_every must be ≥ 1".into());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return bad(format!("jitter fraction must lie in [0, 1], got {}", self.jitter));
        }
        self.contour.validate()
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// A trained (or freshly initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arm: Arm,
    pub seg: SegNet,
    /// Present for the end-to-end arm only.
    pub approx: Option<ApproxNet>,
}

fn net_meta(cfg: NetConfig) -> Tensor {
    Tensor::from_fn(&[3], |i| [cfg.depth, cfg.base_channels, cfg.convs_per_block][i] as f64)
}

fn meta_net(t: &Tensor) -> Result<NetConfig> {
    match t.data() {
        &[d, c, k] => Ok(NetConfig { depth: d as usize, base_channels: c as usize, convs_per_block: k as usize }),
        _ => Err(Error::Checkpoint("malformed network description".into())),
    }
}

impl Model {
    /// Fresh weights. The segmentation net draws from the same stream for
    /// every arm, so arms sharing a seed start from the same weights.
    pub fn init(arm: Arm, cfg: &TrainConfig) -> Result<Self> {
        let seg = SegNet::new(cfg.seg_net, &mut cfg.rng(0))?;
        let approx = match arm {
            Arm::Edpcnn => Some(ApproxNet::new(cfg.approx_net, &mut cfg.rng(1))?),
            _ => None,
        };
        Ok(Self { arm, seg, approx })
    }

    /// A model whose output map is `scale · image`, for testing decoders.
    pub fn passthrough(arm: Arm, cfg: NetConfig, scale: f64) -> Result<Self> {
        Ok(Self { arm, seg: SegNet(EncoderDecoder::passthrough(cfg, scale)?), approx: None })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("meta.arm", Tensor::scalar(self.arm.code()));
        ck.push("meta.seg_net", net_meta(self.seg.net().config()));
        ck.add_params("seg.", self.seg.net().params());
        if let Some(a) = &self.approx {
            ck.push("meta.approx_net", net_meta(a.net().config()));
            ck.add_params("approx.", a.net().params());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| ck.get(k).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")));
        let arm = Arm::from_code(get("meta.arm")?.item())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seg = SegNet::new(meta_net(get("meta.seg_net")?)?, &mut rng)?;
        seg.net_mut().params_mut().load_from(&ck.entries, "seg.")?;
        let approx = match ck.get("meta.approx_net") {
            Some(t) => {
                let mut a = ApproxNet::new(meta_net(t)?, &mut rng)?;
                a.net_mut().params_mut().load_from(&ck.entries, "approx.")?;
                Some(a)
            }
            None => None,
        };
        Ok(Self { arm, seg, approx })
    }

    /// Output maps, computed in chunks of 16 images.
    pub fn output_maps(&self, exec: Exec, images: &[&Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            out.extend(self.seg.predict(exec, chunk)?);
        }
        Ok(out)
    }
}

/// A decoded segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub mask: Mask,
    /// Star and indices, for the contour decoders.
    pub contour: Option<(StarPattern, ContourIndices)>,
}

/// The map handed to the solver: the raw output for the end-to-end arm, the
/// foreground probability signed to suit the polarity for the baseline.
pub fn solver_map(arm: Arm, output: &Image, polarity: EdgePolarity) -> Image {
    match arm {
        Arm::UnetDp => output.map(|&v| polarity.sign() * sigmoid(v)),
        _ => output.clone(),
    }
}

/// Decodes one output map with the arm's rule.
pub fn decode(arm: Arm, output: &Image, center: Point, contour: &ContourConfig) -> Result<Decoded> {
    match arm {
        Arm::Unet => {
            let fg = output.map(|&v| v > 0.0);
            Ok(Decoded { mask: select_component(&fg, (center.x, center.y)), contour: None })
        }
        Arm::Edpcnn | Arm::UnetDp => {
            let star = contour.star(center, 0.0)?;
            let g = warp_forward(&solver_map(arm, output, contour.polarity), &star)?;
            let v = contour.solve(g.values())?;
            let mask = polygon_to_mask(&indices_to_polygon(&star, &v)?, output.shape())?;
            Ok(Decoded { mask, contour: Some((star, v)) })
        }
    }
}

/// Scores decoded output maps against the samples' masks, decoding at
/// `centers` (the samples' own centers when `None`).
pub fn evaluate_maps(
    arm: Arm,
    maps: &[Image],
    samples: &[&Sample],
    centers: Option<&[Point]>,
    contour: &ContourConfig,
    exec: Exec,
) -> Result<MetricReport> {
    let per = exec.map(samples.len(), |i| {
        let c = centers.map_or(samples[i].center, |c| c[i]);
        let d = decode(arm, &maps[i], c, contour)?;
        SampleMetrics::compute(&d.mask, &samples[i].mask)
    });
    Ok(MetricReport::new(per.into_iter().collect::<Result<_>>()?))
}

pub fn evaluate(model: &Model, samples: &[Sample], cfg: &TrainConfig) -> Result<MetricReport> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let maps = model.output_maps(cfg.exec, &images)?;
    evaluate_maps(model.arm, &maps, &refs, None, &cfg.contour, cfg.exec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    /// Mean surrogate loss over the step's inner updates.
    pub inner_loss: Option<f64>,
    pub outer_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub dice: f64,
    pub assd: f64,
    pub hd: f64,
    pub failures: usize,
}

impl EvalRecord {
    fn new(iteration: usize, r: &MetricReport) -> Self {
        Self { iteration, dice: r.dice.mean, assd: r.assd.mean, hd: r.hd.mean, failures: r.failures }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
    /// Iteration of the retained model (0 = initialization).
    pub best_iteration: usize,
    pub best_dice: Option<f64>,
}

impl TrainLog {
    /// `iteration,inner_loss,outer_loss`, inner loss empty for the baselines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,inner_loss,outer_loss\n");
        for r in &self.iterations {
            let inner = r.inner_loss.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{inner},{}\n", r.iteration, r.outer_loss));
        }
        s
    }

    pub fn evals_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            best_iteration: usize,
            best_dice: Option<f64>,
            evals: &'a [EvalRecord],
        }
        Ok(serde_json::to_string_pretty(&Out {
            best_iteration: self.best_iteration,
            best_dice: self.best_dice,
            evals: &self.evals,
        })?)
    }

    fn record_eval(&mut self, rec: EvalRecord) -> bool {
        let better = self.best_dice.is_none_or(|b| rec.dice > b);
        if better {
            self.best_dice = Some(rec.dice);
            self.best_iteration = rec.iteration;
        }
        self.evals.push(rec);
        better
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// The model with the best validation Dice.
    pub model: Model,
    pub log: TrainLog,
}

/// Mutable state of the end-to-end arm.
#[derive(Clone, Debug)]
pub struct EdpcnnState {
    pub seg: SegNet,
    pub approx: ApproxNet,
    pub seg_adam: AdamState,
    pub approx_adam: AdamState,
}

impl EdpcnnState {
    pub fn new(seg: SegNet, approx: ApproxNet) -> Self {
        let seg_adam = AdamState::new(seg.net().params());
        let approx_adam = AdamState::new(approx.net().params());
        Self { seg, approx, seg_adam, approx_adam }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub inner: Vec<f64>,
    pub outer: f64,
}

/// One Adam update of the surrogate on `input [B,1,N,M]` against 1-based
/// `targets` (one per row). Returns the loss before the update.
pub fn surrogate_step(
    approx: &mut ApproxNet,
    adam: &mut AdamState,
    input: &Tensor,
    targets: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::with_exec(cfg.exec);
    let phi = approx.net().bind(&mut tape, true);
    let x = tape.constant(input.clone());
    let p = approx.forward(&mut tape, x, &phi)?;
    let loss = tape.cross_entropy_rows(p, targets)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = ParamSet::grads(&tape, &phi);
    adam_update(approx.net_mut().params_mut().tensors_mut(), &grads, adam, &cfg.adam())?;
    Ok(value)
}

/// Fits the surrogate around the warped maps `g [B,1,N,M]`: for each of
/// `cfg.samples` noise draws, solve the perturbed problems and take
/// `cfg.inner_steps` updates towards the smoothed solutions.
pub fn fit_surrogate<R: Rng + ?Sized>(
    approx: &mut ApproxNet,
    adam: &mut AdamState,
    g: &Tensor,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(cfg.samples * cfg.inner_steps);
    for _ in 0..cfg.samples {
        let mut noisy = g.clone();
        if cfg.sigma > 0.0 {
            for v in noisy.data_mut() {
                *v += cfg.sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let targets = cfg.contour.solve_batch(cfg.exec, noisy.data())?;
        for _ in 0..cfg.inner_steps {
            losses.push(surrogate_step(approx, adam, &noisy, &targets, cfg)?);
        }
    }
    Ok(losses)
}

/// The star a training sample is warped along and its ground-truth indices.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub star: StarPattern,
    pub p_gt: ContourIndices,
}

/// One view per sample: a jittered center (falling back to the true one if
/// the jittered point rounds onto background) and a rotation drawn from
/// `[0, 2π/N)`.
pub fn draw_views<R: Rng + ?Sized>(batch: &[&Sample], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<View>> {
    batch
        .iter()
        .map(|s| {
            let rotation = rng.random_range(0.0..TAU / cfg.contour.num_lines as f64);
            let c = jitter_center(s.center, s.object_radius, cfg.jitter, rng);
            let star = cfg.contour.star(c, rotation)?;
            match mask_to_indices(&star, &s.mask) {
                Ok(p_gt) => Ok(View { star, p_gt }),
                Err(Error::CenterOutsideMask { .. }) => {
                    let star = cfg.contour.star(s.center, rotation)?;
                    let p_gt = mask_to_indices(&star, &s.mask)?;
                    Ok(View { star, p_gt })
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Records the segmentation net on `tape` and gathers its output along each
/// view's star into `[B,1,N,M]`. Returns the warped maps and the stacked
/// ground-truth rows.
fn warped_batch(
    tape: &mut Tape,
    seg: &SegNet,
    psi: &[Var],
    batch: &[&Sample],
    views: &[View],
    cfg: &TrainConfig,
) -> Result<(Var, Vec<usize>)> {
    let Some(first) = batch.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    if views.len() != batch.len() {
        return Err(Error::Shape(format!("{} views for {} samples", views.len(), batch.len())));
    }
    let (h, w) = first.image.shape();
    let (n, m) = (cfg.contour.num_lines, cfg.contour.points_per_line);
    let mut index = Vec::with_capacity(batch.len() * n * m);
    let mut p_gt = Vec::with_capacity(batch.len() * n);
    for (k, v) in views.iter().enumerate() {
        index.extend(source_indices(&v.star, (h, w)).into_iter().map(|i| i + k * h * w));
        p_gt.extend_from_slice(v.p_gt.as_slice());
    }
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let x = tape.constant(stack_images(&images)?);
    let out = seg.forward(tape, x, psi)?;
    let g = tape.gather(out, index, &[batch.len(), 1, n, m])?;
    Ok((g, p_gt))
}

/// Cross-entropy of the surrogate's per-line distributions on the warped
/// output against the ground-truth indices. Nothing is updated.
pub fn outer_loss(seg: &SegNet, approx: &ApproxNet, batch: &[&Sample], views: &[View], cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::with_exec(cfg.exec);
    let psi = seg.net().bind(&mut tape, false);
    let (g, p_gt) = warped_batch(&mut tape, seg, &psi, batch, views, cfg)?;
    let phi = approx.net().bind(&mut tape, false);
    let probs = approx.forward(&mut tape, g, &phi)?;
    let loss = tape.cross_entropy_rows(probs, &p_gt)?;
    Ok(tape.value(loss).item())
}

/// One outer step of the end-to-end arm: warp the output map along a
/// randomly rotated star at a jittered center, refit the surrogate under
/// exploration noise, then update the segmentation net through the frozen
/// surrogate against the ground-truth indices.
pub fn edpcnn_step<R: Rng + ?Sized>(
    state: &mut EdpcnnState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let views = draw_views(batch, cfg, rng)?;
    edpcnn_step_with_views(state, batch, &views, cfg, rng)
}

/// [`edpcnn_step`] with the views supplied. The reported outer loss is
/// evaluated with the refitted surrogate, before the segmentation update.
pub fn edpcnn_step_with_views<R: Rng + ?Sized>(
    state: &mut EdpcnnState,
    batch: &[&Sample],
    views: &[View],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let mut tape = Tape::with_exec(cfg.exec);
    let psi = state.seg.net().bind(&mut tape, true);
    let (g, p_gt) = warped_batch(&mut tape, &state.seg, &psi, batch, views, cfg)?;

    let inner = fit_surrogate(&mut state.approx, &mut state.approx_adam, tape.value(g), cfg, rng)?;

    let phi = state.approx.net().bind(&mut tape, false);
    let probs = state.approx.forward(&mut tape, g, &phi)?;
    let loss = tape.cross_entropy_rows(probs, &p_gt)?;
    let outer = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = ParamSet::grads(&tape, &psi);
    adam_update(state.seg.net_mut().params_mut().tensors_mut(), &grads, &mut state.seg_adam, &cfg.adam())?;
    Ok(StepLosses { inner, outer })
}

/// One Adam update of the pixel classifier; returns the loss before it.
pub fn baseline_step(seg: &mut SegNet, adam: &mut AdamState, batch: &[&Sample], cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::with_exec(cfg.exec);
    let psi = seg.net().bind(&mut tape, true);
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let x = tape.constant(stack_images(&images)?);
    let out = seg.forward(&mut tape, x, &psi)?;
    let masks: Vec<&Mask> = batch.iter().map(|s| &s.mask).collect();
    let loss = baseline_seg_loss(&mut tape, out, &masks)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = ParamSet::grads(&tape, &psi);
    adam_update(seg.net_mut().params_mut().tensors_mut(), &grads, adam, &cfg.adam())?;
    Ok(value)
}

fn draw_batch<'a, R: Rng + ?Sized>(train: &'a [Sample], size: usize, rng: &mut R) -> Vec<&'a Sample> {
    let k = size.min(train.len());
    rand::seq::index::sample(rng, train.len(), k).into_iter().map(|i| &train[i]).collect()
}

fn check_splits(train: &[Sample], val: &[Sample]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation splits must be nonempty".into()));
    }
    Ok(())
}

fn tag_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at iteration {it}")),
        other => other,
    }
}

fn should_eval(it: usize, cfg: &TrainConfig) -> bool {
    it.is_multiple_of(cfg.eval_every) || it == cfg.iters
}

/// Trains one arm. The baselines share [`train_baselines`].
pub fn train(train: &[Sample], val: &[Sample], arm: Arm, cfg: &TrainConfig) -> Result<TrainOutcome> {
    match arm {
        Arm::Edpcnn => train_edpcnn(train, val, cfg),
        Arm::Unet => Ok(train_baselines(train, val, cfg)?.0),
        Arm::UnetDp => Ok(train_baselines(train, val, cfg)?.1),
    }
}

pub fn train_edpcnn(train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_splits(train, val)?;
    cfg.validate()?;
    let init = Model::init(Arm::Edpcnn, cfg)?;
    let mut log = TrainLog::default();
    if cfg.iters == 0 {
        return Ok(TrainOutcome { model: init, log });
    }
    let mut best = init.clone();
    let mut state = EdpcnnState::new(init.seg, init.approx.expect("edpcnn has a surrogate"));
    let mut rng = cfg.rng(2);
    let val_refs: Vec<&Sample> = val.iter().collect();
    let val_images: Vec<&Image> = val.iter().map(|s| &s.image).collect();
    for it in 1..=cfg.iters {
        let batch = draw_batch(train, cfg.batch, &mut rng);
        let step = edpcnn_step(&mut state, &batch, cfg, &mut rng).map_err(|e| tag_iteration(e, it))?;
        let inner = step.inner.iter().sum::<f64>() / step.inner.len() as f64;
        log.iterations.push(IterRecord { iteration: it, inner_loss: Some(inner), outer_loss: step.outer });
        if should_eval(it, cfg) {
            let model = Model { arm: Arm::Edpcnn, seg: state.seg.clone(), approx: Some(state.approx.clone()) };
            let maps = model.output_maps(cfg.exec, &val_images)?;
            let report = evaluate_maps(Arm::Edpcnn, &maps, &val_refs, None, &cfg.contour, cfg.exec)?;
            if log.record_eval(EvalRecord::new(it, &report)) {
                best = model;
            }
        }
    }
    Ok(TrainOutcome { model: best, log })
}

/// Trains one pixel classifier and tracks the best checkpoint separately
/// under each baseline decoding. Returns the `unet` and `unet+dp` outcomes.
pub fn train_baselines(train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<(TrainOutcome, TrainOutcome)> {
    check_splits(train, val)?;
    cfg.validate()?;
    let init = Model::init(Arm::Unet, cfg)?;
    let mut logs = [TrainLog::default(), TrainLog::default()];
    let mut best = [init.clone(), Model { arm: Arm::UnetDp, ..init.clone() }];
    if cfg.iters > 0 {
        let mut seg = init.seg;
        let mut adam = AdamState::new(seg.net().params());
        let mut rng = cfg.rng(2);
        let val_refs: Vec<&Sample> = val.iter().collect();
        let val_images: Vec<&Image> = val.iter().map(|s| &s.image).collect();
        for it in 1..=cfg.iters {
            let batch = draw_batch(train, cfg.batch, &mut rng);
            let loss = baseline_step(&mut seg, &mut adam, &batch, cfg).map_err(|e| tag_iteration(e, it))?;
            for log in &mut logs {
                log.iterations.push(IterRecord { iteration: it, inner_loss: None, outer_loss: loss });
            }
            if should_eval(it, cfg) {
                let model = Model { arm: Arm::Unet, seg: seg.clone(), approx: None };
                let maps = model.output_maps(cfg.exec, &val_images)?;
                for (k, arm) in [Arm::Unet, Arm::UnetDp].into_iter().enumerate() {
                    let report = evaluate_maps(arm, &maps, &val_refs, None, &cfg.contour, cfg.exec)?;
                    if logs[k].record_eval(EvalRecord::new(it, &report)) {
                        best[k] = Model { arm, ..model.clone() };
                    }
                }
            }
        }
    }
    let [b0, b1] = best;
    let [l0, l1] = logs;
    Ok((TrainOutcome { model: b0, log: l0 }, TrainOutcome { model: b1, log: l1 }))
}

/// One trained run inside an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub size: usize,
    pub arm: Arm,
    pub seed: u64,
    pub dice: f64,
    pub assd: f64,
    pub hd: f64,
    pub failures: usize,
    pub best_iteration: usize,
}

/// Mean over seeds for one (size, arm) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub size: usize,
    pub arm: Arm,
    pub dice: f64,
    pub dice_std: f64,
    pub assd: f64,
    pub hd: f64,
}

pub const ABLATION_CSV_HEADER: &str = "size,arm,dice,dice_std,assd,hd";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.size, r.arm, r.dice, r.dice_std, r.assd, r.hd));
    }
    s
}

/// The training order used by [`ablate`] for `seed`: the dataset's training
/// split shuffled once, so each size is a prefix of every larger one.
pub fn telescopic_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    order.shuffle(&mut rng);
    order
}

/// Trains every arm at every size for every seed, scoring the retained
/// model on the validation split. `on_run` sees each run as it finishes.
pub fn ablate(
    data: &Dataset,
    sizes: &[usize],
    arms: &[Arm],
    seeds: &[u64],
    cfg: &TrainConfig,
    on_run: &mut dyn FnMut(&RunRecord),
) -> Result<(Vec<AblationRow>, Vec<RunRecord>)> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("sizes must be strictly ascending".into()));
    }
    if let Some(&too_big) = sizes.iter().find(|&&s| s > data.train.len() || s == 0) {
        return Err(Error::InvalidArgument(format!(
            "training size {too_big} outside 1..={}",
            data.train.len()
        )));
    }
    if seeds.is_empty() || arms.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed and one arm".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let order = telescopic_order(data.train.len(), seed);
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        for &size in sizes {
            let subset: Vec<Sample> = order[..size].iter().map(|&i| data.train[i].clone()).collect();
            let mut outcomes = Vec::new();
            if arms.contains(&Arm::Edpcnn) {
                outcomes.push(train_edpcnn(&subset, &data.val, &run_cfg)?);
            }
            if arms.contains(&Arm::Unet) || arms.contains(&Arm::UnetDp) {
                let (u, d) = train_baselines(&subset, &data.val, &run_cfg)?;
                outcomes.extend([u, d].into_iter().filter(|o| arms.contains(&o.model.arm)));
            }
            for o in outcomes {
                let report = evaluate(&o.model, &data.val, &run_cfg)?;
                let rec = RunRecord {
                    size,
                    arm: o.model.arm,
                    seed,
                    dice: report.dice.mean,
                    assd: report.assd.mean,
                    hd: report.hd.mean,
                    failures: report.failures,
                    best_iteration: o.log.best_iteration,
                };
                on_run(&rec);
                runs.push(rec);
            }
        }
    }
    let mut rows = Vec::new();
    for &size in sizes {
        for &arm in arms {
            let cell: Vec<&RunRecord> = runs.iter().filter(|r| r.size == size && r.arm == arm).collect();
            let dice = Summary::of(cell.iter().map(|r| r.dice));
            rows.push(AblationRow {
                size,
                arm,
                dice: dice.mean,
                dice_std: dice.std,
                assd: Summary::of(cell.iter().map(|r| r.assd)).mean,
                hd: Summary::of(cell.iter().map(|r| r.hd)).mean,
            });
        }
    }
    Ok((rows, runs))
}

/// Mean validation Dice at one jitter fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterRow {
    pub fraction: f64,
    pub dice: f64,
    /// Standard deviation across seeds.
    pub dice_std: f64,
    pub per_seed: Vec<f64>,
}

pub const JITTER_CSV_HEADER: &str = "fraction,dice,dice_std";

pub fn jitter_csv(rows: &[JitterRow]) -> String {
    let mut s = format!("{JITTER_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.fraction, r.dice, r.dice_std));
    }
    s
}

/// Re-evaluates `model` with every sample's center moved by
/// [`jitter_center`] at each fraction, once per seed.
pub fn jitter_eval(
    model: &Model,
    samples: &[Sample],
    fractions: &[f64],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<Vec<JitterRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let maps = model.output_maps(cfg.exec, &images)?;
    fractions
        .iter()
        .map(|&fraction| {
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(4);
                    let centers: Vec<Point> = samples
                        .iter()
                        .map(|s| jitter_center(s.center, s.object_radius, fraction, &mut rng))
                        .collect();
                    let r = evaluate_maps(model.arm, &maps, &refs, Some(&centers), &cfg.contour, cfg.exec)?;
                    Ok(r.dice.mean)
                })
                .collect::<Result<Vec<f64>>>()?;
            let s = Summary::of(per_seed.iter().copied());
            Ok(JitterRow { fraction, dice: s.mean, dice_std: s.std, per_seed })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_sample, sample_rng, SynthConfig};

    fn samples(n: usize, seed: u64, size: usize) -> Vec<Sample> {
        let cfg = SynthConfig::default();
        (0..n).map(|i| gen_sample(&mut sample_rng(seed, i as u64), size, size, &cfg).unwrap()).collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch: 2,
            iters: 3,
            samples: 2,
            inner_steps: 1,
            eval_every: 2,
            contour: ContourConfig { num_lines: 8, points_per_line: 8, radius: 14.0, ..Default::default() },
            seg_net: NetConfig { depth: 2, base_channels: 2, convs_per_block: 1 },
            approx_net: NetConfig { depth: 3, base_channels: 2, convs_per_block: 1 },
            ..Default::default()
        }
    }

    #[test]
    fn arm_names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("u-net".parse::<Arm>().is_err());
    }

    #[test]
    fn zero_iterations_returns_init() {
        let data = samples(3, 1, 32);
        let cfg = TrainConfig { iters: 0, ..tiny_cfg() };
        for arm in Arm::ALL {
            let out = train(&data[..2], &data[2..], arm, &cfg).unwrap();
            assert_eq!(out.log, TrainLog::default());
            assert_eq!(out.model.seg, Model::init(arm, &cfg).unwrap().seg);
        }
        assert!(train(&[], &data, Arm::Unet, &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = samples(4, 2, 32);
        let cfg = tiny_cfg();
        for arm in [Arm::Edpcnn, Arm::Unet] {
            let a = train(&data[..3], &data[3..], arm, &cfg).unwrap();
            let b = train(&data[..3], &data[3..], arm, &cfg).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.model, b.model);
            assert_eq!(a.log.iterations.len(), 3);
            // evaluations at 2 and at the final iteration
            assert_eq!(a.log.evals.iter().map(|e| e.iteration).collect::<Vec<_>>(), vec![2, 3]);
        }
        let seq = TrainConfig { exec: Exec::Sequential, ..cfg.clone() };
        let a = train(&data[..3], &data[3..], Arm::Edpcnn, &cfg).unwrap();
        let b = train(&data[..3], &data[3..], Arm::Edpcnn, &seq).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_cfg();
        for arm in Arm::ALL {
            let m = Model::init(arm, &cfg).unwrap();
            let mut buf = Vec::new();
            m.to_checkpoint().write_to(&mut buf).unwrap();
            let back = Model::from_checkpoint(&Checkpoint::read_from(&buf[..]).unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn oracle_map_decodes_disk() {
        let blob = crate::synth::Blob { origin: Point::new(32.0, 32.0), r0: 15.0, harmonics: vec![] };
        let mask = blob.mask(64, 64);
        let image = mask.map(|&m| if m { 0.8 } else { 0.2 });
        let sample = Sample::from_parts(image, mask).unwrap();
        let cc = ContourConfig::default();
        for polarity in [EdgePolarity::AsPrinted, EdgePolarity::Negated] {
            let cc = ContourConfig { polarity, ..cc };
            let model = Model::passthrough(Arm::Edpcnn, NetConfig::SEG_DEFAULT, polarity.sign()).unwrap();
            let cfg = TrainConfig { contour: cc, ..Default::default() };
            let r = evaluate(&model, std::slice::from_ref(&sample), &cfg).unwrap();
            assert!(r.dice.mean > 0.95, "{polarity}: {}", r.dice.mean);
        }
    }

    #[test]
    fn empty_unet_prediction_is_a_failure() {
        let data = samples(1, 3, 32);
        let maps = vec![Image::filled(32, 32, -1.0)];
        let r = evaluate_maps(Arm::Unet, &maps, &[&data[0]], None, &ContourConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(r.dice.mean, 0.0);
        assert_eq!(r.failures, 1);
    }

    #[test]
    fn outer_gradient_nonzero_on_disagreement() {
        let data = samples(2, 4, 32);
        let cfg = tiny_cfg();
        let mut state = EdpcnnState::new(
            SegNet::new(cfg.seg_net, &mut cfg.rng(0)).unwrap(),
            ApproxNet::new(cfg.approx_net, &mut cfg.rng(1)).unwrap(),
        );
        let before = state.seg.clone();
        let batch: Vec<&Sample> = data.iter().collect();
        let l = edpcnn_step(&mut state, &batch, &cfg, &mut cfg.rng(2)).unwrap();
        assert_eq!(l.inner.len(), 2);
        assert!(l.outer > 0.0);
        assert_ne!(state.seg, before);
    }

    #[test]
    fn jitter_zero_matches_plain_eval() {
        let data = samples(3, 5, 32);
        let cfg = tiny_cfg();
        let model = Model::init(Arm::Edpcnn, &cfg).unwrap();
        let plain = evaluate(&model, &data, &cfg).unwrap();
        let rows = jitter_eval(&model, &data, &[0.0, 0.3], &[1, 2], &cfg).unwrap();
        assert_eq!(rows[0].dice, plain.dice.mean);
        assert_eq!(rows[0].dice_std, 0.0);
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn telescopic_prefixes_nest() {
        let o = telescopic_order(200, 9);
        let mut sorted = o.clone();
        sorted.sort();
        assert_eq!(sorted, (0..200).collect::<Vec<_>>());
        assert_eq!(telescopic_order(200, 9), o);
    }

    #[test]
    fn log_csv_layout() {
        let mut log = TrainLog::default();
        log.iterations.push(IterRecord { iteration: 1, inner_loss: None, outer_loss: 0.5 });
        log.iterations.push(IterRecord { iteration: 2, inner_loss: Some(1.5), outer_loss: 0.25 });
        assert_eq!(log.to_csv(), "iteration,inner_loss,outer_loss\n1,,0.5\n2,1.5,0.25\n");
    }
}
