//! Three-phase training: supervised (optionally copy-paste) pretraining,
//! then mean-teacher self-training with mixed images, with the teacher
//! tracking the student by EMA.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::datakit::{self, write_atomic, DatasetManifest, LabeledSample, Split, UnlabeledSample};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::label::LabelMap;
use crate::loss::{bcp_loss_per_pair, bcp_weights, seg_loss, LossConfig, LossReport};
use crate::maskgen::{Mask, MaskSpec};
use crate::mixer;
use crate::pseudolabel::{make_pseudo_labels, prob_to_label, LabelMode};
use crate::scalar::Scalar;
use crate::segnet::{
    self, ema_update, init_params, lr_at, save_checkpoint, sgd_step, Checkpoint, CheckpointDtype, EmaConfig,
    ModelParams, NetConfig, OptimConfig,
};
use crate::tensor::{Graph, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixerMode {
    /// Inward and outward copy-paste between labeled and unlabeled images.
    #[default]
    Bcp,
    InOnly,
    OutOnly,
    /// Labeled with labeled, unlabeled with unlabeled.
    WithinSet,
    Mixup,
    FgCutmix,
    /// Plain self-training: no mixing at all.
    None,
}

impl MixerMode {
    fn needs_pairs(self) -> bool {
        !matches!(self, MixerMode::FgCutmix | MixerMode::None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Copy-paste within the labeled set.
    #[default]
    Cp,
    Plain,
    /// Keep the random initialization.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub pretrain_iters: u64,
    pub selftrain_iters: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub mask_spec: MaskSpec,
    pub loss_cfg: LossConfig,
    pub optim_cfg: OptimConfig,
    pub ema_cfg: EmaConfig,
    pub mixer_mode: MixerMode,
    pub pretrain_mode: PretrainMode,
    pub use_lcc: bool,
    /// One mask per mixed pair instead of one per step.
    pub per_pair_mask: bool,
    /// Tiles per axis for FG-CutMix.
    pub fg_grid: usize,
    pub seed: u64,
    /// Checkpoint period in self-training steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Metrics row period in self-training steps; 0 logs only the last step.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            pretrain_iters: 300,
            selftrain_iters: 600,
            batch_labeled: 4,
            batch_unlabeled: 4,
            mask_spec: MaskSpec::default(),
            loss_cfg: LossConfig::default(),
            optim_cfg: OptimConfig::default(),
            ema_cfg: EmaConfig::default(),
            mixer_mode: MixerMode::Bcp,
            pretrain_mode: PretrainMode::Cp,
            use_lcc: true,
            per_pair_mask: false,
            fg_grid: 4,
            seed: 0,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.mask_spec.validate()?;
        self.loss_cfg.validate()?;
        self.optim_cfg.validate()?;
        self.ema_cfg.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be positive".into());
        }
        let pairs_needed = self.mixer_mode.needs_pairs() && self.selftrain_iters > 0;
        if pairs_needed && (self.batch_labeled % 2 != 0 || self.batch_unlabeled % 2 != 0) {
            return bad(format!(
                "mixer mode {:?} pairs samples; batch sizes must be even, got {}+{}",
                self.mixer_mode, self.batch_labeled, self.batch_unlabeled
            ));
        }
        if pairs_needed && self.mixer_mode != MixerMode::WithinSet && self.batch_labeled != self.batch_unlabeled {
            return bad(format!(
                "mixer mode {:?} pairs labeled with unlabeled samples; batch sizes must match, got {}+{}",
                self.mixer_mode, self.batch_labeled, self.batch_unlabeled
            ));
        }
        if self.pretrain_mode == PretrainMode::Cp && self.pretrain_iters > 0 && self.batch_labeled % 2 != 0 {
            return bad(format!(
                "copy-paste pretraining pairs labeled samples; batch_labeled must be even, got {}",
                self.batch_labeled
            ));
        }
        if self.fg_grid == 0 {
            return bad("fg_grid must be >= 1".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = datakit::read_json(path)?;
        cfg.validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        datakit::write_json(path, self)
    }

    fn label_mode(&self) -> LabelMode {
        LabelMode::for_classes(self.net.num_classes)
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidArgument("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad rng word_pos `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub lr: f64,
    pub l_in: f64,
    pub l_out: f64,
    pub l_all: f64,
    pub val_dice: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("iter,lr,l_in,l_out,l_all,val_dice\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.iter, r.lr, r.l_in, r.l_out, r.l_all, r.val_dice);
    }
    s
}

/// Everything self-training needs to continue from a given step.
#[derive(Clone, Debug)]
pub struct TrainerState<T> {
    pub student: ModelParams<T>,
    pub teacher: ModelParams<T>,
    pub velocity: ModelParams<T>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub metrics: Vec<MetricsRow>,
}

const PRETRAIN_STREAM: u64 = 1;
const SELFTRAIN_STREAM: u64 = 2;

impl<T: Scalar> TrainerState<T> {
    /// Teacher starts as a copy of the student.
    pub fn new(student: ModelParams<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SELFTRAIN_STREAM);
        Self {
            teacher: student.clone(),
            velocity: student.zeros_like(),
            student,
            iteration: 0,
            rng,
            metrics: Vec::new(),
        }
    }

    /// Full-precision checkpoint with student (unprefixed), teacher, velocity
    /// and the RNG position.
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&cfg.net, self.iteration, &self.student.cast());
        ck.insert_params("teacher.", &self.teacher.cast());
        ck.insert_params("velocity.", &self.velocity.cast());
        ck.extra = serde_json::json!({
            "rng": RngState::capture(&self.rng),
            "config": cfg,
            "metrics": self.metrics,
        });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |name: &str| {
            ck.extra
                .get(name)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no trainer `{name}` state")))
        };
        let rng: RngState = serde_json::from_value(field("rng")?)
            .map_err(|e| Error::InvalidArgument(format!("checkpoint rng state: {e}")))?;
        let metrics: Vec<MetricsRow> = serde_json::from_value(field("metrics")?)
            .map_err(|e| Error::InvalidArgument(format!("checkpoint metrics: {e}")))?;
        Ok(Self {
            student: ck.params("")?.cast(),
            teacher: ck.params("teacher.")?.cast(),
            velocity: ck.params("velocity.")?.cast(),
            iteration: ck.iteration,
            rng: rng.restore()?,
            metrics,
        })
    }
}

/// Pick `k` pool indices. Pair `t` is `(out[t], out[t + k/2])`; its two
/// members always differ, and all `k` differ when the pool is large enough.
fn draw(rng: &mut ChaCha8Rng, pool: usize, k: usize, paired: bool) -> Result<Vec<usize>> {
    if pool == 0 || (paired && pool < 2) {
        return Err(Error::InvalidArgument(format!(
            "pool of {pool} samples cannot supply {}",
            if paired { "distinct pairs" } else { "a batch" }
        )));
    }
    if pool >= k {
        return Ok(index::sample(rng, pool, k).into_vec());
    }
    if !paired {
        return Ok((0..k).map(|_| rng.gen_range(0..pool)).collect());
    }
    let half = k / 2;
    let (mut a, mut b) = (Vec::with_capacity(k), Vec::with_capacity(half));
    for _ in 0..half {
        let s = index::sample(rng, pool, 2);
        a.push(s.index(0));
        b.push(s.index(1));
    }
    a.extend(b);
    Ok(a)
}

fn spatial(x: &Tensor<impl Scalar>) -> Vec<usize> {
    x.shape()[1..].to_vec()
}

fn stack_images<T: Scalar>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    Tensor::stack(images)
}

/// One supervised branch: images, per-class targets and optional weights.
struct Branch<T> {
    images: Vec<Tensor<T>>,
    target: Tensor<T>,
    weight: Option<Tensor<T>>,
}

impl<T: Scalar> Branch<T> {
    fn hard(images: Vec<Tensor<T>>, labels: &[LabelMap], weight: Option<Tensor<T>>) -> Result<Self> {
        Ok(Self {
            images,
            target: LabelMap::stack_one_hot(labels)?,
            weight,
        })
    }
}

/// Forward every branch on one tape, sum the losses, backprop, and return
/// the report and student gradients.
fn branch_step<T: Scalar>(
    cfg: &TrainConfig,
    student: &ModelParams<T>,
    branches: &[Branch<T>],
    loss_cfg: &LossConfig,
) -> Result<(LossReport, ModelParams<T>)> {
    let mut tape = Tape::new();
    let vars = student.bind(&mut tape);
    let mut parts = Vec::new();
    for b in branches {
        let x = tape.leaf(stack_images(&b.images)?, false);
        let logits = segnet::forward_on(&mut tape, &cfg.net, &vars, &x)?;
        let q = Graph::softmax_channels(&mut tape, &logits)?;
        let t = tape.leaf(b.target.clone(), false);
        parts.push(seg_loss(&mut tape, &q, &t, b.weight.as_ref(), loss_cfg)?);
    }
    let zero = tape.leaf(Tensor::scalar(T::zero()), false);
    let l_in = parts.first().map_or(zero, |p| p.total);
    let l_out = parts.get(1).map_or(zero, |p| p.total);
    let l_all = Graph::add(&mut tape, &l_in, &l_out)?;
    let val = |v| tape.value(v).data()[0].as_f64();
    let report = LossReport {
        l_in: val(l_in),
        l_out: val(l_out),
        l_all: val(l_all),
        dice_in: parts.first().map_or(0.0, |p| val(p.dice)),
        ce_in: parts.first().map_or(0.0, |p| val(p.ce)),
        dice_out: parts.get(1).map_or(0.0, |p| val(p.dice)),
        ce_out: parts.get(1).map_or(0.0, |p| val(p.ce)),
        empty_weight: parts.iter().any(|p| p.empty_weight),
    };
    tape.backward(l_all)?;
    Ok((report, student.grads_from(&tape, &vars)?))
}

fn check_finite<T: Scalar>(iteration: u64, report: &LossReport, grads: &ModelParams<T>) -> Result<()> {
    if !report.l_all.is_finite() {
        return Err(Error::NonFinite {
            iteration,
            what: format!("loss l_in={} l_out={}", report.l_in, report.l_out),
        });
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite {
            iteration,
            what: format!("gradient of `{name}`"),
        });
    }
    Ok(())
}

/// One labeled/unlabeled batch for a self-training step. Pair `t` uses
/// `labeled[t]` with `labeled[t + n/2]` (and likewise for unlabeled).
pub struct StepBatch<T> {
    pub labeled: Vec<(Tensor<T>, LabelMap)>,
    pub unlabeled: Vec<Tensor<T>>,
}

impl<T: Scalar> StepBatch<T> {
    /// Sample a batch with `state.rng`.
    pub fn sample(
        state: &mut TrainerState<T>,
        labeled: &[LabeledSample],
        unlabeled: &[UnlabeledSample],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let paired = cfg.mixer_mode.needs_pairs();
        let li = draw(&mut state.rng, labeled.len(), cfg.batch_labeled, paired)?;
        let ui = draw(&mut state.rng, unlabeled.len(), cfg.batch_unlabeled, paired)?;
        Ok(Self {
            labeled: li
                .iter()
                .map(|&i| (labeled[i].image.cast(), labeled[i].label.clone()))
                .collect(),
            unlabeled: ui.iter().map(|&i| unlabeled[i].image.cast()).collect(),
        })
    }
}

/// The in/out mixing for one step; everything uses the same mask list.
fn build_branches<T: Scalar>(
    cfg: &TrainConfig,
    batch: &StepBatch<T>,
    pseudo: &[LabelMap],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Branch<T>>> {
    let shape = spatial(&batch.labeled[0].0);
    let (xl, yl): (Vec<_>, Vec<_>) = batch.labeled.iter().cloned().unzip();
    let xu = &batch.unlabeled;
    let alpha = cfg.loss_cfg.alpha;
    let a = T::of(alpha);
    let hl = xl.len() / 2;
    let hu = xu.len() / 2;
    match cfg.mixer_mode {
        MixerMode::Bcp | MixerMode::InOnly | MixerMode::OutOnly => unreachable!("handled by bcp path"),
        MixerMode::WithinSet => {
            let masks = step_masks(cfg, &shape, hl.max(hu), rng)?;
            let mut ll = (Vec::new(), Vec::new());
            for t in 0..hl {
                let m = &masks[t % masks.len()];
                let s = mixer::within_set_mix((&xl[t], &yl[t]), (&xl[t + hl], &yl[t + hl]), m)?;
                ll.0.push(s.image);
                ll.1.push(s.target);
            }
            let mut uu = (Vec::new(), Vec::new());
            for t in 0..hu {
                let m = &masks[t % masks.len()];
                let s = mixer::within_set_mix((&xu[t], &pseudo[t]), (&xu[t + hu], &pseudo[t + hu]), m)?;
                uu.0.push(s.image);
                uu.1.push(s.target);
            }
            let uw = Tensor::full(&[1, 1].iter().chain(&shape).copied().collect::<Vec<_>>(), a);
            Ok(vec![
                Branch::hard(ll.0, &ll.1, None)?,
                Branch::hard(uu.0, &uu.1, Some(uw))?,
            ])
        }
        MixerMode::Mixup => {
            let gamma: f64 = Beta::new(1.0, 1.0).expect("valid beta").sample(rng);
            let mut b_in = (Vec::new(), Vec::new());
            let mut b_out = (Vec::new(), Vec::new());
            for t in 0..hl {
                let (ylj, yup) = (yl[t].one_hot::<T>(), pseudo[t].one_hot::<T>());
                let (x, y) = mixer::mixup_mix(&xl[t], &xu[t], &ylj, &yup, gamma)?;
                b_in.0.push(x);
                b_in.1.push(y);
                let (yuq, yli) = (pseudo[t + hu].one_hot::<T>(), yl[t + hl].one_hot::<T>());
                let (x, y) = mixer::mixup_mix(&xu[t + hu], &xl[t + hl], &yuq, &yli, gamma)?;
                b_out.0.push(x);
                b_out.1.push(y);
            }
            Ok(vec![
                Branch {
                    images: b_in.0,
                    target: Tensor::stack(&b_in.1)?,
                    weight: None,
                },
                Branch {
                    images: b_out.0,
                    target: Tensor::stack(&b_out.1)?,
                    weight: None,
                },
            ])
        }
        MixerMode::FgCutmix => {
            let nl = xl.len();
            let images: Vec<Tensor<T>> = xl.iter().chain(xu).cloned().collect();
            let labels: Vec<LabelMap> = yl.iter().chain(pseudo).cloned().collect();
            let plan = mixer::FgCutMixPlan::new(images.len(), &shape, cfg.fg_grid, rng.gen())?;
            let mixed = plan.apply_images(&images)?;
            let targets = plan.apply_labels(&labels)?;
            let weights: Vec<Tensor<T>> = (0..images.len())
                .map(|o| {
                    let src = plan.voxel_sources(o);
                    let mut ws: Vec<usize> = vec![1, 1];
                    ws.extend(&shape);
                    Tensor::new(ws, src.iter().map(|&s| if s < nl { T::one() } else { a }).collect())
                })
                .collect::<Result<_>>()?;
            let w = Tensor::stack(&weights)?;
            let mut ws = w.shape().to_vec();
            ws.remove(1);
            Ok(vec![Branch::hard(mixed, &targets, Some(w.reshape(ws)?))?])
        }
        MixerMode::None => Ok(vec![
            Branch::hard(xl, &yl, None)?,
            Branch::hard(xu.clone(), pseudo, None)?,
        ]),
    }
}

fn step_masks(cfg: &TrainConfig, shape: &[usize], pairs: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Mask>> {
    let n = if cfg.per_pair_mask { pairs.max(1) } else { 1 };
    (0..n)
        .map(|_| cfg.mask_spec.generate_with_seed(shape, rng.gen()))
        .collect()
}

fn bcp_step<T: Scalar>(
    cfg: &TrainConfig,
    state: &TrainerState<T>,
    batch: &StepBatch<T>,
    pseudo: &[LabelMap],
    masks: &[Mask],
) -> Result<(LossReport, ModelParams<T>)> {
    let h = batch.labeled.len() / 2;
    let mut x_in = Vec::with_capacity(h);
    let mut y_in = Vec::with_capacity(h);
    let mut x_out = Vec::with_capacity(h);
    let mut y_out = Vec::with_capacity(h);
    for t in 0..h {
        let m = &masks[t % masks.len()];
        let (xl_j, yl_j) = &batch.labeled[t];
        let (xl_i, yl_i) = &batch.labeled[t + h];
        let (xu_p, xu_q) = (&batch.unlabeled[t], &batch.unlabeled[t + h]);
        let (yu_p, yu_q) = (&pseudo[t], &pseudo[t + h]);
        let (xi, xo) = mixer::bcp_mix_images(xl_j, xu_p, xl_i, xu_q, m)?;
        let (yi, yo) = mixer::bcp_mix_labels(yl_j, yu_p, yl_i, yu_q, m)?;
        x_in.push(xi);
        y_in.push(yi);
        x_out.push(xo);
        y_out.push(yo);
    }
    if cfg.mixer_mode != MixerMode::Bcp {
        // single direction: reuse the branch machinery with BCP weights
        let (w_in, w_out) = bcp_weights::<T>(masks, cfg.loss_cfg.alpha)?;
        let branch = if cfg.mixer_mode == MixerMode::InOnly {
            Branch::hard(x_in, &y_in, Some(w_in))?
        } else {
            Branch::hard(x_out, &y_out, Some(w_out))?
        };
        let (mut report, grads) = branch_step(cfg, &state.student, std::slice::from_ref(&branch), &cfg.loss_cfg)?;
        if cfg.mixer_mode == MixerMode::OutOnly {
            report = LossReport {
                l_in: 0.0,
                l_out: report.l_in,
                l_all: report.l_all,
                dice_in: 0.0,
                ce_in: 0.0,
                dice_out: report.dice_in,
                ce_out: report.ce_in,
                empty_weight: report.empty_weight,
            };
        }
        return Ok((report, grads));
    }
    let mut tape = Tape::new();
    let vars = state.student.bind(&mut tape);
    let xi = tape.leaf(stack_images(&x_in)?, false);
    let xo = tape.leaf(stack_images(&x_out)?, false);
    let li = segnet::forward_on(&mut tape, &cfg.net, &vars, &xi)?;
    let q_in = Graph::softmax_channels(&mut tape, &li)?;
    let lo = segnet::forward_on(&mut tape, &cfg.net, &vars, &xo)?;
    let q_out = Graph::softmax_channels(&mut tape, &lo)?;
    let l = bcp_loss_per_pair(&mut tape, &q_in, &q_out, &y_in, &y_out, masks, &cfg.loss_cfg)?;
    tape.backward(l.l_all)?;
    Ok((l.report, state.student.grads_from(&tape, &vars)?))
}

/// One self-training step on a pre-sampled batch:
/// pseudo-label, mask, mix, forward, loss, SGD, EMA, advance.
///
/// On a non-finite loss or gradient the state is left untouched.
pub fn selftrain_step_on<T: Scalar>(
    state: &mut TrainerState<T>,
    batch: &StepBatch<T>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if batch.labeled.is_empty() || batch.unlabeled.is_empty() {
        return Err(Error::InvalidArgument("self-training batch needs labeled and unlabeled samples".into()));
    }
    let xu = stack_images(&batch.unlabeled)?;
    let pseudo = make_pseudo_labels(&cfg.net, &state.teacher, &xu, cfg.label_mode(), cfg.use_lcc)?;
    // work on a copy of the RNG so a failed step leaves the state unchanged
    let mut rng = state.rng.clone();
    let (report, grads) = match cfg.mixer_mode {
        MixerMode::Bcp | MixerMode::InOnly | MixerMode::OutOnly => {
            let shape = spatial(&batch.labeled[0].0);
            let masks = step_masks(cfg, &shape, batch.labeled.len() / 2, &mut rng)?;
            bcp_step(cfg, state, batch, &pseudo, &masks)?
        }
        _ => {
            let branches = build_branches(cfg, batch, &pseudo, &mut rng)?;
            branch_step(cfg, &state.student, &branches, &cfg.loss_cfg)?
        }
    };
    check_finite(state.iteration, &report, &grads)?;
    let lr = lr_at(state.iteration, &cfg.optim_cfg);
    sgd_step(&mut state.student, &grads, &mut state.velocity, lr, cfg.optim_cfg.momentum)?;
    ema_update(&mut state.teacher, &state.student, &cfg.ema_cfg)?;
    state.rng = rng;
    state.iteration += 1;
    Ok(report)
}

/// Sample a batch with the state's RNG and run one step.
pub fn selftrain_step<T: Scalar>(
    state: &mut TrainerState<T>,
    labeled: &[LabeledSample],
    unlabeled: &[UnlabeledSample],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let saved = state.rng.clone();
    let batch = StepBatch::sample(state, labeled, unlabeled, cfg)?;
    selftrain_step_on(state, &batch, cfg).inspect_err(|_| state.rng = saved)
}

/// Result of supervised pretraining.
#[derive(Clone, Debug)]
pub struct Pretrained<T> {
    pub params: ModelParams<T>,
    /// Loss of each step.
    pub losses: Vec<f64>,
}

/// Supervised pretraining on the labeled pool.
pub fn pretrain<T: Scalar>(labeled: &[LabeledSample], cfg: &TrainConfig) -> Result<Pretrained<T>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs a non-empty labeled set".into()));
    }
    let mut params = init_params::<T>(&cfg.net)?;
    if cfg.pretrain_mode == PretrainMode::None {
        return Ok(Pretrained { params, losses: Vec::new() });
    }
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PRETRAIN_STREAM);
    let plain = LossConfig { alpha: 1.0, ..cfg.loss_cfg.clone() };
    let cp = cfg.pretrain_mode == PretrainMode::Cp;
    let mut losses = Vec::with_capacity(cfg.pretrain_iters as usize);
    for k in 0..cfg.pretrain_iters {
        let idx = draw(&mut rng, labeled.len(), cfg.batch_labeled, cp)?;
        let xs: Vec<Tensor<T>> = idx.iter().map(|&i| labeled[i].image.cast()).collect();
        let ys: Vec<LabelMap> = idx.iter().map(|&i| labeled[i].label.clone()).collect();
        let branch = if cp {
            let mask = cfg.mask_spec.generate_with_seed(&spatial(&xs[0]), rng.gen())?;
            let h = xs.len() / 2;
            let mut images = Vec::with_capacity(xs.len());
            let mut targets = Vec::with_capacity(xs.len());
            for t in 0..h {
                for (a, b) in [(t, t + h), (t + h, t)] {
                    let s = mixer::within_set_mix((&xs[a], &ys[a]), (&xs[b], &ys[b]), &mask)?;
                    images.push(s.image);
                    targets.push(s.target);
                }
            }
            Branch::hard(images, &targets, None)?
        } else {
            Branch::hard(xs, &ys, None)?
        };
        let (report, grads) = branch_step(cfg, &params, std::slice::from_ref(&branch), &plain)?;
        check_finite(k, &report, &grads)?;
        sgd_step(&mut params, &grads, &mut velocity, lr_at(k, &cfg.optim_cfg), cfg.optim_cfg.momentum)?;
        losses.push(report.l_all);
    }
    Ok(Pretrained { params, losses })
}

/// Argmax segmentation of one image `[C, spatial...]`.
pub fn predict<T: Scalar>(cfg: &NetConfig, params: &ModelParams<T>, x: &Tensor<T>) -> Result<LabelMap> {
    let batch = Tensor::stack(std::slice::from_ref(x))?;
    let probs = segnet::predict_probs(cfg, params, &batch)?;
    prob_to_label(&probs.unstack()[0], LabelMode::Multiclass)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Run directory for checkpoints and metrics; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Start self-training from these weights instead of pretraining.
    pub init: Option<ModelParams<f64>>,
    /// Continue an interrupted run.
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub pretrained: ModelParams<f64>,
    pub pretrain_losses: Vec<f64>,
    pub state: TrainerState<f64>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const NAN_CHECKPOINT: &str = "nan_halt.ckpt";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("step_{iteration:06}.ckpt")
}

fn val_dice(cfg: &NetConfig, params: &ModelParams<f64>, val: &[LabeledSample]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = evalkit::predict_all(cfg, params, val)?;
    let gts: Vec<LabelMap> = val.iter().map(|s| s.label.clone()).collect();
    evalkit::mean_foreground_dice(&preds, &gts)
}

/// Pretrain (unless given initial weights), copy the student into the
/// teacher, and self-train for `selftrain_iters` steps.
pub fn train(dataset: &DatasetManifest, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.spec.num_classes != cfg.net.num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the network predicts {}",
            dataset.spec.num_classes, cfg.net.num_classes
        )));
    }
    let labeled = dataset.load_labeled(Split::Labeled)?;
    let unlabeled = dataset.load_unlabeled()?;
    let val = dataset.load_labeled(Split::Val)?;
    if labeled.len() < 2 || (cfg.selftrain_iters > 0 && unlabeled.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 labeled and 2 unlabeled samples, got {} and {}",
            labeled.len(),
            unlabeled.len()
        )));
    }
    let (pretrained, pretrain_losses, mut state) = match (&opts.resume, &opts.init) {
        (Some(ck), _) => {
            let st = TrainerState::from_checkpoint(ck)?;
            (st.student.clone(), Vec::new(), st)
        }
        (None, Some(init)) => {
            init.check_compatible(&ModelParams::zeros(&cfg.net))?;
            (init.clone(), Vec::new(), TrainerState::new(init.clone(), cfg.seed))
        }
        (None, None) => {
            let p = pretrain::<f64>(&labeled, cfg)?;
            (p.params.clone(), p.losses, TrainerState::new(p.params, cfg.seed))
        }
    };
    let out = opts.out_dir.as_deref();
    let save = |st: &TrainerState<f64>, name: &str| -> Result<()> {
        match out {
            Some(dir) => save_checkpoint(&dir.join(name), &st.to_checkpoint(cfg), CheckpointDtype::F64),
            None => Ok(()),
        }
    };
    while state.iteration < cfg.selftrain_iters {
        let report = match selftrain_step(&mut state, &labeled, &unlabeled, cfg) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                save(&state, NAN_CHECKPOINT)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let k = state.iteration;
        let last = k == cfg.selftrain_iters;
        if last || (cfg.log_every > 0 && k % cfg.log_every == 0) {
            let row = MetricsRow {
                iter: k,
                lr: lr_at(k - 1, &cfg.optim_cfg),
                l_in: report.l_in,
                l_out: report.l_out,
                l_all: report.l_all,
                val_dice: val_dice(&cfg.net, &state.student, &val)?,
            };
            log::info!(
                "step {k}: l_all={:.4} l_in={:.4} l_out={:.4} val_dice={:.4}",
                row.l_all,
                row.l_in,
                row.l_out,
                row.val_dice
            );
            state.metrics.push(row);
            if let Some(dir) = out {
                write_atomic(&dir.join(METRICS_FILE), metrics_csv(&state.metrics).as_bytes())?;
            }
        }
        if cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0 && !last {
            save(&state, &checkpoint_name(k))?;
        }
    }
    if let Some(dir) = out {
        write_atomic(&dir.join(METRICS_FILE), metrics_csv(&state.metrics).as_bytes())?;
    }
    save(&state, FINAL_CHECKPOINT)?;
    Ok(TrainOutcome {
        pretrained,
        pretrain_losses,
        state,
    })
}

/// Supervised-only run: pretrain and save the result as a plain checkpoint.
pub fn pretrain_to(dataset: &DatasetManifest, cfg: &TrainConfig, out: Option<&Path>) -> Result<Pretrained<f64>> {
    cfg.validate()?;
    let labeled = dataset.load_labeled(Split::Labeled)?;
    let p = pretrain::<f64>(&labeled, cfg)?;
    if let Some(dir) = out {
        let state = TrainerState::new(p.params.clone(), cfg.seed);
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &state.to_checkpoint(cfg), CheckpointDtype::F64)?;
        let mut csv = String::from("iter,loss\n");
        for (i, l) in p.losses.iter().enumerate() {
            let _ = writeln!(csv, "{},{}", i + 1, l);
        }
        write_atomic(&dir.join("pretrain_loss.csv"), csv.as_bytes())?;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{synth_sample, DatasetSpec};

    fn tiny_cfg(mode: MixerMode) -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                base_width: 2,
                depth: 2,
                seed: 1,
                ..NetConfig::default()
            },
            pretrain_iters: 3,
            selftrain_iters: 3,
            batch_labeled: 2,
            batch_unlabeled: 2,
            mixer_mode: mode,
            ..TrainConfig::default()
        }
    }

    fn pools(n: usize) -> (Vec<LabeledSample>, Vec<UnlabeledSample>) {
        let spec = DatasetSpec {
            shape: vec![16, 16],
            ..DatasetSpec::default()
        };
        let mut l = Vec::new();
        let mut u = Vec::new();
        for i in 0..n {
            let (x, y) = synth_sample(&spec, Split::Labeled, i).unwrap();
            l.push(LabeledSample {
                id: format!("l{i}"),
                image: x.reshape(vec![1, 16, 16]).unwrap(),
                label: y,
            });
            let (x, _) = synth_sample(&spec, Split::Unlabeled, i).unwrap();
            u.push(UnlabeledSample {
                id: format!("u{i}"),
                image: x.reshape(vec![1, 16, 16]).unwrap(),
            });
        }
        (l, u)
    }

    #[test]
    fn draw_pairs_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for pool in 2..6 {
            for _ in 0..50 {
                let d = draw(&mut rng, pool, 4, true).unwrap();
                assert_ne!(d[0], d[2]);
                assert_ne!(d[1], d[3]);
            }
        }
        assert!(draw(&mut rng, 1, 2, true).is_err());
    }

    #[test]
    fn pretrain_none_and_zero_iters_return_init() {
        let (l, _) = pools(2);
        let mut cfg = tiny_cfg(MixerMode::Bcp);
        cfg.pretrain_mode = PretrainMode::None;
        let init = init_params::<f64>(&cfg.net).unwrap();
        assert_eq!(pretrain::<f64>(&l, &cfg).unwrap().params, init);
        cfg.pretrain_mode = PretrainMode::Cp;
        cfg.pretrain_iters = 0;
        assert_eq!(pretrain::<f64>(&l, &cfg).unwrap().params, init);
        assert!(pretrain::<f64>(&[], &cfg).is_err());
    }

    #[test]
    fn every_mode_runs_and_keeps_teacher_off_sgd() {
        let (l, u) = pools(4);
        for mode in [
            MixerMode::Bcp,
            MixerMode::InOnly,
            MixerMode::OutOnly,
            MixerMode::WithinSet,
            MixerMode::Mixup,
            MixerMode::FgCutmix,
            MixerMode::None,
        ] {
            let mut cfg = tiny_cfg(mode);
            cfg.ema_cfg.lambda = 1.0;
            let init = init_params::<f64>(&cfg.net).unwrap();
            let mut st = TrainerState::new(init.clone(), 0);
            for _ in 0..2 {
                let r = selftrain_step(&mut st, &l, &u, &cfg).unwrap();
                assert!(r.l_all.is_finite(), "{mode:?}");
                assert_eq!(r.l_all, r.l_in + r.l_out, "{mode:?}");
                if mode == MixerMode::InOnly {
                    assert_eq!(r.l_out, 0.0);
                }
                if mode == MixerMode::OutOnly {
                    assert_eq!(r.l_in, 0.0);
                }
            }
            assert_eq!(st.teacher, init, "{mode:?}: teacher moved with lambda = 1");
            assert_ne!(st.student, init, "{mode:?}");
            assert_eq!(st.iteration, 2);
        }
    }

    #[test]
    fn zero_gradient_step_moves_teacher_only() {
        let cfg = tiny_cfg(MixerMode::Bcp);
        let student = ModelParams::<f64>::zeros(&cfg.net);
        let teacher = init_params::<f64>(&cfg.net).unwrap();
        let grads = student.zeros_like();
        let mut s2 = student.clone();
        let mut v = student.zeros_like();
        sgd_step(&mut s2, &grads, &mut v, 0.01, 0.9).unwrap();
        assert_eq!(s2, student);
        let mut t2 = teacher.clone();
        ema_update(&mut t2, &s2, &cfg.ema_cfg).unwrap();
        for ((_, a), (_, b)) in t2.iter().zip(teacher.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - 0.99 * y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn predict_matches_composition() {
        let cfg = tiny_cfg(MixerMode::Bcp);
        let p = init_params::<f64>(&cfg.net).unwrap();
        let x = Tensor::from_fn(&[1, 8, 8], |i| (i % 7) as f64 / 7.0);
        let a = predict(&cfg.net, &p, &x).unwrap();
        let probs = segnet::predict_probs(&cfg.net, &p, &Tensor::stack(&[x.clone()]).unwrap()).unwrap();
        let b = prob_to_label(&probs.unstack()[0], LabelMode::Multiclass).unwrap();
        assert_eq!(a, b);
        assert_eq!(predict(&cfg.net, &p, &x).unwrap(), a);
        let z = ModelParams::<f64>::zeros(&cfg.net);
        assert_eq!(predict(&cfg.net, &z, &x).unwrap().count(0), 64);
    }

    #[test]
    fn resume_is_bit_exact() {
        let (l, u) = pools(4);
        let cfg = tiny_cfg(MixerMode::Bcp);
        let init = init_params::<f64>(&cfg.net).unwrap();
        let mut a = TrainerState::new(init, 9);
        selftrain_step(&mut a, &l, &u, &cfg).unwrap();
        let ck = a.to_checkpoint(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_checkpoint(&path, &ck, CheckpointDtype::F64).unwrap();
        let mut b = TrainerState::<f64>::from_checkpoint(&segnet::load_checkpoint(&path).unwrap()).unwrap();
        for _ in 0..2 {
            let ra = selftrain_step(&mut a, &l, &u, &cfg).unwrap();
            let rb = selftrain_step(&mut b, &l, &u, &cfg).unwrap();
            assert_eq!(ra, rb);
        }
        assert_eq!(a.student, b.student);
        assert_eq!(a.teacher, b.teacher);
    }

    #[test]
    fn nan_halts_without_touching_state() {
        let (l, u) = pools(2);
        let cfg = tiny_cfg(MixerMode::Bcp);
        let mut p = init_params::<f64>(&cfg.net).unwrap();
        p.get_mut("head.bias").unwrap().data_mut()[0] = f64::NAN;
        let mut st = TrainerState::new(p, 0);
        let before = st.clone();
        let err = selftrain_step(&mut st, &l, &u, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { iteration: 0, .. }), "{err}");
        assert_eq!(st.iteration, 0);
        assert_eq!(st.rng, before.rng);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.batch_labeled = 3;
        assert!(cfg.validate().is_err());
        cfg.mixer_mode = MixerMode::FgCutmix;
        cfg.pretrain_mode = PretrainMode::Plain;
        cfg.validate().unwrap();
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::default());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
