//! Burn-up and Teacher-Student mutual learning.
//!
//! The student is trained by SGD; the teacher only ever changes through
//! [`ema_update`]. During mutual learning the teacher labels weak views of
//! unlabeled images, its predictions pass the IoU-score filter and then the
//! confidence filter, and the student learns from strong views of the same
//! images.

mod config;

pub use config::{scaled_decay_iters, ConfigError, HyperConfig, CONFIG_KEYS};

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::eval::{evaluate_ap, pseudo_quality_histogram, coco_thresholds, APReport, EvalError, QualityHistogram};
use crate::geometry::{decode_deltas, iou_unchecked, BBox};
use crate::losses::{
    assign_branch_targets_with_quality, supervised_loss, total_loss, unsupervised_loss, weighted_terms,
    ImageLossInput, LossBreakdown, LossError, LossWeights, Stream, StreamLoss,
};
use crate::model::{anchor_grid, predict, unscale_deltas, Gradients, HeadOutputs, ModelError, ModelState, Net, Prediction};
use crate::sampling::{label_anchors, sample_rois, ImageTargets};
use crate::synthdata::{
    derive_seed, strong_augment, weak_augment, weak_augment_image, DataError, DatasetSplit, Image, Scene,
    UnlabeledScene,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at iteration {iteration}: {value}")]
    NonFinite { iteration: usize, term: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("metrics sink: {0}")]
    Sink(#[from] std::io::Error),
}

/// A teacher prediction kept as a training target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    /// Branch score at `class_id`; `None` when the teacher has no branch.
    pub q_iou: Option<f64>,
    pub source_iteration: u64,
}

/// `θ_T <- m θ_T + (1 - m) θ_S` for every parameter.
pub fn ema_update(teacher: &mut ModelState, student: &ModelState, m: f64) -> Result<(), ModelError> {
    teacher.check_same_shape(student)?;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (a, b) in t.data.iter_mut().zip(&s.data) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// SGD with momentum and weight decay:
/// `v <- momentum v + (g + wd θ)`, `θ <- θ - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(state: &ModelState) -> Self {
        Sgd { velocity: state.params.iter().map(|p| vec![0.0; p.data.len()]).collect() }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &Gradients, lr: f64, weight_decay: f64, momentum: f64) {
        for ((p, g), v) in state.params.iter_mut().zip(&grads.0).zip(&mut self.velocity) {
            for ((x, gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi + weight_decay * *x;
                *x -= lr * *vi;
            }
        }
    }
}

/// Applies the pseudo-label filters to one image's post-NMS predictions:
/// the IoU-score filter first (skipped when disabled or without a branch
/// score), then the confidence filter.
pub fn filter_predictions(
    preds: &[Prediction],
    theta: f64,
    delta: f64,
    filter_enabled: bool,
    iteration: u64,
) -> Vec<PseudoLabel> {
    preds
        .iter()
        .filter(|p| !filter_enabled || p.iou_score.is_none_or(|q| q >= theta))
        .filter(|p| p.scored.score >= delta)
        .map(|p| PseudoLabel {
            bbox: p.scored.bbox,
            class_id: p.scored.class_id,
            confidence: p.scored.score,
            q_iou: p.iou_score,
            source_iteration: iteration,
        })
        .collect()
}

/// Teacher inference on already weakly augmented images, then both filters.
pub fn generate_pseudo_labels(
    teacher: &ModelState,
    images: &[Image],
    cfg: &HyperConfig,
    iteration: u64,
) -> Result<Vec<Vec<PseudoLabel>>, ModelError> {
    images
        .iter()
        .map(|img| {
            let preds = predict(teacher, img, 0.0, cfg.nms_threshold)?;
            Ok(filter_predictions(&preds, cfg.theta, cfg.delta, cfg.filter_enabled, iteration))
        })
        .collect()
}

/// Fixed training targets for one image: the RoIs to pool and everything the
/// loss compares against.
#[derive(Debug, Clone)]
pub struct ImagePlan {
    pub image: Image,
    pub rois: Vec<BBox>,
    pub targets: ImageTargets,
}

/// Forward pass plus target construction in one go. Branch targets compare
/// each RoI's refined box against the object its proposal matched.
fn forward_with_targets<R: Rng>(
    net: &Net<'_>,
    tape: &mut Tape,
    image: &Image,
    gts: &[(BBox, usize)],
    cfg: &HyperConfig,
    rng: &mut R,
) -> Result<(HeadOutputs, ImagePlan), ModelError> {
    let arch = &net.state.arch;
    let bb = net.backbone(tape, image)?;
    let proposals: Vec<BBox> = net.proposals(tape, &bb).into_iter().map(|p| p.bbox).collect();
    let anchors = label_anchors(&anchor_grid(arch), gts, &cfg.sampler, rng);
    let (rois, matches) = sample_rois(&proposals, gts, arch.num_classes, cfg.u, &cfg.sampler, rng);
    let roi_boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
    let out = net.roi_head(tape, &bb, &roi_boxes);

    let deltas = tape.value(out.roi_deltas);
    let size = arch.image_size as f64;
    let quality: Vec<f64> = matches
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let Some(g) = m.gt_index else { return 0.0 };
            let d = deltas.row(i);
            decode_deltas(&roi_boxes[i], &unscale_deltas([d[0], d[1], d[2], d[3]]), Some((size, size)))
                .map_or(0.0, |b| iou_unchecked(&b, &gts[g].0))
        })
        .collect();
    let branch = assign_branch_targets_with_quality(&matches, &quality, cfg.u, cfg.mu, |g| gts[g].1);
    let targets = ImageTargets { anchors, rois, branch, matches };
    Ok((out, ImagePlan { image: image.clone(), rois: roi_boxes, targets }))
}

/// Builds fixed plans from the current state, e.g. for gradient checks.
pub fn build_plans(
    state: &ModelState,
    items: &[(Image, Vec<(BBox, usize)>)],
    cfg: &HyperConfig,
    seed: u64,
) -> Result<Vec<ImagePlan>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let net = Net::load(&mut tape, state);
    items
        .iter()
        .map(|(img, gts)| forward_with_targets(&net, &mut tape, img, gts, cfg, &mut rng).map(|(_, p)| p))
        .collect()
}

fn stream_on_tape(
    tape: &mut Tape,
    outs: &[HeadOutputs],
    plans: &[&ImageTargets],
    weights: &LossWeights,
    stream: Stream,
) -> StreamLoss {
    let batch: Vec<ImageLossInput<'_>> =
        outs.iter().zip(plans).map(|(o, t)| ImageLossInput { outputs: o, targets: t }).collect();
    match stream {
        Stream::Supervised => supervised_loss(tape, &batch, weights),
        Stream::Unsupervised => unsupervised_loss(tape, &batch, weights),
    }
}

/// Value and parameter gradient of `L_sup + L_unsup` over fixed plans.
/// With no unsupervised plans the objective is the supervised loss alone.
pub fn plan_objective(
    state: &ModelState,
    sup: &[ImagePlan],
    unsup: &[ImagePlan],
    weights: &LossWeights,
) -> Result<(f64, Gradients), ModelError> {
    let mut tape = Tape::new();
    let net = Net::load(&mut tape, state);
    let run = |plans: &[ImagePlan], tape: &mut Tape, stream| -> Result<StreamLoss, ModelError> {
        let mut outs = Vec::with_capacity(plans.len());
        for p in plans {
            let bb = net.backbone(tape, &p.image)?;
            outs.push(net.roi_head(tape, &bb, &p.rois));
        }
        let targets: Vec<&ImageTargets> = plans.iter().map(|p| &p.targets).collect();
        Ok(stream_on_tape(tape, &outs, &targets, weights, stream))
    };
    let s = run(sup, &mut tape, Stream::Supervised)?;
    let mut root = s.weighted(&mut tape, weights);
    if !unsup.is_empty() {
        let u = run(unsup, &mut tape, Stream::Unsupervised)?;
        let uw = u.weighted(&mut tape, weights);
        root = tape.weighted_sum(&[(root, 1.0), (uw, 1.0)]);
    }
    let value = tape.scalar(root);
    Ok((value, Gradients::from_tape(state, tape.backward(root))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub sup: LossBreakdown,
    pub unsup: Option<LossBreakdown>,
    pub weighted: [f64; 6],
    pub total: f64,
    pub pseudo_labels: usize,
}

fn check_gradients(grads: &Gradients, iteration: usize) -> Result<(), TrainError> {
    for g in &grads.0 {
        if let Some(v) = g.iter().find(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite { iteration, term: "gradient", value: *v });
        }
    }
    Ok(())
}

fn loss_error(e: LossError, iteration: usize) -> TrainError {
    match e {
        LossError::NonFinite { term, value } => TrainError::NonFinite { iteration, term, value },
    }
}

/// An image after augmentation, tagged with the scene it came from.
#[derive(Debug, Clone)]
pub struct View {
    pub scene_id: usize,
    pub image: Image,
}

/// Everything `train_step_mutual` produced besides the parameter update.
#[derive(Debug, Clone)]
pub struct MutualStep {
    pub report: StepReport,
    pub weak: Vec<View>,
    pub strong: Vec<View>,
    pub pseudo: Vec<Vec<PseudoLabel>>,
}

fn sub_rngs<R: Rng>(rng: &mut R) -> (ChaCha8Rng, ChaCha8Rng) {
    let a = rng.random::<u64>();
    let b = rng.random::<u64>();
    (ChaCha8Rng::seed_from_u64(a), ChaCha8Rng::seed_from_u64(b))
}

/// Supervised stream on weakly augmented labeled scenes. Returns the loss
/// node alongside its breakdown.
fn supervised_stream(
    net: &Net<'_>,
    tape: &mut Tape,
    labeled: &[Scene],
    cfg: &HyperConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StreamLoss, ModelError> {
    let mut outs = Vec::with_capacity(labeled.len());
    let mut plans = Vec::with_capacity(labeled.len());
    for scene in labeled {
        let view = weak_augment(scene, rng);
        let (out, plan) = forward_with_targets(net, tape, &view.image, &view.gt_pairs(), cfg, rng)?;
        outs.push(out);
        plans.push(plan.targets);
    }
    let refs: Vec<&ImageTargets> = plans.iter().collect();
    Ok(stream_on_tape(tape, &outs, &refs, &cfg.weights, Stream::Supervised))
}

/// One supervised SGD step.
pub fn train_step_burn_up<R: Rng>(
    student: &mut ModelState,
    opt: &mut Sgd,
    labeled: &[Scene],
    cfg: &HyperConfig,
    lr: f64,
    iteration: usize,
    rng: &mut R,
) -> Result<StepReport, TrainError> {
    let (mut lab_rng, _) = sub_rngs(rng);
    let grads = {
        let mut tape = Tape::new();
        let net = Net::load(&mut tape, student);
        let sup = supervised_stream(&net, &mut tape, labeled, cfg, &mut lab_rng)?;
        let t = total_loss(&sup.breakdown, None, &cfg.weights).map_err(|e| loss_error(e, iteration))?;
        let root = sup.weighted(&mut tape, &cfg.weights);
        let grads = Gradients::from_tape(student, tape.backward(root));
        check_gradients(&grads, iteration)?;
        (grads, sup.breakdown, t.total)
    };
    let (grads, sup, total) = grads;
    opt.step(student, &grads, lr, cfg.weight_decay, cfg.momentum);
    Ok(StepReport { sup, unsup: None, weighted: weighted_terms(&sup, None, &cfg.weights), total, pseudo_labels: 0 })
}

/// One mutual-learning step: teacher pseudo-labels on weak views, student
/// SGD on labeled plus strong views, then the EMA update of the teacher.
/// Images whose pseudo-label set is empty contribute no unsupervised loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step_mutual<R: Rng>(
    student: &mut ModelState,
    teacher: &mut ModelState,
    opt: &mut Sgd,
    labeled: &[Scene],
    unlabeled: &[&UnlabeledScene],
    cfg: &HyperConfig,
    lr: f64,
    iteration: usize,
    rng: &mut R,
) -> Result<MutualStep, TrainError> {
    let (mut lab_rng, mut unl_rng) = sub_rngs(rng);

    let weak: Vec<View> = unlabeled
        .iter()
        .map(|s| View { scene_id: s.id, image: weak_augment_image(&s.image, &mut unl_rng).0 })
        .collect();
    let weak_images: Vec<Image> = weak.iter().map(|v| v.image.clone()).collect();
    let pseudo = generate_pseudo_labels(teacher, &weak_images, cfg, iteration as u64)?;
    let strong: Vec<View> = weak
        .iter()
        .map(|v| View { scene_id: v.scene_id, image: strong_augment(&v.image, &mut unl_rng, &cfg.strong_aug) })
        .collect();
    for (w, s) in weak.iter().zip(&strong) {
        assert_eq!(w.scene_id, s.scene_id, "weak and strong views must pair up");
    }

    let (grads, sup, unsup, total) = {
        let mut tape = Tape::new();
        let net = Net::load(&mut tape, student);
        let sup = supervised_stream(&net, &mut tape, labeled, cfg, &mut lab_rng)?;
        let mut outs = Vec::new();
        let mut plans = Vec::new();
        for (view, pl) in strong.iter().zip(&pseudo) {
            if pl.is_empty() {
                continue;
            }
            let gts: Vec<(BBox, usize)> = pl.iter().map(|p| (p.bbox, p.class_id)).collect();
            let (out, plan) = forward_with_targets(&net, &mut tape, &view.image, &gts, cfg, &mut unl_rng)?;
            outs.push(out);
            plans.push(plan.targets);
        }
        let refs: Vec<&ImageTargets> = plans.iter().collect();
        let unsup = stream_on_tape(&mut tape, &outs, &refs, &cfg.weights, Stream::Unsupervised);
        let t = total_loss(&sup.breakdown, Some(&unsup.breakdown), &cfg.weights)
            .map_err(|e| loss_error(e, iteration))?;
        let a = sup.weighted(&mut tape, &cfg.weights);
        let b = unsup.weighted(&mut tape, &cfg.weights);
        let root = tape.weighted_sum(&[(a, 1.0), (b, 1.0)]);
        let grads = Gradients::from_tape(student, tape.backward(root));
        check_gradients(&grads, iteration)?;
        (grads, sup.breakdown, unsup.breakdown, t.total)
    };
    opt.step(student, &grads, lr, cfg.weight_decay, cfg.momentum);
    ema_update(teacher, student, cfg.ema_momentum)?;
    let report = StepReport {
        sup,
        unsup: Some(unsup),
        weighted: weighted_terms(&sup, Some(&unsup), &cfg.weights),
        total,
        pseudo_labels: pseudo.iter().map(Vec::len).sum(),
    };
    Ok(MutualStep { report, weak, strong, pseudo })
}

/// Benchmark predictions of `state` on `scenes`.
pub fn predict_scenes(state: &ModelState, scenes: &[Scene], cfg: &HyperConfig) -> Result<Vec<Vec<Prediction>>, ModelError> {
    scenes
        .iter()
        .map(|s| {
            let preds = predict(state, &s.image, cfg.eval_score_threshold, cfg.nms_threshold)?;
            Ok(if cfg.filter_at_eval {
                preds.into_iter().filter(|p| p.iou_score.is_none_or(|q| q >= cfg.theta)).collect()
            } else {
                preds
            })
        })
        .collect()
}

pub fn evaluate_model(state: &ModelState, scenes: &[Scene], cfg: &HyperConfig) -> Result<APReport, TrainError> {
    let preds = predict_scenes(state, scenes, cfg)?;
    let dets: Vec<Vec<_>> = preds.iter().map(|p| p.iter().map(|x| x.scored).collect()).collect();
    let gts: Vec<Vec<(BBox, usize)>> = scenes.iter().map(Scene::gt_pairs).collect();
    Ok(evaluate_ap(&dets, &gts, &coco_thresholds(), state.arch.num_classes)?)
}

/// Pseudo-label quality of `state` on labeled held-out scenes, which stand
/// in for unlabeled images so hidden ground truth is never needed.
pub fn quality_snapshot(
    state: &ModelState,
    scenes: &[Scene],
    cfg: &HyperConfig,
    iteration: u64,
) -> Result<QualityHistogram, ModelError> {
    let images: Vec<Image> = scenes.iter().map(|s| s.image.clone()).collect();
    let pseudo = generate_pseudo_labels(state, &images, cfg, iteration)?;
    let gts: Vec<Vec<(BBox, usize)>> = scenes.iter().map(Scene::gt_pairs).collect();
    let items: Vec<(&[PseudoLabel], &[(BBox, usize)])> =
        pseudo.iter().zip(&gts).map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
    Ok(pseudo_quality_histogram(&items, cfg.quality_bins, iteration))
}

/// One line of the metrics log: interval means of every loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Completed iterations.
    pub iteration: u64,
    pub stage: String,
    pub lr: f64,
    pub sup: LossBreakdown,
    pub unsup: Option<LossBreakdown>,
    /// `(sup_cls, sup_reg, sup_iou, unsup_cls, unsup_reg, unsup_iou)` after weighting.
    pub weighted: [f64; 6],
    pub sup_total: f64,
    pub unsup_total: f64,
    pub total: f64,
    pub pseudo_labels: u64,
    pub ap: Option<APReport>,
    /// Which model the AP snapshot and histogram describe.
    pub evaluated: Option<String>,
    pub quality: Option<QualityHistogram>,
}

impl Default for MetricsRecord {
    fn default() -> Self {
        MetricsRecord {
            iteration: 0,
            stage: String::new(),
            lr: 0.0,
            sup: LossBreakdown::zero(Stream::Supervised),
            unsup: None,
            weighted: [0.0; 6],
            sup_total: 0.0,
            unsup_total: 0.0,
            total: 0.0,
            pseudo_labels: 0,
            ap: None,
            evaluated: None,
            quality: None,
        }
    }
}

/// Accumulates step reports between log points.
#[derive(Debug, Default)]
struct Interval {
    steps: usize,
    sup: Option<LossBreakdown>,
    unsup: Option<LossBreakdown>,
    weighted: [f64; 6],
    total: f64,
    pseudo: u64,
}

impl Interval {
    fn push(&mut self, r: &StepReport) {
        self.steps += 1;
        self.sup.get_or_insert(LossBreakdown::zero(Stream::Supervised)).add(&r.sup);
        if let Some(u) = &r.unsup {
            self.unsup.get_or_insert(LossBreakdown::zero(Stream::Unsupervised)).add(u);
        }
        for (a, b) in self.weighted.iter_mut().zip(r.weighted) {
            *a += b;
        }
        self.total += r.total;
        self.pseudo += r.pseudo_labels as u64;
    }

    fn finish(self, iteration: u64, stage: &str, lr: f64) -> MetricsRecord {
        let n = self.steps.max(1) as f64;
        let mean = |b: Option<LossBreakdown>| {
            b.map(|mut b| {
                b.scale(1.0 / n);
                b
            })
        };
        let weighted = self.weighted.map(|v| v / n);
        MetricsRecord {
            iteration,
            stage: stage.into(),
            lr,
            sup: mean(self.sup).unwrap_or(LossBreakdown::zero(Stream::Supervised)),
            unsup: mean(self.unsup),
            weighted,
            sup_total: weighted[..3].iter().sum(),
            unsup_total: weighted[3..].iter().sum(),
            total: self.total / n,
            pseudo_labels: self.pseudo,
            ..MetricsRecord::default()
        }
    }
}

pub struct TrainingArtifacts {
    pub student: ModelState,
    pub teacher: ModelState,
    pub records: Vec<MetricsRecord>,
    /// Final teacher on the held-out set.
    pub final_report: APReport,
    pub iterations: usize,
}

/// Seed of the model initialization for a run seed.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, 0xA11CE)
}

/// Full training run. Each metrics record is written to `sink` as one JSON
/// line as soon as it is complete.
pub fn run_training(
    cfg: &HyperConfig,
    data: &DatasetSplit,
    eval_set: &[Scene],
    sink: &mut dyn Write,
) -> Result<TrainingArtifacts, TrainError> {
    cfg.validate()?;
    let mut student = ModelState::init(cfg.arch(), init_seed(cfg.seed))?;
    let mut teacher: Option<ModelState> = None;
    let mut opt = Sgd::new(&student);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7EA1));
    let quality_set = &eval_set[..cfg.quality_scenes.min(eval_set.len())];
    let mut records = Vec::new();
    let mut interval = Interval::default();

    for it in 0..cfg.total_iters {
        let lr = cfg.lr_at(it);
        let labeled: Vec<Scene> = (0..cfg.batch_labeled)
            .map(|_| data.labeled[rng.random_range(0..data.labeled.len())].clone())
            .collect();
        let mutual = it >= cfg.burn_up_iters;
        let report = if !mutual {
            train_step_burn_up(&mut student, &mut opt, &labeled, cfg, lr, it, &mut rng)?
        } else {
            let t = teacher.get_or_insert_with(|| student.clone());
            let unlabeled: Vec<&UnlabeledScene> = if data.unlabeled.is_empty() {
                Vec::new()
            } else {
                (0..cfg.batch_unlabeled).map(|_| &data.unlabeled[rng.random_range(0..data.unlabeled.len())]).collect()
            };
            train_step_mutual(&mut student, t, &mut opt, &labeled, &unlabeled, cfg, lr, it, &mut rng)?.report
        };
        interval.push(&report);

        let done = it + 1;
        if done % cfg.log_interval == 0 || done == cfg.total_iters {
            let stage = if mutual { "mutual" } else { "burn_up" };
            let mut rec = std::mem::take(&mut interval).finish(done as u64, stage, lr);
            let (model, name) = match &teacher {
                Some(t) => (t, "teacher"),
                None => (&student, "student"),
            };
            let mut evaluated = false;
            if done % cfg.eval_interval == 0 || done == cfg.total_iters {
                rec.ap = Some(evaluate_model(model, eval_set, cfg)?);
                evaluated = true;
            }
            if done % cfg.quality_interval == 0 || done == cfg.total_iters {
                rec.quality = Some(quality_snapshot(model, quality_set, cfg, done as u64)?);
                evaluated = true;
            }
            if evaluated {
                rec.evaluated = Some(name.into());
            }
            writeln!(sink, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
            records.push(rec);
        }
    }
    sink.flush()?;
    let teacher = teacher.unwrap_or_else(|| student.clone());
    let final_report = evaluate_model(&teacher, eval_set, cfg)?;
    Ok(TrainingArtifacts { student, teacher, records, final_report, iterations: cfg.total_iters })
}
