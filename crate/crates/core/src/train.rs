//! Phase I joint optimization, the Phase II first-order meta step, the plain
//! ERM comparator and the feature-mask ablation matrix.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{make_triplet_batch, AugmentSpec, ImageTensor};
use crate::datasets::{derive_seed, meta_split, BatchIter, DomainDataset, ExampleRef, LodoSplit};
use crate::error::{Error, Result};
use crate::eval::{predict, MetricsRow, Predictions};
use crate::losses::{self, LossReport, LossWeights};
use crate::model::{
    encode, encoder_forward, head_gamma, heads, images_to_tensor, EncoderConfig, Extractor, FeatureMask, Model,
    ModelConfig,
};
use crate::tensor::{Adam, AdamConfig, Graph, ParamSet, Tensor};

const TAG_INIT: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_TRIPLET: u64 = 3;
const TAG_META_SPLIT: u64 = 4;
const TAG_META_SAMPLE: u64 = 5;
const TAG_MASK: u64 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Inner meta step size; `None` uses `lr`.
    pub inner_lr: Option<f64>,
    pub mask: FeatureMask,
    pub weights: LossWeights,
    pub seed: u64,
    pub phase2: bool,
    /// One meta step after every Phase I step; otherwise Phase I runs first
    /// for [`SEQUENTIAL_PHASE1_SHARE`] of the budget, then Phase II.
    pub interleave: bool,
    pub val_every: usize,
    /// Share of each domain's training data used as meta-train.
    pub meta_frac: f64,
    pub augment: AugmentSpec,
    pub hidden: Vec<usize>,
    pub embed: usize,
    /// Triplets per step; `None` uses `batch`.
    pub triplet_batch: Option<usize>,
}

pub const SEQUENTIAL_PHASE1_SHARE: f64 = 0.8;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch: 32,
            lr: 5e-5,
            inner_lr: None,
            mask: FeatureMask::ALL,
            weights: LossWeights::default(),
            seed: 0,
            phase2: true,
            interleave: true,
            val_every: 50,
            meta_frac: 0.5,
            augment: AugmentSpec::default(),
            hidden: vec![128, 64],
            embed: 32,
            triplet_batch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if self.batch < 2 {
            return Err(Error::invalid("batch must be >= 2"));
        }
        if !(self.lr > 0.0) || self.inner_lr.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.val_every == 0 {
            return Err(Error::invalid("val_every must be >= 1"));
        }
        self.mask.validate()?;
        self.weights.validate()?;
        self.augment.validate()
    }

    pub fn inner_lr(&self) -> f64 {
        self.inner_lr.unwrap_or(self.lr)
    }

    pub fn encoder(&self, input: usize) -> EncoderConfig {
        EncoderConfig {
            input,
            hidden: self.hidden.clone(),
            embed: self.embed,
        }
    }

    pub fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        })
    }
}

/// Images with class labels and source-domain positions.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub images: Vec<&'a ImageTensor>,
    pub y: Vec<usize>,
    /// Position of each example's domain among the sources.
    pub domains: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn gather(ds: &'a DomainDataset, split: &LodoSplit, refs: &[ExampleRef]) -> Result<Self> {
        let mut b = Batch {
            images: Vec::with_capacity(refs.len()),
            y: Vec::with_capacity(refs.len()),
            domains: Vec::with_capacity(refs.len()),
        };
        for &r in refs {
            let e = ds.example(r);
            let pos = split
                .source_position(e.h)
                .ok_or_else(|| Error::Data(format!("example from domain {} is not a source", e.h)))?;
            b.images.push(&e.image);
            b.y.push(e.y);
            b.domains.push(pos);
        }
        Ok(b)
    }

    /// Images and class labels only; domain labels are never read.
    pub fn unlabeled_domains(ds: &'a DomainDataset, refs: &[ExampleRef]) -> Self {
        let examples: Vec<_> = refs.iter().map(|&r| ds.example(r)).collect();
        Batch {
            images: examples.iter().map(|e| &e.image).collect(),
            y: examples.iter().map(|e| e.y).collect(),
            domains: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// The alignment loss had no `(domain pair, class)` term this step.
    pub alignment_empty: bool,
}

/// One joint step on every active objective, followed by one Adam update of
/// every parameter of the model.
pub fn phase1_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    config: &TrainConfig,
    seed: u64,
) -> Result<StepOutcome> {
    let w = &config.weights;
    let mask = model.config.mask;
    let active = losses::active_components(mask);
    if active[losses::ALIGN] {
        let mut ds = batch.domains.clone();
        ds.sort_unstable();
        ds.dedup();
        if ds.len() < 2 {
            return Err(Error::invalid(
                "alignment loss needs a batch spanning at least 2 source domains",
            ));
        }
    }

    let g = Graph::new();
    let p = model.params.bind(&g, |_| true);
    let x = g.constant(images_to_tensor(&batch.images)?);
    let t = encode(&model.config, &p, x)?;
    let mut comps: [Option<crate::Var>; 7] = [None; 7];
    let mut alignment_empty = false;

    if active[losses::SSL] {
        let n_triplets = config.triplet_batch.unwrap_or(config.batch);
        let tb = make_triplet_batch(&batch.images, &config.augment, n_triplets, seed)?;
        let mut all: Vec<&ImageTensor> = tb.anchors.iter().collect();
        all.extend(&tb.positives);
        all.extend(&tb.negatives);
        let mut ids = tb.anchor_source.clone();
        ids.extend(&tb.anchor_source);
        ids.extend(&tb.negative_source);
        let z = encoder_forward(&model.config, &p, Extractor::Alpha, g.constant(images_to_tensor(&all)?))?;
        let triples = losses::mine_semi_hard(&z.value(), &ids, w.mining_margin)?;
        comps[losses::SSL] = Some(losses::mined_triplet_loss(z, &triples, w.margin)?);
    }
    if active[losses::ALIGN] {
        let rows = losses::soft_confusion_rows(&p, t.require(Extractor::Beta)?, &batch.y, &batch.domains, w.tau)?;
        let a = losses::alignment_loss(&g, &rows, model.config.n_classes, w)?;
        if a.empty {
            log::warn!("alignment loss: no class shared by two domains in this batch");
        }
        alignment_empty = a.empty;
        comps[losses::ALIGN] = Some(a.loss);
    }
    if active[losses::SPECIFIC] {
        let logits = head_gamma(&p, t.require(Extractor::Gamma)?)?;
        comps[losses::SPECIFIC] = Some(losses::specific_loss(logits, &batch.domains)?);
    }
    for (slot, (e1, e2)) in [
        (losses::COV_AB, (Extractor::Alpha, Extractor::Beta)),
        (losses::COV_AG, (Extractor::Alpha, Extractor::Gamma)),
        (losses::COV_BG, (Extractor::Beta, Extractor::Gamma)),
    ] {
        if active[slot] {
            let c = losses::cov_loss(t.require(e1)?, t.require(e2)?)?;
            comps[slot] = Some(c.scale(w.cov_sign())?);
        }
    }
    let out = heads(&model.config, &p, &t, mask)?;
    comps[losses::CLASS] = Some(losses::classification_loss(out.c, &batch.y)?);

    let (total, report) = losses::total_loss(&g, &comps, &w.a)?;
    let grads = p.gradients(&g.backward(total)?);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    adam.step(&mut model.params, &names, &grads)?;
    Ok(StepOutcome {
        report,
        alignment_empty,
    })
}

/// Result of one inner/outer evaluation of a first-order meta step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaOutcome {
    pub inner_loss: f64,
    /// `f(ω̃, H_te)`.
    pub meta_loss: f64,
    /// `ω̃ = ω − lr_inner · ∇f(ω, H_tr)`.
    pub adapted: ParamSet,
    /// `∇f(ω̃, H_te)`, applied to `ω` as the first-order meta gradient.
    pub gradient: BTreeMap<String, Tensor>,
}

/// A loss and its gradient with respect to the parameters it is given.
pub trait Objective {
    fn eval(&self, omega: &ParamSet) -> Result<(f64, BTreeMap<String, Tensor>)>;
}

impl<F: Fn(&ParamSet) -> Result<(f64, BTreeMap<String, Tensor>)>> Objective for F {
    fn eval(&self, omega: &ParamSet) -> Result<(f64, BTreeMap<String, Tensor>)> {
        self(omega)
    }
}

/// Inner gradient step on `f_tr`, then the gradient of `f_te` at the adapted point.
pub fn first_order_meta<A: Objective, B: Objective>(
    omega: &ParamSet,
    inner_lr: f64,
    f_tr: &A,
    f_te: &B,
) -> Result<MetaOutcome> {
    let (inner_loss, g_tr) = f_tr.eval(omega)?;
    let mut adapted = omega.clone();
    for name in omega.names() {
        let g = g_tr.get(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        let t = adapted.get_mut(name).expect("cloned from omega");
        for (v, gv) in t.data_mut().iter_mut().zip(g.data()) {
            *v -= inner_lr * gv;
        }
    }
    let (meta_loss, gradient) = f_te.eval(&adapted)?;
    Ok(MetaOutcome {
        inner_loss,
        meta_loss,
        adapted,
        gradient,
    })
}

/// [`first_order_meta`] for each `(f_tr, f_te)` task; returns the mean meta
/// loss and the task-averaged gradient, or `None` when there are no tasks.
pub fn averaged_meta_gradient<A: Objective, B: Objective>(
    omega: &ParamSet,
    inner_lr: f64,
    tasks: &[(A, B)],
) -> Result<Option<(f64, BTreeMap<String, Tensor>)>> {
    if tasks.is_empty() {
        return Ok(None);
    }
    let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut meta_loss = 0.0;
    for (f_tr, f_te) in tasks {
        let out = first_order_meta(omega, inner_lr, f_tr, f_te)?;
        meta_loss += out.meta_loss;
        for (name, g) in out.gradient {
            match sum.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    let inv = 1.0 / tasks.len() as f64;
    for g in sum.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Some((meta_loss * inv, sum)))
}

/// Parameters updated by the meta step: the γ path and the classifier.
pub fn meta_parameter_names(params: &ParamSet) -> Vec<String> {
    params.names_with_prefix(&["gamma.", "ln.gamma.", "head_c."])
}

/// Parameters the meta step must never touch.
pub fn frozen_parameter_names(params: &ParamSet) -> Vec<String> {
    params.names_with_prefix(&["alpha.", "beta.", "ln.alpha.", "ln.beta.", "head_beta.", "head_gamma."])
}

/// Class cross-entropy of the classifier on frozen α/β features and the γ
/// path taken from `omega`; returns the loss and its gradient on `omega`.
pub fn meta_objective(model: &Model, omega: &ParamSet, batch: &Batch) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut merged = model.params.clone();
    for (name, t) in omega.iter() {
        merged.insert(name, t.clone());
    }
    let g = Graph::new();
    let p = merged.bind(&g, |n| omega.contains(n));
    let x = g.constant(images_to_tensor(&batch.images)?);
    let t = encode(&model.config, &p, x)?;
    let out = heads(&model.config, &p, &t, model.config.mask)?;
    let loss = losses::classification_loss(out.c, &batch.y)?;
    let grads = g.backward(loss)?;
    Ok((loss.item(), p.gradients(&grads)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaReport {
    pub meta_loss: f64,
    pub domains_used: usize,
    /// Frozen tensors whose bits changed during the step (always expected 0).
    pub frozen_violations: usize,
}

/// For each source domain: inner step on a meta-train sample, gradient of the
/// meta-test sample at the adapted point; the domain-averaged gradient drives
/// one Adam step of the meta parameters.
pub fn phase2_meta_step(
    model: &mut Model,
    adam: &mut Adam,
    ds: &DomainDataset,
    split: &LodoSplit,
    meta: &crate::datasets::MetaSplit,
    config: &TrainConfig,
    seed: u64,
) -> Result<MetaReport> {
    let names = meta_parameter_names(&model.params);
    let frozen_names = frozen_parameter_names(&model.params);
    let frozen_before = model.params.subset(&frozen_names);
    let omega = model.params.subset(&names);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // The whole step sees about one batch worth of examples per side.
    let per_domain = config.batch.div_ceil(meta.parts.len().max(1)).max(2);
    let mut tasks = Vec::new();
    for part in &meta.parts {
        if part.meta_test.is_empty() || part.meta_train.is_empty() {
            log::warn!(
                "meta step: domain {} has an empty meta split, skipped",
                ds.domain_name(part.domain)
            );
            continue;
        }
        let sample = |idx: &[usize], rng: &mut ChaCha8Rng| -> Vec<ExampleRef> {
            let mut v: Vec<usize> = idx.to_vec();
            v.shuffle(rng);
            v.truncate(per_domain);
            v.into_iter()
                .map(|index| ExampleRef {
                    domain: part.domain,
                    index,
                })
                .collect()
        };
        let tr = Batch::gather(ds, split, &sample(&part.meta_train, &mut rng))?;
        let te = Batch::gather(ds, split, &sample(&part.meta_test, &mut rng))?;
        let snapshot: &Model = model;
        tasks.push((
            move |w: &ParamSet| meta_objective(snapshot, w, &tr),
            move |w: &ParamSet| meta_objective(snapshot, w, &te),
        ));
    }
    let used = tasks.len();
    let mut meta_loss = 0.0;
    if let Some((loss, gradient)) = averaged_meta_gradient(&omega, config.inner_lr(), &tasks)? {
        drop(tasks);
        adam.step(&mut model.params, &names, &gradient)?;
        meta_loss = loss;
    }

    let frozen_violations = frozen_names
        .iter()
        .filter(|n| {
            let before = frozen_before.get(n).expect("snapshotted");
            let after = model.params.get(n).expect("never removed");
            before
                .data()
                .iter()
                .zip(after.data())
                .any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .count();
    Ok(MetaReport {
        meta_loss,
        domains_used: used,
        frozen_violations,
    })
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Parameters at the best validation accuracy.
    pub best: Model,
    pub last: Model,
    pub best_iteration: usize,
    /// Phase I loss reports as `(iteration, report)`.
    pub losses: Vec<(usize, LossReport)>,
    pub meta_losses: Vec<(usize, f64)>,
    /// Source-validation accuracy as `(iteration, accuracy)`.
    pub validation: Vec<(usize, f64)>,
    pub frozen_violations: usize,
    pub alignment_empty_steps: usize,
}

fn validate_on(model: &Model, ds: &DomainDataset, refs: &[ExampleRef]) -> Result<f64> {
    let b = Batch::unlabeled_domains(ds, refs);
    predict(model, &b.images, &b.y)?.accuracy()
}

struct Tracker {
    best: Option<(usize, f64, Model)>,
    validation: Vec<(usize, f64)>,
}

impl Tracker {
    fn observe(&mut self, it: usize, model: &Model, ds: &DomainDataset, val: &[ExampleRef]) -> Result<()> {
        let acc = if val.is_empty() {
            0.0
        } else {
            validate_on(model, ds, val)?
        };
        self.validation.push((it, acc));
        if self.best.as_ref().is_none_or(|(_, b, _)| acc >= *b) {
            self.best = Some((it, acc, model.clone()));
        }
        Ok(())
    }
}

fn model_config(ds: &DomainDataset, split: &LodoSplit, config: &TrainConfig) -> ModelConfig {
    ModelConfig::new(
        config.encoder(ds.input_size()),
        ds.n_classes(),
        split.sources.len(),
        config.mask,
    )
}

/// Trains the three-extractor model on the sources of `split`.
pub fn train_run(ds: &DomainDataset, split: &LodoSplit, config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    let mut model = Model::init(model_config(ds, split, config), derive_seed(config.seed, TAG_INIT))?;
    let mut adam = config.adam();
    let mut meta_adam = config.adam();
    let mut batches = BatchIter::new(
        split.train_refs(),
        config.batch,
        derive_seed(config.seed, TAG_BATCH),
        true,
    )?;
    let val = split.val_refs();

    let phase1_iters = if !config.phase2 || config.interleave {
        config.iterations
    } else {
        ((SEQUENTIAL_PHASE1_SHARE * config.iterations as f64).round() as usize).clamp(1, config.iterations)
    };

    let mut out_losses = Vec::new();
    let mut meta_losses = Vec::new();
    let mut frozen_violations = 0;
    let mut alignment_empty_steps = 0;
    let mut tracker = Tracker {
        best: None,
        validation: Vec::new(),
    };

    for it in 1..=config.iterations {
        let run_p1 = it <= phase1_iters;
        let run_p2 = config.phase2 && (config.interleave || it > phase1_iters);
        let result = (|| -> Result<()> {
            if run_p1 {
                let refs = batches.next().expect("endless iterator");
                let batch = Batch::gather(ds, split, &refs)?;
                let seed = derive_seed(derive_seed(config.seed, TAG_TRIPLET), it as u64);
                let o = phase1_step(&mut model, &mut adam, &batch, config, seed)?;
                alignment_empty_steps += usize::from(o.alignment_empty);
                out_losses.push((it, o.report));
            }
            if run_p2 {
                let meta = meta_split(
                    ds,
                    split,
                    config.meta_frac,
                    derive_seed(derive_seed(config.seed, TAG_META_SPLIT), it as u64),
                )?;
                let seed = derive_seed(derive_seed(config.seed, TAG_META_SAMPLE), it as u64);
                let r = phase2_meta_step(&mut model, &mut meta_adam, ds, split, &meta, config, seed)?;
                frozen_violations += r.frozen_violations;
                meta_losses.push((it, r.meta_loss));
            }
            if !model.params.all_finite() {
                return Err(Error::NonFinite { op: "parameter update" });
            }
            if it % config.val_every == 0 || it == config.iterations {
                tracker.observe(it, &model, ds, &val)?;
            }
            Ok(())
        })();
        result.map_err(|e| e.at_iteration(it))?;
    }

    let (best_iteration, _, best) = tracker.best.expect("validated at the last iteration");
    Ok(RunOutput {
        best,
        last: model,
        best_iteration,
        losses: out_losses,
        meta_losses,
        validation: tracker.validation,
        frozen_violations,
        alignment_empty_steps,
    })
}

/// Pooled-source cross-entropy training of a single β-architecture encoder
/// and classifier. Domain labels are never read.
pub fn erm_baseline_run(ds: &DomainDataset, split: &LodoSplit, config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    let mut model = Model::init(
        ModelConfig::erm(config.encoder(ds.input_size()), ds.n_classes()),
        derive_seed(config.seed, TAG_INIT),
    )?;
    let mut adam = config.adam();
    let mut batches = BatchIter::new(
        split.train_refs(),
        config.batch,
        derive_seed(config.seed, TAG_BATCH),
        false,
    )?;
    let val = split.val_refs();
    let mut tracker = Tracker {
        best: None,
        validation: Vec::new(),
    };
    let mut out_losses = Vec::new();
    for it in 1..=config.iterations {
        let result = (|| -> Result<()> {
            let refs = batches.next().expect("endless iterator");
            let batch = Batch::unlabeled_domains(ds, &refs);
            let g = Graph::new();
            let p = model.params.bind(&g, |_| true);
            let t = encode(&model.config, &p, g.constant(images_to_tensor(&batch.images)?))?;
            let out = heads(&model.config, &p, &t, model.config.mask)?;
            let mut comps: [Option<crate::Var>; 7] = [None; 7];
            comps[losses::CLASS] = Some(losses::classification_loss(out.c, &batch.y)?);
            let (total, report) = losses::total_loss(&g, &comps, &config.weights.a)?;
            let grads = p.gradients(&g.backward(total)?);
            let names: Vec<String> = model.params.names().map(str::to_string).collect();
            adam.step(&mut model.params, &names, &grads)?;
            out_losses.push((it, report));
            if it % config.val_every == 0 || it == config.iterations {
                tracker.observe(it, &model, ds, &val)?;
            }
            Ok(())
        })();
        result.map_err(|e| e.at_iteration(it))?;
    }
    let (best_iteration, _, best) = tracker.best.expect("validated at the last iteration");
    Ok(RunOutput {
        best,
        last: model,
        best_iteration,
        losses: out_losses,
        meta_losses: Vec::new(),
        validation: tracker.validation,
        frozen_violations: 0,
        alignment_empty_steps: 0,
    })
}

/// Class predictions of `model` on the held-out target domain.
pub fn evaluate_target(model: &Model, ds: &DomainDataset, split: &LodoSplit) -> Result<Predictions> {
    let b = Batch::unlabeled_domains(ds, &ds.refs(split.target));
    predict(model, &b.images, &b.y)
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub mask: FeatureMask,
    pub metrics: MetricsRow,
    pub run: RunOutput,
}

/// Trains one model per non-empty feature mask (singles, pairs, all three)
/// and scores each on the target domain. Runs are independent and execute
/// in parallel, each with its own derived seed.
pub fn ablation_matrix(ds: &DomainDataset, split: &LodoSplit, config: &TrainConfig) -> Result<Vec<AblationRun>> {
    FeatureMask::ablation_rows()
        .into_par_iter()
        .enumerate()
        .map(|(i, mask)| {
            let cfg = TrainConfig {
                mask,
                seed: derive_seed(config.seed, (TAG_MASK << 8) | i as u64),
                ..config.clone()
            };
            let run = train_run(ds, split, &cfg)?;
            let preds = evaluate_target(&run.best, ds, split)?;
            let metrics = MetricsRow::from_predictions(
                ds.domain_name(split.target),
                config.seed,
                &mask.to_string(),
                cfg.phase2,
                &preds,
            )?;
            Ok(AblationRun { mask, metrics, run })
        })
        .collect()
}
