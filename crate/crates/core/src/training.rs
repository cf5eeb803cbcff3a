//! Joint training: configuration, the Adam optimizer, gradient clipping,
//! the loss over all aspect queries, the training loop, and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::dataset::FeatureStore;
use crate::datamodel::fcmt;
use crate::datamodel::preprocess::{preprocess, PreprocessOptions};
use crate::datamodel::types::{
    AspectCategory, MultimodalSample, SentimentLabel, FEATURE_DIM, J_MAX, K_MAX, N_MAX,
};
use crate::datamodel::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::fusion::{
    fused_logits, geometry_matrix, image_guided_rows, object_relation_rows, roi_aware_row,
};
use crate::metrics::{evaluate_aspects, AspectEvalOptions, AspectReport};
use crate::model::{
    init_params, param_schema, validate_against_schema, AttnParams, DropoutCtx, ModelDims,
};
use crate::numerics::{BoundParams, Graph, NodeId, ParamSet, Tensor};
use crate::perception::{run_image_pipeline, CategoryHeads, VisualBatch};
use crate::rng::{shuffle, SeedTree};
use crate::textenc::{build_auxiliary_sequence, encoder_rows, AuxiliarySequence};

/// Ablation switches, one per removable component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Drop the image/RoI category segments from the auxiliary sentence.
    pub no_aux_categories: bool,
    /// Remove the geometric RoI-aware attention path entirely.
    pub no_geometric: bool,
    /// Remove all visual representations from the fused sequence.
    pub no_visual_features: bool,
    /// Feed raw whitespace-split text instead of preprocessed tokens.
    pub no_preprocess: bool,
}

/// Training hyperparameters. Defaults follow the reference setup; structure
/// fields feed [`ModelDims`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay; 1.0 keeps it constant.
    pub lr_decay: f64,
    /// Epochs trained at the full rate before `lr_decay` starts applying.
    pub lr_hold: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub dropout: f64,
    pub heads: usize,
    pub n_max: usize,
    pub k_max: usize,
    pub j_max: usize,
    /// Hidden width of the stand-in encoder (the reference backbone's 1024
    /// is out of desk-scale reach).
    pub d: usize,
    pub layers: usize,
    pub d_g: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop a run early once dev macro-F1 reaches this value.
    pub early_stop_f1: Option<f64>,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            lr_decay: 1.0,
            lr_hold: 0,
            batch_size: 4,
            epochs: 30,
            seeds: vec![1, 2, 3, 4, 5],
            dropout: 0.1,
            heads: 12,
            n_max: N_MAX,
            k_max: K_MAX,
            j_max: J_MAX,
            d: 96,
            layers: 2,
            d_g: 64,
            clip_norm: Some(1.0),
            early_stop_f1: None,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr decay {} outside (0, 1]", self.lr_decay)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.k_max == 0 || self.j_max == 0 {
            return Err(Error::config("k_max and j_max must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 || !c.is_finite() {
                return Err(Error::config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Model structure implied by this config for the given vocabulary.
    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            d_g: self.d_g,
            vocab_size,
            n_max: self.n_max,
            ffn_mult: 4,
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Adam with bias correction. Moments live per parameter name and are part
/// of checkpoints, so resuming reproduces the exact update sequence.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Restores an optimizer mid-run from checkpointed state.
    pub fn from_state(
        cfg: AdamConfig,
        step: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    ) -> Self {
        Adam { cfg, step, m, v }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Adjusts the step size mid-run (used by learning-rate schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Completed update count.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    /// Applies one update. Parameters without a gradient this step are left
    /// untouched, as are their moments.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bias1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .map_err(|_| Error::data(format!("gradient for unknown parameter {name}")))?;
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()).expect("valid shape"));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()).expect("valid shape"));
            let (b1, b2, eps, lr) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.lr);
            for ((p, g), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient coordinate.
pub fn global_grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|&g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients in place so their global norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for g in t.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Text handling implied by the ablation switches.
pub fn preprocess_options(flags: &AblationFlags) -> PreprocessOptions {
    PreprocessOptions { enabled: !flags.no_preprocess, ..Default::default() }
}

/// Builds the vocabulary from the given samples' (usually the train
/// split's) preprocessed text.
pub fn build_vocab(samples: &[&MultimodalSample], flags: &AblationFlags) -> Vocabulary {
    let options = preprocess_options(flags);
    let mut corpus: Vec<String> = Vec::new();
    for sample in samples {
        corpus.extend(preprocess(&sample.text, &options));
    }
    Vocabulary::build(corpus.iter().map(String::as_str))
}

/// One sample with everything the forward pass needs precomputed: the
/// visual slots, the per-image pairwise geometry, the six aspect-query
/// sequences, and the six 4-way targets.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub visual: VisualBatch,
    /// Per image slot, present when the image is real and has RoIs.
    pub geometry: Vec<Option<Tensor>>,
    /// One auxiliary sequence per aspect, in canonical order.
    pub sequences: Vec<AuxiliarySequence>,
    /// Target class per aspect (`SentimentLabel` indices).
    pub targets: Vec<usize>,
}

/// Expands samples into model-ready form. Category heads fill in
/// auxiliary-sentence categories for unannotated images; gold annotations
/// always win.
pub fn prepare_samples(
    samples: &[&MultimodalSample],
    store: &FeatureStore,
    heads: Option<&CategoryHeads>,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Vec<PreparedSample>> {
    let options = preprocess_options(&cfg.ablation);
    let empty = std::collections::BTreeSet::new();
    let mut prepared = Vec::with_capacity(samples.len());
    for sample in samples {
        let visual = run_image_pipeline(sample, store, heads, cfg.k_max, cfg.j_max)?;
        let context = preprocess(&sample.text, &options);
        let (img_cats, roi_cats) = if cfg.ablation.no_aux_categories {
            (&empty, &empty)
        } else {
            (&visual.image_categories, &visual.roi_categories)
        };
        let mut sequences = Vec::with_capacity(AspectCategory::ALL.len());
        let mut targets = Vec::with_capacity(AspectCategory::ALL.len());
        for aspect in AspectCategory::ALL {
            sequences.push(build_auxiliary_sequence(
                aspect, &context, img_cats, roi_cats, vocab, cfg.n_max,
            )?);
            targets.push(sample.label(aspect).index());
        }
        let mut geometry = vec![None; cfg.k_max];
        for (k, slot) in geometry.iter_mut().enumerate() {
            if visual.image_mask[k] {
                continue;
            }
            let real = visual.real_rois(k);
            if real > 0 {
                *slot = Some(geometry_matrix(&visual.boxes[k][..real], cfg.d_g)?);
            }
        }
        prepared.push(PreparedSample {
            id: sample.id.clone(),
            visual,
            geometry,
            sequences,
            targets,
        });
    }
    Ok(prepared)
}

/// Builds the forward graph for one sample and returns the six `(1, 4)`
/// logit rows, one per aspect query. Image projections and relation rows
/// are built once and shared by all six queries. `rate` of 0 disables
/// dropout (evaluation mode).
pub fn sample_logits(
    g: &mut Graph,
    bound: &BoundParams,
    dims: &ModelDims,
    cfg: &TrainConfig,
    sample: &PreparedSample,
    tree: &SeedTree,
    scope: &str,
    rate: f64,
) -> Result<Vec<NodeId>> {
    let flags = cfg.ablation;
    let visual_on = !flags.no_visual_features;
    let mut grid_projs = Vec::new();
    let mut h_o: Vec<Option<NodeId>> = Vec::new();
    if visual_on {
        let mut shared = DropoutCtx::new(*tree, format!("{scope}/shared"), rate);
        let wi = bound.id("vis.wi")?;
        let wr = bound.id("vis.wr")?;
        for k in 0..sample.visual.k_max {
            if sample.visual.image_mask[k] {
                continue;
            }
            let grid = sample.visual.grids[k].as_ref().expect("real image slot has a grid");
            let leaf = g.leaf((**grid).clone());
            grid_projs.push(g.matmul(leaf, wi, false, true)?);
            if flags.no_geometric {
                continue;
            }
            let real = sample.visual.real_rois(k);
            if real == 0 {
                h_o.push(None);
                continue;
            }
            let mut data = Vec::with_capacity(real * FEATURE_DIM);
            for j in 0..real {
                let roi = sample.visual.rois[k][j].as_ref().expect("real RoI slot has features");
                data.extend_from_slice(roi.data());
            }
            let leaf = g.leaf(Tensor::new(vec![real, FEATURE_DIM], data)?);
            let v_r = g.matmul(leaf, wr, false, true)?;
            let geometry = sample.geometry[k].as_ref().expect("geometry for real RoIs");
            let (rows, _) = object_relation_rows(g, bound, dims, v_r, geometry, &mut shared)?;
            h_o.push(Some(rows));
        }
    }
    let cm = AttnParams::bind(bound, "cm")?;
    let mmr = AttnParams::bind(bound, "mmr")?;
    let mmf = AttnParams::bind(bound, "mmf")?;
    let mut logits = Vec::with_capacity(sample.sequences.len());
    for (i, seq) in sample.sequences.iter().enumerate() {
        let mut ctx = DropoutCtx::new(*tree, format!("{scope}/a{i}"), rate);
        let h_t = encoder_rows(g, bound, dims, seq, &mut ctx)?;
        let h_s = g.slice_rows(h_t, 0, 1)?;
        let mut h_i_rows = Vec::new();
        let mut h_r_rows = Vec::new();
        if visual_on {
            h_i_rows = image_guided_rows(g, &cm, h_s, &grid_projs, dims.heads, &mut ctx)?;
            for slot in &h_o {
                h_r_rows.push(roi_aware_row(g, &mmr, h_s, h_t, *slot, dims.heads, &mut ctx)?);
            }
        }
        logits.push(fused_logits(g, bound, &mmf, h_s, &h_i_rows, &h_r_rows, dims.heads, &mut ctx)?);
    }
    Ok(logits)
}

/// Mean negative log-likelihood over every (sample, aspect) pair in the
/// batch: all six aspect queries per sample, 4-way targets including
/// `none`. Aborts with the offending sample id on non-finite values.
pub fn forward_loss(
    g: &mut Graph,
    bound: &BoundParams,
    dims: &ModelDims,
    cfg: &TrainConfig,
    batch: &[&PreparedSample],
    tree: &SeedTree,
    scope: &str,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let mut rows = Vec::with_capacity(batch.len() * AspectCategory::ALL.len());
    let mut targets = Vec::with_capacity(rows.capacity());
    for sample in batch {
        let sample_scope = format!("{scope}/{}", sample.id);
        let logits =
            sample_logits(g, bound, dims, cfg, sample, tree, &sample_scope, cfg.dropout)?;
        for &row in &logits {
            if !g.value(row).data().iter().all(|v| v.is_finite()) {
                return Err(Error::data(format!(
                    "non-finite logits on sample {}; aborting",
                    sample.id
                )));
            }
        }
        rows.extend(logits);
        targets.extend_from_slice(&sample.targets);
    }
    let stacked = g.concat_rows(&rows)?;
    let loss = g.cross_entropy(stacked, &targets)?;
    if !g.value(loss).data()[0].is_finite() {
        let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
        return Err(Error::data(format!(
            "non-finite loss over batch [{}]; aborting",
            ids.join(", ")
        )));
    }
    Ok(loss)
}

/// Evaluation of one split in eval mode (dropout off): mean loss over all
/// (sample, aspect) pairs, the raw decisions, and the scored report.
pub struct EvalOutcome {
    pub loss: f64,
    /// `(aspect, gold, predicted)` per (sample, aspect) pair, in sample
    /// order.
    pub decisions: Vec<(AspectCategory, SentimentLabel, SentimentLabel)>,
    pub report: AspectReport,
}

/// Ties in the predicted distribution resolve to the lowest class index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the model over a prepared split in evaluation mode and scores it.
pub fn evaluate_split(
    params: &ParamSet,
    dims: &ModelDims,
    cfg: &TrainConfig,
    split: &[PreparedSample],
    options: AspectEvalOptions,
) -> Result<EvalOutcome> {
    if split.is_empty() {
        return Err(Error::data("cannot evaluate an empty split"));
    }
    let tree = SeedTree::new(0); // unused at rate 0
    let mut loss_sum = 0.0;
    let mut decisions = Vec::with_capacity(split.len() * AspectCategory::ALL.len());
    for sample in split {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let logits = sample_logits(&mut g, &bound, dims, cfg, sample, &tree, "eval", 0.0)?;
        let stacked = g.concat_rows(&logits)?;
        let loss = g.cross_entropy(stacked, &sample.targets)?;
        loss_sum += g.value(loss).data()[0];
        for (i, aspect) in AspectCategory::ALL.into_iter().enumerate() {
            let gold = SentimentLabel::from_index(sample.targets[i]).expect("valid target");
            let pred = SentimentLabel::from_index(argmax(g.value(logits[i]).row(0)))
                .expect("argmax in range");
            decisions.push((aspect, gold, pred));
        }
    }
    let report = evaluate_aspects(&decisions, options)?;
    Ok(EvalOutcome { loss: loss_sum / split.len() as f64, decisions, report })
}

/// One metrics-history line; epoch 0 holds the untrained baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
}

/// Writes history rows as CSV (`epoch,split,loss,macro_p,macro_r,macro_f1`).
pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Deterministic 80/20 split: every fifth sample (index ≡ 4 mod 5) goes to
/// dev, the rest to train.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::with_capacity(n - n / 5);
    let mut dev = Vec::with_capacity(n / 5);
    for i in 0..n {
        if i % 5 == 4 {
            dev.push(i);
        } else {
            train.push(i);
        }
    }
    (train, dev)
}

/// A trained model with everything needed to reproduce or resume it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub master_seed: u64,
    /// Parameters of the best-dev epoch.
    pub params: ParamSet,
    /// Optimizer state captured alongside `params`.
    pub adam: Adam,
    pub vocab: Vocabulary,
    pub epochs_run: usize,
    /// Epoch (1-based; 0 = untrained) whose dev macro-F1 was best.
    pub best_epoch: usize,
    /// Best dev macro-F1 (train macro-F1 when there is no dev split).
    pub best_f1: f64,
    pub history: Vec<HistoryRow>,
}

/// Trains one run from one seed: Adam over shuffled batches with global
/// gradient clipping, per-epoch train/dev evaluation, and best-dev
/// parameter retention. Optionally stops early once dev macro-F1 reaches
/// `early_stop_f1`.
pub fn train(
    samples: &[MultimodalSample],
    store: &FeatureStore,
    heads: Option<&CategoryHeads>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let (train_idx, dev_idx) = split_indices(samples.len());
    if train_idx.is_empty() {
        return Err(Error::data("no training samples after the split"));
    }
    let train_refs: Vec<&MultimodalSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let dev_refs: Vec<&MultimodalSample> = dev_idx.iter().map(|&i| &samples[i]).collect();
    let vocab = build_vocab(&train_refs, &cfg.ablation);
    let train_set = prepare_samples(&train_refs, store, heads, &vocab, cfg)?;
    let dev_set = prepare_samples(&dev_refs, store, heads, &vocab, cfg)?;
    let dims = cfg.dims(vocab.len());
    let tree = SeedTree::new(seed);
    let mut params = init_params(&dims, &tree)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let options = AspectEvalOptions::default();

    let mut history = Vec::new();
    let evaluate_epoch = |epoch: usize,
                          params: &ParamSet,
                          history: &mut Vec<HistoryRow>|
     -> Result<(f64, f64)> {
        let train_eval = evaluate_split(params, &dims, cfg, &train_set, options)?;
        history.push(HistoryRow {
            epoch,
            split: "train".into(),
            loss: train_eval.loss,
            macro_p: train_eval.report.macro_precision,
            macro_r: train_eval.report.macro_recall,
            macro_f1: train_eval.report.macro_f1,
        });
        let mut selection = train_eval.report.macro_f1;
        if !dev_set.is_empty() {
            let dev_eval = evaluate_split(params, &dims, cfg, &dev_set, options)?;
            history.push(HistoryRow {
                epoch,
                split: "dev".into(),
                loss: dev_eval.loss,
                macro_p: dev_eval.report.macro_precision,
                macro_r: dev_eval.report.macro_recall,
                macro_f1: dev_eval.report.macro_f1,
            });
            selection = dev_eval.report.macro_f1;
        }
        Ok((train_eval.loss, selection))
    };

    let (_, mut best_f1) = evaluate_epoch(0, &params, &mut history)?;
    let mut best = (params.clone(), adam.clone(), 0usize);
    let mut epochs_run = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let decay_epochs = epoch.saturating_sub(cfg.lr_hold + 1);
        adam.set_lr(cfg.learning_rate * cfg.lr_decay.powi(decay_epochs as i32));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle(&mut tree.stream(&format!("shuffle/e{epoch}")), &mut order);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let scope = format!("e{epoch}/s{step}");
            let loss = forward_loss(&mut g, &bound, &dims, cfg, &batch, &tree, &scope)
                .map_err(|e| Error::data(format!("epoch {epoch} step {step}: {e}")))?;
            g.backward(loss, 1.0)?;
            let mut grads = g.param_grads();
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(&mut params, &grads)?;
        }
        epochs_run = epoch;
        let (_, selection_f1) = evaluate_epoch(epoch, &params, &mut history)?;
        if selection_f1 > best_f1 || dev_set.is_empty() {
            best_f1 = selection_f1;
            best = (params.clone(), adam.clone(), epoch);
        }
        if let Some(target) = cfg.early_stop_f1 {
            if selection_f1 >= target {
                break 'epochs;
            }
        }
    }
    let (best_params, best_adam, best_epoch) = best;
    Ok(Checkpoint {
        config: cfg.clone(),
        master_seed: seed,
        params: best_params,
        adam: best_adam,
        vocab,
        epochs_run,
        best_epoch,
        best_f1,
        history,
    })
}

/// Trains one run per configured seed, in order.
pub fn train_multi(
    samples: &[MultimodalSample],
    store: &FeatureStore,
    heads: Option<&CategoryHeads>,
    cfg: &TrainConfig,
) -> Result<Vec<Checkpoint>> {
    cfg.seeds.iter().map(|&seed| train(samples, store, heads, cfg, seed)).collect()
}

/// Mean best macro-F1 over a set of runs.
pub fn mean_best_f1(runs: &[Checkpoint]) -> f64 {
    if runs.is_empty() {
        return 0.0;
    }
    runs.iter().map(|r| r.best_f1).sum::<f64>() / runs.len() as f64
}

const MANIFEST_FILE: &str = "manifest.json";
const VOCAB_FILE: &str = "vocab.txt";
const PARAMS_DIR: &str = "params";
const MOMENTS_DIR: &str = "moments";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    config: TrainConfig,
    adam: AdamConfig,
    adam_steps: u64,
    master_seed: u64,
    epochs_run: usize,
    best_epoch: usize,
    best_f1: f64,
    history: Vec<HistoryRow>,
    params: Vec<String>,
    moments: Vec<String>,
}

/// Writes a checkpoint directory: a JSON manifest, the vocabulary, and one
/// 64-bit tensor blob per parameter and per optimizer moment, so loading
/// reproduces training bit-exactly.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let params_dir = dir.join(PARAMS_DIR);
    let moments_dir = dir.join(MOMENTS_DIR);
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    fs::create_dir_all(&moments_dir).map_err(|e| Error::io(&moments_dir, e))?;
    for (name, tensor) in ckpt.params.iter() {
        fcmt::write_tensor(&params_dir.join(format!("{name}.fcmt")), tensor)?;
    }
    let (m, v) = ckpt.adam.moments();
    for (name, tensor) in m {
        fcmt::write_tensor(&moments_dir.join(format!("{name}.m.fcmt")), tensor)?;
    }
    for (name, tensor) in v {
        fcmt::write_tensor(&moments_dir.join(format!("{name}.v.fcmt")), tensor)?;
    }
    ckpt.vocab.save(&dir.join(VOCAB_FILE))?;
    let manifest = CheckpointManifest {
        format: 1,
        config: ckpt.config.clone(),
        adam: *ckpt.adam.config(),
        adam_steps: ckpt.adam.step_count(),
        master_seed: ckpt.master_seed,
        epochs_run: ckpt.epochs_run,
        best_epoch: ckpt.best_epoch,
        best_f1: ckpt.best_f1,
        history: ckpt.history.clone(),
        params: ckpt.params.names().cloned().collect(),
        moments: m.keys().cloned().collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint directory written by [`save_checkpoint`] and checks
/// the parameters against the schema implied by its config.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&json)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if manifest.format != 1 {
        return Err(Error::format(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let mut params = ParamSet::new();
    for name in &manifest.params {
        let tensor = fcmt::read_tensor(&dir.join(PARAMS_DIR).join(format!("{name}.fcmt")))?;
        params.insert(name, tensor)?;
    }
    validate_against_schema(&params, &param_schema(&manifest.config.dims(vocab.len())))?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for name in &manifest.moments {
        let dir = dir.join(MOMENTS_DIR);
        m.insert(name.clone(), fcmt::read_tensor(&dir.join(format!("{name}.m.fcmt")))?);
        v.insert(name.clone(), fcmt::read_tensor(&dir.join(format!("{name}.v.fcmt")))?);
    }
    let adam = Adam::from_state(manifest.adam, manifest.adam_steps, m, v);
    Ok(Checkpoint {
        config: manifest.config,
        master_seed: manifest.master_seed,
        params,
        adam,
        vocab,
        epochs_run: manifest.epochs_run,
        best_epoch: manifest.best_epoch,
        best_f1: manifest.best_f1,
        history: manifest.history,
    })
}
