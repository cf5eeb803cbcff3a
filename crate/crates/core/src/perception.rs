//! Visual-side perception: aspect-category detection heads for images and
//! RoIs, visual feature projection, and the per-sample image pipeline that
//! gathers file-based features into padded, masked batches.
//!
//! Object detection and convolutional feature extraction happen upstream;
//! this module consumes their outputs as feature files.

use std::collections::BTreeSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::datamodel::dataset::FeatureStore;
use crate::datamodel::types::{
    AspectCategory, MultimodalSample, FEATURE_DIM, GRID_CELLS,
};
use crate::error::{Error, Result};
use crate::model::{head_schema, init_head_params, validate_against_schema};
use crate::numerics::{kernels, Graph, ParamSet, Tensor};
use crate::rng::SeedTree;
use crate::training::{Adam, AdamConfig};

/// Sigmoid probability above which an image is tagged with a category.
pub const CATEGORY_THRESHOLD: f64 = 0.5;

/// Category detection heads: a multi-label linear+sigmoid head over pooled
/// image grids and a multi-class linear+softmax head over RoI vectors.
#[derive(Debug, Clone)]
pub struct CategoryHeads {
    params: ParamSet,
}

impl CategoryHeads {
    pub fn new(params: ParamSet) -> Result<Self> {
        validate_against_schema(&params, &head_schema())?;
        Ok(CategoryHeads { params })
    }

    /// Randomly initialized heads (training start).
    pub fn init(tree: &SeedTree) -> Result<Self> {
        CategoryHeads::new(init_head_params(tree)?)
    }

    /// All-zero heads: image probabilities are exactly 0.5 and RoI
    /// distributions are uniform.
    pub fn zeros() -> Self {
        let mut params = ParamSet::new();
        for (name, shape, _) in head_schema() {
            params.insert(&name, Tensor::zeros(shape).expect("valid shape")).expect("unique");
        }
        CategoryHeads { params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Per-aspect probabilities that the image shows each category: the
    /// grid is mean-pooled to one vector, then passed through the
    /// linear+sigmoid head.
    pub fn detect_image_categories(&self, grid: &Tensor) -> Result<Vec<f64>> {
        if grid.shape() != [GRID_CELLS, FEATURE_DIM] {
            return Err(Error::shape(
                "detect_image_categories",
                format!("grid {:?}, expected [{GRID_CELLS}, {FEATURE_DIM}]", grid.shape()),
            ));
        }
        let pooled = kernels::mean_pool_rows(grid)?;
        let logits = kernels::linear(
            &pooled,
            self.params.get("head.img.w")?,
            self.params.get("head.img.b")?,
        )?;
        Ok(kernels::sigmoid(&logits).into_data())
    }

    /// Categories whose probability clears [`CATEGORY_THRESHOLD`].
    pub fn image_category_set(&self, grid: &Tensor) -> Result<BTreeSet<AspectCategory>> {
        let probs = self.detect_image_categories(grid)?;
        Ok(AspectCategory::ALL
            .iter()
            .zip(&probs)
            .filter(|(_, &p)| p > CATEGORY_THRESHOLD)
            .map(|(&a, _)| a)
            .collect())
    }

    /// Six-way category distribution for one RoI feature vector.
    pub fn detect_roi_category(&self, roi: &Tensor) -> Result<Vec<f64>> {
        let row = roi_as_row(roi)?;
        let logits = kernels::linear(
            &row,
            self.params.get("head.roi.w")?,
            self.params.get("head.roi.b")?,
        )?;
        Ok(kernels::softmax_rows(&logits)?.into_data())
    }

    /// Argmax category of the RoI distribution (lowest index on ties).
    pub fn roi_category(&self, roi: &Tensor) -> Result<AspectCategory> {
        let probs = self.detect_roi_category(roi)?;
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("six classes");
        Ok(AspectCategory::from_index(best).expect("index in range"))
    }
}

fn roi_as_row(roi: &Tensor) -> Result<Tensor> {
    match roi.shape() {
        [FEATURE_DIM] => Tensor::new(vec![1, FEATURE_DIM], roi.data().to_vec()),
        [1, FEATURE_DIM] => Ok(roi.clone()),
        other => Err(Error::shape(
            "roi_features",
            format!("{other:?}, expected [{FEATURE_DIM}]"),
        )),
    }
}

/// Learned projections taking 2048-dimensional visual features into the
/// model's hidden width.
#[derive(Debug, Clone)]
pub struct VisualProjection {
    /// Grid projection, `(d, 2048)`.
    pub w_i: Tensor,
    /// RoI projection, `(d, 2048)`.
    pub w_r: Tensor,
}

impl VisualProjection {
    /// Extracts the projections from a model parameter set, checking they
    /// match the configured hidden width.
    pub fn from_params(params: &ParamSet, d: usize) -> Result<Self> {
        let w_i = params.get("vis.wi")?.clone();
        let w_r = params.get("vis.wr")?.clone();
        for (name, w) in [("vis.wi", &w_i), ("vis.wr", &w_r)] {
            if w.shape() != [d, FEATURE_DIM] {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, expected [{d}, {FEATURE_DIM}]",
                    w.shape()
                )));
            }
        }
        Ok(VisualProjection { w_i, w_r })
    }

    pub fn d(&self) -> usize {
        self.w_i.rows()
    }

    /// Projects a `(49, 2048)` grid to `(d, 49)`: column k is the projected
    /// cell k.
    pub fn project_grid(&self, grid: &Tensor) -> Result<Tensor> {
        if grid.shape() != [GRID_CELLS, FEATURE_DIM] {
            return Err(Error::shape(
                "project_grid",
                format!("grid {:?}, expected [{GRID_CELLS}, {FEATURE_DIM}]", grid.shape()),
            ));
        }
        kernels::matmul(&self.w_i, grid, false, true)
    }

    /// Projects one RoI vector to length `d`.
    pub fn project_roi(&self, roi: &Tensor) -> Result<Tensor> {
        let row = roi_as_row(roi)?;
        let col = kernels::matmul(&self.w_r, &row, false, true)?;
        Tensor::new(vec![self.d()], col.into_data())
    }
}

/// One sample's gathered visual evidence, padded and masked to fixed slot
/// counts. A `true` mask means the slot is padding; padded slots hold no
/// features and zero boxes.
#[derive(Debug, Clone)]
pub struct VisualBatch {
    pub k_max: usize,
    pub j_max: usize,
    /// Raw grid features per image slot, `None` when padded.
    pub grids: Vec<Option<Rc<Tensor>>>,
    /// `true` for padded image slots.
    pub image_mask: Vec<bool>,
    /// Raw RoI features per image and RoI slot.
    pub rois: Vec<Vec<Option<Rc<Tensor>>>>,
    /// `true` for padded RoI slots.
    pub roi_mask: Vec<Vec<bool>>,
    /// RoI boxes `(x, y, w, h)`; zeros for padded slots.
    pub boxes: Vec<Vec<[f64; 4]>>,
    /// Union of per-image category sets (gold when annotated, otherwise
    /// detected when heads are supplied, otherwise empty).
    pub image_categories: BTreeSet<AspectCategory>,
    /// Union of per-RoI categories under the same precedence.
    pub roi_categories: BTreeSet<AspectCategory>,
}

impl VisualBatch {
    pub fn real_images(&self) -> usize {
        self.image_mask.iter().filter(|&&m| !m).count()
    }

    pub fn real_rois(&self, image: usize) -> usize {
        self.roi_mask[image].iter().filter(|&&m| !m).count()
    }
}

/// Gathers one sample's visual side: loops images in order, then their
/// RoIs, loading features, collecting categories, and padding to
/// `k_max`/`j_max` slots.
///
/// Gold category annotations take precedence; otherwise the supplied heads
/// predict them; with neither, category sets stay empty.
pub fn run_image_pipeline(
    sample: &MultimodalSample,
    store: &FeatureStore,
    heads: Option<&CategoryHeads>,
    k_max: usize,
    j_max: usize,
) -> Result<VisualBatch> {
    if sample.images.len() > k_max {
        return Err(Error::data(format!(
            "sample {} has {} images, more than the {k_max} slots",
            sample.id,
            sample.images.len()
        )));
    }
    let mut batch = VisualBatch {
        k_max,
        j_max,
        grids: vec![None; k_max],
        image_mask: vec![true; k_max],
        rois: vec![vec![None; j_max]; k_max],
        roi_mask: vec![vec![true; j_max]; k_max],
        boxes: vec![vec![[0.0; 4]; j_max]; k_max],
        image_categories: BTreeSet::new(),
        roi_categories: BTreeSet::new(),
    };
    for (k, image) in sample.images.iter().enumerate() {
        if image.rois.len() > j_max {
            return Err(Error::data(format!(
                "sample {}: image {} has {} RoIs, more than the {j_max} slots",
                sample.id,
                image.feature_ref,
                image.rois.len()
            )));
        }
        let grid = store.grid(&image.feature_ref)?;
        match (&image.categories, heads) {
            (Some(gold), _) => batch.image_categories.extend(gold.iter().copied()),
            (None, Some(h)) => batch.image_categories.extend(h.image_category_set(&grid)?),
            (None, None) => {}
        }
        batch.grids[k] = Some(grid);
        batch.image_mask[k] = false;
        for (j, roi) in image.rois.iter().enumerate() {
            let features = store.roi(&roi.feature_ref)?;
            match (roi.category, heads) {
                (Some(gold), _) => {
                    batch.roi_categories.insert(gold);
                }
                (None, Some(h)) => {
                    batch.roi_categories.insert(h.roi_category(&features)?);
                }
                (None, None) => {}
            }
            batch.rois[k][j] = Some(features);
            batch.roi_mask[k][j] = false;
            batch.boxes[k][j] = roi.bbox;
        }
    }
    Ok(batch)
}

/// Hyperparameters for category-head training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig { seed: 13, lr: 0.05, epochs: 60 }
    }
}

/// Trains the category heads on gold-annotated images and RoIs with their
/// own objectives (multi-label binary cross-entropy for images, softmax
/// cross-entropy for RoIs), full-batch, separately from the fusion model.
pub fn train_category_heads(
    samples: &[MultimodalSample],
    store: &FeatureStore,
    cfg: &HeadTrainConfig,
) -> Result<CategoryHeads> {
    if cfg.epochs == 0 || cfg.lr <= 0.0 {
        return Err(Error::config("head training needs positive epochs and learning rate"));
    }
    let mut image_rows: Vec<f64> = Vec::new();
    let mut image_targets: Vec<f64> = Vec::new();
    let mut roi_rows: Vec<f64> = Vec::new();
    let mut roi_targets: Vec<usize> = Vec::new();
    let n_aspects = AspectCategory::ALL.len();
    for sample in samples {
        for image in &sample.images {
            if let Some(gold) = &image.categories {
                let grid = store.grid(&image.feature_ref)?;
                image_rows.extend(kernels::mean_pool_rows(&grid)?.data());
                let mut hot = vec![0.0; n_aspects];
                for a in gold {
                    hot[a.index()] = 1.0;
                }
                image_targets.extend(hot);
            }
            for roi in &image.rois {
                if let Some(gold) = roi.category {
                    roi_rows.extend(store.roi(&roi.feature_ref)?.data());
                    roi_targets.push(gold.index());
                }
            }
        }
    }
    let n_images = image_targets.len() / n_aspects;
    let n_rois = roi_targets.len();
    if n_images == 0 && n_rois == 0 {
        return Err(Error::data("no category-annotated images or RoIs to train on"));
    }
    let image_x = (n_images > 0)
        .then(|| Tensor::new(vec![n_images, FEATURE_DIM], image_rows))
        .transpose()?;
    let roi_x = (n_rois > 0)
        .then(|| Tensor::new(vec![n_rois, FEATURE_DIM], roi_rows))
        .transpose()?;

    let mut params = init_head_params(&SeedTree::new(cfg.seed))?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let mut losses = Vec::new();
        if let Some(x) = &image_x {
            let xn = g.leaf(x.clone());
            let logits = g.linear(xn, bound.id("head.img.w")?, bound.id("head.img.b")?)?;
            losses.push(g.bce(logits, &image_targets)?);
        }
        if let Some(x) = &roi_x {
            let xn = g.leaf(x.clone());
            let logits = g.linear(xn, bound.id("head.roi.w")?, bound.id("head.roi.b")?)?;
            losses.push(g.cross_entropy(logits, &roi_targets)?);
        }
        let loss = match losses[..] {
            [only] => only,
            [a, b] => g.add(a, b)?,
            _ => unreachable!("one or two objectives"),
        };
        g.backward(loss, 1.0)?;
        let grads = g.param_grads();
        adam.step(&mut params, &grads)?;
    }
    CategoryHeads::new(params)
}
