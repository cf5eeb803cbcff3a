//! Planted-signal synthetic dataset generator.
//!
//! Every regularity a model could exploit is planted deliberately and
//! recorded in a recipe file, so tests can reason about what is learnable:
//!
//! * Each (aspect, polarity) pair owns a disjoint block of feature
//!   coordinates; grid cells and RoI vectors are block indicators plus
//!   Gaussian noise, making nearest-centroid decoding exact at zero noise.
//! * Explicitly mentioned aspects carry a fused cue token in the text.
//! * Implicit aspects leave no text cue; their evidence is an annotated
//!   image. A fraction of them are "conflicted": the grid cells and two tiny
//!   peripheral distractor RoIs carry a wrong polarity, and only the large
//!   central RoIs — distinguishable by box geometry alone — carry the truth.
//! * Unlabeled aspects sometimes receive a decoy image that is feature-wise
//!   identical to genuine evidence but has no category annotations, so
//!   presence cannot be inferred from visual features alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::datamodel::dataset::{write_dataset, DATASET_FILE, FEATURES_DIR};
use crate::datamodel::fcmt;
use crate::datamodel::preprocess::{preprocess, PreprocessOptions};
use crate::datamodel::types::{
    AspectCategory, ImageEntry, MultimodalSample, Roi, SentimentLabel, FEATURE_DIM,
    GRID_CELLS, K_MAX,
};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, shuffle, SeedTree};

/// Probability that an aspect is labeled at all.
const P_LABEL: f64 = 0.5;
/// Fraction of implicit aspects whose evidence is geometry-critical.
const CRITICAL_RATE: f64 = 0.4;
/// Probability that an explicit aspect also gets an evidence image.
const EXPLICIT_IMAGE_RATE: f64 = 0.4;
/// Probability of merging two explicit images into one two-category image.
const DUAL_IMAGE_RATE: f64 = 0.25;
/// Decoy probabilities per unlabeled aspect (disjoint draws).
const DECOY_PLAIN_RATE: f64 = 0.25;
const DECOY_CONFLICT_RATE: f64 = 0.18;
/// Coordinates per (aspect, polarity) feature block.
const CLUSTER_BLOCK: usize = 96;
/// Magnitude of active block coordinates. Sized so the cross-modal
/// association between aspect queries and visual evidence trains in tens
/// of epochs at toy widths, while nearest-centroid decoding stays exact.
const MAGNITUDE: f64 = 3.0;

const ASPECT_WORDS: [&str; 6] = ["vị_trí", "đồ_ăn", "phòng", "tiện_nghi", "dịch_vụ", "khu_chung"];
const SENTIMENT_WORDS: [&str; 3] = ["tệ", "tạm", "tuyệt"];
const FILLERS: [&str; 16] = [
    "hôm_qua", "chúng_tôi", "đã", "ở", "lại", "đây", "một", "đêm", "và", "cảm_thấy",
    "khá", "nói_chung", "thì", "cũng", "vậy", "nữa",
];

/// Generator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    /// Fraction of labeled aspects evidenced only by images.
    pub implicit_rate: f64,
    /// Standard deviation of per-coordinate feature noise.
    pub noise: f64,
}

/// Index of the feature block owned by an (aspect, polarity) pair.
pub fn cluster_index(aspect: AspectCategory, sentiment: SentimentLabel) -> Option<usize> {
    if sentiment == SentimentLabel::None {
        return None;
    }
    Some(aspect.index() * 3 + (sentiment.index() - 1))
}

/// Centroid of one cluster: `MAGNITUDE` on its block, zero elsewhere.
pub fn cluster_centroid(cluster: usize) -> Vec<f64> {
    let mut v = vec![0.0; FEATURE_DIM];
    let start = cluster * CLUSTER_BLOCK;
    for x in &mut v[start..start + CLUSTER_BLOCK] {
        *x = MAGNITUDE;
    }
    v
}

/// The fused text cue planted for an explicitly mentioned aspect.
pub fn cue_token(aspect: AspectCategory, sentiment: SentimentLabel) -> String {
    format!(
        "{}_{}",
        ASPECT_WORDS[aspect.index()],
        SENTIMENT_WORDS[sentiment.index() - 1]
    )
}

/// How one labeled aspect is evidenced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    /// Cue token in the text; optionally also an annotated image.
    Explicit { image: Option<String> },
    /// Annotated image only; grid and RoIs agree on the polarity.
    ImplicitPlain { image: String },
    /// Annotated image only; grid and distractor RoIs carry a wrong
    /// polarity and only box geometry identifies the truthful RoIs.
    ImplicitConflicted { image: String },
}

/// A decoy image planted on an unlabeled aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeDecoy {
    pub aspect: AspectCategory,
    pub conflicted: bool,
    /// None when the image was dropped by the per-sample image cap.
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeRoi {
    pub feature_ref: String,
    pub cluster: (AspectCategory, SentimentLabel),
    pub primary: bool,
    pub category_present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeImage {
    pub feature_ref: String,
    /// Clusters mixed into the grid cells.
    pub grid_clusters: Vec<(AspectCategory, SentimentLabel)>,
    /// Aspect categories annotated on the image, when present.
    pub categories: Option<BTreeSet<AspectCategory>>,
    pub rois: Vec<RecipeRoi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeSample {
    pub id: String,
    pub labels: BTreeMap<AspectCategory, SentimentLabel>,
    pub evidence: BTreeMap<AspectCategory, Evidence>,
    pub decoys: Vec<RecipeDecoy>,
    pub images: Vec<RecipeImage>,
    /// Images dropped by the K_MAX cap (always the lowest-priority ones).
    pub dropped_images: usize,
}

/// Full record of the planted truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub config: SynthConfig,
    pub samples: Vec<RecipeSample>,
}

/// File name of the recipe inside a generated dataset directory.
pub const RECIPE_FILE: &str = "recipe.json";

struct PendingRoi {
    cluster: (AspectCategory, SentimentLabel),
    bbox: [f64; 4],
    primary: bool,
    category_present: bool,
}

struct PendingImage {
    grid_clusters: Vec<(AspectCategory, SentimentLabel)>,
    categories: Option<BTreeSet<AspectCategory>>,
    rois: Vec<PendingRoi>,
    /// Lower is kept first when capping: implicit 0, explicit 1, decoy 2.
    priority: u8,
}

fn primary_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x = rng.gen_range(0.13..0.33);
    let y = rng.gen_range(0.13..0.33);
    let w = rng.gen_range(0.34..0.52);
    let h = rng.gen_range(0.34..0.52);
    [x, y, w, h]
}

fn distractor_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.gen_range(0.03..0.07);
    let h = rng.gen_range(0.03..0.07);
    let x = if rng.gen_bool(0.5) { rng.gen_range(0.01..0.06) } else { rng.gen_range(0.88..0.92) };
    let y = if rng.gen_bool(0.5) { rng.gen_range(0.01..0.06) } else { rng.gen_range(0.88..0.92) };
    [x, y, w, h]
}

fn other_polarity(s: SentimentLabel, rng: &mut ChaCha8Rng) -> SentimentLabel {
    let others: Vec<SentimentLabel> = SentimentLabel::POLAR
        .iter()
        .copied()
        .filter(|p| *p != s)
        .collect();
    others[rng.gen_range(0..others.len())]
}

/// Builds one evidence-style image: grid keyed by `grid_polarity`, two large
/// central RoIs keyed by `polarity`, and (when conflicted) two tiny
/// peripheral distractor RoIs keyed by `grid_polarity`.
fn evidence_image(
    aspect: AspectCategory,
    polarity: SentimentLabel,
    grid_polarity: SentimentLabel,
    annotated: bool,
    priority: u8,
    rng: &mut ChaCha8Rng,
) -> PendingImage {
    let conflicted = grid_polarity != polarity;
    let mut rois = vec![
        PendingRoi {
            cluster: (aspect, polarity),
            bbox: primary_box(rng),
            primary: true,
            category_present: annotated,
        },
        PendingRoi {
            cluster: (aspect, polarity),
            bbox: primary_box(rng),
            primary: true,
            category_present: annotated,
        },
    ];
    if conflicted {
        for _ in 0..2 {
            rois.push(PendingRoi {
                cluster: (aspect, grid_polarity),
                bbox: distractor_box(rng),
                primary: false,
                category_present: annotated,
            });
        }
    }
    PendingImage {
        grid_clusters: vec![(aspect, grid_polarity)],
        categories: annotated.then(|| [aspect].into_iter().collect()),
        rois,
        priority,
    }
}

fn uppercase_first(token: &str) -> String {
    let mut chars = token.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Generates a dataset directory: `dataset.jsonl`, `features/*.fcmt`, and
/// `recipe.json`. The same configuration always produces byte-identical
/// output.
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<Recipe> {
    if !(0.0..=1.0).contains(&config.implicit_rate) {
        return Err(Error::config(format!(
            "implicit_rate must lie in [0, 1], got {}",
            config.implicit_rate
        )));
    }
    if !config.noise.is_finite() || config.noise < 0.0 {
        return Err(Error::config(format!("noise must be finite and >= 0, got {}", config.noise)));
    }
    if config.n_samples == 0 {
        return Err(Error::config("n_samples must be positive"));
    }
    let features_dir = out_dir.join(FEATURES_DIR);
    fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;

    let tree = SeedTree::new(config.seed);
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut recipe_samples = Vec::with_capacity(config.n_samples);

    for i in 0..config.n_samples {
        let id = format!("synth-{i:04}");
        let mut lab_rng = tree.stream(&format!("synth/{i}/labels"));
        let mut img_rng = tree.stream(&format!("synth/{i}/images"));
        let mut txt_rng = tree.stream(&format!("synth/{i}/text"));

        // Labels and evidence kinds.
        let mut labels = BTreeMap::new();
        let mut implicit: Vec<(AspectCategory, SentimentLabel, bool)> = Vec::new();
        let mut explicit: Vec<(AspectCategory, SentimentLabel)> = Vec::new();
        for aspect in AspectCategory::ALL {
            if lab_rng.gen::<f64>() < P_LABEL {
                let s = SentimentLabel::POLAR[lab_rng.gen_range(0..3)];
                labels.insert(aspect, s);
                if lab_rng.gen::<f64>() < config.implicit_rate {
                    let conflicted = lab_rng.gen::<f64>() < CRITICAL_RATE;
                    implicit.push((aspect, s, conflicted));
                } else {
                    explicit.push((aspect, s));
                }
            }
        }

        // Candidate images in priority order.
        let mut pending: Vec<PendingImage> = Vec::new();
        let mut evidence: BTreeMap<AspectCategory, Evidence> = BTreeMap::new();
        let mut implicit_slots: Vec<(AspectCategory, bool, usize)> = Vec::new();
        for &(aspect, s, conflicted) in &implicit {
            let grid_polarity = if conflicted { other_polarity(s, &mut img_rng) } else { s };
            pending.push(evidence_image(aspect, s, grid_polarity, true, 0, &mut img_rng));
            implicit_slots.push((aspect, conflicted, pending.len() - 1));
        }
        let mut explicit_slots: Vec<(AspectCategory, Option<usize>)> = Vec::new();
        let mut explicit_imgs: Vec<usize> = Vec::new();
        for &(aspect, s) in &explicit {
            if img_rng.gen::<f64>() < EXPLICIT_IMAGE_RATE {
                pending.push(evidence_image(aspect, s, s, true, 1, &mut img_rng));
                explicit_slots.push((aspect, Some(pending.len() - 1)));
                explicit_imgs.push(pending.len() - 1);
            } else {
                explicit_slots.push((aspect, None));
            }
        }
        // Occasionally merge two explicit images into one two-category image.
        if explicit_imgs.len() >= 2 && img_rng.gen::<f64>() < DUAL_IMAGE_RATE {
            let (a, b) = (explicit_imgs[0], explicit_imgs[1]);
            let absorbed = std::mem::replace(
                &mut pending[b],
                PendingImage {
                    grid_clusters: vec![],
                    categories: None,
                    rois: vec![],
                    priority: u8::MAX, // tombstone, removed below
                },
            );
            let host = &mut pending[a];
            host.grid_clusters.extend(absorbed.grid_clusters);
            host.rois.extend(absorbed.rois);
            if let (Some(hc), Some(ac)) = (host.categories.as_mut(), absorbed.categories) {
                hc.extend(ac);
            }
            // Point the absorbed aspect's evidence at the host image.
            for slot in explicit_slots.iter_mut() {
                if slot.1 == Some(b) {
                    slot.1 = Some(a);
                }
            }
        }
        let mut decoy_slots: Vec<(AspectCategory, bool, usize)> = Vec::new();
        for aspect in AspectCategory::ALL {
            if labels.contains_key(&aspect) {
                continue;
            }
            let u = img_rng.gen::<f64>();
            if u < DECOY_PLAIN_RATE {
                let s = SentimentLabel::POLAR[img_rng.gen_range(0..3)];
                pending.push(evidence_image(aspect, s, s, false, 2, &mut img_rng));
                decoy_slots.push((aspect, false, pending.len() - 1));
            } else if u < DECOY_PLAIN_RATE + DECOY_CONFLICT_RATE {
                let s = SentimentLabel::POLAR[img_rng.gen_range(0..3)];
                let alt = other_polarity(s, &mut img_rng);
                pending.push(evidence_image(aspect, s, alt, false, 2, &mut img_rng));
                decoy_slots.push((aspect, true, pending.len() - 1));
            }
        }

        // Cap at K_MAX, dropping lowest-priority images (stable order).
        let mut order: Vec<usize> = (0..pending.len())
            .filter(|&k| pending[k].priority != u8::MAX)
            .collect();
        order.sort_by_key(|&k| pending[k].priority);
        let kept: Vec<usize> = order.iter().copied().take(K_MAX).collect();
        let dropped_images = order.len() - kept.len();

        // Materialize kept images: assign refs, write features, build entries.
        let mut entries: Vec<ImageEntry> = Vec::new();
        let mut recipe_images: Vec<RecipeImage> = Vec::new();
        let mut ref_of: BTreeMap<usize, String> = BTreeMap::new();
        for (k, &pidx) in kept.iter().enumerate() {
            let img = &pending[pidx];
            let gref = format!("g{i:04}_{k}");
            ref_of.insert(pidx, gref.clone());
            let clusters: Vec<usize> = img
                .grid_clusters
                .iter()
                .map(|&(a, s)| cluster_index(a, s).expect("grid clusters are polar"))
                .collect();
            write_grid(&features_dir, &gref, &clusters, config.noise, &tree)?;
            let mut rois = Vec::new();
            let mut recipe_rois = Vec::new();
            for (j, roi) in img.rois.iter().enumerate() {
                let rref = format!("r{i:04}_{k}_{j}");
                let cluster = cluster_index(roi.cluster.0, roi.cluster.1)
                    .expect("RoI clusters are polar");
                write_roi(&features_dir, &rref, cluster, config.noise, &tree)?;
                rois.push(Roi {
                    feature_ref: rref.clone(),
                    bbox: roi.bbox,
                    category: roi.category_present.then_some(roi.cluster.0),
                });
                recipe_rois.push(RecipeRoi {
                    feature_ref: rref,
                    cluster: roi.cluster,
                    primary: roi.primary,
                    category_present: roi.category_present,
                });
            }
            entries.push(ImageEntry {
                feature_ref: gref.clone(),
                categories: img.categories.clone(),
                rois,
            });
            recipe_images.push(RecipeImage {
                feature_ref: gref,
                grid_clusters: img.grid_clusters.clone(),
                categories: img.categories.clone(),
                rois: recipe_rois,
            });
        }

        for (aspect, conflicted, pidx) in implicit_slots {
            let image = ref_of
                .get(&pidx)
                .cloned()
                .expect("implicit images are never dropped by the cap");
            let ev = if conflicted {
                Evidence::ImplicitConflicted { image }
            } else {
                Evidence::ImplicitPlain { image }
            };
            evidence.insert(aspect, ev);
        }
        for (aspect, slot) in explicit_slots {
            let image = slot.and_then(|pidx| ref_of.get(&pidx).cloned());
            evidence.insert(aspect, Evidence::Explicit { image });
        }
        let decoys: Vec<RecipeDecoy> = decoy_slots
            .into_iter()
            .map(|(aspect, conflicted, pidx)| RecipeDecoy {
                aspect,
                conflicted,
                image: ref_of.get(&pidx).cloned(),
            })
            .collect();

        shuffle(&mut tree.stream(&format!("synth/{i}/order")), &mut entries);

        // Text: fillers plus one cue token per explicit aspect.
        let n_fill = txt_rng.gen_range(6..=10);
        let mut tokens: Vec<String> = (0..n_fill)
            .map(|_| FILLERS[txt_rng.gen_range(0..FILLERS.len())].to_owned())
            .collect();
        for &(aspect, s) in &explicit {
            let pos = txt_rng.gen_range(0..=tokens.len());
            tokens.insert(pos, cue_token(aspect, s));
        }
        let mut raw = String::new();
        for (idx, tok) in tokens.iter().enumerate() {
            let mut t = tok.clone();
            if txt_rng.gen::<f64>() < 0.15 {
                t = uppercase_first(&t);
            }
            if txt_rng.gen::<f64>() < 0.05 {
                t = t.nfd().collect();
            }
            if idx > 0 {
                raw.push(' ');
                if txt_rng.gen::<f64>() < 0.10 {
                    raw.push(' ');
                }
            }
            raw.push_str(&t);
        }

        let sample = MultimodalSample {
            id: id.clone(),
            text: raw.clone(),
            images: entries,
            labels: labels.clone(),
            tokens: preprocess(&raw, &PreprocessOptions::default()),
        };
        sample.validate()?;
        samples.push(sample);
        recipe_samples.push(RecipeSample {
            id,
            labels,
            evidence,
            decoys,
            images: recipe_images,
            dropped_images,
        });
    }

    write_dataset(&samples, &out_dir.join(DATASET_FILE))?;
    let recipe = Recipe {
        config: *config,
        samples: recipe_samples,
    };
    let recipe_path = out_dir.join(RECIPE_FILE);
    let json = serde_json::to_string_pretty(&recipe)
        .map_err(|e| Error::format(format!("serializing recipe: {e}")))?;
    fs::write(&recipe_path, json).map_err(|e| Error::io(&recipe_path, e))?;
    Ok(recipe)
}

fn write_grid(
    dir: &Path,
    feature_ref: &str,
    clusters: &[usize],
    noise: f64,
    tree: &SeedTree,
) -> Result<()> {
    let mut base = vec![0.0f64; FEATURE_DIM];
    for &c in clusters {
        let start = c * CLUSTER_BLOCK;
        for x in &mut base[start..start + CLUSTER_BLOCK] {
            *x += MAGNITUDE;
        }
    }
    let mut values = Vec::with_capacity(GRID_CELLS * FEATURE_DIM);
    for _ in 0..GRID_CELLS {
        values.extend_from_slice(&base);
    }
    if noise > 0.0 {
        let mut rng = tree.stream(&format!("synth/feat/{feature_ref}"));
        let draws = normal_vec(&mut rng, values.len(), 0.0, noise);
        for (v, n) in values.iter_mut().zip(draws) {
            *v += n;
        }
    }
    let f32s: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    fcmt::write_f32(&dir.join(format!("{feature_ref}.fcmt")), &[GRID_CELLS, FEATURE_DIM], &f32s)
}

fn write_roi(
    dir: &Path,
    feature_ref: &str,
    cluster: usize,
    noise: f64,
    tree: &SeedTree,
) -> Result<()> {
    let mut values = cluster_centroid(cluster);
    if noise > 0.0 {
        let mut rng = tree.stream(&format!("synth/feat/{feature_ref}"));
        let draws = normal_vec(&mut rng, values.len(), 0.0, noise);
        for (v, n) in values.iter_mut().zip(draws) {
            *v += n;
        }
    }
    let f32s: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    fcmt::write_f32(&dir.join(format!("{feature_ref}.fcmt")), &[FEATURE_DIM], &f32s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::dataset::{load_dataset, load_dataset_with_features, FeatureStore};

    fn small_config() -> SynthConfig {
        SynthConfig { seed: 42, n_samples: 8, implicit_rate: 0.5, noise: 0.05 }
    }

    #[test]
    fn generated_dataset_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let recipe = generate_synthetic(&small_config(), dir.path()).unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let samples = load_dataset_with_features(
            &dir.path().join(DATASET_FILE),
            &PreprocessOptions::default(),
            &store,
        )
        .unwrap();
        assert_eq!(samples.len(), 8);
        assert_eq!(recipe.samples.len(), 8);
        for (sample, rs) in samples.iter().zip(&recipe.samples) {
            assert_eq!(sample.id, rs.id);
            assert_eq!(sample.labels, rs.labels);
            assert_eq!(sample.images.len(), rs.images.len());
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic(&small_config(), d1.path()).unwrap();
        generate_synthetic(&small_config(), d2.path()).unwrap();
        for name in [DATASET_FILE, RECIPE_FILE] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        let mut feature_names: Vec<_> = fs::read_dir(d1.path().join(FEATURES_DIR))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        feature_names.sort();
        assert!(!feature_names.is_empty());
        for name in feature_names {
            let a = fs::read(d1.path().join(FEATURES_DIR).join(&name)).unwrap();
            let b = fs::read(d2.path().join(FEATURES_DIR).join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs between runs");
        }
    }

    #[test]
    fn implicit_rate_zero_puts_a_cue_in_text_for_every_label() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { seed: 3, n_samples: 12, implicit_rate: 0.0, noise: 0.0 };
        let recipe = generate_synthetic(&config, dir.path()).unwrap();
        let samples = load_dataset(&dir.path().join(DATASET_FILE), &PreprocessOptions::default())
            .unwrap();
        for (sample, rs) in samples.iter().zip(&recipe.samples) {
            for (&aspect, &s) in &sample.labels {
                let cue = cue_token(aspect, s);
                assert!(
                    sample.tokens.contains(&cue),
                    "sample {} lacks cue {cue} for {aspect}",
                    sample.id
                );
                assert!(matches!(rs.evidence[&aspect], Evidence::Explicit { .. }));
            }
        }
    }

    #[test]
    fn zero_noise_rois_sit_exactly_on_their_centroids() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { seed: 9, n_samples: 10, implicit_rate: 0.6, noise: 0.0 };
        let recipe = generate_synthetic(&config, dir.path()).unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let mut checked = 0;
        for rs in &recipe.samples {
            for img in &rs.images {
                for roi in &img.rois {
                    let features = store.roi(&roi.feature_ref).unwrap();
                    let idx = cluster_index(roi.cluster.0, roi.cluster.1).unwrap();
                    // Independent nearest-centroid decode over all 18 clusters.
                    let best = (0..18)
                        .min_by(|&a, &b| {
                            let da = dist2(features.data(), &cluster_centroid(a));
                            let db = dist2(features.data(), &cluster_centroid(b));
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    assert_eq!(best, idx, "RoI {} decoded wrongly", roi.feature_ref);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no RoIs generated");
    }

    fn dist2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    #[test]
    fn conflicted_images_have_lying_grids_and_truthful_big_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { seed: 5, n_samples: 40, implicit_rate: 1.0, noise: 0.0 };
        let recipe = generate_synthetic(&config, dir.path()).unwrap();
        let samples = load_dataset(&dir.path().join(DATASET_FILE), &PreprocessOptions::default())
            .unwrap();
        // Boxes live in the dataset entries; index them by RoI feature_ref.
        let mut area_of: BTreeMap<String, f64> = BTreeMap::new();
        for sample in &samples {
            for img in &sample.images {
                for roi in &img.rois {
                    area_of.insert(roi.feature_ref.clone(), roi.bbox[2] * roi.bbox[3]);
                }
            }
        }
        let mut seen = 0;
        for rs in &recipe.samples {
            for (aspect, ev) in &rs.evidence {
                if let Evidence::ImplicitConflicted { image } = ev {
                    let img = rs.images.iter().find(|i| &i.feature_ref == image).unwrap();
                    let gold = rs.labels[aspect];
                    assert_ne!(img.grid_clusters[0].1, gold, "grid must disagree with gold");
                    for roi in &img.rois {
                        let area = area_of[&roi.feature_ref];
                        if roi.primary {
                            assert_eq!(roi.cluster.1, gold);
                            assert!(area > 0.1, "primary boxes are large");
                        } else {
                            assert_ne!(roi.cluster.1, gold);
                            assert!(area < 0.01, "distractor boxes are tiny");
                        }
                    }
                    seen += 1;
                }
            }
        }
        assert!(seen > 5, "expected several conflicted images, saw {seen}");
    }

    #[test]
    fn decoys_lack_all_category_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { seed: 6, n_samples: 30, implicit_rate: 0.3, noise: 0.0 };
        let recipe = generate_synthetic(&config, dir.path()).unwrap();
        let mut seen = 0;
        for rs in &recipe.samples {
            for decoy in &rs.decoys {
                assert!(!rs.labels.contains_key(&decoy.aspect));
                if let Some(image) = &decoy.image {
                    let img = rs.images.iter().find(|i| &i.feature_ref == image).unwrap();
                    assert!(img.categories.is_none());
                    assert!(img.rois.iter().all(|r| !r.category_present));
                    seen += 1;
                }
            }
        }
        assert!(seen > 3, "expected several decoys, saw {seen}");
    }

    #[test]
    fn image_cap_is_respected_and_implicit_evidence_survives() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { seed: 13, n_samples: 60, implicit_rate: 0.9, noise: 0.0 };
        let recipe = generate_synthetic(&config, dir.path()).unwrap();
        let samples = load_dataset(&dir.path().join(DATASET_FILE), &PreprocessOptions::default())
            .unwrap();
        for (sample, rs) in samples.iter().zip(&recipe.samples) {
            assert!(sample.images.len() <= K_MAX);
            for ev in rs.evidence.values() {
                if let Evidence::ImplicitPlain { image } | Evidence::ImplicitConflicted { image } = ev {
                    assert!(sample.images.iter().any(|i| &i.feature_ref == image));
                }
            }
        }
    }
}
