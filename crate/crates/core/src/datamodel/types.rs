//! Domain types for the hotel-review aspect-sentiment task: the closed set of
//! aspect categories, the four-way sentiment label, and the sample structures
//! that tie text, images, and regions of interest together.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of images per sample.
pub const K_MAX: usize = 7;
/// Maximum number of regions of interest per image.
pub const J_MAX: usize = 4;
/// Maximum encoder input length in tokens.
pub const N_MAX: usize = 170;
/// Number of spatial cells in an image feature grid.
pub const GRID_CELLS: usize = 49;
/// Dimensionality of raw visual features (grid cells and RoI vectors).
pub const FEATURE_DIM: usize = 2048;

/// The six fixed aspect categories, in canonical order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum AspectCategory {
    Location,
    Food,
    Room,
    Facilities,
    Service,
    PublicArea,
}

impl AspectCategory {
    /// All aspects in canonical order.
    pub const ALL: [AspectCategory; 6] = [
        AspectCategory::Location,
        AspectCategory::Food,
        AspectCategory::Room,
        AspectCategory::Facilities,
        AspectCategory::Service,
        AspectCategory::PublicArea,
    ];

    /// Canonical display name, as used in dataset files.
    pub fn name(self) -> &'static str {
        match self {
            AspectCategory::Location => "Location",
            AspectCategory::Food => "Food",
            AspectCategory::Room => "Room",
            AspectCategory::Facilities => "Facilities",
            AspectCategory::Service => "Service",
            AspectCategory::PublicArea => "PublicArea",
        }
    }

    /// Lowercase single-token form used in auxiliary sequences and the
    /// reserved vocabulary block.
    pub fn token(self) -> &'static str {
        match self {
            AspectCategory::Location => "location",
            AspectCategory::Food => "food",
            AspectCategory::Room => "room",
            AspectCategory::Facilities => "facilities",
            AspectCategory::Service => "service",
            AspectCategory::PublicArea => "public_area",
        }
    }

    /// Position in canonical order (0..6).
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|a| *a == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<AspectCategory> {
        Self::ALL.get(i).copied()
    }

    /// Parses a canonical aspect name.
    pub fn parse(s: &str) -> Result<AspectCategory> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::data(format!("unknown aspect category {s:?}")))
    }
}

impl fmt::Display for AspectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sentiment toward one aspect. `None` means the aspect is absent from both
/// modalities; dataset files never spell it out — absence of the aspect key
/// implies it.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    None,
    Negative,
    Neutral,
    Positive,
}

impl SentimentLabel {
    /// All labels in canonical order (`None` first).
    pub const ALL: [SentimentLabel; 4] = [
        SentimentLabel::None,
        SentimentLabel::Negative,
        SentimentLabel::Neutral,
        SentimentLabel::Positive,
    ];

    /// The three explicit polarities (everything except `None`).
    pub const POLAR: [SentimentLabel; 3] = [
        SentimentLabel::Negative,
        SentimentLabel::Neutral,
        SentimentLabel::Positive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SentimentLabel::None => "none",
            SentimentLabel::Negative => "negative",
            SentimentLabel::Neutral => "neutral",
            SentimentLabel::Positive => "positive",
        }
    }

    /// Class index in canonical order (0..4).
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<SentimentLabel> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A detected region of interest inside an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    /// Identifier of a `FEATURE_DIM`-float vector in the feature store.
    pub feature_ref: String,
    /// `(x, y, w, h)` in normalized image coordinates.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Gold aspect category, when annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<AspectCategory>,
}

impl Roi {
    /// Checks the box contract: `0 <= x, y`, `w, h > 0`, `x+w <= 1`, `y+h <= 1`.
    pub fn validate(&self) -> Result<()> {
        let [x, y, w, h] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) {
            return Err(Error::data(format!("box {:?} has non-finite coordinates", self.bbox)));
        }
        if x < 0.0 || y < 0.0 {
            return Err(Error::data(format!("box {:?} has negative origin", self.bbox)));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::data(format!("box {:?} has nonpositive extent", self.bbox)));
        }
        if x + w > 1.0 {
            return Err(Error::data(format!("box {:?} violates x+w <= 1", self.bbox)));
        }
        if y + h > 1.0 {
            return Err(Error::data(format!("box {:?} violates y+h <= 1", self.bbox)));
        }
        Ok(())
    }
}

/// One image attached to a sample: a feature-grid reference, optional gold
/// category set, and its regions of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Identifier of a `GRID_CELLS x FEATURE_DIM` feature grid.
    pub feature_ref: String,
    /// Gold aspect categories, when annotated. `None` means unannotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<BTreeSet<AspectCategory>>,
    #[serde(default)]
    pub rois: Vec<Roi>,
}

impl ImageEntry {
    pub fn validate(&self) -> Result<()> {
        if self.feature_ref.is_empty() {
            return Err(Error::data("image feature_ref is empty"));
        }
        if self.rois.len() > J_MAX {
            return Err(Error::data(format!(
                "image {} has {} RoIs, exceeding the limit of {J_MAX}",
                self.feature_ref,
                self.rois.len()
            )));
        }
        for roi in &self.rois {
            if roi.feature_ref.is_empty() {
                return Err(Error::data(format!(
                    "RoI in image {} has an empty feature_ref",
                    self.feature_ref
                )));
            }
            roi.validate()?;
        }
        Ok(())
    }
}

/// One review: raw text, preprocessed tokens, attached images, and the sparse
/// aspect-sentiment labels (absent aspect implies `none`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub labels: BTreeMap<AspectCategory, SentimentLabel>,
    /// Preprocessed tokens; derived at load time, never serialized.
    #[serde(skip)]
    pub tokens: Vec<String>,
}

impl MultimodalSample {
    /// Label for an aspect, with absence meaning `none`.
    pub fn label(&self, aspect: AspectCategory) -> SentimentLabel {
        self.labels.get(&aspect).copied().unwrap_or(SentimentLabel::None)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::data("sample id is empty"));
        }
        if self.images.len() > K_MAX {
            return Err(Error::data(format!(
                "sample {} has {} images, exceeding the limit of {K_MAX}",
                self.id,
                self.images.len()
            )));
        }
        for image in &self.images {
            image.validate()?;
        }
        for (aspect, label) in &self.labels {
            if *label == SentimentLabel::None {
                return Err(Error::data(format!(
                    "sample {}: aspect {aspect} is labeled \"none\" explicitly; \
                     absent aspects are implicitly none",
                    self.id
                )));
            }
        }
        Ok(())
    }
}
