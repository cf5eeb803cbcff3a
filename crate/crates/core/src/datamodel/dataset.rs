//! Dataset loading, validation, and writing.
//!
//! A dataset directory holds `dataset.jsonl` (one sample per line) and a
//! `features/` subdirectory of FCMT files, one per `feature_ref`. Loading
//! validates every structural invariant and reports the offending line;
//! feature existence and shape checks are available through [`FeatureStore`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::datamodel::fcmt;
use crate::datamodel::preprocess::{preprocess, PreprocessOptions};
use crate::datamodel::types::{MultimodalSample, FEATURE_DIM, GRID_CELLS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Name of the sample file inside a dataset directory.
pub const DATASET_FILE: &str = "dataset.jsonl";
/// Name of the feature subdirectory inside a dataset directory.
pub const FEATURES_DIR: &str = "features";

/// Loads and validates a JSONL dataset, preprocessing each sample's text.
pub fn load_dataset(path: &Path, options: &PreprocessOptions) -> Result<Vec<MultimodalSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut sample: MultimodalSample = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        sample
            .validate()
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        sample.tokens = preprocess(&sample.text, options);
        samples.push(sample);
    }
    Ok(samples)
}

/// Loads a dataset and verifies that every referenced feature file exists
/// with the contracted shape.
pub fn load_dataset_with_features(
    path: &Path,
    options: &PreprocessOptions,
    store: &FeatureStore,
) -> Result<Vec<MultimodalSample>> {
    let samples = load_dataset(path, options)?;
    for sample in &samples {
        for image in &sample.images {
            store.verify_grid(&image.feature_ref)?;
            for roi in &image.rois {
                store.verify_roi(&roi.feature_ref)?;
            }
        }
    }
    Ok(samples)
}

/// Writes samples as JSONL, one object per line.
pub fn write_dataset(samples: &[MultimodalSample], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for sample in samples {
        serde_json::to_writer(&mut out, sample)
            .map_err(|e| Error::format(format!("serializing sample {}: {e}", sample.id)))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Read-through cache over a directory of FCMT feature files. Grids and RoI
/// vectors are converted to f64 tensors on first access and kept for reuse
/// across training epochs.
pub struct FeatureStore {
    dir: PathBuf,
    cache: RefCell<HashMap<String, Rc<Tensor>>>,
}

impl FeatureStore {
    /// Opens the feature directory of a dataset directory.
    pub fn open(dataset_dir: &Path) -> Result<FeatureStore> {
        let dir = dataset_dir.join(FEATURES_DIR);
        if !dir.is_dir() {
            return Err(Error::data(format!(
                "feature directory {} does not exist",
                dir.display()
            )));
        }
        Ok(FeatureStore {
            dir,
            cache: RefCell::new(HashMap::new()),
        })
    }

    fn path_for(&self, feature_ref: &str) -> PathBuf {
        self.dir.join(format!("{feature_ref}.fcmt"))
    }

    fn load(&self, feature_ref: &str) -> Result<Rc<Tensor>> {
        if let Some(t) = self.cache.borrow().get(feature_ref) {
            return Ok(Rc::clone(t));
        }
        let path = self.path_for(feature_ref);
        // An unresolvable ref surfaces as the underlying I/O error; the
        // offending path names the ref.
        let tensor = fcmt::read_f32_tensor(&path)?;
        let rc = Rc::new(tensor);
        self.cache
            .borrow_mut()
            .insert(feature_ref.to_owned(), Rc::clone(&rc));
        Ok(rc)
    }

    /// Loads a `GRID_CELLS x FEATURE_DIM` image grid.
    pub fn grid(&self, feature_ref: &str) -> Result<Rc<Tensor>> {
        let t = self.load(feature_ref)?;
        if t.shape() != [GRID_CELLS, FEATURE_DIM] {
            return Err(Error::data(format!(
                "feature {feature_ref:?} has shape {:?}, expected [{GRID_CELLS}, {FEATURE_DIM}]",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Loads a `FEATURE_DIM` RoI vector as a 1 x FEATURE_DIM tensor.
    pub fn roi(&self, feature_ref: &str) -> Result<Rc<Tensor>> {
        let t = self.load(feature_ref)?;
        if t.shape() != [FEATURE_DIM] && t.shape() != [1, FEATURE_DIM] {
            return Err(Error::data(format!(
                "feature {feature_ref:?} has shape {:?}, expected [{FEATURE_DIM}]",
                t.shape()
            )));
        }
        if t.shape() == [FEATURE_DIM] {
            let reshaped = Tensor::new(vec![1, FEATURE_DIM], t.data().to_vec())?;
            let rc = Rc::new(reshaped);
            self.cache
                .borrow_mut()
                .insert(feature_ref.to_owned(), Rc::clone(&rc));
            return Ok(rc);
        }
        Ok(t)
    }

    pub fn verify_grid(&self, feature_ref: &str) -> Result<()> {
        self.grid(feature_ref).map(|_| ())
    }

    pub fn verify_roi(&self, feature_ref: &str) -> Result<()> {
        self.roi(feature_ref).map(|_| ())
    }

    /// Directory holding the feature files.
    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
