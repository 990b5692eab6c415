//! Trainable classifiers behind the RT and EC detectors, and their JSON
//! model files.

pub mod forest;
pub mod one_class;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use forest::{ForestClassifier, ForestParams, TreeNode};
pub use one_class::{OneClassParams, OneClassSeparator, Standardizer};

use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const RT_MODEL_FILE: &str = "rt_model.json";
pub const EC_MODEL_FILE: &str = "ec_model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    OneClass(OneClassSeparator),
    Forest(ForestClassifier),
}

impl Model {
    /// True if the model flags `features` as anomalous.
    pub fn predict(&self, features: &[f64]) -> Result<bool> {
        match self {
            Model::OneClass(m) => m.is_outlier(features),
            Model::Forest(m) => m.predict(features),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    model: Model,
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let file = ModelFile {
        version: MODEL_FORMAT_VERSION,
        model: model.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Parse {
        what: "model".into(),
        source: e,
    })?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: format!("model file {}", path.display()),
        source: e,
    })?;
    if file.version != MODEL_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported model version {} (expected {MODEL_FORMAT_VERSION})",
            path.display(),
            file.version
        )));
    }
    Ok(file.model)
}

/// The pair of trained models the detectors need.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModels {
    pub rt: OneClassSeparator,
    pub ec: ForestClassifier,
}

impl DetectorModels {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save(&Model::OneClass(self.rt.clone()), &dir.join(RT_MODEL_FILE))?;
        save(&Model::Forest(self.ec.clone()), &dir.join(EC_MODEL_FILE))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let rt = match load(&dir.join(RT_MODEL_FILE))? {
            Model::OneClass(m) => m,
            Model::Forest(_) => return Err(Error::Config(format!("{RT_MODEL_FILE} holds a forest model"))),
        };
        let ec = match load(&dir.join(EC_MODEL_FILE))? {
            Model::Forest(m) => m,
            Model::OneClass(_) => return Err(Error::Config(format!("{EC_MODEL_FILE} holds a one-class model"))),
        };
        Ok(Self { rt, ec })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect()
    }

    #[test]
    fn round_trip_agrees_on_random_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let oc = OneClassSeparator::train(&random_rows(200, 3, 1), &OneClassParams::default()).unwrap();
        let x = random_rows(200, 3, 2);
        let y: Vec<bool> = x.iter().map(|r| r[0] > 0.5).collect();
        let fo = ForestClassifier::train(&x, &y, &ForestParams::default()).unwrap();
        let models = DetectorModels { rt: oc, ec: fo };
        models.save_dir(dir.path()).unwrap();
        let loaded = DetectorModels::load_dir(dir.path()).unwrap();
        for p in random_rows(1000, 3, 3) {
            let (a, b) = (models.rt.decision(&p).unwrap(), loaded.rt.decision(&p).unwrap());
            assert!((a - b).abs() < 1e-9);
            assert_eq!(models.rt.is_outlier(&p).unwrap(), loaded.rt.is_outlier(&p).unwrap());
            assert_eq!(models.ec.predict(&p).unwrap(), loaded.ec.predict(&p).unwrap());
        }
    }

    #[test]
    fn truncated_file_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let x = random_rows(100, 2, 4);
        let y: Vec<bool> = x.iter().map(|r| r[1] > 0.0).collect();
        let m = Model::Forest(ForestClassifier::train(&x, &y, &ForestParams::default()).unwrap());
        save(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("line 1 column"), "{err}");
    }

    #[test]
    fn wrong_model_kind_in_dir() {
        let dir = tempfile::tempdir().unwrap();
        let oc = OneClassSeparator::train(&random_rows(60, 2, 5), &OneClassParams::default()).unwrap();
        save(&Model::OneClass(oc.clone()), &dir.path().join(RT_MODEL_FILE)).unwrap();
        save(&Model::OneClass(oc), &dir.path().join(EC_MODEL_FILE)).unwrap();
        assert!(matches!(DetectorModels::load_dir(dir.path()), Err(Error::Config(_))));
    }
}
