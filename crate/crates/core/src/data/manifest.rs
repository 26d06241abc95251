//! Dataset manifest: a JSON index naming every sample, its label, its
//! bundle file, and the raw scene descriptions that produced its text
//! features.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::data::bundle::read_bundle;
use crate::error::{Error, Result};
use crate::fusion::{DatasetDims, FeatureBundle};

/// Whether decisions are independent per class or exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    #[serde(rename = "multi-label")]
    MultiLabel,
    #[serde(rename = "single-label")]
    SingleLabel,
}

impl TaskKind {
    pub fn multi_label(self) -> bool {
        matches!(self, TaskKind::MultiLabel)
    }
}

/// One sample's row in the manifest.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SampleEntry {
    pub id: String,
    /// Bundle file path, relative to the manifest's directory.
    pub bundle: String,
    /// Per-class 0/1 targets.
    pub labels: Vec<u8>,
    /// Raw scene descriptions, one per valid text slot, in slot order.
    #[serde(default)]
    pub descriptions: Vec<String>,
    /// Optional source image path for live enrichment.
    #[serde(default)]
    pub image: Option<String>,
}

/// The dataset index.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub name: String,
    pub task: TaskKind,
    /// Human-readable class names; the length fixes the class count.
    pub classes: Vec<String>,
    pub dims: DatasetDims,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("manifest {}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("serializing manifest: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Data("manifest declares no classes".into()));
        }
        if self.samples.is_empty() {
            return Err(Error::Data("manifest lists no samples".into()));
        }
        let d = &self.dims;
        if [
            d.global_rows,
            d.local_slots,
            d.text_slots,
            d.d_global,
            d.d_local,
            d.d_text,
        ]
        .contains(&0)
        {
            return Err(Error::Data(
                "manifest dimensions must all be positive".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(&s.id) {
                return Err(Error::Data(format!("duplicate sample id '{}'", s.id)));
            }
            if s.labels.len() != self.classes.len() {
                return Err(Error::Data(format!(
                    "sample '{}' has {} labels for {} classes",
                    s.id,
                    s.labels.len(),
                    self.classes.len()
                )));
            }
            if s.labels.iter().any(|&v| v > 1) {
                return Err(Error::Data(format!(
                    "sample '{}' labels must be 0 or 1",
                    s.id
                )));
            }
            if !self.task.multi_label() {
                let ones = s.labels.iter().filter(|&&v| v == 1).count();
                if ones != 1 {
                    return Err(Error::Data(format!(
                        "sample '{}' must have exactly one positive class, got {ones}",
                        s.id
                    )));
                }
            }
            if s.descriptions.len() > d.text_slots {
                return Err(Error::Data(format!(
                    "sample '{}' carries {} descriptions for {} text slots",
                    s.id,
                    s.descriptions.len(),
                    d.text_slots
                )));
            }
        }
        Ok(())
    }

    /// Resolves a sample's bundle path against the manifest's directory.
    pub fn bundle_path(&self, manifest_path: &Path, entry: &SampleEntry) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&entry.bundle)
    }
}

/// A manifest with every bundle loaded and cross-checked.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub bundles: Vec<FeatureBundle>,
}

impl Dataset {
    /// Loads the manifest at `path` and every bundle it references,
    /// validating each bundle's structure and checking that bundle labels
    /// agree with the manifest.
    pub fn load(path: &Path) -> Result<Dataset> {
        let manifest = Manifest::load(path)?;
        let mut bundles = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let bpath = manifest.bundle_path(path, entry);
            let bundle = read_bundle(&bpath)?;
            if bundle.sample_id != entry.id {
                return Err(Error::Data(format!(
                    "bundle {} carries id '{}' but the manifest lists '{}'",
                    bpath.display(),
                    bundle.sample_id,
                    entry.id
                )));
            }
            bundle.validate(
                &manifest.dims,
                manifest.classes.len(),
                manifest.task.multi_label(),
            )?;
            let manifest_label: Vec<f64> = entry.labels.iter().map(|&v| v as f64).collect();
            if bundle.label != manifest_label {
                return Err(Error::Data(format!(
                    "sample '{}': bundle label disagrees with the manifest",
                    entry.id
                )));
            }
            bundles.push(bundle);
        }
        Ok(Dataset { manifest, bundles })
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bundle::write_bundle;
    use crate::testutil::{rand_tensor, rng};

    fn dims() -> DatasetDims {
        DatasetDims {
            global_rows: 2,
            local_slots: 3,
            text_slots: 2,
            d_global: 4,
            d_local: 3,
            d_text: 5,
        }
    }

    fn make_bundle(id: &str, label: Vec<f64>) -> FeatureBundle {
        let mut r = rng(80);
        let d = dims();
        FeatureBundle {
            sample_id: id.into(),
            global: rand_tensor(&[d.global_rows, d.d_global], &mut r),
            local: rand_tensor(&[d.local_slots, d.d_local], &mut r),
            local_valid: vec![true; d.local_slots],
            text: rand_tensor(&[d.text_slots, d.d_text], &mut r),
            text_valid: vec![true; d.text_slots],
            label,
        }
    }

    fn write_dataset(dir: &Path) -> PathBuf {
        std::fs::create_dir_all(dir.join("bundles")).unwrap();
        let mut samples = Vec::new();
        for (i, labels) in [vec![1u8, 0], vec![0, 1]].into_iter().enumerate() {
            let id = format!("s{i}");
            let rel = format!("bundles/{id}.fdb");
            let label_f: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
            write_bundle(&dir.join(&rel), &make_bundle(&id, label_f)).unwrap();
            samples.push(SampleEntry {
                id,
                bundle: rel,
                labels,
                descriptions: vec!["a car ahead".into()],
                image: None,
            });
        }
        let manifest = Manifest {
            name: "unit".into(),
            task: TaskKind::MultiLabel,
            classes: vec!["go".into(), "stop".into()],
            dims: dims(),
            samples,
        };
        let path = dir.join("manifest.json");
        manifest.save(&path).unwrap();
        path
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path());
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.classes, vec!["go", "stop"]);
        assert_eq!(m.task, TaskKind::MultiLabel);
        assert_eq!(m.samples.len(), 2);
        assert_eq!(m.dims, dims());
    }

    #[test]
    fn dataset_load_cross_checks_bundles() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path());
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.classes(), 2);
        assert_eq!(ds.bundles[0].sample_id, "s0");
    }

    #[test]
    fn label_disagreement_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path());
        // Overwrite one bundle with a flipped label.
        write_bundle(
            &dir.path().join("bundles/s0.fdb"),
            &make_bundle("s0", vec![0.0, 1.0]),
        )
        .unwrap();
        let err = Dataset::load(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err:?}");
    }

    #[test]
    fn mismatched_bundle_id_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path());
        write_bundle(
            &dir.path().join("bundles/s0.fdb"),
            &make_bundle("other", vec![1.0, 0.0]),
        )
        .unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Data(_))));
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn validation_rejects_structural_faults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path());
        let good = Manifest::load(&path).unwrap();

        let mut dup = good.clone();
        dup.samples[1].id = dup.samples[0].id.clone();
        assert!(dup.validate().is_err());

        let mut bad_label = good.clone();
        bad_label.samples[0].labels = vec![1, 2];
        assert!(bad_label.validate().is_err());

        let mut wrong_len = good.clone();
        wrong_len.samples[0].labels = vec![1];
        assert!(wrong_len.validate().is_err());

        let mut single = good.clone();
        single.task = TaskKind::SingleLabel;
        single.samples[0].labels = vec![1, 1];
        assert!(single.validate().is_err());

        let mut no_classes = good.clone();
        no_classes.classes.clear();
        assert!(no_classes.validate().is_err());

        let mut too_many_desc = good;
        too_many_desc.samples[0].descriptions = vec!["a".into(), "b".into(), "c".into()];
        assert!(too_many_desc.validate().is_err());
    }

    #[test]
    fn missing_bundle_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path());
        std::fs::remove_file(dir.path().join("bundles/s1.fdb")).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Io { .. })));
    }
}
