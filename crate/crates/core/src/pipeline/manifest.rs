use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::DatasetConfig;
use super::generate::ClassParams;
use crate::error::{Error, Result};
use crate::image::{decode_image, decode_label_pgm, read_file, write_file};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Paths are relative to the dataset directory.
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorEcho {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub classes: Vec<ClassParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub class_counts: Vec<SplitCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorEcho>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, samples: Vec<SampleRecord>, generator: Option<GeneratorEcho>) -> Self {
        let mut m = DatasetManifest {
            version: MANIFEST_VERSION,
            class_counts: Vec::new(),
            class_names,
            generator,
            samples,
        };
        m.class_counts = m.count_classes();
        m
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn count_classes(&self) -> Vec<SplitCounts> {
        let mut counts = vec![SplitCounts::default(); self.num_classes()];
        for s in &self.samples {
            if let Some(c) = counts.get_mut(s.label) {
                match s.split {
                    Split::Train => c.train += 1,
                    Split::Test => c.test += 1,
                }
            }
        }
        counts
    }

    /// Structural checks that need no file access.
    pub fn check(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.version != MANIFEST_VERSION {
            bad.push(format!("unsupported manifest version {}", self.version));
        }
        if self.num_classes() < 2 {
            bad.push("at least two classes are required".to_string());
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                bad.push(format!("sample id {} appears twice", s.id));
            }
            if s.label >= self.num_classes() {
                bad.push(format!("sample {}: label {} outside [0, {})", s.id, s.label, self.num_classes()));
            }
        }
        if bad.is_empty() && self.class_counts != self.count_classes() {
            bad.push("class_counts do not match the sample records".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut s = serde_json::to_vec_pretty(self).expect("manifest serializes");
        s.push(b'\n');
        s
    }

    pub fn from_json(bytes: &[u8], source_name: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_slice(bytes).map_err(|e| {
            Error::parse(source_name, format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_file(path)?, &path.display().to_string())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Decodes every referenced image and mask and checks that each pair agrees
/// in size. Every problem is reported, not only the first.
pub fn verify_files(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut failures = Vec::new();
    for s in &manifest.samples {
        let img = root.join(&s.image);
        let mask = root.join(&s.mask);
        let dims_img = read_file(&img).and_then(|b| decode_image(&b, &img.display().to_string()));
        let dims_mask = read_file(&mask).and_then(|b| decode_label_pgm(&b, &mask.display().to_string()));
        match (dims_img, dims_mask) {
            (Ok(i), Ok((w, h, _))) => {
                if (i.width(), i.height()) != (w, h) {
                    failures.push(format!(
                        "{}: image is {}x{} but mask {} is {w}x{h}",
                        img.display(),
                        i.width(),
                        i.height(),
                        mask.display()
                    ));
                }
            }
            (a, b) => {
                failures.extend(a.err().map(|e| e.to_string()));
                failures.extend(b.err().map(|e| e.to_string()));
            }
        }
        if let Some(g) = &s.graph {
            let gp = root.join(g);
            if !gp.is_file() {
                failures.push(Error::MissingFile(gp).to_string());
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidInputs(failures))
    }
}

const IMAGE_EXTS: [&str; 2] = ["ppm", "pgm"];
const MASK_SUFFIX: &str = "_mask.pgm";

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::io(dir, e))?;
    v.sort_by_key(|e| e.file_name());
    Ok(v)
}

/// Reads `root/<class>/<stem>.{ppm,pgm}` with `<stem>_mask.pgm` beside it.
/// Classes are the sorted subdirectory names; the test split takes a seeded,
/// per-class `test_fraction` of the samples.
fn scan_layout(root: &Path, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let mut failures = Vec::new();
    let mut by_class: BTreeMap<String, Vec<(String, String, String)>> = BTreeMap::new();
    for entry in sorted_entries(root)? {
        if !entry.path().is_dir() {
            continue;
        }
        let class = entry.file_name().to_string_lossy().into_owned();
        let list = by_class.entry(class.clone()).or_default();
        for f in sorted_entries(&entry.path())? {
            let name = f.file_name().to_string_lossy().into_owned();
            if name.ends_with(MASK_SUFFIX) {
                continue;
            }
            let Some((stem, ext)) = name.rsplit_once('.') else { continue };
            if !IMAGE_EXTS.contains(&ext) {
                continue;
            }
            let mask = format!("{class}/{stem}{MASK_SUFFIX}");
            if !root.join(&mask).is_file() {
                failures.push(Error::MissingFile(root.join(&mask)).to_string());
                continue;
            }
            list.push((format!("{class}/{stem}"), format!("{class}/{name}"), mask));
        }
    }
    by_class.retain(|_, v| !v.is_empty());
    if !failures.is_empty() {
        return Err(Error::InvalidInputs(failures));
    }
    if by_class.len() < 2 {
        return Err(Error::Validation(format!(
            "{} holds {} class folder(s) with images; at least two are needed",
            root.display(),
            by_class.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let class_names: Vec<String> = by_class.keys().cloned().collect();
    for (label, (_, items)) in by_class.into_iter().enumerate() {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let n_test = ((items.len() as f64 * test_fraction).round() as usize).min(items.len().saturating_sub(1));
        let test: HashSet<usize> = order[..n_test].iter().copied().collect();
        for (i, (id, image, mask)) in items.into_iter().enumerate() {
            samples.push(SampleRecord {
                id,
                image,
                mask,
                graph: None,
                label,
                split: if test.contains(&i) { Split::Test } else { Split::Train },
            });
        }
    }
    Ok(DatasetManifest::new(class_names, samples, None))
}

/// Loads `root/manifest.json`, or builds and writes one from the class-folder
/// layout, then verifies every referenced file.
pub fn ingest_dataset(root: &Path, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let manifest = if path.is_file() {
        DatasetManifest::load(&path)?
    } else if root.is_dir() {
        let m = scan_layout(root, test_fraction, seed)?;
        verify_files(root, &m)?;
        m.save(&path)?;
        return Ok(m);
    } else {
        return Err(Error::MissingFile(root.to_path_buf()));
    };
    verify_files(root, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{encode_gray8, encode_label16, GrayImage};
    use crate::pipeline::generate_synthetic;

    fn small() -> DatasetConfig {
        DatasetConfig {
            per_class: 4,
            image_size: 32,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(dir.path(), &small(), 1).unwrap();
        let back = ingest_dataset(dir.path(), 0.2, 0).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.class_counts, vec![SplitCounts { train: 3, test: 1 }; 3]);
    }

    #[test]
    fn missing_mask_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(dir.path(), &small(), 1).unwrap();
        let victim = dir.path().join(&m.samples[5].mask);
        fs::remove_file(&victim).unwrap();
        let msg = ingest_dataset(dir.path(), 0.2, 0).unwrap_err().to_string();
        assert!(msg.contains(&victim.display().to_string()), "{msg}");
    }

    #[test]
    fn bad_label_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_synthetic(dir.path(), &small(), 1).unwrap();
        m.samples[0].label = 9;
        fs::write(dir.path().join(MANIFEST_FILE), m.to_json()).unwrap();
        let err = ingest_dataset(dir.path(), 0.2, 0).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("label 9"));
    }

    #[test]
    fn class_folder_layout() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(4, 4, vec![0.5; 16]).unwrap();
        let mut mask = vec![0u32; 16];
        mask[5] = 1;
        for class in ["benign", "tumor"] {
            for i in 0..5 {
                let p = dir.path().join(class);
                fs::create_dir_all(&p).unwrap();
                fs::write(p.join(format!("p{i}.pgm")), encode_gray8(&img)).unwrap();
                fs::write(p.join(format!("p{i}_mask.pgm")), encode_label16(4, 4, &mask).unwrap()).unwrap();
            }
        }
        let m = ingest_dataset(dir.path(), 0.2, 3).unwrap();
        assert_eq!(m.class_names, ["benign", "tumor"]);
        assert_eq!(m.class_counts, vec![SplitCounts { train: 4, test: 1 }; 2]);
        assert!(dir.path().join(MANIFEST_FILE).is_file());
        assert_eq!(ingest_dataset(dir.path(), 0.2, 3).unwrap(), m);
    }

    #[test]
    fn corrupt_manifest_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), b"{\"version\": 1,").unwrap();
        assert!(matches!(ingest_dataset(dir.path(), 0.2, 0), Err(Error::Parse { .. })));
    }
}
