//! Annotation manifests, class statistics and patient-grouped splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{BBox, Label};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("{patients} patients cannot fill {k} folds")]
    TooFewPatients { patients: usize, k: usize },
    #[error("training split has no Distended samples")]
    NoPositiveSamples,
    #[error("unknown image id {0}")]
    UnknownImage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Ground-truth class of an image. `Distended` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Distended,
    NonDistended,
}

impl ClassLabel {
    pub fn is_positive(self) -> bool {
        self == ClassLabel::Distended
    }

    /// Index used by two-class heads: 0 = NonDistended, 1 = Distended.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::NonDistended => 0,
            ClassLabel::Distended => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            ClassLabel::Distended
        } else {
            ClassLabel::NonDistended
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "Distended" => Some(ClassLabel::Distended),
            "NonDistended" => Some(ClassLabel::NonDistended),
            _ => None,
        }
    }
}

impl From<ClassLabel> for Label {
    fn from(c: ClassLabel) -> Self {
        match c {
            ClassLabel::Distended => Label::Distended,
            ClassLabel::NonDistended => Label::NonDistended,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Label::from(*self).fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Side {
    Left,
    Right,
    #[default]
    Unknown,
}

fn default_size() -> usize {
    256
}

fn default_visit() -> u32 {
    1
}

/// Ground truth for one stored (cropped and resized) image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub image_path: String,
    pub patient_id: String,
    #[serde(default)]
    pub side: Side,
    #[serde(default = "default_visit")]
    pub visit: u32,
    pub label: ClassLabel,
    pub sqr_box: BBox,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
}

// Loose mirror of `Annotation` so that label and box problems are reported
// as validation errors rather than JSON syntax errors.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    image_id: String,
    image_path: String,
    patient_id: String,
    #[serde(default)]
    side: Side,
    #[serde(default = "default_visit")]
    visit: u32,
    label: String,
    sqr_box: [f64; 4],
    #[serde(default = "default_size")]
    width: usize,
    #[serde(default = "default_size")]
    height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClassCounts {
    pub n_total: usize,
    pub n_distended: usize,
    pub n_nondistended: usize,
    pub n_patients: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<Annotation>,
    counts: ClassCounts,
    /// Directory that relative `image_path`s resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Validates entries (unique ids, boxes inside their images, at least one
    /// visit) and computes the class counts.
    pub fn new(entries: Vec<Annotation>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for (i, a) in entries.iter().enumerate() {
            validate(a, i + 1, &mut seen)?;
        }
        let counts = count(&entries);
        Ok(Self {
            entries,
            counts,
            root: PathBuf::from("."),
        })
    }

    pub fn entries(&self) -> &[Annotation] {
        &self.entries
    }

    pub fn counts(&self) -> ClassCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&Annotation> {
        self.entries.iter().find(|a| a.image_id == image_id)
    }

    pub fn image_path(&self, a: &Annotation) -> PathBuf {
        let p = Path::new(&a.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Image ids grouped by patient, both sorted.
    pub fn patients(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for a in &self.entries {
            map.entry(a.patient_id.as_str()).or_default().push(a.image_id.as_str());
        }
        for ids in map.values_mut() {
            ids.sort_unstable();
        }
        map
    }

    /// Annotations for `ids`, in manifest order.
    pub fn select<'a>(&'a self, ids: &BTreeSet<String>) -> Vec<&'a Annotation> {
        self.entries.iter().filter(|a| ids.contains(&a.image_id)).collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for a in &self.entries {
            serde_json::to_writer(&mut out, a).expect("annotation serializes");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&out).map_err(io_err(path))
    }
}

fn validate(a: &Annotation, line: usize, seen: &mut HashSet<String>) -> Result<(), DatasetError> {
    let fail = |message: String| DatasetError::Validation { line, message };
    if a.image_id.is_empty() {
        return Err(fail("empty image_id".into()));
    }
    if !seen.insert(a.image_id.clone()) {
        return Err(fail(format!("duplicate image_id {:?}", a.image_id)));
    }
    if a.visit < 1 {
        return Err(fail("visit must be >= 1".into()));
    }
    if a.width == 0 || a.height == 0 {
        return Err(fail("image size must be positive".into()));
    }
    if !a.sqr_box.within(a.width as f64, a.height as f64) {
        return Err(fail(format!(
            "sqr_box {:?} outside the {}x{} image",
            <[f64; 4]>::from(a.sqr_box),
            a.width,
            a.height
        )));
    }
    Ok(())
}

fn count(entries: &[Annotation]) -> ClassCounts {
    let n_distended = entries.iter().filter(|a| a.label.is_positive()).count();
    let patients: HashSet<&str> = entries.iter().map(|a| a.patient_id.as_str()).collect();
    ClassCounts {
        n_total: entries.len(),
        n_distended,
        n_nondistended: entries.len() - n_distended,
        n_patients: patients.len(),
    }
}

/// Reads a JSON-lines manifest. Blank lines are skipped; relative image paths
/// resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawAnnotation = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = ClassLabel::parse(&raw.label).ok_or_else(|| DatasetError::Validation {
            line: line_no,
            message: format!("unknown label {:?}", raw.label),
        })?;
        let [x0, y0, x1, y1] = raw.sqr_box;
        let sqr_box = BBox::new(x0, y0, x1, y1).map_err(|e| DatasetError::Validation {
            line: line_no,
            message: e.to_string(),
        })?;
        let a = Annotation {
            image_id: raw.image_id,
            image_path: raw.image_path,
            patient_id: raw.patient_id,
            side: raw.side,
            visit: raw.visit,
            label,
            sqr_box,
            width: raw.width,
            height: raw.height,
        };
        validate(&a, line_no, &mut seen)?;
        entries.push(a);
    }
    let counts = count(&entries);
    Ok(DatasetManifest {
        entries,
        counts,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// One cross-validation fold. The id sets partition the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

fn shuffled_patients<'a>(patients: &BTreeMap<&'a str, Vec<&'a str>>, seed: u64) -> Vec<&'a str> {
    let mut order: Vec<&str> = patients.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Patient-grouped k-fold split: patients are shuffled by `seed` and each is
/// assigned to the fold currently holding the fewest images (lowest index on
/// ties). Fold `i` is the test set of split `i`; the rest is training data.
pub fn grouped_kfold(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, DatasetError> {
    let patients = manifest.patients();
    if k < 2 || patients.len() < k {
        return Err(DatasetError::TooFewPatients {
            patients: patients.len(),
            k,
        });
    }
    let mut folds: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    for p in shuffled_patients(&patients, seed) {
        let target = (0..k).min_by_key(|&i| (folds[i].len(), i)).expect("k >= 2");
        folds[target].extend(patients[p].iter().map(|s| s.to_string()));
    }
    Ok((0..k)
        .map(|i| FoldSplit {
            fold_index: i,
            test_ids: folds[i].clone(),
            train_ids: folds
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, f)| f.iter().cloned())
                .collect(),
            val_ids: BTreeSet::new(),
        })
        .collect())
}

/// Moves whole patients from the training portion into a validation set of
/// roughly `(1 - ratio)` of the training images.
pub fn train_val_split(
    split: &FoldSplit,
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> FoldSplit {
    let mut patients: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let pool: Vec<&str> = split
        .train_ids
        .iter()
        .chain(split.val_ids.iter())
        .map(String::as_str)
        .collect();
    for id in &pool {
        if let Some(a) = manifest.get(id) {
            patients.entry(a.patient_id.as_str()).or_default().push(id);
        }
    }
    let target = ((1.0 - ratio) * pool.len() as f64).round() as usize;
    let mix = seed ^ (split.fold_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let order = shuffled_patients(&patients, mix);
    let mut val = BTreeSet::new();
    for p in &order {
        let ids = &patients[p];
        if val.len() + ids.len() <= target {
            val.extend(ids.iter().map(|s| s.to_string()));
        }
    }
    if val.is_empty() && target > 0 {
        if let Some(p) = order.first() {
            val.extend(patients[p].iter().map(|s| s.to_string()));
        }
    }
    let train = pool
        .iter()
        .filter(|id| !val.contains(**id))
        .map(|s| s.to_string())
        .collect();
    FoldSplit {
        fold_index: split.fold_index,
        train_ids: train,
        val_ids: val,
        test_ids: split.test_ids.clone(),
    }
}

/// Ratio of NonDistended to Distended images among `train_ids`.
pub fn class_weight(
    train_ids: &BTreeSet<String>,
    manifest: &DatasetManifest,
) -> Result<f64, DatasetError> {
    let mut pos = 0usize;
    let mut neg = 0usize;
    for id in train_ids {
        let a = manifest
            .get(id)
            .ok_or_else(|| DatasetError::UnknownImage(id.clone()))?;
        if a.label.is_positive() {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    if pos == 0 {
        return Err(DatasetError::NoPositiveSamples);
    }
    Ok(neg as f64 / pos as f64)
}

pub fn write_folds(folds: &[FoldSplit], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(folds).expect("folds serialize");
    fs::write(path, json + "\n").map_err(io_err(path))
}

pub fn read_folds(path: impl AsRef<Path>) -> Result<Vec<FoldSplit>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Manifest with the given images-per-patient and label pattern.
    pub fn manifest(images_per_patient: &[usize], distended_every: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        let mut n = 0;
        for (p, &count) in images_per_patient.iter().enumerate() {
            for v in 0..count {
                let label = if distended_every > 0 && n % distended_every == 0 {
                    ClassLabel::Distended
                } else {
                    ClassLabel::NonDistended
                };
                entries.push(Annotation {
                    image_id: format!("img{n:04}"),
                    image_path: format!("images/img{n:04}.png"),
                    patient_id: format!("p{p:03}"),
                    side: Side::Unknown,
                    visit: v as u32 + 1,
                    label,
                    sqr_box: BBox::new(10.0, 10.0, 50.0, 30.0).unwrap(),
                    width: 256,
                    height: 256,
                });
                n += 1;
            }
        }
        DatasetManifest::new(entries).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::manifest;
    use super::*;


    fn line(id: &str, patient: &str, label: &str, bbox: &str) -> String {
        format!(
            r#"{{"image_id":"{id}","image_path":"images/{id}.png","patient_id":"{patient}","side":"Left","visit":1,"label":"{label}","sqr_box":{bbox}}}"#
        )
    }

    fn write_tmp(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_counts() {
        let mut lines = Vec::new();
        for i in 0..483 {
            let label = if i < 123 { "Distended" } else { "NonDistended" };
            lines.push(line(&format!("i{i}"), &format!("p{}", i / 3), label, "[1,2,30,40]"));
        }
        let f = write_tmp(&lines);
        let m = load_manifest(f.path()).unwrap();
        let c = m.counts();
        assert_eq!((c.n_total, c.n_distended, c.n_nondistended, c.n_patients), (483, 123, 360, 161));
    }

    #[test]
    fn load_empty_file() {
        let f = write_tmp(&[]);
        assert!(load_manifest(f.path()).unwrap().is_empty());
    }

    #[test]
    fn load_errors_name_the_line() {
        let f = write_tmp(&[
            line("a", "p1", "Distended", "[1,2,30,40]"),
            line("b", "p1", "Maybe", "[1,2,30,40]"),
        ]);
        match load_manifest(f.path()) {
            Err(DatasetError::Validation { line: 2, message }) => assert!(message.contains("Maybe")),
            other => panic!("unexpected {other:?}"),
        }

        let f = write_tmp(&[line("a", "p1", "Distended", "[1,2,30,40]"), "{not json".into()]);
        assert!(matches!(load_manifest(f.path()), Err(DatasetError::Parse { line: 2, .. })));

        let f = write_tmp(&[
            line("a", "p1", "Distended", "[1,2,30,40]"),
            line("a", "p2", "Distended", "[1,2,30,40]"),
        ]);
        assert!(matches!(load_manifest(f.path()), Err(DatasetError::Validation { line: 2, .. })));

        let f = write_tmp(&[line("a", "p1", "Distended", "[1,2,300,40]")]);
        assert!(matches!(load_manifest(f.path()), Err(DatasetError::Validation { line: 1, .. })));
    }

    #[test]
    fn kfold_one_image_per_patient() {
        let m = manifest(&[1; 5], 2);
        let folds = grouped_kfold(&m, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.test_ids.len(), 1);
            assert_eq!(f.train_ids.len(), 4);
        }
        assert!(matches!(
            grouped_kfold(&m, 6, 7),
            Err(DatasetError::TooFewPatients { patients: 5, k: 6 })
        ));
    }

    #[test]
    fn multi_image_patient_stays_together() {
        let m = manifest(&[4, 1, 2, 1, 3, 1, 1, 2], 3);
        let p0: Vec<String> = (0..4).map(|n| format!("img{n:04}")).collect();
        for f in grouped_kfold(&m, 3, 11).unwrap() {
            let in_test = p0.iter().filter(|id| f.test_ids.contains(*id)).count();
            assert!(in_test == 0 || in_test == 4);
            let split = train_val_split(&f, &m, 0.8, 3);
            let in_val = p0.iter().filter(|id| split.val_ids.contains(*id)).count();
            assert!(in_val == 0 || in_val == 4);
        }
    }

    #[test]
    fn train_val_exact_ratio_and_determinism() {
        let m = manifest(&[1; 12], 2);
        let split = FoldSplit {
            fold_index: 0,
            train_ids: (0..10).map(|n| format!("img{n:04}")).collect(),
            val_ids: BTreeSet::new(),
            test_ids: (10..12).map(|n| format!("img{n:04}")).collect(),
        };
        let a = train_val_split(&split, &m, 0.8, 5);
        assert_eq!((a.train_ids.len(), a.val_ids.len()), (8, 2));
        assert_eq!(a, train_val_split(&split, &m, 0.8, 5));
    }

    #[test]
    fn class_weight_examples() {
        let m = manifest(&[1; 8], 2);
        let all: BTreeSet<String> = m.entries().iter().map(|a| a.image_id.clone()).collect();
        assert_eq!(class_weight(&all, &m).unwrap(), 1.0);
        let negatives: BTreeSet<String> = m
            .entries()
            .iter()
            .filter(|a| !a.label.is_positive())
            .map(|a| a.image_id.clone())
            .collect();
        assert!(matches!(class_weight(&negatives, &m), Err(DatasetError::NoPositiveSamples)));
    }

    #[test]
    fn folds_json_round_trip() {
        let m = manifest(&[2, 1, 3, 1, 1, 2], 2);
        let folds = grouped_kfold(&m, 3, 1).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_folds(&folds, f.path()).unwrap();
        assert_eq!(read_folds(f.path()).unwrap(), folds);
    }
}
