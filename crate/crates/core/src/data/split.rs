use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_dataset, load_labels, load_volume, save_labels, save_volume, DataError, PhantomSpec, Sample};
use crate::container::write_atomic;
use crate::domain::SubjectAttributes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// Disjoint index sets over `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn assignment(&self, n: usize) -> Vec<SplitName> {
        let mut out = vec![SplitName::Train; n];
        for &i in &self.val {
            out[i] = SplitName::Val;
        }
        for &i in &self.test {
            out[i] = SplitName::Test;
        }
        out
    }
}

/// Seeded shuffle of `0..n` cut into train/val/test by `ratios`
/// (largest-remainder rounding, so sizes are within one of the exact proportions).
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split, DataError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratios.to_vec()));
    }
    let exact = ratios.map(|r| r * n as f64);
    let mut sizes = exact.map(|x| x.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(sizes[0] + sizes[1]);
    let val = idx.split_off(sizes[0]);
    Ok(Split { train: idx, val, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: PathBuf,
    pub tissue: PathBuf,
    pub structure: PathBuf,
    pub attrs: SubjectAttributes,
    pub split: SplitName,
}

/// Dataset listing; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub spec: Option<PhantomSpec>,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        write_atomic(&dir.join(Self::FILE_NAME), self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(Self::FILE_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| DataError::IoFailure { path: path.display().to_string(), reason: e.to_string() })?;
        serde_json::from_str(&text)
            .map_err(|e| DataError::IoFailure { path: path.display().to_string(), reason: e.to_string() })
    }

    pub fn entries_in(&self, split: SplitName) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<Sample, DataError> {
        Ok(Sample {
            volume: load_volume(&dir.join(&entry.volume))?,
            tissue: load_labels(&dir.join(&entry.tissue))?,
            structure: load_labels(&dir.join(&entry.structure))?,
            attrs: entry.attrs.clone(),
        })
    }

    /// Every sample of one split, in manifest order.
    pub fn load_split(&self, dir: &Path, split: SplitName) -> Result<Vec<Sample>, DataError> {
        self.entries_in(split).map(|e| Self::load_sample(dir, e)).collect()
    }
}

/// Generates `count` phantoms into `dir` as compressed NIfTI triplets and writes the manifest.
/// The split is seeded by `spec.seed`.
pub fn write_dataset(dir: &Path, spec: &PhantomSpec, count: usize, ratios: [f64; 3]) -> Result<Manifest, DataError> {
    let samples = generate_dataset(spec, count)?;
    let assignment = split(count, ratios, spec.seed)?.assignment(count);
    std::fs::create_dir_all(dir)
        .map_err(|e| DataError::IoFailure { path: dir.display().to_string(), reason: e.to_string() })?;
    let mut entries = Vec::with_capacity(count);
    for (i, (sample, split)) in samples.iter().zip(assignment).enumerate() {
        let id = format!("phantom_{:04}", i);
        let name = |what: &str| PathBuf::from(format!("{}_{}.nii.gz", id, what));
        let entry = ManifestEntry {
            volume: name("t1"),
            tissue: name("tissue"),
            structure: name("structure"),
            id,
            attrs: sample.attrs.clone(),
            split,
        };
        save_volume(&dir.join(&entry.volume), &sample.volume)?;
        save_labels(&dir.join(&entry.tissue), &sample.tissue)?;
        save_labels(&dir.join(&entry.structure), &sample.structure)?;
        entries.push(entry);
    }
    let manifest = Manifest { spec: Some(spec.clone()), seed: spec.seed, entries };
    manifest.save(dir)?;
    Ok(manifest)
}
