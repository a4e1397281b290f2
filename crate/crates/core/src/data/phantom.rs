use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::domain::{Geometry, LabelMap, Sex, SubjectAttributes, Volume};

/// Parameters of the nested-ellipsoid phantom generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: usize,
    pub num_tissues: usize,
    /// Angular subregions per tissue.
    pub num_structures: usize,
    pub age_effect: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { size: 32, num_tissues: 3, num_structures: 3, age_effect: 0.5, noise_sigma: 0.25, seed: 0 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::BadSpec(m));
        if self.size < 8 {
            return bad(format!("size {} < 8", self.size));
        }
        if self.num_tissues == 0 || self.num_structures == 0 {
            return bad("need at least one tissue and one structure per tissue".into());
        }
        if self.total_structures() + 1 > 256 {
            return bad(format!("{} structure classes exceed 255", self.total_structures()));
        }
        if !(0.0..=1.0).contains(&self.age_effect) {
            return bad(format!("age_effect {} outside [0, 1]", self.age_effect));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        Ok(())
    }

    pub fn total_structures(&self) -> usize {
        self.num_tissues * self.num_structures
    }

    /// Tissue classes including background.
    pub fn tissue_classes(&self) -> usize {
        self.num_tissues + 1
    }

    pub fn structure_classes(&self) -> usize {
        self.total_structures() + 1
    }

    /// Distance between consecutive tissue means; at least three noise standard deviations.
    pub fn intensity_gap(&self) -> f64 {
        (3.5 * self.noise_sigma).max(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub tissue: LabelMap,
    pub structure: LabelMap,
    pub attrs: SubjectAttributes,
}

/// Tissue class of a structure class; background maps to background.
pub fn structure_to_tissue(structure: usize, per_tissue: usize) -> usize {
    if structure == 0 {
        0
    } else {
        (structure - 1) / per_tissue + 1
    }
}

/// Tissue names from the innermost shell outwards.
pub fn tissue_names(spec: &PhantomSpec) -> Vec<String> {
    let mut names = vec!["background".to_string()];
    if spec.num_tissues == 3 {
        names.extend(["csf", "wm", "gm"].map(String::from));
    } else {
        names.extend((1..=spec.num_tissues).map(|t| format!("tissue{}", t)));
    }
    names
}

pub fn structure_names(spec: &PhantomSpec) -> Vec<String> {
    let tissues = tissue_names(spec);
    let mut names = vec!["background".to_string()];
    for t in 1..=spec.num_tissues {
        names.extend((0..spec.num_structures).map(|s| format!("{}_{}", tissues[t], s)));
    }
    names
}

struct Shape {
    center: [f64; 3],
    axes: [f64; 3],
    waves: Vec<([f64; 3], f64, f64)>,
    thresholds: Vec<f64>,
    rotation: f64,
}

impl Shape {
    fn draw(spec: &PhantomSpec, attrs: &SubjectAttributes, rng: &mut ChaCha8Rng) -> Self {
        let half = spec.size as f64 / 2.0;
        let center = [0; 3].map(|_| half - 0.5 + rng.gen_range(-0.04..0.04) * spec.size as f64);
        let axes = [0; 3].map(|_| half * rng.gen_range(0.74..0.86));
        let waves = (0..3)
            .map(|_| {
                let dir: [f64; 3] = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
                (dir, rng.gen_range(0.02..0.05), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        let t = spec.num_tissues;
        let inner = 0.35;
        let mut thresholds: Vec<f64> = (1..t)
            .map(|k| inner + (k - 1) as f64 * (1.0 - inner) / (t - 1) as f64 + rng.gen_range(-0.02..0.02))
            .collect();
        if let Some(first) = thresholds.first_mut() {
            let limit = if t > 2 { thresholds_second(inner, t) - 0.06 } else { 0.9 };
            let shifted = *first + spec.age_effect * 0.3 * (attrs.age_years as f64 - 50.0) / 100.0;
            *first = shifted.clamp(0.1, limit);
        }
        let rotation = rng.gen_range(-0.15..0.15);
        Self { center, axes, waves, thresholds, rotation }
    }

    /// Tissue (1-based, 0 outside) and sector index of a voxel center.
    fn classify(&self, ijk: [usize; 3], sectors: usize) -> (usize, usize) {
        let u: [f64; 3] = [0, 1, 2].map(|a| (ijk[a] as f64 - self.center[a]) / self.axes[a]);
        let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        let deform = if r > 0.0 {
            1.0 + self
                .waves
                .iter()
                .map(|(d, amp, phase)| amp * (3.0 * (d[0] * u[0] + d[1] * u[1] + d[2] * u[2]) / r + phase).cos())
                .sum::<f64>()
        } else {
            1.0
        };
        let rho = r / deform;
        if rho >= 1.0 {
            return (0, 0);
        }
        let tissue = 1 + self.thresholds.iter().filter(|&&t| rho >= t).count();
        let angle = (u[1].atan2(u[0]) + PI + self.rotation).rem_euclid(2.0 * PI);
        let sector = ((angle / (2.0 * PI)) * sectors as f64) as usize % sectors;
        (tissue, sector)
    }
}

fn thresholds_second(inner: f64, t: usize) -> f64 {
    inner + (1.0 - inner) / (t - 1) as f64
}

/// One phantom, fully determined by `spec.seed` and `attrs`.
pub fn generate_phantom(spec: &PhantomSpec, attrs: &SubjectAttributes) -> Result<Sample, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = Shape::draw(spec, attrs, &mut rng);
    let geometry = Geometry::cube(spec.size);
    let n = geometry.len();
    let (mut tissue, mut structure, mut intensity) = (vec![0; n], vec![0; n], vec![0.0; n]);
    let gap = spec.intensity_gap();
    for idx in 0..n {
        let (t, s) = shape.classify(geometry.coords(idx), spec.num_structures);
        let noise: f64 = StandardNormal.sample(&mut rng);
        if t == 0 {
            continue;
        }
        tissue[idx] = t;
        structure[idx] = (t - 1) * spec.num_structures + s + 1;
        intensity[idx] = (1.0 + gap * (t - 1) as f64 + spec.noise_sigma * noise).max(1e-3);
    }
    Ok(Sample {
        volume: Volume::new(geometry, intensity)?,
        tissue: LabelMap::new(geometry, spec.tissue_classes(), &tissue)?,
        structure: LabelMap::new(geometry, spec.structure_classes(), &structure)?,
        attrs: attrs.clone(),
    })
}

/// `count` phantoms with seeded attributes; sample `i` uses seed `spec.seed + i`.
pub fn generate_dataset(spec: &PhantomSpec, count: usize) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_a77e);
    (0..count)
        .map(|i| {
            let age = rng.gen_range(20..=85);
            let sex = if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male };
            let attrs = SubjectAttributes::new(age, sex, None)?;
            let sub = PhantomSpec { seed: spec.seed.wrapping_add(i as u64), ..spec.clone() };
            generate_phantom(&sub, &attrs)
        })
        .collect()
}

/// Relabels `fraction` of the label-boundary voxels to a differing 6-neighbour's label.
pub fn corrupt_boundary(labels: &LabelMap, fraction: f64, rng: &mut impl Rng) -> LabelMap {
    let g = *labels.geometry();
    let [d, h, w] = g.dims;
    let values = labels.labels();
    let neighbours = |idx: usize| {
        let [i, j, k] = g.coords(idx);
        let mut out = Vec::with_capacity(6);
        for (di, dj, dk) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
            let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
            if a >= 0 && b >= 0 && c >= 0 && (a as usize) < d && (b as usize) < h && (c as usize) < w {
                let other = values[g.index([a as usize, b as usize, c as usize])];
                if other != values[idx] {
                    out.push(other);
                }
            }
        }
        out
    };
    let boundary: Vec<usize> = (0..values.len()).filter(|&i| !neighbours(i).is_empty()).collect();
    let picks = ((boundary.len() as f64) * fraction).round() as usize;
    let mut noisy = values.clone();
    for pick in sample_indices(rng, boundary.len(), picks.min(boundary.len())).into_iter() {
        let idx = boundary[pick];
        let options = neighbours(idx);
        noisy[idx] = options[rng.gen_range(0..options.len())];
    }
    LabelMap::new(g, labels.num_classes(), &noisy).expect("neighbour labels are valid")
}
