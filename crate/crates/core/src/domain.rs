//! Volumes, label maps, subject attributes, and the checks tying them together.

use kgpl_tensor::Array;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid label {value} at voxel {index} (num_classes = {num_classes})")]
    InvalidLabel { value: usize, index: usize, num_classes: usize },
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("age {0} outside [0, 130]")]
    AgeOutOfRange(u32),
}

/// Grid dimensions plus physical placement, in millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, DomainError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(DomainError::InvalidGeometry(format!("zero dimension in {:?}", dims)));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(DomainError::InvalidGeometry(format!("spacing {:?} must be positive", spacing)));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(DomainError::InvalidGeometry("non-finite origin".into()));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn cube(edge: usize) -> Self {
        Self { dims: [edge; 3], spacing: [1.0; 3], origin: [0.0; 3] }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major linear index; the last axis varies fastest.
    pub fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let k = index % self.dims[2];
        let j = (index / self.dims[2]) % self.dims[1];
        let i = index / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }
}

/// A scalar intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self, DomainError> {
        if data.len() != geometry.len() {
            return Err(DomainError::ShapeMismatch(format!(
                "{} intensities for dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self { data: vec![0.0; geometry.len()], geometry }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, ijk: [usize; 3]) -> f64 {
        self.data[self.geometry.index(ijk)]
    }

    pub fn check_finite(&self) -> Result<(), DomainError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(DomainError::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// `(1, D, H, W)` single-channel array.
    pub fn to_array(&self) -> Array {
        let [d, h, w] = self.geometry.dims;
        Array::from_vec(&[1, d, h, w], self.data.clone())
    }
}

/// Class-index storage sized to the class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelData {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl LabelData {
    fn get(&self, i: usize) -> usize {
        match self {
            LabelData::U8(v) => v[i] as usize,
            LabelData::U16(v) => v[i] as usize,
        }
    }

    fn len(&self) -> usize {
        match self {
            LabelData::U8(v) => v.len(),
            LabelData::U16(v) => v.len(),
        }
    }
}

/// Integer class indices on a grid. Class 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    num_classes: usize,
    data: LabelData,
}

impl LabelMap {
    /// Builds a label map, checking every value against `num_classes`.
    pub fn new(geometry: Geometry, num_classes: usize, labels: &[usize]) -> Result<Self, DomainError> {
        let map = Self::new_unchecked(geometry, num_classes, labels)?;
        map.check_labels()?;
        Ok(map)
    }

    /// Builds without validating values; [`validate_pair`] reports bad labels later.
    pub fn new_unchecked(geometry: Geometry, num_classes: usize, labels: &[usize]) -> Result<Self, DomainError> {
        if labels.len() != geometry.len() {
            return Err(DomainError::ShapeMismatch(format!(
                "{} labels for dims {:?}",
                labels.len(),
                geometry.dims
            )));
        }
        if num_classes == 0 || num_classes > u16::MAX as usize + 1 {
            return Err(DomainError::InvalidGeometry(format!("num_classes {} unsupported", num_classes)));
        }
        let data = if num_classes <= 256 && labels.iter().all(|&l| l <= u8::MAX as usize) {
            LabelData::U8(labels.iter().map(|&l| l as u8).collect())
        } else {
            LabelData::U16(labels.iter().map(|&l| l.min(u16::MAX as usize) as u16).collect())
        };
        Ok(Self { geometry, num_classes, data })
    }

    pub fn filled(geometry: Geometry, num_classes: usize, value: usize) -> Result<Self, DomainError> {
        Self::new(geometry, num_classes, &vec![value; geometry.len()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn storage(&self) -> &LabelData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn get(&self, index: usize) -> usize {
        self.data.get(index)
    }

    pub fn at(&self, ijk: [usize; 3]) -> usize {
        self.get(self.geometry.index(ijk))
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn count(&self, class: usize) -> usize {
        self.iter().filter(|&l| l == class).count()
    }

    /// Classes with at least one voxel, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for l in self.iter() {
            if l < seen.len() {
                seen[l] = true;
            }
        }
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }

    fn check_labels(&self) -> Result<(), DomainError> {
        match self.iter().position(|l| l >= self.num_classes) {
            Some(index) => Err(DomainError::InvalidLabel {
                value: self.get(index),
                index,
                num_classes: self.num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Same labels with a different geometry placement (dims must agree).
    pub fn with_geometry(mut self, geometry: Geometry) -> Result<Self, DomainError> {
        if geometry.dims != self.geometry.dims {
            return Err(DomainError::ShapeMismatch("with_geometry changes dims".into()));
        }
        self.geometry = geometry;
        Ok(self)
    }

    /// `(K, D, H, W)` one-hot encoding.
    pub fn one_hot(&self) -> Array {
        let [d, h, w] = self.geometry.dims;
        let n = self.len();
        let mut out = Array::zeros(&[self.num_classes, d, h, w]);
        let data = out.data_mut();
        for (i, l) in self.iter().enumerate() {
            data[l * n + i] = 1.0;
        }
        out
    }

    /// Argmax over the leading class axis of a `(K, D, H, W)` array. Ties go to the
    /// lowest class index.
    pub fn from_scores(scores: &Array, geometry: Geometry) -> Result<Self, DomainError> {
        let s = scores.shape();
        if s.len() != 4 || s[1..] != geometry.dims {
            return Err(DomainError::ShapeMismatch(format!(
                "scores {:?} vs dims {:?}",
                s, geometry.dims
            )));
        }
        let (k, n) = (s[0], geometry.len());
        let d = scores.data();
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * n + i] > d[best * n + i] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        Self::new(geometry, k, &labels)
    }

    /// Relabels every voxel through `table` (index = old class).
    pub fn map_classes(&self, table: &[usize], num_classes: usize) -> Result<Self, DomainError> {
        let labels: Vec<usize> = self.iter().map(|l| table[l]).collect();
        Self::new(self.geometry, num_classes, &labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    Unspecified,
}

/// Demographic and clinical metadata of one subject.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubjectAttributes {
    pub age_years: u32,
    pub sex: Sex,
    #[serde(default)]
    pub diagnosis: Option<String>,
}

impl SubjectAttributes {
    pub fn new(age_years: u32, sex: Sex, diagnosis: Option<&str>) -> Result<Self, DomainError> {
        if age_years > 130 {
            return Err(DomainError::AgeOutOfRange(age_years));
        }
        Ok(Self { age_years, sex, diagnosis: diagnosis.map(str::to_string) })
    }
}

/// Named sizes of a rank-3 activation: `(batch, channels-or-tokens, sequence-or-hidden)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorShape3 {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorShape3 {
    pub fn new(batch: usize, rows: usize, cols: usize) -> Result<Self, DomainError> {
        if batch == 0 || rows == 0 || cols == 0 {
            return Err(DomainError::ShapeMismatch(format!("({}, {}, {}) has a zero extent", batch, rows, cols)));
        }
        Ok(Self { batch, rows, cols })
    }

    pub fn of(shape: &[usize]) -> Result<Self, DomainError> {
        match shape {
            [b, r, c] => Self::new(*b, *r, *c),
            _ => Err(DomainError::ShapeMismatch(format!("{:?} is not rank 3", shape))),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.batch, self.rows, self.cols]
    }
}

/// Checks that an image and its label map can be used together.
pub fn validate_pair(volume: &Volume, labels: &LabelMap) -> Result<(), DomainError> {
    let (gv, gm) = (volume.geometry(), labels.geometry());
    if gv.dims != gm.dims {
        return Err(DomainError::ShapeMismatch(format!("volume {:?} vs labels {:?}", gv.dims, gm.dims)));
    }
    if gv.spacing != gm.spacing {
        return Err(DomainError::ShapeMismatch(format!(
            "spacing {:?} vs {:?}",
            gv.spacing, gm.spacing
        )));
    }
    labels.check_labels()?;
    volume.check_finite()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map8(values: impl Fn(usize) -> usize, k: usize) -> LabelMap {
        let g = Geometry::cube(8);
        let labels: Vec<usize> = (0..g.len()).map(values).collect();
        LabelMap::new_unchecked(g, k, &labels).unwrap()
    }

    #[test]
    fn matching_pair_is_ok() {
        let v = Volume::zeros(Geometry::cube(8));
        let m = map8(|i| i % 3, 3);
        assert_eq!(validate_pair(&v, &m), Ok(()));
        // pure: same answer on repeat
        assert_eq!(validate_pair(&v, &m), validate_pair(&v, &m));
    }

    #[test]
    fn size_mismatch_detected() {
        let v = Volume::zeros(Geometry::cube(8));
        let m = LabelMap::filled(Geometry::cube(16), 3, 0).unwrap();
        assert!(matches!(validate_pair(&v, &m), Err(DomainError::ShapeMismatch(_))));
    }

    #[test]
    fn label_equal_to_class_count_is_invalid() {
        let v = Volume::zeros(Geometry::cube(8));
        let m = map8(|i| if i == 5 { 3 } else { 0 }, 3);
        assert_eq!(
            validate_pair(&v, &m),
            Err(DomainError::InvalidLabel { value: 3, index: 5, num_classes: 3 })
        );
    }

    #[test]
    fn non_finite_detected() {
        let mut v = Volume::zeros(Geometry::cube(8));
        v.data_mut()[7] = f64::NAN;
        let m = map8(|_| 0, 2);
        assert_eq!(validate_pair(&v, &m), Err(DomainError::NonFinite(7)));
    }

    #[test]
    fn spacing_mismatch_detected() {
        let v = Volume::zeros(Geometry::new([8; 3], [1.0, 1.0, 2.0], [0.0; 3]).unwrap());
        let m = map8(|_| 0, 2);
        assert!(matches!(validate_pair(&v, &m), Err(DomainError::ShapeMismatch(_))));
    }

    #[test]
    fn storage_width_follows_class_count() {
        assert!(matches!(map8(|_| 1, 3).storage(), LabelData::U8(_)));
        let g = Geometry::cube(2);
        let m = LabelMap::new(g, 300, &[0, 299, 5, 6, 7, 8, 9, 10]).unwrap();
        assert!(matches!(m.storage(), LabelData::U16(_)));
        assert_eq!(m.get(1), 299);
    }

    #[test]
    fn geometry_rejects_bad_spacing() {
        assert!(Geometry::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 0, 4], [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn attributes_validate_age() {
        assert!(SubjectAttributes::new(130, Sex::Female, None).is_ok());
        assert_eq!(SubjectAttributes::new(131, Sex::Male, None), Err(DomainError::AgeOutOfRange(131)));
    }

    proptest! {
        #[test]
        fn one_hot_argmax_roundtrip(k in 2usize..7, seed in any::<u64>()) {
            let g = Geometry::new([3, 4, 2], [1.0; 3], [0.0; 3]).unwrap();
            let mut s = seed;
            let labels: Vec<usize> = (0..g.len()).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as usize) % k
            }).collect();
            let m = LabelMap::new(g, k, &labels).unwrap();
            let back = LabelMap::from_scores(&m.one_hot(), g).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
