use rand::Rng;

use super::{DataError, Sample};
use crate::domain::{Geometry, LabelMap, Volume};

/// A box of `dims` voxels starting at `start` (possibly outside the source grid).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub start: [isize; 3],
    pub dims: [usize; 3],
}

/// Inclusive bounds `(lo, hi)` of the nonzero voxels.
pub fn foreground_box(v: &Volume) -> Result<([usize; 3], [usize; 3]), DataError> {
    let g = v.geometry();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    for (idx, &x) in v.data().iter().enumerate() {
        if x != 0.0 {
            let c = g.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(DataError::EmptyForeground);
    }
    Ok((lo, hi))
}

impl Crop {
    /// Box of `dims` centred on the foreground bounding box.
    pub fn centered(v: &Volume, dims: [usize; 3]) -> Result<Self, DataError> {
        let (lo, hi) = foreground_box(v)?;
        let start = [0, 1, 2].map(|a| {
            let extent = (hi[a] - lo[a] + 1) as isize;
            lo[a] as isize + (extent - dims[a] as isize).div_euclid(2)
        });
        Ok(Self { start, dims })
    }

    fn geometry(&self, src: &Geometry) -> Geometry {
        let origin = [0, 1, 2].map(|a| src.origin[a] + self.start[a] as f64 * src.spacing[a]);
        Geometry { dims: self.dims, spacing: src.spacing, origin }
    }

    fn gather<T: Copy>(&self, src: &Geometry, values: &[T], fill: T) -> Vec<T> {
        let out = Geometry { dims: self.dims, ..*src };
        (0..out.len())
            .map(|idx| {
                let c = out.coords(idx);
                let s = [0, 1, 2].map(|a| c[a] as isize + self.start[a]);
                if (0..3).all(|a| s[a] >= 0 && (s[a] as usize) < src.dims[a]) {
                    values[src.index(s.map(|x| x as usize))]
                } else {
                    fill
                }
            })
            .collect()
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        let g = v.geometry();
        Volume::new(self.geometry(g), self.gather(g, v.data(), 0.0)).expect("crop keeps values finite")
    }

    pub fn apply_labels(&self, m: &LabelMap) -> LabelMap {
        let g = m.geometry();
        LabelMap::new(self.geometry(g), m.num_classes(), &self.gather(g, &m.labels(), 0)).expect("crop keeps labels")
    }
}

/// Crop or zero-pad to `dims` around the centre of `v`'s grid.
pub fn crop_or_pad(v: &Volume, dims: [usize; 3]) -> Volume {
    let src = v.dims();
    let start = [0, 1, 2].map(|a| (src[a] as isize - dims[a] as isize).div_euclid(2));
    Crop { start, dims }.apply_volume(v)
}

fn zscore(v: &mut Volume) {
    let fg: Vec<f64> = v.data().iter().copied().filter(|&x| x != 0.0).collect();
    let n = fg.len() as f64;
    let mean = fg.iter().sum::<f64>() / n;
    let sd = (fg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    for x in v.data_mut().iter_mut().filter(|x| **x != 0.0) {
        *x = (*x - mean) / sd;
    }
}

/// Foreground-centred crop/pad to `dims` followed by z-scoring over the foreground.
/// Returns the crop so paired label maps can be cut identically.
pub fn preprocess(v: &Volume, dims: [usize; 3]) -> Result<(Volume, Crop), DataError> {
    let crop = Crop::centered(v, dims)?;
    let mut out = crop.apply_volume(v);
    if out.data().iter().all(|&x| x == 0.0) {
        return Err(DataError::EmptyForeground);
    }
    zscore(&mut out);
    Ok((out, crop))
}

fn flip_index(g: &Geometry, idx: usize, axes: [bool; 3]) -> usize {
    let mut c = g.coords(idx);
    for a in 0..3 {
        if axes[a] {
            c[a] = g.dims[a] - 1 - c[a];
        }
    }
    g.index(c)
}

pub fn flip_volume(v: &Volume, axes: [bool; 3]) -> Volume {
    let g = *v.geometry();
    let mut out = vec![0.0; g.len()];
    for (i, &x) in v.data().iter().enumerate() {
        out[flip_index(&g, i, axes)] = x;
    }
    Volume::new(g, out).expect("same geometry")
}

pub fn flip_labels(m: &LabelMap, axes: [bool; 3]) -> LabelMap {
    let g = *m.geometry();
    let mut out = vec![0; g.len()];
    for (i, x) in m.iter().enumerate() {
        out[flip_index(&g, i, axes)] = x;
    }
    LabelMap::new(g, m.num_classes(), &out).expect("same labels")
}

/// Flips each axis independently with probability 0.5; image and both maps move together.
pub fn augment_flip(s: &Sample, rng: &mut impl Rng) -> (Sample, [bool; 3]) {
    let axes = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
    let out = Sample {
        volume: flip_volume(&s.volume, axes),
        tissue: flip_labels(&s.tissue, axes),
        structure: flip_labels(&s.structure, axes),
        attrs: s.attrs.clone(),
    };
    (out, axes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};
    use crate::domain::{Sex, SubjectAttributes};
    use crate::metrics::dsc;
    use proptest::prelude::*;
    use rand::rngs::mock::StepRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phantom(size: usize, seed: u64) -> Sample {
        let spec = PhantomSpec { size, seed, ..Default::default() };
        generate_phantom(&spec, &SubjectAttributes::new(45, Sex::Male, None).unwrap()).unwrap()
    }

    fn moments(v: &Volume) -> (f64, f64) {
        let fg: Vec<f64> = v.data().iter().copied().filter(|&x| x != 0.0).collect();
        let n = fg.len() as f64;
        let mean = fg.iter().sum::<f64>() / n;
        (mean, (fg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn empty_foreground_rejected() {
        let v = Volume::zeros(Geometry::cube(8));
        assert!(matches!(preprocess(&v, [4; 3]), Err(DataError::EmptyForeground)));
    }

    #[test]
    fn output_is_zscored() {
        let s = phantom(24, 3);
        let (out, _) = preprocess(&s.volume, [32; 3]).unwrap();
        let (mean, sd) = moments(&out);
        assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6, "{} {}", mean, sd);
        assert_eq!(out.dims(), [32; 3]);
    }

    #[test]
    fn crop_keeps_center_structure() {
        let s = phantom(24, 5);
        let (out, crop) = preprocess(&s.volume, [16; 3]).unwrap();
        let labels = crop.apply_labels(&s.structure);
        assert_eq!(labels.dims(), out.dims());
        let center = [8, 8, 8];
        let src = [0, 1, 2].map(|a| (center[a] as isize + crop.start[a]) as usize);
        assert_eq!(labels.at(center), s.structure.at(src));
        assert_ne!(labels.at(center), 0);
    }

    #[test]
    fn crop_and_flip_keep_pairs_aligned() {
        let s = phantom(16, 1);
        let (flipped, axes) = augment_flip(&s, &mut ChaCha8Rng::seed_from_u64(2));
        for (v, t) in flipped.volume.data().iter().zip(flipped.tissue.iter()) {
            assert_eq!(*v > 0.0, t > 0);
        }
        assert_eq!(flip_labels(&flipped.tissue, axes), s.tissue);
    }

    #[test]
    fn forced_rngs() {
        let s = phantom(8, 0);
        let (same, axes) = augment_flip(&s, &mut StepRng::new(u64::MAX, 0));
        assert_eq!(axes, [false; 3]);
        assert_eq!(same, s);
        let mut all = StepRng::new(0, 0);
        let (once, axes) = augment_flip(&s, &mut all);
        assert_eq!(axes, [true; 3]);
        assert_ne!(once, s);
        let (twice, _) = augment_flip(&once, &mut all);
        assert_eq!(twice, s);
    }

    #[test]
    fn flip_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = phantom(8, 0);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let (_, axes) = augment_flip(&s, &mut rng);
            for a in 0..3 {
                counts[a] += axes[a] as usize;
            }
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.47..=0.53).contains(&f), "{}", f);
        }
    }

    #[test]
    fn flips_commute_with_dsc() {
        let a = phantom(12, 1);
        let b = phantom(12, 2);
        let axes = [true, false, true];
        for class in 1..4 {
            let before = dsc(&a.tissue, &b.tissue, class).unwrap();
            let after = dsc(&flip_labels(&a.tissue, axes), &flip_labels(&b.tissue, axes), class).unwrap();
            assert_eq!(before, after);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn preprocess_idempotent(seed in 0u64..500, edge in 10usize..20) {
            let s = phantom(16, seed);
            let (once, _) = preprocess(&s.volume, [edge; 3]).unwrap();
            let (twice, _) = preprocess(&once, [edge; 3]).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
