//! Overlap and surface-distance metrics between label maps, and per-class reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::LabelMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {class} is empty in the {side} mask")]
    EmptyMask { class: usize, side: &'static str },
    #[error("invalid spacing {0:?}")]
    BadSpacing([f64; 3]),
}

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<(), MetricError> {
    if pred.dims() != gt.dims() {
        return Err(MetricError::ShapeMismatch(format!("pred {:?} vs gt {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

fn mask(map: &LabelMap, class: usize) -> Vec<bool> {
    map.iter().map(|l| l == class).collect()
}

/// Dice similarity coefficient of one class; 1 when the class is absent from both maps.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (a, b) in pred.iter().zip(gt.iter()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Mask voxels with at least one 6-neighbour outside the mask or outside the grid.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let idx = |i: usize, j: usize, k: usize| (i * h + j) * w + k;
    let mut out = vec![false; mask.len()];
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                let at = idx(i, j, k);
                if !mask[at] {
                    continue;
                }
                let edge = i == 0 || j == 0 || k == 0 || i + 1 == d || j + 1 == h || k + 1 == w;
                out[at] = edge
                    || !mask[idx(i - 1, j, k)]
                    || !mask[idx(i + 1, j, k)]
                    || !mask[idx(i, j - 1, k)]
                    || !mask[idx(i, j + 1, k)]
                    || !mask[idx(i, j, k - 1)]
                    || !mask[idx(i, j, k + 1)];
            }
        }
    }
    out
}

// Lower envelope of parabolas over one line; `f` holds squared distances, INFINITY for no site.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * step;
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while j + 1 < v.len() && z[j + 1] < pos(q) {
            j += 1;
        }
        let dx = pos(q) - pos(v[j]);
        *o = dx * dx + f[v[j]];
    }
}

/// Exact Euclidean distance (in physical units) from every voxel to the nearest `site` voxel.
pub fn distance_transform(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut sq: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..sq.len() {
            if (start / strides[axis]) % n != 0 {
                continue;
            }
            for (t, l) in line.iter_mut().enumerate() {
                *l = sq[start + t * strides[axis]];
            }
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (t, o) in out.iter().enumerate() {
                sq[start + t * strides[axis]] = *o;
            }
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

fn mean_distance(from: &[bool], to_dt: &[f64]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in from.iter().enumerate().filter(|(_, &b)| b) {
        sum += to_dt[i];
        n += 1;
    }
    sum / n as f64
}

/// Symmetric average surface distance of one class, in the units of `spacing`.
pub fn asd(pred: &LabelMap, gt: &LabelMap, class: usize, spacing: [f64; 3]) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(MetricError::BadSpacing(spacing));
    }
    let dims = gt.dims();
    let (mp, mg) = (mask(pred, class), mask(gt, class));
    if !mp.contains(&true) {
        return Err(MetricError::EmptyMask { class, side: "pred" });
    }
    if !mg.contains(&true) {
        return Err(MetricError::EmptyMask { class, side: "gt" });
    }
    let (bp, bg) = (boundary(&mp, dims), boundary(&mg, dims));
    let (dp, dg) = (distance_transform(&bp, dims, spacing), distance_transform(&bg, dims, spacing));
    Ok(0.5 * (mean_distance(&bp, &dg) + mean_distance(&bg, &dp)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub name: String,
    pub dsc: f64,
    /// `None` when the prediction lacks the class.
    pub asd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub dsc: f64,
    pub asd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ClassRow>,
    pub average: Average,
    /// Classes present in the reference but missing from the prediction; excluded from the average.
    pub empty_mask: Vec<String>,
}

fn class_name(names: &[String], class: usize) -> String {
    names.get(class).cloned().unwrap_or_else(|| format!("class{}", class))
}

/// Per-class DSC/ASD for every foreground class present in `gt`.
pub fn report(pred: &LabelMap, gt: &LabelMap, class_names: &[String]) -> Result<Report, MetricError> {
    check_pair(pred, gt)?;
    let spacing = gt.geometry().spacing;
    let mut rows = Vec::new();
    let mut empty = Vec::new();
    for class in gt.present_classes().into_iter().filter(|&c| c != 0) {
        let name = class_name(class_names, class);
        let d = dsc(pred, gt, class)?;
        let a = match asd(pred, gt, class, spacing) {
            Ok(v) => Some(v),
            Err(MetricError::EmptyMask { .. }) => {
                empty.push(name.clone());
                None
            }
            Err(e) => return Err(e),
        };
        rows.push(ClassRow { class_id: class, name, dsc: d, asd: a });
    }
    let counted: Vec<&ClassRow> = rows.iter().filter(|r| r.asd.is_some()).collect();
    let n = counted.len() as f64;
    let average = if counted.is_empty() {
        Average { dsc: 0.0, asd: 0.0 }
    } else {
        Average {
            dsc: counted.iter().map(|r| r.dsc).sum::<f64>() / n,
            asd: counted.iter().filter_map(|r| r.asd).sum::<f64>() / n,
        }
    };
    Ok(Report { rows, average, empty_mask: empty })
}

impl Report {
    /// Mean of several reports over matching classes (rows matched by class id).
    pub fn mean_of(reports: &[Report]) -> Option<Report> {
        if reports.is_empty() {
            return None;
        }
        let mut rows = Vec::new();
        let mut classes: Vec<(usize, String)> = Vec::new();
        for r in reports {
            for row in &r.rows {
                if !classes.iter().any(|(c, _)| *c == row.class_id) {
                    classes.push((row.class_id, row.name.clone()));
                }
            }
        }
        classes.sort();
        let mut empty = Vec::new();
        for (class, name) in classes {
            let hits: Vec<&ClassRow> = reports.iter().filter_map(|r| r.rows.iter().find(|x| x.class_id == class)).collect();
            let dsc = hits.iter().map(|r| r.dsc).sum::<f64>() / hits.len() as f64;
            let asds: Vec<f64> = hits.iter().filter_map(|r| r.asd).collect();
            let asd = if asds.is_empty() {
                empty.push(name.clone());
                None
            } else {
                Some(asds.iter().sum::<f64>() / asds.len() as f64)
            };
            rows.push(ClassRow { class_id: class, name, dsc, asd });
        }
        let counted: Vec<&ClassRow> = rows.iter().filter(|r| r.asd.is_some()).collect();
        let n = counted.len().max(1) as f64;
        let average = Average {
            dsc: counted.iter().map(|r| r.dsc).sum::<f64>() / n,
            asd: counted.iter().filter_map(|r| r.asd).sum::<f64>() / n,
        };
        Some(Report { rows, average, empty_mask: empty })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `class,dsc,asd` rows followed by an `Average` row; missing ASD is left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,dsc,asd\n");
        for r in &self.rows {
            let asd = r.asd.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.name, r.dsc, asd));
        }
        out.push_str(&format!("Average,{},{}\n", self.average.dsc, self.average.asd));
        out
    }
}
