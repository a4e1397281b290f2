//! Paired comparison of two evaluation reports.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::metrics::Report;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompareError {
    #[error("reports cover different classes: {0:?} vs {1:?}")]
    MismatchedClasses(Vec<String>, Vec<String>),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Two-sided paired t-test of `b - a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    /// `None` when the statistic is undefined (fewer than two pairs, or zero spread with nonzero mean).
    pub t: Option<f64>,
    pub p_value: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest, CompareError> {
    if a.len() != b.len() {
        return Err(CompareError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = if n == 0 { 0.0 } else { d.iter().sum::<f64>() / n as f64 };
    if n < 2 {
        return Ok(PairedTest { n, mean_diff: mean, sd_diff: 0.0, t: None, p_value: 1.0 });
    }
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        let (t, p) = if mean == 0.0 { (Some(0.0), 1.0) } else { (None, 0.0) };
        return Ok(PairedTest { n, mean_diff: mean, sd_diff: 0.0, t, p_value: p });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(PairedTest { n, mean_diff: mean, sd_diff: sd, t: Some(t), p_value: p })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub name: String,
    pub dsc_a: f64,
    pub dsc_b: f64,
    pub delta_dsc: f64,
    pub delta_asd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub classes: Vec<ClassDelta>,
    pub delta_average_dsc: f64,
    pub delta_average_asd: f64,
    pub dsc_test: PairedTest,
}

/// Per-class deltas (`b - a`) and a paired t-test over per-class DSC.
pub fn compare(a: &Report, b: &Report) -> Result<Comparison, CompareError> {
    let names = |r: &Report| r.rows.iter().map(|x| x.name.clone()).collect::<Vec<_>>();
    let (na, nb) = (names(a), names(b));
    let (mut sa, mut sb) = (na.clone(), nb.clone());
    sa.sort();
    sb.sort();
    if sa != sb {
        return Err(CompareError::MismatchedClasses(na, nb));
    }
    let mut classes = Vec::new();
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for ra in &a.rows {
        let rb = b.rows.iter().find(|r| r.name == ra.name).expect("class sets checked");
        xa.push(ra.dsc);
        xb.push(rb.dsc);
        classes.push(ClassDelta {
            name: ra.name.clone(),
            dsc_a: ra.dsc,
            dsc_b: rb.dsc,
            delta_dsc: rb.dsc - ra.dsc,
            delta_asd: ra.asd.zip(rb.asd).map(|(x, y)| y - x),
        });
    }
    Ok(Comparison {
        classes,
        delta_average_dsc: b.average.dsc - a.average.dsc,
        delta_average_asd: b.average.asd - a.average.asd,
        dsc_test: paired_t_test(&xa, &xb)?,
    })
}
