use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dlnet::{MAX_DEPTH, MIN_DEPTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// Multiply each prediction by `median(gt) / median(pred)`.
    Median,
    None,
}

impl FromStr for Scaling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Self::Median),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown scaling `{other}`"))),
        }
    }
}

/// Depth error statistics, each averaged over images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    /// Fractions with `max(d / gt, gt / d)` below `1.25`, `1.25^2`, `1.25^3`.
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub samples: usize,
    pub scaling: Scaling,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Compares predicted with ground-truth depth maps. Pixels with positive,
/// finite ground truth count; both depths are clamped to the network range
/// after scaling.
pub fn evaluate(pred: &[Tensor<f64>], gt: &[Tensor<f64>], scaling: Scaling) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!("{} predictions for {} ground truths", pred.len(), gt.len())));
    }
    let mut sums = [0.0f64; 7];
    let mut images = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.shape() != g.shape() {
            return Err(Error::shape("evaluate", p.shape(), g.shape()));
        }
        let pairs: Vec<(f64, f64)> = p
            .data()
            .iter()
            .zip(g.data())
            .filter(|(_, &t)| t > 0.0 && t.is_finite())
            .map(|(&d, &t)| (d, t))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let ratio = match scaling {
            Scaling::Median => {
                let gm = median(&pairs.iter().map(|x| x.1).collect::<Vec<_>>());
                let pm = median(&pairs.iter().map(|x| x.0).collect::<Vec<_>>());
                if pm > 0.0 {
                    gm / pm
                } else {
                    1.0
                }
            }
            Scaling::None => 1.0,
        };
        let n = pairs.len() as f64;
        let mut s = [0.0f64; 7];
        for &(d, t) in &pairs {
            let d = (d * ratio).clamp(MIN_DEPTH, MAX_DEPTH);
            let t = t.clamp(MIN_DEPTH, MAX_DEPTH);
            let e = d - t;
            s[0] += e.abs() / t;
            s[1] += e * e / t;
            s[2] += e * e;
            s[3] += (d.ln() - t.ln()).powi(2);
            let r = (d / t).max(t / d);
            s[4] += (r < 1.25) as u8 as f64;
            s[5] += (r < 1.25f64.powi(2)) as u8 as f64;
            s[6] += (r < 1.25f64.powi(3)) as u8 as f64;
        }
        sums[0] += s[0] / n;
        sums[1] += s[1] / n;
        sums[2] += (s[2] / n).sqrt();
        sums[3] += (s[3] / n).sqrt();
        for k in 4..7 {
            sums[k] += s[k] / n;
        }
        images += 1;
    }
    if images == 0 {
        return Err(Error::Data("no valid ground-truth pixels".into()));
    }
    let m = |i: usize| sums[i] / images as f64;
    Ok(MetricsReport {
        abs_rel: m(0),
        sq_rel: m(1),
        rms: m(2),
        rms_log: m(3),
        delta1: m(4),
        delta2: m(5),
        delta3: m(6),
        samples: images,
        scaling,
    })
}
