//! Scene-level metric reports and codebook usage summaries.
//!
//! Reports are JSON lines: one object per scene followed by one aggregate
//! object. Infinite PSNR values are written as the string `"inf"`.

use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};

use crate::autoencoder::{sample_input, VqModel};
use crate::codebook::{used_code_count, InputClass};
use crate::datasets::Scene;
use crate::error::Result;
use crate::hdrnet::HdrModel;
use crate::image::Image;
use crate::radiometry::{ensure_finite, HdrMetrics, ToneMapParams};

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_TILE: usize = 256;
pub const DEFAULT_OVERLAP: usize = 32;

fn metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn parse_metric<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) => Err(serde::de::Error::custom(format!("bad metric `{t}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub version: u32,
    pub scene: String,
    #[serde(serialize_with = "metric", deserialize_with = "parse_metric")]
    pub psnr_mu: f64,
    #[serde(serialize_with = "metric", deserialize_with = "parse_metric")]
    pub psnr_l: f64,
    pub ssim_mu: f64,
    pub ssim_l: f64,
}

impl SceneReport {
    pub fn new(scene: impl Into<String>, m: HdrMetrics) -> Self {
        Self {
            version: REPORT_VERSION,
            scene: scene.into(),
            psnr_mu: m.psnr_mu,
            psnr_l: m.psnr_linear,
            ssim_mu: m.ssim_mu,
            ssim_l: m.ssim_linear,
        }
    }
}

/// Mean of every metric over scenes; an infinite PSNR makes the mean
/// infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub version: u32,
    pub aggregate: String,
    pub scenes: usize,
    #[serde(serialize_with = "metric", deserialize_with = "parse_metric")]
    pub psnr_mu: f64,
    #[serde(serialize_with = "metric", deserialize_with = "parse_metric")]
    pub psnr_l: f64,
    pub ssim_mu: f64,
    pub ssim_l: f64,
}

pub fn aggregate(reports: &[SceneReport]) -> AggregateReport {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&SceneReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    AggregateReport {
        version: REPORT_VERSION,
        aggregate: "mean".into(),
        scenes: reports.len(),
        psnr_mu: mean(|r| r.psnr_mu),
        psnr_l: mean(|r| r.psnr_l),
        ssim_mu: mean(|r| r.ssim_mu),
        ssim_l: mean(|r| r.ssim_l),
    }
}

pub fn write_report(out: &mut impl Write, reports: &[SceneReport]) -> Result<()> {
    for r in reports {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    writeln!(out, "{}", serde_json::to_string(&aggregate(reports))?)?;
    Ok(())
}

pub fn score(scene: &Scene, prediction: &Image, mu: f64) -> Result<SceneReport> {
    ensure_finite(prediction, "prediction")?;
    let gt = scene.ground_truth()?;
    let m = HdrMetrics::compute(prediction, gt.image(), ToneMapParams::new(mu)?)?;
    Ok(SceneReport::new(scene.id(), m))
}

/// Predicts and scores every scene that has ground truth.
pub fn evaluate_model(model: &HdrModel, scenes: &[Scene], gamma: f64, mu: f64) -> Result<Vec<SceneReport>> {
    scenes
        .iter()
        .filter(|s| s.ground_truth.is_some())
        .map(|s| {
            let pred = model.predict(&s.stack, gamma, DEFAULT_TILE, DEFAULT_OVERLAP)?;
            score(s, &pred, mu)
        })
        .collect()
}

/// Code usage for one quantization setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub version: u32,
    /// `"full"` or the input-class number 1..=3.
    pub class: String,
    pub positions: u64,
    pub used: usize,
    pub histogram: Vec<u64>,
}

/// Usage under full-codebook quantization of the ground truth and under each
/// LDR window for the matching frame.
pub fn codebook_usage(model: &VqModel, scenes: &[Scene], gamma: f64) -> Result<Vec<UsageReport>> {
    let mut out = Vec::new();
    for class in [InputClass::Hdr, InputClass::Short, InputClass::Mid, InputClass::Long] {
        let images: Vec<Image> = scenes
            .iter()
            .filter(|s| class != InputClass::Hdr || s.ground_truth.is_some())
            .map(|s| sample_input(s, class, gamma))
            .collect::<Result<_>>()?;
        let histogram = model.usage(&images, class)?;
        out.push(UsageReport {
            version: REPORT_VERSION,
            class: match class.frame_index() {
                None => "full".into(),
                Some(_) => class.eta().to_string(),
            },
            positions: histogram.iter().sum(),
            used: used_code_count(&histogram),
            histogram,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_psnr_renders_as_inf_and_round_trips() {
        let r = SceneReport {
            version: REPORT_VERSION,
            scene: "a".into(),
            psnr_mu: f64::INFINITY,
            psnr_l: 40.0,
            ssim_mu: 1.0,
            ssim_l: 1.0,
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains(r#""psnr_mu":"inf""#));
        let back: SceneReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        let agg = aggregate(&[r.clone(), SceneReport { psnr_mu: 30.0, ..r }]);
        assert!(agg.psnr_mu.is_infinite());
        assert_eq!(agg.psnr_l, 40.0);
    }
}
