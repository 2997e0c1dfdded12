//! Cohort evaluation reports.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use stemnet_core::metrics::{absent_in_both, cohort_summary, mp_area_ratio, per_class_dsc, structure_volumes, MeanStd};
use stemnet_core::ops::BnMode;
use stemnet_core::preprocess::argmax_decode;
use stemnet_core::unet::UNetParams;
use stemnet_core::{LabelVolume, Structure, Tensor, NUM_CLASSES};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    /// Per class, indexed by label code; absent without reference labels.
    pub dsc: Option<[f64; NUM_CLASSES]>,
    /// Classes missing from both prediction and reference, scored 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_agreement: Vec<String>,
    /// Predicted volume per class in mm³.
    pub volumes_mm3: [f64; NUM_CLASSES],
    /// Midbrain/pons area ratio on the predicted midsagittal slice.
    pub mp_ratio: Option<f64>,
    pub inference_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subjects: Vec<SubjectMetrics>,
    /// Over subjects with reference labels.
    pub cohort: Option<[MeanStd; NUM_CLASSES]>,
}

impl SubjectMetrics {
    pub fn new(id: &str, pred: &LabelVolume, reference: Option<&LabelVolume>, seconds: Option<f64>) -> Result<Self> {
        let (dsc, empty_agreement) = match reference {
            Some(r) => {
                let absent = absent_in_both(pred, r)?;
                let names = Structure::ALL.iter().filter(|s| absent[s.index()]).map(|s| s.name().to_string()).collect();
                (Some(per_class_dsc(pred, r)?), names)
            }
            None => (None, Vec::new()),
        };
        Ok(SubjectMetrics {
            id: id.to_string(),
            dsc,
            empty_agreement,
            volumes_mm3: structure_volumes(pred),
            mp_ratio: mp_area_ratio(pred).ok().map(|m| m.ratio),
            inference_seconds: seconds,
        })
    }
}

impl MetricsReport {
    pub fn new(subjects: Vec<SubjectMetrics>) -> Result<Self> {
        let scored: Vec<[f64; NUM_CLASSES]> = subjects.iter().filter_map(|s| s.dsc).collect();
        let cohort = if scored.is_empty() { None } else { Some(cohort_summary(&scored)?) };
        Ok(MetricsReport { subjects, cohort })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Per-subject table followed by `Structure: mean±std` lines.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "subject");
        for s in Structure::ALL {
            let _ = write!(out, " {:>10}", s.name());
        }
        let _ = writeln!(out, " {:>8} {:>8}", "M/P", "seconds");
        for m in &self.subjects {
            let _ = write!(out, "{:<12}", m.id);
            for c in 0..NUM_CLASSES {
                match m.dsc {
                    Some(d) => {
                        let _ = write!(out, " {:>10.4}", d[c]);
                    }
                    None => {
                        let _ = write!(out, " {:>10}", "-");
                    }
                }
            }
            let ratio = m.mp_ratio.map_or("-".into(), |r| format!("{r:.4}"));
            let secs = m.inference_seconds.map_or("-".into(), |t| format!("{t:.3}"));
            let _ = writeln!(out, " {ratio:>8} {secs:>8}");
        }
        if let Some(cohort) = &self.cohort {
            for s in Structure::ALL {
                let ms = cohort[s.index()];
                let _ = writeln!(out, "{}: {:.4}±{:.4}", title(s), ms.mean, ms.std);
            }
        }
        out
    }
}

fn title(s: Structure) -> String {
    match s {
        Structure::Scp => "SCP".into(),
        _ => {
            let n = s.name();
            n[..1].to_uppercase() + &n[1..]
        }
    }
}

/// Median wall-clock seconds of three forward + argmax passes.
pub fn time_inference(params: &UNetParams<f32>, x: &Tensor<f32>, spacing: [f64; 3]) -> Result<(f64, LabelVolume)> {
    let mut times = Vec::with_capacity(3);
    let mut pred = None;
    for _ in 0..3 {
        let start = Instant::now();
        let logits = params.forward(x, BnMode::Infer)?;
        let labels = argmax_decode(&logits, spacing)?;
        times.push(start.elapsed().as_secs_f64());
        pred = Some(labels);
    }
    times.sort_by(f64::total_cmp);
    Ok((times[1], pred.expect("three runs")))
}
