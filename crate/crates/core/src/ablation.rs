//! Component ablation: retrain the model with one component removed at a
//! time under an identical seed and budget.

use std::fmt::Write as _;

use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::model::{ModelConfig, Network, Variant};
use crate::profile::count_params;
use crate::schedule::ScheduleConfig;
use crate::train::{train, Session, StepRecord, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub psnr_db: f64,
    pub ssim: f64,
    pub params: u64,
    /// Published `(psnr, ssim)` for the same row, for annotation only.
    pub reference: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn baseline(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == Variant::Baseline)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<12}  {:>9}  {:>7}  {:>8}  {:>17}", "variant", "PSNR(dB)", "SSIM", "params", "reference").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<12}  {:>9.3}  {:>7.4}  {:>8}  {:>11.2} / {:.3}",
                r.variant.name(),
                r.psnr_db,
                r.ssim,
                r.params,
                r.reference.0,
                r.reference.1
            )
            .unwrap();
        }
        s
    }
}

/// Variants in report order: baseline first, then the rest as given,
/// without duplicates.
pub fn report_order(variants: &[Variant]) -> Vec<Variant> {
    let mut out = Vec::new();
    if variants.contains(&Variant::Baseline) {
        out.push(Variant::Baseline);
    }
    for &v in variants {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Trains each variant from the same seed over `split.train` and scores it
/// on `split.test`. `on_step` receives every optimizer step of every run.
pub fn run_ablation(
    split: &DatasetSplit,
    base: ModelConfig,
    variants: &[Variant],
    schedule: &ScheduleConfig,
    objective: &Objective<f32>,
    tc: &TrainConfig,
    mut on_step: impl FnMut(Variant, &StepRecord),
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    if split.test.is_empty() {
        return Err(Error::Dataset("ablation needs a non-empty test split".into()));
    }
    let mut rows = Vec::new();
    for v in report_order(variants) {
        let cfg = base.with_variant(v);
        let params = count_params(&Network::build::<f32>(cfg)?.1).total_params;
        let session = Session::new(cfg, tc)?;
        let out = train(session, &split.train, &split.test, schedule, objective, tc, None, |r| on_step(v, r))?;
        let report = out.report.expect("test split is non-empty");
        rows.push(AblationRow { variant: v, psnr_db: report.psnr_db, ssim: report.ssim, params, reference: v.reference_scores() });
    }
    Ok(AblationReport { rows })
}
