//! Confusion-matrix metrics: pFA, pMA, overall accuracy and kappa.

use crate::error::{Error, Result};
use crate::plane::Plane;
use serde::{Deserialize, Serialize};

/// Which pixel count divides the missed alarms. The standard convention
/// divides by the changed-pixel count; the alternative divides by the
/// unchanged count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PmaDenominator {
    #[default]
    Changed,
    Unchanged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: u64,
    pub tn: u64,
    pub fa: u64,
    pub ma: u64,
    pub pfa: f64,
    pub pma: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

fn check_binary(name: &str, plane: &Plane) -> Result<()> {
    if !plane.is_binary() {
        return Err(Error::domain(format!("{name} is not binary")));
    }
    Ok(())
}

/// Counts the 2x2 confusion matrix over non-excluded pixels and derives the
/// rates. `fa` are unchanged pixels predicted changed, `ma` changed pixels
/// predicted unchanged; `pfa = fa / #unchanged`, `pma = ma / #changed`
/// (rates over an empty class are 0). Kappa uses the usual chance-corrected
/// form and is 0 for a degenerate table.
pub fn evaluate_with(
    prediction: &Plane,
    reference: &Plane,
    exclude: Option<&Plane>,
    pma_denominator: PmaDenominator,
) -> Result<EvalReport> {
    if !prediction.same_dims(reference) {
        return Err(Error::shape(format!(
            "prediction {}x{} vs reference {}x{}",
            prediction.height(),
            prediction.width(),
            reference.height(),
            reference.width()
        )));
    }
    if let Some(e) = exclude {
        if !e.same_dims(reference) {
            return Err(Error::shape("exclude mask dims differ"));
        }
        check_binary("exclude mask", e)?;
    }
    check_binary("prediction", prediction)?;
    check_binary("reference", reference)?;

    let (mut tp, mut tn, mut fa, mut ma) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..reference.len() {
        if let Some(e) = exclude {
            if e.data()[i] == 1.0 {
                continue;
            }
        }
        match (reference.data()[i] == 1.0, prediction.data()[i] == 1.0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fa += 1,
            (true, false) => ma += 1,
        }
    }
    report_from_counts(tp, tn, fa, ma, pma_denominator)
}

pub fn evaluate(
    prediction: &Plane,
    reference: &Plane,
    exclude: Option<&Plane>,
) -> Result<EvalReport> {
    evaluate_with(prediction, reference, exclude, PmaDenominator::Changed)
}

/// Closed-form rates from an explicit confusion matrix.
pub fn report_from_counts(
    tp: u64,
    tn: u64,
    fa: u64,
    ma: u64,
    pma_denominator: PmaDenominator,
) -> Result<EvalReport> {
    let total = tp + tn + fa + ma;
    if total == 0 {
        return Err(Error::Eval("no pixels left to evaluate".into()));
    }
    let changed = tp + ma;
    let unchanged = tn + fa;
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let pfa = ratio(fa, unchanged);
    let pma = match pma_denominator {
        PmaDenominator::Changed => ratio(ma, changed),
        PmaDenominator::Unchanged => ratio(ma, unchanged),
    };
    let totalf = total as f64;
    let accuracy = (tp + tn) as f64 / totalf;
    let pred_pos = (tp + fa) as f64;
    let pred_neg = (tn + ma) as f64;
    let p_e = (pred_pos * changed as f64 + pred_neg * unchanged as f64) / (totalf * totalf);
    let kappa = if (1.0 - p_e).abs() < 1e-12 {
        0.0
    } else {
        (accuracy - p_e) / (1.0 - p_e)
    };
    Ok(EvalReport {
        tp,
        tn,
        fa,
        ma,
        pfa,
        pma,
        accuracy,
        kappa,
    })
}
