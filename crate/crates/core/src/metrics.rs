//! Detection-style scoring of a language classifier: every (utterance,
//! language) pair is a trial, scored by the log posterior of that language.
//!
//! EER is computed on the pooled trials. Cavg uses hard decisions at zero on
//! `log posterior − log(1/c)` and averages the target/nontarget costs over
//! languages with target prior `p_target`.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::BackendModel;

pub const DEFAULT_P_TARGET: f64 = 0.5;

/// Description of the Cavg decision rule, stored in every report.
pub const CAVG_RULE: &str =
    "accept language L iff ln P(L|x) - ln(1/c) > 0; Cavg = mean_L[p_tar*Pmiss(L) + (1-p_tar)/(c-1)*sum_{L'!=L} Pfa(L,L')]";

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    /// N×c natural-log posteriors.
    pub scores: Array2<f64>,
    pub labels: Vec<usize>,
}

impl TrialSet {
    pub fn new(scores: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (n, c) = scores.dim();
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} score rows", labels.len())));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::LabelOutOfRange { row, label, classes: c });
        }
        if scores.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn class_count(&self) -> usize {
        self.scores.ncols()
    }

    pub fn trial_count(&self) -> usize {
        self.scores.len()
    }

    pub fn target_count(&self) -> usize {
        self.labels.len()
    }

    /// Pooled trial scores split into (targets, nontargets).
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut targets = Vec::with_capacity(self.labels.len());
        let mut nontargets = Vec::with_capacity(self.scores.len() - self.labels.len());
        for (row, &y) in self.scores.axis_iter(Axis(0)).zip(&self.labels) {
            for (k, &s) in row.iter().enumerate() {
                if k == y {
                    targets.push(s);
                } else {
                    nontargets.push(s);
                }
            }
        }
        (targets, nontargets)
    }
}

/// Log posteriors of `model` on every row of a labeled dataset.
pub fn score_dataset(model: &BackendModel, dataset: &Dataset) -> Result<TrialSet> {
    if dataset.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "dataset width {} but model expects {}",
            dataset.dim(),
            model.input_dim()
        )));
    }
    if dataset.class_count() != model.class_count() {
        return Err(Error::Shape(format!(
            "dataset has {} classes but model has {}",
            dataset.class_count(),
            model.class_count()
        )));
    }
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Unlabeled("scoring needs labels".into()))?
        .to_vec();
    let trace = model.forward(dataset.to_f64().view())?;
    TrialSet::new(trace.log_posteriors(), labels)
}

/// One point of the detection error tradeoff: trials scoring at or above
/// `threshold` are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// All operating points, one per distinct score plus the reject-all point
/// (threshold `+inf`).
pub fn det_curve(targets: &[f64], nontargets: &[f64]) -> Result<Vec<DetPoint>> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Degenerate(
            "need at least one target and one nontarget trial".into(),
        ));
    }
    if targets.iter().chain(nontargets).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut tar = targets.to_vec();
    let mut non = nontargets.to_vec();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = tar.iter().chain(&non).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();

    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let mut points = Vec::with_capacity(all.len() + 1);
    let (mut ti, mut ni) = (0usize, 0usize);
    for &threshold in &all {
        // trials strictly below the threshold are rejected
        while ti < tar.len() && tar[ti] < threshold {
            ti += 1;
        }
        while ni < non.len() && non[ni] < threshold {
            ni += 1;
        }
        points.push(DetPoint {
            threshold,
            p_miss: ti as f64 / nt,
            p_fa: (non.len() - ni) as f64 / nn,
        });
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Crossing of miss and false-alarm rates along the operating points, with
/// linear interpolation between the two straddling points.
pub fn eer_from_points(points: &[DetPoint]) -> Eer {
    let diff = |p: &DetPoint| p.p_miss - p.p_fa;
    // diff is nondecreasing, −1 at the first point and +1 at the last
    let k = points
        .iter()
        .position(|p| diff(p) >= 0.0)
        .unwrap_or(points.len() - 1);
    let hi = points[k];
    if diff(&hi) == 0.0 || k == 0 {
        return Eer {
            eer: hi.p_miss,
            threshold: hi.threshold,
        };
    }
    let lo = points[k - 1];
    let t = -diff(&lo) / (diff(&hi) - diff(&lo));
    let eer = lo.p_miss + t * (hi.p_miss - lo.p_miss);
    let threshold = if hi.threshold.is_finite() {
        lo.threshold + t * (hi.threshold - lo.threshold)
    } else {
        lo.threshold
    };
    Eer { eer, threshold }
}

pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<Eer> {
    Ok(eer_from_points(&det_curve(targets, nontargets)?))
}

pub fn compute_eer(trials: &TrialSet) -> Result<Eer> {
    let (t, n) = trials.split();
    eer_from_scores(&t, &n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cavg {
    pub cavg: f64,
    pub p_target: f64,
    /// Per target language.
    pub p_miss: Vec<f64>,
    /// `p_fa[L][L']`: fraction of language-L' utterances accepted as L.
    pub p_fa: Vec<Vec<f64>>,
}

pub fn compute_cavg(trials: &TrialSet, p_target: f64) -> Result<Cavg> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::Config(format!("p_target must be in (0, 1), got {p_target}")));
    }
    let c = trials.class_count();
    if c < 2 {
        return Err(Error::Degenerate("Cavg needs at least two languages".into()));
    }
    let mut per_lang = vec![0usize; c];
    for &y in &trials.labels {
        per_lang[y] += 1;
    }
    if let Some(missing) = per_lang.iter().position(|&n| n == 0) {
        return Err(Error::Degenerate(format!("language {missing} has no trials")));
    }

    let offset = (c as f64).ln();
    // accepted[L][L']: utterances of L' accepted as L
    let mut accepted = vec![vec![0usize; c]; c];
    for (row, &y) in trials.scores.axis_iter(Axis(0)).zip(&trials.labels) {
        for (lang, &s) in row.iter().enumerate() {
            if s + offset > 0.0 {
                accepted[lang][y] += 1;
            }
        }
    }
    let p_miss: Vec<f64> = (0..c)
        .map(|l| 1.0 - accepted[l][l] as f64 / per_lang[l] as f64)
        .collect();
    let p_fa: Vec<Vec<f64>> = (0..c)
        .map(|l| {
            (0..c)
                .map(|m| if m == l { 0.0 } else { accepted[l][m] as f64 / per_lang[m] as f64 })
                .collect()
        })
        .collect();
    let nontarget_weight = (1.0 - p_target) / (c - 1) as f64;
    let cavg = (0..c)
        .map(|l| p_target * p_miss[l] + nontarget_weight * p_fa[l].iter().sum::<f64>())
        .sum::<f64>()
        / c as f64;
    Ok(Cavg {
        cavg,
        p_target,
        p_miss,
        p_fa,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub cavg: f64,
    pub p_target: f64,
    pub cavg_rule: String,
    pub p_miss: Vec<f64>,
    pub p_fa: Vec<Vec<f64>>,
    pub accuracy: f64,
    pub trials: usize,
    pub target_trials: usize,
}

pub fn evaluate_trials(trials: &TrialSet, p_target: f64) -> Result<EvalReport> {
    let eer = compute_eer(trials)?;
    let cavg = compute_cavg(trials, p_target)?;
    let correct = trials
        .scores
        .axis_iter(Axis(0))
        .zip(&trials.labels)
        .filter(|(row, &y)| crate::model::argmax(row.iter().copied()) == y)
        .count();
    Ok(EvalReport {
        eer: eer.eer,
        eer_threshold: eer.threshold,
        cavg: cavg.cavg,
        p_target,
        cavg_rule: CAVG_RULE.into(),
        p_miss: cavg.p_miss,
        p_fa: cavg.p_fa,
        accuracy: correct as f64 / trials.labels.len() as f64,
        trials: trials.trial_count(),
        target_trials: trials.target_count(),
    })
}

pub fn evaluate(model: &BackendModel, dataset: &Dataset, p_target: f64) -> Result<EvalReport> {
    evaluate_trials(&score_dataset(model, dataset)?, p_target)
}
