//! Bias–variance covariance signals and the mechanism classifier.
//!
//! For each channel T ∈ {S, A, Y} we estimate Cov(|b̂₁|, (T − η̂_T)²) over
//! the validation rows the channel admits, attach a Pearson significance
//! test, and map the ternary sign pattern to a mechanism verdict.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::nuisance::{BiasEstimate, ConditioningSpec, FittedEstimator, TargetVar};
use crate::synthgen::Cohort;

/// Two-sided p-values are clipped below at this floor; the decision rule
/// only compares p against alpha, so extreme tails need no resolution.
pub const P_VALUE_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TernarySign {
    Negative,
    Zero,
    Positive,
}

impl TernarySign {
    pub fn as_str(self) -> &'static str {
        match self {
            TernarySign::Negative => "-",
            TernarySign::Zero => "0",
            TernarySign::Positive => "+",
        }
    }
}

/// How the per-channel p-value is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum SignificanceTest {
    /// t-test on the Pearson correlation with n − 2 degrees of freedom.
    TTest,
    /// Permutation test: |b̂₁| is shuffled against the squared errors.
    Permutation { n_perm: usize, seed: u64 },
}

impl Default for SignificanceTest {
    fn default() -> Self {
        SignificanceTest::TTest
    }
}

/// One channel's evidence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignalChannel {
    pub target: TargetVar,
    /// Validation rows the channel admits (S: all; A: S=1; Y: S=1, A=1).
    pub n_used: usize,
    /// Bias-weighted variance-gap statistic (the covariance estimate).
    pub cov_hat: f64,
    pub pearson_r: f64,
    pub p_value: f64,
    /// Correlation undefined: a constant input or too few rows.
    pub degenerate: bool,
}

impl SignalChannel {
    pub fn significant(&self, alpha: f64) -> bool {
        !self.degenerate && self.p_value < alpha
    }

    pub fn sign(&self, alpha: f64) -> TernarySign {
        if !self.significant(alpha) {
            TernarySign::Zero
        } else if self.pearson_r > 0.0 {
            TernarySign::Positive
        } else {
            TernarySign::Negative
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    NoBias,
    Transportability,
    Confounding,
    SelectionType1,
    SelectionType2,
    Indeterminate,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::NoBias => "no-bias",
            Verdict::Transportability => "transportability",
            Verdict::Confounding => "confounding",
            Verdict::SelectionType1 => "selection-type-1",
            Verdict::SelectionType2 => "selection-type-2",
            Verdict::Indeterminate => "indeterminate",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-bias" => Ok(Verdict::NoBias),
            "transportability" => Ok(Verdict::Transportability),
            "confounding" => Ok(Verdict::Confounding),
            "selection-type-1" => Ok(Verdict::SelectionType1),
            "selection-type-2" => Ok(Verdict::SelectionType2),
            "indeterminate" => Ok(Verdict::Indeterminate),
            other => Err(Error::Data(format!("unknown verdict '{other}'"))),
        }
    }
}

/// Weighted covariance of |b̂₁| against squared prediction errors:
///
///   n/(n−1) · [ (1/n) Σᵢ |b̂ᵢ| (Tᵢ − η̂ᵢ)² − (1/n²) Σᵢ Σⱼ |b̂ᵢ| (Tⱼ − η̂ⱼ)² ]
///
/// i.e. the bias-corrected sample covariance between |b̂₁(Xᵢ)| and the
/// rows' own squared residuals — the double sum factorizes into the two
/// totals, so the whole thing is O(n). With accurate nuisances the
/// squared residual estimates the conditional variance of T, which is
/// what makes this converge to the population covariance signal.
pub fn covariance_estimate(bias_abs: &[f64], targets: &[u8], preds: &[f64]) -> Result<f64> {
    let n = bias_abs.len();
    if targets.len() != n || preds.len() != n {
        return Err(Error::Estimation(format!(
            "covariance inputs disagree in length: {n}, {}, {}",
            targets.len(),
            preds.len()
        )));
    }
    if n < 2 {
        return Err(Error::Estimation(format!(
            "covariance needs at least two rows, got {n}"
        )));
    }
    let nf = n as f64;
    let mut lead = 0.0;
    let mut sum_b = 0.0;
    let mut sum_e2 = 0.0;
    for i in 0..n {
        let b = bias_abs[i];
        let e = targets[i] as f64 - preds[i];
        lead += b * e * e;
        sum_b += b;
        sum_e2 += e * e;
    }
    Ok(nf / (nf - 1.0) * (lead / nf - sum_b * sum_e2 / (nf * nf)))
}

/// Literal double-loop transcription of the same estimator; the O(n²)
/// oracle the fast path is checked against.
pub fn covariance_estimate_naive(bias_abs: &[f64], targets: &[u8], preds: &[f64]) -> Result<f64> {
    let n = bias_abs.len();
    if targets.len() != n || preds.len() != n {
        return Err(Error::Estimation("covariance inputs disagree in length".into()));
    }
    if n < 2 {
        return Err(Error::Estimation(format!(
            "covariance needs at least two rows, got {n}"
        )));
    }
    let nf = n as f64;
    let mut lead = 0.0;
    let mut cross = 0.0;
    for i in 0..n {
        let e = targets[i] as f64 - preds[i];
        lead += bias_abs[i] * e * e;
        for j in 0..n {
            let ej = targets[j] as f64 - preds[j];
            cross += bias_abs[i] * ej * ej;
        }
    }
    Ok(nf / (nf - 1.0) * (lead / nf - cross / (nf * nf)))
}

fn pearson_r(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        syy += (yi - my) * (yi - my);
        sxy += (xi - mx) * (yi - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value for H₀: ρ = 0 via t = r √((n−2)/(1−r²)) on n − 2
/// degrees of freedom, clipped below at `P_VALUE_FLOOR`.
pub fn pearson_signal(bias_abs: &[f64], sq_errors: &[f64]) -> Result<(f64, f64)> {
    let n = bias_abs.len();
    if sq_errors.len() != n {
        return Err(Error::Estimation("pearson inputs disagree in length".into()));
    }
    if n < 3 {
        return Err(Error::Estimation(format!(
            "pearson test needs at least three rows, got {n}"
        )));
    }
    let r = pearson_r(bias_abs, sq_errors).ok_or_else(|| {
        Error::Estimation("correlation undefined: an input is constant".into())
    })?;
    let df = (n - 2) as f64;
    let p = if 1.0 - r * r <= f64::EPSILON {
        P_VALUE_FLOOR
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(P_VALUE_FLOOR, 1.0)
    };
    Ok((r, p))
}

/// Permutation-test alternative: the observed |r| is ranked among
/// correlations after shuffling |b̂₁| against the errors. Add-one
/// smoothing keeps the p-value positive.
pub fn permutation_signal(
    bias_abs: &[f64],
    sq_errors: &[f64],
    n_perm: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = bias_abs.len();
    if sq_errors.len() != n {
        return Err(Error::Estimation("permutation inputs disagree in length".into()));
    }
    if n < 3 {
        return Err(Error::Estimation(format!(
            "permutation test needs at least three rows, got {n}"
        )));
    }
    if n_perm == 0 {
        return Err(Error::Config("permutation test needs n_perm >= 1".into()));
    }
    let observed = pearson_r(bias_abs, sq_errors).ok_or_else(|| {
        Error::Estimation("correlation undefined: an input is constant".into())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = bias_abs.to_vec();
    let mut at_least = 1usize;
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        // The permuted vector is constant only if the original was, which
        // was already rejected.
        let r = pearson_r(&shuffled, sq_errors).expect("non-constant inputs");
        if r.abs() >= observed.abs() {
            at_least += 1;
        }
    }
    let p = (at_least as f64 / (n_perm + 1) as f64).clamp(P_VALUE_FLOOR, 1.0);
    Ok((observed, p))
}

/// Build one channel from its admitted validation rows.
///
/// A constant input (or fewer than three rows) leaves the correlation
/// undefined; the channel is then flagged degenerate and participates in
/// classification as non-significant.
pub fn evaluate_channel(
    target: TargetVar,
    bias_abs: &[f64],
    targets: &[u8],
    preds: &[f64],
    test: SignificanceTest,
) -> Result<SignalChannel> {
    let n = bias_abs.len();
    if n < 3 {
        return Ok(SignalChannel {
            target,
            n_used: n,
            cov_hat: f64::NAN,
            pearson_r: 0.0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let cov_hat = covariance_estimate(bias_abs, targets, preds)?;
    let sq_errors: Vec<f64> = targets
        .iter()
        .zip(preds)
        .map(|(&t, &p)| (t as f64 - p) * (t as f64 - p))
        .collect();
    let outcome = match test {
        SignificanceTest::TTest => pearson_signal(bias_abs, &sq_errors),
        SignificanceTest::Permutation { n_perm, seed } => {
            permutation_signal(bias_abs, &sq_errors, n_perm, seed)
        }
    };
    match outcome {
        Ok((r, p)) => Ok(SignalChannel {
            target,
            n_used: n,
            cov_hat,
            pearson_r: r,
            p_value: p,
            degenerate: false,
        }),
        Err(Error::Estimation(_)) => Ok(SignalChannel {
            target,
            n_used: n,
            cov_hat,
            pearson_r: 0.0,
            p_value: 1.0,
            degenerate: true,
        }),
        Err(other) => Err(other),
    }
}

/// Map the three channel signs to a mechanism verdict.
///
/// Decision order: (1) any significant negative channel → collider
/// selection, the only mechanism producing negative covariance; (2) no
/// significant channel → no bias; (3)–(5) the positive-sign patterns of
/// the sign table; anything else → indeterminate. Channels with too few
/// rows to test (degenerate with n < 3) make the verdict indeterminate.
pub fn classify(s: &SignalChannel, a: &SignalChannel, y: &SignalChannel, alpha: f64) -> Verdict {
    if [s, a, y].iter().any(|c| c.degenerate && c.n_used < 3) {
        return Verdict::Indeterminate;
    }
    if [s, a, y]
        .iter()
        .any(|c| c.significant(alpha) && c.pearson_r < 0.0)
    {
        return Verdict::SelectionType2;
    }
    match (s.significant(alpha), a.significant(alpha), y.significant(alpha)) {
        (false, false, false) => Verdict::NoBias,
        (false, false, true) => Verdict::Transportability,
        (false, true, true) => Verdict::Confounding,
        (true, false, true) => Verdict::SelectionType1,
        _ => Verdict::Indeterminate,
    }
}

/// Train/validation split bookkeeping for ingested-data reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SplitInfo {
    pub seed: u64,
    pub val_fraction: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Complete diagnostic output: channels, verdict, and fit health flags.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignalReport {
    pub s: SignalChannel,
    pub a: SignalChannel,
    pub y: SignalChannel,
    pub alpha: f64,
    pub signs: [TernarySign; 3],
    pub verdict: Verdict,
    /// Mean |b̂₁| over all validation rows.
    pub mean_abs_b1: f64,
    /// Covariate cells lacking RCT support that were scored by fallback.
    pub positivity_flags: Vec<u32>,
    /// Count of empty training cells across the fitted estimators.
    pub empty_cells: usize,
    /// False if any logistic fit stopped before reaching tolerance.
    pub converged: bool,
    pub split: Option<SplitInfo>,
}

impl SignalReport {
    pub fn channels(&self) -> [&SignalChannel; 3] {
        [&self.s, &self.a, &self.y]
    }
}

/// Score a validation cohort against fitted nuisances and a bias estimate,
/// and classify. This is the single path both the simulation harness and
/// the ingestion front-end go through.
pub fn evaluate_validation(
    os_val: &Cohort,
    eta_s: &FittedEstimator,
    eta_a: &FittedEstimator,
    eta_y: &FittedEstimator,
    bias: &BiasEstimate,
    alpha: f64,
    test: SignificanceTest,
    split: Option<SplitInfo>,
) -> Result<SignalReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = os_val.len();
    if n == 0 {
        return Err(Error::Data("validation cohort is empty".into()));
    }
    let mut bias_all = Vec::with_capacity(n);
    let mut s_targets = Vec::with_capacity(n);
    let mut s_preds = Vec::with_capacity(n);
    let (mut bias_sel, mut a_targets, mut a_preds) = (Vec::new(), Vec::new(), Vec::new());
    let (mut bias_trt, mut y_targets, mut y_preds) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let b = bias.b1_row(os_val, i).abs();
        bias_all.push(b);
        s_targets.push(os_val.s(i));
        s_preds.push(eta_s.predict_row(os_val, i));
        if os_val.s(i) == 1 {
            bias_sel.push(b);
            a_targets.push(os_val.a(i).expect("a present when s = 1"));
            a_preds.push(eta_a.predict_row(os_val, i));
            if os_val.a(i) == Some(1) {
                bias_trt.push(b);
                y_targets.push(os_val.y(i).expect("y present when s = 1"));
                y_preds.push(eta_y.predict_row(os_val, i));
            }
        }
    }
    let s = evaluate_channel(TargetVar::S, &bias_all, &s_targets, &s_preds, test)?;
    let a = evaluate_channel(TargetVar::A, &bias_sel, &a_targets, &a_preds, test)?;
    let y = evaluate_channel(TargetVar::Y, &bias_trt, &y_targets, &y_preds, test)?;
    let verdict = classify(&s, &a, &y, alpha);
    let signs = [s.sign(alpha), a.sign(alpha), y.sign(alpha)];
    let mean_abs_b1 = bias_all.iter().sum::<f64>() / n as f64;
    let empty_cells = bias.g1_hat.empty_cells().len()
        + bias.f1_hat.empty_cells().len()
        + eta_s.empty_cells().len()
        + eta_a.empty_cells().len()
        + eta_y.empty_cells().len();
    let converged = bias.g1_hat.converged()
        && bias.f1_hat.converged()
        && eta_s.converged()
        && eta_a.converged()
        && eta_y.converged();
    Ok(SignalReport {
        s,
        a,
        y,
        alpha,
        signs,
        verdict,
        mean_abs_b1,
        positivity_flags: bias.positivity_flags().to_vec(),
        empty_cells,
        converged,
        split,
    })
}

/// Fit the three nuisance estimators a report needs on a training cohort.
pub fn fit_nuisances(
    os_train: &Cohort,
    model_kind: crate::nuisance::ModelKind,
    options: &crate::nuisance::FitOptions,
) -> Result<(FittedEstimator, FittedEstimator, FittedEstimator)> {
    let eta_s = crate::nuisance::fit(os_train, ConditioningSpec::eta_s(), model_kind, options)?;
    let eta_a = crate::nuisance::fit(os_train, ConditioningSpec::eta_a(), model_kind, options)?;
    let eta_y = crate::nuisance::fit(os_train, ConditioningSpec::eta_y(), model_kind, options)?;
    Ok((eta_s, eta_a, eta_y))
}
