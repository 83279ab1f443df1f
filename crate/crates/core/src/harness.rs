//! Experiment orchestration: one seeded run end to end (generate → fit →
//! signal → classify), multi-seed batches with pattern-match aggregation,
//! dimension/sample-size grids, and the WHI-style replica experiment.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nuisance::{estimate_bias, FitOptions, ModelKind};
use crate::signals::{
    evaluate_validation, fit_nuisances, SignalChannel, SignalReport, SignificanceTest, Verdict,
};
use crate::synthgen::{
    build_tables, generate_cohort, Cohort, MechanismKind, Population, SelectionTable, UModel,
};

/// The collider table used in the WHI-style replica: selection is high
/// unless the subject was treated, and lowest for treated cases.
pub fn whi_selection_table() -> SelectionTable {
    SelectionTable::new(0.9, 0.9, 0.3, 0.1).expect("fixed probabilities are valid")
}

/// Everything one experiment needs. `Default` gives the protocol
/// settings: d = 6, n_rct = n_os = 50000, n_val = 2000, p ~ U[0.2, 0.5],
/// alpha = 0.01, frequency-table nuisances, 200 seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub mechanism: MechanismKind,
    pub d: usize,
    pub n_rct: usize,
    pub n_os: usize,
    pub n_val: usize,
    pub u_model: UModel,
    pub selection_table: Option<SelectionTable>,
    pub p_range: (f64, f64),
    pub alpha: f64,
    pub model_kind: ModelKind,
    pub fit: FitOptions,
    pub test: SignificanceTest,
    pub n_seeds: usize,
    pub base_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mechanism: MechanismKind::NoBias,
            d: 6,
            n_rct: 50_000,
            n_os: 50_000,
            n_val: 2_000,
            u_model: UModel::BinaryU,
            selection_table: None,
            p_range: (0.2, 0.5),
            alpha: 0.01,
            model_kind: ModelKind::FrequencyTable,
            fit: FitOptions::default(),
            test: SignificanceTest::TTest,
            n_seeds: 200,
            base_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.mechanism.validate()?;
        if self.d == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if self.n_rct == 0 || self.n_os == 0 || self.n_val == 0 {
            return Err(Error::Config("cohort sizes must be positive".into()));
        }
        if self.n_val > self.n_os {
            return Err(Error::Config(format!(
                "n_val = {} exceeds n_os = {}; the validation slice cannot outgrow the cohort it models",
                self.n_val, self.n_os
            )));
        }
        let (lo, hi) = self.p_range;
        if !(lo > 0.1 && lo <= hi && hi <= 0.5) {
            return Err(Error::Config(format!(
                "p_range must satisfy 0.1 < lo <= hi <= 0.5, got [{lo}, {hi}]"
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        // TOML stores integers as i64, so seeds past that are not
        // expressible in a config file; keep every valid config exportable.
        if self.base_seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "base_seed = {} exceeds the config integer range (2^63 - 1)",
                self.base_seed
            )));
        }
        if self.base_seed.checked_add(self.n_seeds as u64).is_none() {
            return Err(Error::Config("seed range base_seed + n_seeds overflows".into()));
        }
        Ok(())
    }

    pub fn diagnose_options(&self) -> DiagnoseOptions {
        DiagnoseOptions {
            alpha: self.alpha,
            model_kind: self.model_kind,
            fit: self.fit,
            test: self.test,
        }
    }

    /// The seed range a batch covers.
    pub fn seeds(&self) -> std::ops::Range<u64> {
        self.base_seed..self.base_seed + self.n_seeds as u64
    }
}

/// Knobs for the scoring stage shared by simulated and ingested runs.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DiagnoseOptions {
    pub alpha: f64,
    pub model_kind: ModelKind,
    pub fit: FitOptions,
    pub test: SignificanceTest,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            alpha: 0.01,
            model_kind: ModelKind::FrequencyTable,
            fit: FitOptions::default(),
            test: SignificanceTest::TTest,
        }
    }
}

/// The single scoring path: estimate b̂₁ from (RCT, OS-train), fit the
/// three nuisances on OS-train, score the validation slice, classify.
/// Both the simulation harness and the CSV front-end call this.
pub fn diagnose_cohorts(
    rct: &Cohort,
    os_train: &Cohort,
    os_val: &Cohort,
    opts: &DiagnoseOptions,
    split: Option<crate::signals::SplitInfo>,
) -> Result<SignalReport> {
    let bias = estimate_bias(rct, os_train, opts.model_kind, &opts.fit)?;
    let (eta_s, eta_a, eta_y) = fit_nuisances(os_train, opts.model_kind, &opts.fit)?;
    evaluate_validation(os_val, &eta_s, &eta_a, &eta_y, &bias, opts.alpha, opts.test, split)
}

/// One seeded run, losslessly serializable to a CSV row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub p: f64,
    pub s: SignalChannel,
    pub a: SignalChannel,
    pub y: SignalChannel,
    pub verdict: Verdict,
    pub mean_abs_b1: f64,
    pub empty_cells: usize,
    pub converged: bool,
}

impl RunRecord {
    pub fn channels(&self) -> [&SignalChannel; 3] {
        [&self.s, &self.a, &self.y]
    }

    pub fn csv_header() -> &'static str {
        "seed,p,\
         r_s,pval_s,cov_s,n_s,deg_s,\
         r_a,pval_a,cov_a,n_a,deg_a,\
         r_y,pval_y,cov_y,n_y,deg_y,\
         verdict,mean_abs_b1,empty_cells,converged"
    }

    pub fn to_csv_row(&self) -> String {
        let chan = |c: &SignalChannel| {
            format!("{},{},{},{},{}", c.pearson_r, c.p_value, c.cov_hat, c.n_used, c.degenerate)
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.p,
            chan(&self.s),
            chan(&self.a),
            chan(&self.y),
            self.verdict,
            self.mean_abs_b1,
            self.empty_cells,
            self.converged
        )
    }

    pub fn from_csv_row(row: &str) -> Result<RunRecord> {
        let fields: Vec<&str> = row.trim_end().split(',').collect();
        if fields.len() != 21 {
            return Err(Error::Data(format!(
                "run record row has {} fields, expected 21",
                fields.len()
            )));
        }
        let real = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad real '{}' in run record", fields[i])))
        };
        let int = |i: usize| -> Result<u64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad integer '{}' in run record", fields[i])))
        };
        let flag = |i: usize| -> Result<bool> {
            fields[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad flag '{}' in run record", fields[i])))
        };
        let chan = |base: usize, target| -> Result<SignalChannel> {
            Ok(SignalChannel {
                target,
                n_used: int(base + 3)? as usize,
                cov_hat: real(base + 2)?,
                pearson_r: real(base)?,
                p_value: real(base + 1)?,
                degenerate: flag(base + 4)?,
            })
        };
        use crate::nuisance::TargetVar;
        Ok(RunRecord {
            seed: int(0)?,
            p: real(1)?,
            s: chan(2, TargetVar::S)?,
            a: chan(7, TargetVar::A)?,
            y: chan(12, TargetVar::Y)?,
            verdict: fields[17].parse()?,
            mean_abs_b1: real(18)?,
            empty_cells: int(19)? as usize,
            converged: flag(20)?,
        })
    }
}

/// One failed seed: recorded, never fatal to the batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunFailure {
    pub seed: u64,
    pub message: String,
}

/// Per-channel scalar triple in fixed (S, A, Y) order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChannelTriple {
    pub s: f64,
    pub a: f64,
    pub y: f64,
}

/// Aggregated batch statistics: match fraction against the expected sign
/// pattern, per-channel significance rates, median correlations and
/// p-values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchSummary {
    pub mechanism: String,
    pub alpha: f64,
    pub n_seeds: usize,
    pub n_completed: usize,
    pub n_failed: usize,
    pub expected_verdict: Option<Verdict>,
    /// Fraction of completed runs whose verdict equals the expected one;
    /// absent for combinations, which have no single expected label.
    pub match_fraction: Option<f64>,
    /// Fraction of completed runs with no significant channel at all.
    pub all_nonsignificant_fraction: f64,
    pub significant_fraction: ChannelTriple,
    pub median_r: ChannelTriple,
    pub median_p: ChannelTriple,
    pub verdict_counts: BTreeMap<String, usize>,
}

/// The verdict a pure mechanism should produce; combinations map to none.
/// Collider selection matches via the negative-channel rule, so its
/// expectation is still the SelectionType2 verdict itself.
pub fn expected_verdict(kind: &MechanismKind) -> Option<Verdict> {
    match kind {
        MechanismKind::NoBias => Some(Verdict::NoBias),
        MechanismKind::Transportability => Some(Verdict::Transportability),
        MechanismKind::Confounding => Some(Verdict::Confounding),
        MechanismKind::SelectionType1 => Some(Verdict::SelectionType1),
        MechanismKind::SelectionType2 => Some(Verdict::SelectionType2),
        MechanismKind::Combination(_) => None,
    }
}

fn median(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fold completed records into a summary. Pure so that the CSV round-trip
/// (write records, read back, re-aggregate) reproduces it exactly.
pub fn aggregate(
    mechanism: &MechanismKind,
    alpha: f64,
    n_seeds: usize,
    records: &[RunRecord],
    n_failed: usize,
) -> BatchSummary {
    let n = records.len();
    let nf = n as f64;
    let expected = expected_verdict(mechanism);
    let match_fraction = expected.map(|want| {
        records.iter().filter(|r| r.verdict == want).count() as f64 / nf
    });
    let sig = |pick: fn(&RunRecord) -> &SignalChannel| -> f64 {
        records.iter().filter(|r| pick(r).significant(alpha)).count() as f64 / nf
    };
    let med = |pick: fn(&RunRecord) -> &SignalChannel| -> f64 {
        median(&mut records.iter().map(|r| pick(r).pearson_r).collect())
    };
    let medp = |pick: fn(&RunRecord) -> &SignalChannel| -> f64 {
        median(&mut records.iter().map(|r| pick(r).p_value).collect())
    };
    let all_ns = records
        .iter()
        .filter(|r| r.channels().iter().all(|c| !c.significant(alpha)))
        .count() as f64
        / nf;
    let mut verdict_counts = BTreeMap::new();
    for r in records {
        *verdict_counts.entry(r.verdict.to_string()).or_insert(0) += 1;
    }
    BatchSummary {
        mechanism: mechanism.to_string(),
        alpha,
        n_seeds,
        n_completed: n,
        n_failed,
        expected_verdict: expected,
        match_fraction,
        all_nonsignificant_fraction: all_ns,
        significant_fraction: ChannelTriple { s: sig(|r| &r.s), a: sig(|r| &r.a), y: sig(|r| &r.y) },
        median_r: ChannelTriple { s: med(|r| &r.s), a: med(|r| &r.a), y: med(|r| &r.y) },
        median_p: ChannelTriple { s: medp(|r| &r.s), a: medp(|r| &r.a), y: medp(|r| &r.y) },
        verdict_counts,
    }
}

/// One end-to-end seeded run. The run is fully determined by (config,
/// seed): the per-run generator is seeded with the absolute seed value,
/// so records are reproducible regardless of batch partitioning or
/// worker scheduling.
pub fn run_single(config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = if config.p_range.0 == config.p_range.1 {
        config.p_range.0
    } else {
        rng.random_range(config.p_range.0..=config.p_range.1)
    };
    let spec = crate::synthgen::MechanismSpec::build(
        config.mechanism.clone(),
        config.u_model,
        config.d,
        p,
        config.selection_table,
        &mut rng,
    )?;
    let tables = build_tables(&spec, &mut rng)?;
    let rct = generate_cohort(&tables, &spec, Population::Rct, config.n_rct, &mut rng)?;
    let os_train = generate_cohort(&tables, &spec, Population::Os, config.n_os, &mut rng)?;
    let os_val = generate_cohort(&tables, &spec, Population::Os, config.n_val, &mut rng)?;
    let report = diagnose_cohorts(&rct, &os_train, &os_val, &config.diagnose_options(), None)?;
    Ok(RunRecord {
        seed,
        p,
        s: report.s,
        a: report.a,
        y: report.y,
        verdict: report.verdict,
        mean_abs_b1: report.mean_abs_b1,
        empty_cells: report.empty_cells,
        converged: report.converged,
    })
}

/// A batch's records, failures, and aggregate statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchOutput {
    pub summary: BatchSummary,
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

/// Run seeds base_seed..base_seed+n_seeds−1 in parallel. Individual run
/// failures are recorded with their seed and do not abort the batch.
pub fn run_batch(config: &ExperimentConfig) -> Result<BatchOutput> {
    config.validate()?;
    let outcomes: Vec<(u64, Result<RunRecord>)> = config
        .seeds()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|seed| (seed, run_single(config, seed)))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(record) => records.push(record),
            Err(err) => failures.push(RunFailure { seed, message: err.to_string() }),
        }
    }
    let summary =
        aggregate(&config.mechanism, config.alpha, config.n_seeds, &records, failures.len());
    Ok(BatchOutput { summary, records, failures })
}

/// A mechanisms × d × n_rct sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridConfig {
    pub base: ExperimentConfig,
    pub mechanisms: Vec<MechanismKind>,
    pub ds: Vec<usize>,
    pub n_rcts: Vec<usize>,
}

impl GridConfig {
    /// The appendix sweep: every pure biased mechanism over d ∈ {5, 6, 7}
    /// and n_rct ∈ {2000, 50000}.
    pub fn protocol(base: ExperimentConfig) -> Self {
        GridConfig {
            base,
            mechanisms: vec![
                MechanismKind::Transportability,
                MechanismKind::Confounding,
                MechanismKind::SelectionType1,
                MechanismKind::SelectionType2,
            ],
            ds: vec![5, 6, 7],
            n_rcts: vec![2_000, 50_000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub mechanism: String,
    pub d: usize,
    pub n_rct: usize,
    pub summary: BatchSummary,
}

impl GridCell {
    /// Detection power: −log10 of the median p-value on the mechanism's
    /// signature channel (A for confounding, S for U-driven selection, Y
    /// for transportability and collider selection). Higher means the
    /// correlation signal is spotted more decisively; None for cells with
    /// no single signature channel (no-bias, combinations).
    pub fn power(&self) -> Option<f64> {
        let p = &self.summary.median_p;
        let signature = match self.summary.expected_verdict? {
            Verdict::Transportability | Verdict::SelectionType2 => p.y,
            Verdict::Confounding => p.a,
            Verdict::SelectionType1 => p.s,
            Verdict::NoBias | Verdict::Indeterminate => return None,
        };
        Some(-signature.log10())
    }
}

/// Run every (mechanism, d, n_rct) cell; output order is the row-major
/// Cartesian product, so the emitted table is stable.
pub fn run_grid(grid: &GridConfig) -> Result<Vec<GridCell>> {
    if grid.mechanisms.is_empty() || grid.ds.is_empty() || grid.n_rcts.is_empty() {
        return Err(Error::Config("grid axes must all be non-empty".into()));
    }
    grid.base.validate()?;
    let mut cells = Vec::with_capacity(grid.mechanisms.len() * grid.ds.len() * grid.n_rcts.len());
    for mechanism in &grid.mechanisms {
        for &d in &grid.ds {
            for &n_rct in &grid.n_rcts {
                let mut config = grid.base.clone();
                config.mechanism = mechanism.clone();
                config.d = d;
                config.n_rct = n_rct;
                // the base table only applies where collider selection is active
                if !mechanism.includes(&MechanismKind::SelectionType2) {
                    config.selection_table = None;
                }
                let output = run_batch(&config)?;
                cells.push(GridCell {
                    mechanism: mechanism.to_string(),
                    d,
                    n_rct,
                    summary: output.summary,
                });
            }
        }
    }
    Ok(cells)
}

/// The WHI-style pair: the combined collider+transportability batch and a
/// "corrected" batch with selection probabilities raised to 0.99, matched
/// seed for seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WhiReplica {
    pub combined: BatchOutput,
    pub corrected: BatchOutput,
}

impl WhiReplica {
    /// Median-correlation shift per channel: (combined, corrected).
    pub fn median_shift(&self) -> [(f64, f64); 3] {
        let b = &self.combined.summary.median_r;
        let c = &self.corrected.summary.median_r;
        [(b.s, c.s), (b.a, c.a), (b.y, c.y)]
    }
}

pub fn run_whi_replica(config: &ExperimentConfig) -> Result<WhiReplica> {
    if !(config.mechanism.includes(&MechanismKind::SelectionType2)
        && config.mechanism.includes(&MechanismKind::Transportability))
    {
        return Err(Error::Config(
            "the WHI replica needs a mechanism combining selection-type-2 with transportability"
                .into(),
        ));
    }
    let mut combined_config = config.clone();
    if combined_config.selection_table.is_none() {
        combined_config.selection_table = Some(whi_selection_table());
    }
    let combined = run_batch(&combined_config)?;
    let mut corrected_config = combined_config.clone();
    corrected_config.selection_table = Some(SelectionTable::constant(0.99)?);
    let corrected = run_batch(&corrected_config)?;
    Ok(WhiReplica { combined, corrected })
}
