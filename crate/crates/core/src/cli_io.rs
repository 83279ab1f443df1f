//! Configuration files, cohort CSV interchange, the ingestion-side
//! diagnose pipeline, and the report writers behind the CLI.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::TheoreticalSignals;
use crate::error::{Error, Result};
use crate::harness::{
    BatchSummary, DiagnoseOptions, ExperimentConfig, GridCell, GridConfig, RunRecord,
};
use crate::nuisance::ModelKind;
use crate::signals::{SignalReport, SignificanceTest, SplitInfo};
use crate::synthgen::{Cohort, Covariates, MechanismKind, Population, SelectionTable, UModel};

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Diagnose,
    Oracle,
    Batch,
    Grid,
    WhiReplica,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Mode::Simulate => "simulate",
            Mode::Diagnose => "diagnose",
            Mode::Oracle => "oracle",
            Mode::Batch => "batch",
            Mode::Grid => "grid",
            Mode::WhiReplica => "whi-replica",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum UModelKey {
    Binary,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModelKey {
    Frequency,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermutationConfig {
    pub n_perm: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mechanisms: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ds: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_rcts: Option<Vec<usize>>,
}

/// The on-disk config shape: every key optional, unknown keys rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mechanism: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_rct: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_os: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_val: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    u_model: Option<UModelKey>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelKey>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_seeds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_table: Option<TableConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<PermutationConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridAxes>,
}

/// A parsed and validated configuration: the resolved experiment, the mode
/// if the file named one, and grid axes for sweep runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedConfig {
    pub mode: Option<Mode>,
    pub experiment: ExperimentConfig,
    pub grid: GridConfig,
}

pub fn parse_config_str(text: &str) -> Result<ParsedConfig> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    resolve_config(file)
}

pub fn parse_config(path: &Path) -> Result<ParsedConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text)
}

fn resolve_config(file: ConfigFile) -> Result<ParsedConfig> {
    let mut experiment = ExperimentConfig::default();
    if let Some(m) = &file.mechanism {
        experiment.mechanism = m.parse()?;
    }
    if let Some(d) = file.d {
        experiment.d = d;
    }
    if let Some(n) = file.n_rct {
        experiment.n_rct = n;
    }
    if let Some(n) = file.n_os {
        experiment.n_os = n;
    }
    if let Some(n) = file.n_val {
        experiment.n_val = n;
    }
    if let Some(u) = file.u_model {
        experiment.u_model = match u {
            UModelKey::Binary => UModel::BinaryU,
            UModelKey::Continuous => UModel::ContinuousU,
        };
    }
    if let Some([lo, hi]) = file.p_range {
        experiment.p_range = (lo, hi);
    }
    if let Some(a) = file.alpha {
        experiment.alpha = a;
    }
    if let Some(m) = file.model {
        experiment.model_kind = match m {
            ModelKey::Frequency => ModelKind::FrequencyTable,
            ModelKey::Logistic => ModelKind::Logistic,
        };
    }
    if let Some(n) = file.n_seeds {
        experiment.n_seeds = n;
    }
    if let Some(s) = file.base_seed {
        experiment.base_seed = s;
    }
    if let Some(t) = file.selection_table {
        experiment.selection_table = Some(SelectionTable::new(t.p00, t.p01, t.p10, t.p11)?);
    }
    if let Some(fit) = file.fit {
        if let Some(v) = fit.smoothing {
            experiment.fit.smoothing = v;
        }
        if let Some(v) = fit.l2 {
            experiment.fit.l2 = v;
        }
        if let Some(v) = fit.max_iters {
            experiment.fit.max_iters = v;
        }
        if let Some(v) = fit.tol {
            experiment.fit.tol = v;
        }
    }
    if let Some(perm) = file.permutation {
        experiment.test = SignificanceTest::Permutation {
            n_perm: perm.n_perm,
            seed: perm.seed.unwrap_or(0),
        };
    }
    experiment.validate()?;

    let mut grid = GridConfig::protocol(experiment.clone());
    if let Some(axes) = &file.grid {
        if let Some(mechs) = &axes.mechanisms {
            grid.mechanisms = mechs
                .iter()
                .map(|m| m.parse::<MechanismKind>())
                .collect::<Result<Vec<_>>>()?;
        }
        if let Some(ds) = &axes.ds {
            grid.ds = ds.clone();
        }
        if let Some(ns) = &axes.n_rcts {
            grid.n_rcts = ns.clone();
        }
    }
    Ok(ParsedConfig { mode: file.mode, experiment, grid })
}

/// The normalized text form: every resolved value written out explicitly.
/// `parse(to_toml(parse(x))) == parse(x)` and `to_toml` is idempotent over
/// a parse, which is the config round-trip contract.
pub fn to_toml(parsed: &ParsedConfig) -> String {
    let e = &parsed.experiment;
    let file = ConfigFile {
        mode: parsed.mode,
        mechanism: Some(e.mechanism.to_string()),
        d: Some(e.d),
        n_rct: Some(e.n_rct),
        n_os: Some(e.n_os),
        n_val: Some(e.n_val),
        u_model: Some(match e.u_model {
            UModel::BinaryU => UModelKey::Binary,
            UModel::ContinuousU => UModelKey::Continuous,
        }),
        p_range: Some([e.p_range.0, e.p_range.1]),
        alpha: Some(e.alpha),
        model: Some(match e.model_kind {
            ModelKind::FrequencyTable => ModelKey::Frequency,
            ModelKind::Logistic => ModelKey::Logistic,
        }),
        n_seeds: Some(e.n_seeds),
        base_seed: Some(e.base_seed),
        selection_table: e.selection_table.map(|t| TableConfig {
            p00: t.get(0, 0),
            p01: t.get(0, 1),
            p10: t.get(1, 0),
            p11: t.get(1, 1),
        }),
        fit: Some(FitConfig {
            smoothing: Some(e.fit.smoothing),
            l2: Some(e.fit.l2),
            max_iters: Some(e.fit.max_iters),
            tol: Some(e.fit.tol),
        }),
        permutation: match e.test {
            SignificanceTest::TTest => None,
            SignificanceTest::Permutation { n_perm, seed } => {
                Some(PermutationConfig { n_perm, seed: Some(seed) })
            }
        },
        grid: Some(GridAxes {
            mechanisms: Some(parsed.grid.mechanisms.iter().map(|m| m.to_string()).collect()),
            ds: Some(parsed.grid.ds.clone()),
            n_rcts: Some(parsed.grid.n_rcts.clone()),
        }),
    };
    toml::to_string(&file).expect("config serialization cannot fail")
}

// ---------------------------------------------------------------------------
// Cohort CSV interchange
// ---------------------------------------------------------------------------

fn format_real(v: f64) -> String {
    // Shortest decimal that parses back to the same f64; integral values
    // keep a trailing ".0" so the column stays visibly real-typed.
    if v.fract() == 0.0 && v.is_finite() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// Write a cohort in the interchange schema: `r,s,a,y,x_0,...,x_{d-1}`,
/// with `a` and `y` empty exactly when s = 0. Latent state never leaves
/// the process: the masked view is what gets written.
pub fn write_cohort_csv<W: Write>(cohort: &Cohort, mut out: W) -> Result<()> {
    let d = cohort.d();
    let mut header = String::from("r,s,a,y");
    for j in 0..d {
        header.push_str(&format!(",x_{j}"));
    }
    writeln!(out, "{header}")?;
    let r = match cohort.population() {
        Population::Rct => 1,
        Population::Os => 0,
    };
    let mut features = vec![0.0; d];
    for i in 0..cohort.len() {
        let (a, y) = match (cohort.a(i), cohort.y(i)) {
            (Some(a), Some(y)) => (a.to_string(), y.to_string()),
            _ => (String::new(), String::new()),
        };
        let mut row = format!("{r},{},{a},{y}", cohort.s(i));
        match cohort.cells() {
            Some(cells) => {
                for j in 0..d {
                    row.push_str(if (cells[i] >> j) & 1 == 1 { ",1" } else { ",0" });
                }
            }
            None => {
                cohort.feature_row(i, &mut features);
                for v in &features {
                    row.push(',');
                    row.push_str(&format_real(*v));
                }
            }
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Sidecar with the latent u for oracle-mode synthetic exports.
pub fn write_u_sidecar<W: Write>(cohort: &Cohort, mut out: W) -> Result<()> {
    if !cohort.has_latent_u() {
        return Err(Error::Data("cohort has no latent u to export".into()));
    }
    writeln!(out, "u")?;
    for i in 0..cohort.len() {
        writeln!(out, "{}", format_real(cohort.latent_u(i).expect("checked above")))?;
    }
    Ok(())
}

/// Read one cohort from the interchange CSV. The population comes from the
/// constant `r` column; covariate typing is sniffed: columns where every
/// token is `0` or `1` stay binary cells, anything else makes the cohort
/// real-typed (and thus logistic-only downstream).
pub fn read_cohort_csv<R: Read>(input: R) -> Result<Cohort> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("cohort CSV is empty".into()))?
        .map_err(Error::Io)?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 5 || cols[0] != "r" || cols[1] != "s" || cols[2] != "a" || cols[3] != "y" {
        return Err(Error::Data(format!(
            "cohort CSV header must start with r,s,a,y,x_0,... (got '{header}')"
        )));
    }
    let d = cols.len() - 4;
    for (j, col) in cols[4..].iter().enumerate() {
        if *col != format!("x_{j}") {
            return Err(Error::Data(format!(
                "covariate column {} is named '{col}', expected 'x_{j}'; \
                 extra or latent columns are not accepted",
                j + 4
            )));
        }
    }
    let parse_bit = |token: &str, name: &str, line: usize| -> Result<u8> {
        match token {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::Data(format!(
                "line {line}: {name} must be 0 or 1, got '{other}'"
            ))),
        }
    };
    let mut r_values = Vec::new();
    let mut s = Vec::new();
    let mut a: Vec<Option<u8>> = Vec::new();
    let mut y: Vec<Option<u8>> = Vec::new();
    let mut x_tokens: Vec<String> = Vec::new();
    let mut binary = true;
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 2; // header is line 1
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != d + 4 {
            return Err(Error::Data(format!(
                "line {lineno}: {} fields, expected {}",
                fields.len(),
                d + 4
            )));
        }
        r_values.push(parse_bit(fields[0], "r", lineno)?);
        let s_i = parse_bit(fields[1], "s", lineno)?;
        let parse_masked = |token: &str, name: &str| -> Result<Option<u8>> {
            if token.is_empty() {
                if s_i == 1 {
                    return Err(Error::Data(format!(
                        "line {lineno}: {name} is empty on a selected (s=1) row"
                    )));
                }
                Ok(None)
            } else {
                if s_i == 0 {
                    return Err(Error::Data(format!(
                        "line {lineno}: {name} must be empty when s=0, got '{token}'"
                    )));
                }
                Ok(Some(parse_bit(token, name, lineno)?))
            }
        };
        a.push(parse_masked(fields[2], "a")?);
        y.push(parse_masked(fields[3], "y")?);
        s.push(s_i);
        for &tok in &fields[4..] {
            if tok != "0" && tok != "1" {
                binary = false;
            }
            x_tokens.push(tok.to_string());
        }
    }
    if s.is_empty() {
        return Err(Error::Data("cohort CSV has a header but no rows".into()));
    }
    let population = match (r_values.iter().all(|&r| r == 1), r_values.iter().all(|&r| r == 0)) {
        (true, _) => Population::Rct,
        (_, true) => Population::Os,
        _ => {
            return Err(Error::Data(
                "the r column must be constant: one file holds one cohort".into(),
            ))
        }
    };
    let xs = if binary {
        let mut cells = Vec::with_capacity(s.len());
        for row in x_tokens.chunks(d) {
            let mut cell = 0u32;
            for (j, tok) in row.iter().enumerate() {
                if tok == "1" {
                    cell |= 1 << j;
                }
            }
            cells.push(cell);
        }
        Covariates::Cells(cells)
    } else {
        let mut rows = Vec::with_capacity(x_tokens.len());
        for (k, tok) in x_tokens.iter().enumerate() {
            let v: f64 = tok.parse().map_err(|_| {
                Error::Data(format!(
                    "line {}: covariate x_{} is not numeric: '{tok}'",
                    k / d + 2,
                    k % d
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite covariate '{tok}'")));
            }
            rows.push(v);
        }
        Covariates::Real(rows)
    };
    Cohort::from_observed(population, d, xs, s, a, y)
}

/// Paths plus schema expectations for an externally supplied pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestedDataset {
    pub rct_path: String,
    pub os_path: String,
}

/// Load and cross-validate an (RCT, OS) pair. If only one file is
/// real-typed the other is widened so both run the logistic path.
pub fn load_cohorts(dataset: &IngestedDataset) -> Result<(Cohort, Cohort)> {
    let open = |path: &str| -> Result<Cohort> {
        let file = fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open cohort file {path}: {e}")))?;
        read_cohort_csv(file).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{path}: {msg}")),
            other => other,
        })
    };
    let rct = open(&dataset.rct_path)?;
    let os = open(&dataset.os_path)?;
    if rct.population() != Population::Rct {
        return Err(Error::Data(format!(
            "{}: expected an RCT cohort (r=1), found r=0",
            dataset.rct_path
        )));
    }
    if os.population() != Population::Os {
        return Err(Error::Data(format!(
            "{}: expected an observational cohort (r=0), found r=1",
            dataset.os_path
        )));
    }
    if rct.d() != os.d() {
        return Err(Error::Data(format!(
            "covariate dimension mismatch: {} has d={}, {} has d={}",
            dataset.rct_path,
            rct.d(),
            dataset.os_path,
            os.d()
        )));
    }
    match (rct.is_binary(), os.is_binary()) {
        (true, false) => Ok((rct.to_real(), os)),
        (false, true) => Ok((rct, os.to_real())),
        _ => Ok((rct, os)),
    }
}

// ---------------------------------------------------------------------------
// Diagnose on an ingested pair
// ---------------------------------------------------------------------------

/// Options for the split-and-score path on an (RCT, OS) pair.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SplitOptions {
    pub base: DiagnoseOptions,
    /// Fraction of OS rows set aside for validation (default 0.2).
    pub val_fraction: f64,
    /// Seed of the deterministic shuffle that makes the split.
    pub split_seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions { base: DiagnoseOptions::default(), val_fraction: 0.2, split_seed: 0 }
    }
}

/// Deterministic seeded shuffle split of row indices: (train, validation).
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Data(format!(
            "cannot split {n} rows into train/validation at fraction {val_fraction}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let val = indices.split_off(n - n_val);
    Ok((indices, val))
}

/// Full pipeline on a loaded pair: split the OS deterministically, fit on
/// the training side, score the validation side, classify. Identical to
/// the harness in-memory path given the same cohorts and options.
pub fn diagnose(rct: &Cohort, os: &Cohort, options: &SplitOptions) -> Result<SignalReport> {
    let (train_idx, val_idx) = split_indices(os.len(), options.val_fraction, options.split_seed)?;
    let os_train = os.subset(&train_idx);
    let os_val = os.subset(&val_idx);
    let split = SplitInfo {
        seed: options.split_seed,
        val_fraction: options.val_fraction,
        n_train: os_train.len(),
        n_val: os_val.len(),
    };
    crate::harness::diagnose_cohorts(rct, &os_train, &os_val, &options.base, Some(split))
}

// ---------------------------------------------------------------------------
// Report writers
// ---------------------------------------------------------------------------

pub fn write_runs_csv<W: Write>(records: &[RunRecord], mut out: W) -> Result<()> {
    writeln!(out, "{}", RunRecord::csv_header())?;
    for record in records {
        writeln!(out, "{}", record.to_csv_row())?;
    }
    Ok(())
}

pub fn read_runs_csv<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("runs CSV is empty".into()))?
        .map_err(Error::Io)?;
    if header.trim_end() != RunRecord::csv_header() {
        return Err(Error::Data("runs CSV header does not match the RunRecord schema".into()));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(RunRecord::from_csv_row(&line)?);
    }
    Ok(records)
}

pub fn write_summary_json<W: Write>(summary: &BatchSummary, mut out: W) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Data(format!("summary serialization failed: {e}")))?;
    writeln!(out, "{text}")?;
    Ok(())
}

pub fn write_report_json<W: Write>(report: &SignalReport, mut out: W) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?;
    writeln!(out, "{text}")?;
    Ok(())
}

pub const GRID_CSV_HEADER: &str = "mechanism,d,n_rct,n_seeds,n_completed,n_failed,\
                                   match_fraction,all_nonsignificant_fraction,\
                                   sig_s,sig_a,sig_y,median_r_s,median_r_a,median_r_y,\
                                   median_p_s,median_p_a,median_p_y,power";

pub fn write_grid_csv<W: Write>(cells: &[GridCell], mut out: W) -> Result<()> {
    writeln!(out, "{GRID_CSV_HEADER}")?;
    for cell in cells {
        let s = &cell.summary;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            cell.mechanism,
            cell.d,
            cell.n_rct,
            s.n_seeds,
            s.n_completed,
            s.n_failed,
            s.match_fraction.map(|f| f.to_string()).unwrap_or_default(),
            s.all_nonsignificant_fraction,
            s.significant_fraction.s,
            s.significant_fraction.a,
            s.significant_fraction.y,
            s.median_r.s,
            s.median_r.a,
            s.median_r.y,
            s.median_p.s,
            s.median_p.a,
            s.median_p.y,
            cell.power().map(|f| f.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}

pub const ORACLE_CSV_HEADER: &str = "mechanism,p,rho_S,se_S,rho_A,se_A,rho_Y,se_Y";

pub fn write_oracle_csv<W: Write>(
    rows: &[(MechanismKind, f64, TheoreticalSignals)],
    mut out: W,
) -> Result<()> {
    writeln!(out, "{ORACLE_CSV_HEADER}")?;
    for (mechanism, p, sig) in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            mechanism, p, sig.s.rho, sig.s.se, sig.a.rho, sig.a.se, sig.y.rho, sig.y.se
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{build_tables, generate_cohort, MechanismSpec};
    use approx::assert_abs_diff_eq;

    fn synthetic_pair(seed: u64, d: usize, n: usize) -> (Cohort, Cohort) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec =
            MechanismSpec::build(MechanismKind::Confounding, UModel::BinaryU, d, 0.3, None, &mut rng)
                .unwrap();
        let tables = build_tables(&spec, &mut rng).unwrap();
        let rct = generate_cohort(&tables, &spec, Population::Rct, n, &mut rng).unwrap();
        let os = generate_cohort(&tables, &spec, Population::Os, n, &mut rng).unwrap();
        (rct, os)
    }

    #[test]
    fn empty_config_gives_protocol_defaults() {
        let parsed = parse_config_str("").unwrap();
        assert_eq!(parsed.experiment, ExperimentConfig::default());
        assert_eq!(parsed.mode, None);
        assert_eq!(parsed.experiment.d, 6);
        assert_eq!(parsed.experiment.n_os, 50_000);
        assert_eq!(parsed.experiment.n_val, 2_000);
        assert_eq!(parsed.experiment.n_seeds, 200);
        assert_abs_diff_eq!(parsed.experiment.alpha, 0.01);
    }

    #[test]
    fn config_rejects_out_of_range_and_unknown_keys() {
        let err = parse_config_str("p_range = [0.2, 0.6]").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = parse_config_str("not_a_key = 1").unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");
        assert!(parse_config_str("alpha = \"lots\"").is_err());
        assert!(parse_config_str("mechanism = \"mystery\"").is_err());
    }

    #[test]
    fn config_round_trip_is_idempotent() {
        let text = r#"
            mode = "batch"
            mechanism = "selection-type-2+transportability"
            d = 5
            n_seeds = 10
            p_range = [0.25, 0.45]
            [selection_table]
            p00 = 0.9
            p01 = 0.9
            p10 = 0.3
            p11 = 0.1
            [fit]
            smoothing = 0.25
        "#;
        let parsed = parse_config_str(text).unwrap();
        let normalized = to_toml(&parsed);
        let reparsed = parse_config_str(&normalized).unwrap();
        assert_eq!(parsed, reparsed);
        assert_eq!(to_toml(&reparsed), normalized);
        assert_eq!(reparsed.experiment.fit.smoothing, 0.25);
        assert_eq!(reparsed.experiment.fit.l2, ExperimentConfig::default().fit.l2);
    }

    #[test]
    fn config_parses_permutation_and_grid_axes() {
        let text = r#"
            mechanism = "confounding"
            [permutation]
            n_perm = 499
            [grid]
            mechanisms = ["confounding", "no-bias"]
            ds = [4, 5]
            n_rcts = [1000]
        "#;
        let parsed = parse_config_str(text).unwrap();
        assert_eq!(
            parsed.experiment.test,
            SignificanceTest::Permutation { n_perm: 499, seed: 0 }
        );
        assert_eq!(parsed.grid.mechanisms.len(), 2);
        assert_eq!(parsed.grid.ds, vec![4, 5]);
        assert_eq!(parsed.grid.n_rcts, vec![1000]);
        // Default axes when the table is absent.
        let bare = parse_config_str("").unwrap();
        assert_eq!(bare.grid.ds, vec![5, 6, 7]);
        assert_eq!(bare.grid.n_rcts, vec![2_000, 50_000]);
    }

    #[test]
    fn cohort_csv_round_trip_is_byte_identical() {
        let (rct, os) = synthetic_pair(1, 3, 400);
        for cohort in [&rct, &os] {
            let mut first = Vec::new();
            write_cohort_csv(cohort, &mut first).unwrap();
            let loaded = read_cohort_csv(first.as_slice()).unwrap();
            let mut second = Vec::new();
            write_cohort_csv(&loaded, &mut second).unwrap();
            assert_eq!(first, second);
            assert_eq!(loaded.population(), cohort.population());
            assert_eq!(loaded.d(), cohort.d());
            assert_eq!(loaded.len(), cohort.len());
            assert!(loaded.is_binary());
            // The masked views agree row-for-row.
            for i in 0..cohort.len() {
                assert_eq!(loaded.s(i), cohort.s(i));
                assert_eq!(loaded.a(i), cohort.a(i));
                assert_eq!(loaded.y(i), cohort.y(i));
            }
            // The latent u never survives export.
            assert!(!loaded.has_latent_u());
        }
    }

    #[test]
    fn real_covariates_round_trip_and_type_as_continuous() {
        let cohort = Cohort::from_observed(
            Population::Os,
            2,
            Covariates::Real(vec![0.5, 1.25, -3.0, 62.125, 0.1 + 0.2, 1.0]),
            vec![1, 0, 1],
            vec![Some(1), None, Some(0)],
            vec![Some(0), None, Some(1)],
        )
        .unwrap();
        let mut first = Vec::new();
        write_cohort_csv(&cohort, &mut first).unwrap();
        let loaded = read_cohort_csv(first.as_slice()).unwrap();
        assert!(!loaded.is_binary());
        let mut second = Vec::new();
        write_cohort_csv(&loaded, &mut second).unwrap();
        assert_eq!(first, second);
        let mut row = vec![0.0; 2];
        loaded.feature_row(1, &mut row);
        assert_eq!(row, vec![-3.0, 62.125]);
    }

    #[test]
    fn csv_schema_violations_are_rejected() {
        let ok_header = "r,s,a,y,x_0,x_1\n";
        // The availability rule, both directions.
        let err = read_cohort_csv(format!("{ok_header}0,0,1,,0,1\n").as_bytes()).unwrap_err();
        assert!(err.to_string().contains("must be empty"), "{err}");
        let err = read_cohort_csv(format!("{ok_header}0,1,,1,0,1\n").as_bytes()).unwrap_err();
        assert!(err.to_string().contains("empty on a selected"), "{err}");
        // Non-binary s/a/y.
        for bad_row in ["0,2,,,0,1", "0,1,5,1,0,1", "0,1,1,0.5,0,1"] {
            assert!(read_cohort_csv(format!("{ok_header}{bad_row}\n").as_bytes()).is_err());
        }
        // Mixed r column.
        let err =
            read_cohort_csv(format!("{ok_header}0,1,1,1,0,1\n1,1,1,1,0,1\n").as_bytes()).unwrap_err();
        assert!(err.to_string().contains("constant"), "{err}");
        // Latent or mis-named columns.
        assert!(read_cohort_csv("r,s,a,y,u,x_0\n0,1,1,1,0.5,1\n".as_bytes()).is_err());
        assert!(read_cohort_csv("r,s,a,y,x_1,x_0\n0,1,1,1,0,1\n".as_bytes()).is_err());
        // Field-count mismatch and empty files.
        assert!(read_cohort_csv(format!("{ok_header}0,1,1,1,0\n").as_bytes()).is_err());
        assert!(read_cohort_csv("".as_bytes()).is_err());
        assert!(read_cohort_csv(ok_header.as_bytes()).is_err());
    }

    #[test]
    fn continuous_covariates_refuse_the_frequency_estimator() {
        let csv = "r,s,a,y,x_0\n0,1,1,0,0.7\n0,1,0,1,0.2\n0,1,1,1,0.9\n";
        let cohort = read_cohort_csv(csv.as_bytes()).unwrap();
        assert!(!cohort.is_binary());
        let err = crate::nuisance::fit_frequency(
            &cohort,
            crate::nuisance::ConditioningSpec::eta_s(),
            0.5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Estimation(_)));
        // The logistic path accepts it (the A target has both classes).
        assert!(crate::nuisance::fit_logistic(
            &cohort,
            crate::nuisance::ConditioningSpec::eta_a(),
            0.1,
            50,
            1e-8,
        )
        .is_ok());
    }

    #[test]
    fn load_cohorts_validates_and_coerces_the_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (rct, os) = synthetic_pair(2, 3, 300);
        let rct_path = dir.path().join("rct.csv");
        let os_path = dir.path().join("os.csv");
        write_cohort_csv(&rct, fs::File::create(&rct_path).unwrap()).unwrap();
        write_cohort_csv(&os, fs::File::create(&os_path).unwrap()).unwrap();
        let dataset = IngestedDataset {
            rct_path: rct_path.to_string_lossy().into_owned(),
            os_path: os_path.to_string_lossy().into_owned(),
        };
        let (rct_in, os_in) = load_cohorts(&dataset).unwrap();
        assert_eq!(rct_in.d(), os_in.d());
        assert!(rct_in.is_binary() && os_in.is_binary());
        // Swapped populations are caught.
        let swapped = IngestedDataset {
            rct_path: dataset.os_path.clone(),
            os_path: dataset.rct_path.clone(),
        };
        assert!(matches!(load_cohorts(&swapped), Err(Error::Data(_))));
        // A continuous OS file widens the binary RCT to the real-typed path.
        let cont_path = dir.path().join("os_cont.csv");
        fs::write(&cont_path, "r,s,a,y,x_0,x_1,x_2\n0,1,1,0,0.5,1.0,0.0\n0,1,0,1,0.25,0.0,1.0\n")
            .unwrap();
        let mixed = IngestedDataset {
            rct_path: dataset.rct_path.clone(),
            os_path: cont_path.to_string_lossy().into_owned(),
        };
        let (rct_wide, os_cont) = load_cohorts(&mixed).unwrap();
        assert!(!rct_wide.is_binary());
        assert!(!os_cont.is_binary());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (train, val) = split_indices(100, 0.2, 7).unwrap();
        assert_eq!(val.len(), 20);
        assert_eq!(train.len(), 80);
        let (train2, val2) = split_indices(100, 0.2, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (_, val3) = split_indices(100, 0.2, 8).unwrap();
        assert_ne!(val, val3);
        assert!(split_indices(3, 0.01, 0).is_err());
        assert!(split_indices(0, 0.2, 0).is_err());
    }

    #[test]
    fn exported_and_reingested_pair_diagnoses_identically() {
        let (rct, os) = synthetic_pair(3, 4, 8_000);
        let options = SplitOptions::default();
        let in_memory = diagnose(&rct, &os, &options).unwrap();
        // Round-trip both cohorts through the interchange CSV.
        let mut rct_csv = Vec::new();
        let mut os_csv = Vec::new();
        write_cohort_csv(&rct, &mut rct_csv).unwrap();
        write_cohort_csv(&os, &mut os_csv).unwrap();
        let rct_in = read_cohort_csv(rct_csv.as_slice()).unwrap();
        let os_in = read_cohort_csv(os_csv.as_slice()).unwrap();
        let reingested = diagnose(&rct_in, &os_in, &options).unwrap();
        assert_eq!(in_memory, reingested);
        let split = in_memory.split.expect("split recorded");
        assert_eq!(split.n_val, 1_600);
        assert_eq!(split.n_train, 6_400);
    }

    #[test]
    fn runs_csv_round_trips_through_files() {
        let config = ExperimentConfig {
            mechanism: MechanismKind::Transportability,
            d: 3,
            n_rct: 2_000,
            n_os: 2_000,
            n_val: 500,
            n_seeds: 4,
            ..ExperimentConfig::default()
        };
        let out = crate::harness::run_batch(&config).unwrap();
        let mut buf = Vec::new();
        write_runs_csv(&out.records, &mut buf).unwrap();
        let back = read_runs_csv(buf.as_slice()).unwrap();
        assert_eq!(back, out.records);
        let mut buf2 = Vec::new();
        write_runs_csv(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        // Summary JSON serializes without error and mentions the mechanism.
        let mut json = Vec::new();
        write_summary_json(&out.summary, &mut json).unwrap();
        assert!(String::from_utf8(json).unwrap().contains("transportability"));
    }

    #[test]
    fn grid_and_oracle_csv_schemas_are_stable() {
        let summary = crate::harness::aggregate(&MechanismKind::NoBias, 0.01, 0, &[], 0);
        let cells = vec![GridCell { mechanism: "no-bias".into(), d: 5, n_rct: 2_000, summary }];
        let mut buf = Vec::new();
        write_grid_csv(&cells, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("mechanism,d,n_rct,"));
        assert!(text.lines().nth(1).unwrap().starts_with("no-bias,5,2000,"));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sig =
            crate::analytic::theoretical_signals(&MechanismKind::Confounding, 0.3, 20_000, None, &mut rng)
                .unwrap();
        let mut buf = Vec::new();
        write_oracle_csv(&[(MechanismKind::Confounding, 0.3, sig)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), ORACLE_CSV_HEADER);
        assert!(text.lines().nth(1).unwrap().starts_with("confounding,0.3,"));
    }
}
