use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use biascope::cli_io::{
    diagnose, load_cohorts, parse_config, write_cohort_csv, write_grid_csv,
    write_oracle_csv, write_report_json, write_runs_csv, write_summary_json, write_u_sidecar,
    IngestedDataset, Mode, ParsedConfig, SplitOptions,
};
use biascope::harness::{
    run_batch, run_grid, run_whi_replica, BatchOutput, DiagnoseOptions, ExperimentConfig,
};
use biascope::nuisance::ModelKind;
use biascope::synthgen::{
    build_tables, generate_cohort, MechanismKind, MechanismSpec, Population, SelectionTable,
};
use biascope::{Error, Result};

/// Simulate and diagnose causal-bias mechanisms from paired RCT and
/// observational cohorts.
#[derive(Parser)]
#[command(name = "biascope", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic RCT/OS cohort pair as interchange CSVs.
    Simulate {
        /// Experiment config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Mechanism override, e.g. "confounding" or
        /// "selection-type-2+transportability".
        #[arg(long)]
        mechanism: Option<String>,
        /// Seed for the generative draw.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for rct.csv and os.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write rct_u.csv / os_u.csv sidecars with the latent u.
        #[arg(long)]
        with_u: bool,
    },
    /// Score an (RCT, OS) cohort pair and classify the bias mechanism.
    Diagnose {
        /// RCT cohort CSV (r = 1 rows).
        #[arg(long)]
        rct: PathBuf,
        /// Observational cohort CSV (r = 0 rows).
        #[arg(long)]
        os: PathBuf,
        /// Per-channel significance level.
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Nuisance model: freq (binary covariates only) or logistic.
        #[arg(long, default_value = "logistic", value_parser = ["freq", "logistic"])]
        model: String,
        /// Fraction of OS rows held out for validation.
        #[arg(long, default_value_t = 0.2)]
        val_frac: f64,
        /// Seed of the deterministic train/validation shuffle.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo oracle for the theoretical correlation signals.
    Oracle {
        /// Mechanism to evaluate (pure kinds only).
        #[arg(long)]
        mechanism: String,
        /// Parameter-distribution width p in (0.1, 0.5].
        #[arg(long)]
        p: f64,
        /// Monte Carlo sample count (at least 10000).
        #[arg(long, default_value_t = 1_000_000)]
        mc: usize,
        /// Selection table "p00,p01,p10,p11" (selection-type-2 only).
        #[arg(long)]
        table: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the oracle CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a multi-seed batch and write runs.csv plus summary.json.
    Batch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Sweep mechanisms × d × n_rct and write grid.csv.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// The WHI-style collider+transportability replica with its corrected
    /// (selection ≈ 1) counterpart.
    WhiReplica {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn load_for_mode(path: &Path, mode: Mode) -> Result<ParsedConfig> {
    let parsed = parse_config(path)?;
    if let Some(stated) = parsed.mode {
        if stated != mode {
            return Err(Error::Config(format!(
                "config declares mode '{stated}' but the '{mode}' subcommand was invoked"
            )));
        }
    }
    Ok(parsed)
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_file<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let mut file = fs::File::create(path)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))?;
    write(&mut file)
}

fn print_summary_line(label: &str, output: &BatchOutput) {
    let s = &output.summary;
    let matched = s
        .match_fraction
        .map(|f| format!("{:.1}% match", 100.0 * f))
        .unwrap_or_else(|| "no single expected pattern".into());
    println!(
        "{label}: {} runs ({} failed), {matched}, significant S/A/Y = {:.2}/{:.2}/{:.2}, median r S/A/Y = {:+.3}/{:+.3}/{:+.3}",
        s.n_completed,
        s.n_failed,
        s.significant_fraction.s,
        s.significant_fraction.a,
        s.significant_fraction.y,
        s.median_r.s,
        s.median_r.a,
        s.median_r.y,
    );
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, mechanism, seed, out, with_u } => {
            let mut experiment = match &config {
                Some(path) => load_for_mode(path, Mode::Simulate)?.experiment,
                None => ExperimentConfig::default(),
            };
            if let Some(name) = mechanism {
                experiment.mechanism = name.parse()?;
            }
            experiment.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = if experiment.p_range.0 == experiment.p_range.1 {
                experiment.p_range.0
            } else {
                rng.random_range(experiment.p_range.0..=experiment.p_range.1)
            };
            let spec = MechanismSpec::build(
                experiment.mechanism.clone(),
                experiment.u_model,
                experiment.d,
                p,
                experiment.selection_table,
                &mut rng,
            )?;
            let tables = build_tables(&spec, &mut rng)?;
            let rct = generate_cohort(&tables, &spec, Population::Rct, experiment.n_rct, &mut rng)?;
            let os = generate_cohort(&tables, &spec, Population::Os, experiment.n_os, &mut rng)?;
            create_out_dir(&out)?;
            write_file(&out.join("rct.csv"), |w| write_cohort_csv(&rct, w))?;
            write_file(&out.join("os.csv"), |w| write_cohort_csv(&os, w))?;
            if with_u {
                write_file(&out.join("rct_u.csv"), |w| write_u_sidecar(&rct, w))?;
                write_file(&out.join("os_u.csv"), |w| write_u_sidecar(&os, w))?;
            }
            println!(
                "wrote {} RCT rows and {} OS rows under {} (mechanism {}, d {}, p {:.4}, seed {seed})",
                rct.len(),
                os.len(),
                out.display(),
                experiment.mechanism,
                experiment.d,
                p,
            );
            Ok(())
        }
        Command::Diagnose { rct, os, alpha, model, val_frac, split_seed, out } => {
            let dataset = IngestedDataset {
                rct_path: rct.to_string_lossy().into_owned(),
                os_path: os.to_string_lossy().into_owned(),
            };
            let (rct, os) = load_cohorts(&dataset)?;
            let model_kind = match model.as_str() {
                "freq" => {
                    if !rct.is_binary() || !os.is_binary() {
                        return Err(Error::Data(
                            "continuous covariates require --model logistic".into(),
                        ));
                    }
                    ModelKind::FrequencyTable
                }
                _ => ModelKind::Logistic,
            };
            let options = SplitOptions {
                base: DiagnoseOptions { alpha, model_kind, ..DiagnoseOptions::default() },
                val_fraction: val_frac,
                split_seed,
            };
            let report = diagnose(&rct, &os, &options)?;
            match out {
                Some(path) => write_file(&path, |w| write_report_json(&report, w))?,
                None => write_report_json(&report, std::io::stdout().lock())?,
            }
            Ok(())
        }
        Command::Oracle { mechanism, p, mc, table, seed, out } => {
            let kind: MechanismKind = mechanism.parse()?;
            let table = match table {
                Some(text) => {
                    let parts: Vec<&str> = text.split(',').collect();
                    if parts.len() != 4 {
                        return Err(Error::Config(format!(
                            "--table needs four comma-separated probabilities, got '{text}'"
                        )));
                    }
                    let mut vals = [0.0; 4];
                    for (slot, part) in vals.iter_mut().zip(&parts) {
                        *slot = part.trim().parse().map_err(|_| {
                            Error::Config(format!("bad probability '{part}' in --table"))
                        })?;
                    }
                    Some(SelectionTable::new(vals[0], vals[1], vals[2], vals[3])?)
                }
                None => None,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let signals =
                biascope::analytic::theoretical_signals(&kind, p, mc, table.as_ref(), &mut rng)?;
            let rows = vec![(kind, p, signals)];
            match out {
                Some(path) => write_file(&path, |w| write_oracle_csv(&rows, w))?,
                None => write_oracle_csv(&rows, std::io::stdout().lock())?,
            }
            Ok(())
        }
        Command::Batch { config, out } => {
            let parsed = load_for_mode(&config, Mode::Batch)?;
            let output = run_batch(&parsed.experiment)?;
            create_out_dir(&out)?;
            write_file(&out.join("runs.csv"), |w| write_runs_csv(&output.records, w))?;
            write_file(&out.join("summary.json"), |w| write_summary_json(&output.summary, w))?;
            print_summary_line(&parsed.experiment.mechanism.to_string(), &output);
            println!("wrote {}/runs.csv and {}/summary.json", out.display(), out.display());
            Ok(())
        }
        Command::Grid { config, out } => {
            let parsed = load_for_mode(&config, Mode::Grid)?;
            let cells = run_grid(&parsed.grid)?;
            create_out_dir(&out)?;
            write_file(&out.join("grid.csv"), |w| write_grid_csv(&cells, w))?;
            for cell in &cells {
                let power = cell
                    .power()
                    .map(|f| format!("{f:.2}"))
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{:<40} d={} n_rct={:<6} power {}",
                    cell.mechanism, cell.d, cell.n_rct, power
                );
            }
            println!("wrote {}/grid.csv", out.display());
            Ok(())
        }
        Command::WhiReplica { config, out } => {
            let mut parsed = load_for_mode(&config, Mode::WhiReplica)?;
            // A config without an explicit mechanism defaults to the
            // replica's combined collider + transportability setting.
            if parsed.experiment.mechanism == MechanismKind::NoBias {
                parsed.experiment.mechanism = MechanismKind::Combination(vec![
                    MechanismKind::SelectionType2,
                    MechanismKind::Transportability,
                ]);
            }
            let replica = run_whi_replica(&parsed.experiment)?;
            create_out_dir(&out)?;
            write_file(&out.join("whi_combined_runs.csv"), |w| {
                write_runs_csv(&replica.combined.records, w)
            })?;
            write_file(&out.join("whi_combined_summary.json"), |w| {
                write_summary_json(&replica.combined.summary, w)
            })?;
            write_file(&out.join("whi_corrected_runs.csv"), |w| {
                write_runs_csv(&replica.corrected.records, w)
            })?;
            write_file(&out.join("whi_corrected_summary.json"), |w| {
                write_summary_json(&replica.corrected.summary, w)
            })?;
            print_summary_line("combined", &replica.combined);
            print_summary_line("corrected", &replica.corrected);
            for (name, (before, after)) in
                ["S", "A", "Y"].iter().zip(replica.median_shift())
            {
                println!("median r({name}): {before:+.3} -> {after:+.3}");
            }
            println!("wrote WHI replica outputs under {}", out.display());
            Ok(())
        }
    }
}
