//! Command-line plumbing for the simulator: strict JSON config loading, the run
//! and sweep drivers, and deterministic artifact emission.
//!
//! Everything here is I/O, formatting, and orchestration; the simulation itself
//! lives in `safl-core`. Artifacts are written so that the same config and seed
//! always produce byte-identical `rounds.csv` and `summary.json`. The manifest is
//! the one file carrying wall-clock timestamps, and it is written last via a
//! temp-file rename so a directory with a manifest is a complete run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use safl_core::aggregation::AggregatorKind;
use safl_core::simulator::{
    build_data, run_experiment, AdversaryConfig, DataConfig, ExperimentConfig, RunSummary,
    StrategyConfig,
};

/// Version string stamped into every manifest.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Errors split the way the exit codes need them: bad input versus mid-run failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The config file, CLI flags, or their combination are invalid (exit 1).
    #[error("{0}")]
    Config(String),
    /// The run itself failed: I/O, data files, unwritable outputs (exit 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<safl_core::Error> for CliError {
    fn from(e: safl_core::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("i/o error on {}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Config loading
// ---------------------------------------------------------------------------

/// Loads and validates a JSON experiment config.
///
/// Parsing is strict: unknown keys are rejected with the offending key named, and
/// defaults are materialized so the in-memory config is self-contained. Dataset
/// file paths are resolved relative to the config file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
    if let Some(dir) = path.parent() {
        resolve_data_paths(&mut cfg.data, dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Rewrites relative dataset paths against the config file's directory.
fn resolve_data_paths(data: &mut DataConfig, base: &Path) {
    let fix = |p: &mut String| {
        if !Path::new(p).is_absolute() {
            *p = base.join(&*p).to_string_lossy().into_owned();
        }
    };
    if let DataConfig::Idx { train_images, train_labels, test_images, test_labels, .. } = data {
        fix(train_images);
        fix(train_labels);
        fix(test_images);
        fix(test_labels);
    }
}

// ---------------------------------------------------------------------------
// Formatting and artifact emission
// ---------------------------------------------------------------------------

/// Formats a float with 17 significant digits, enough to round-trip any 64-bit real.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// One attack-rate column of rounds.csv: header name plus the pair it tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackColumn {
    pub name: String,
    pub adversary: usize,
    pub source_class: usize,
    pub target_class: usize,
}

/// Derives the attack-rate column set from a run summary.
///
/// Columns are named `attack_rate_<target>`; when several adversaries share a
/// target class the adversary index is appended (`attack_rate_<target>_a<k>`) so
/// headers stay unambiguous.
pub fn attack_columns(summary: &RunSummary) -> Vec<AttackColumn> {
    let reports = &summary.attack_reports;
    reports
        .iter()
        .map(|r| {
            let shared = reports
                .iter()
                .filter(|o| o.target_class == r.target_class)
                .count();
            let name = if shared > 1 {
                format!("attack_rate_{}_a{}", r.target_class, r.adversary)
            } else {
                format!("attack_rate_{}", r.target_class)
            };
            AttackColumn {
                name,
                adversary: r.adversary,
                source_class: r.source_class,
                target_class: r.target_class,
            }
        })
        .collect()
}

/// Renders the per-round CSV: one line per round, floats at full precision,
/// absent values (no grouping threshold, no estimator) as `NA`.
pub fn rounds_csv(summary: &RunSummary) -> String {
    let columns = attack_columns(summary);
    let mut out = String::from("round,train_loss,val_loss");
    for c in &columns {
        out.push(',');
        out.push_str(&c.name);
    }
    out.push_str(",est_poison_rate,true_poison_rate,threshold\n");
    for rec in &summary.rounds {
        let _ = write!(out, "{},{},{}", rec.round, fmt_f64(rec.train_loss), fmt_f64(rec.val_loss));
        for c in &columns {
            let rate = rec
                .attack_rates
                .iter()
                .find(|r| {
                    r.adversary == c.adversary
                        && r.source_class == c.source_class
                        && r.target_class == c.target_class
                })
                .map(|r| fmt_f64(r.rate))
                .unwrap_or_else(|| "NA".into());
            out.push(',');
            out.push_str(&rate);
        }
        let est = rec.est_poison_rate.map(fmt_f64).unwrap_or_else(|| "NA".into());
        let thr = rec.threshold.map(fmt_f64).unwrap_or_else(|| "NA".into());
        let _ = write!(out, ",{est},{},{thr}\n", fmt_f64(rec.true_poison_rate));
    }
    out
}

/// Renders the run summary as stable, pretty-printed JSON.
pub fn summary_json(summary: &RunSummary) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::Runtime(format!("summary serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Inventory entry of the manifest: an emitted file plus its content digest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Self-contained record of one run: resolved config echo, tool version, seed,
/// timestamps, and a digest inventory of every emitted file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub config: ExperimentConfig,
    pub files: Vec<FileDigest>,
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn now_unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<FileDigest, CliError> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| io_err(&path, e))?;
    Ok(FileDigest { name: name.into(), bytes: content.len(), sha256: sha256_hex(content.as_bytes()) })
}

/// Writes the manifest atomically: temp file in the same directory, then rename.
fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))?;
    text.push('\n');
    let tmp = dir.join("manifest.json.tmp");
    let dst = dir.join("manifest.json");
    fs::write(&tmp, &text).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &dst).map_err(|e| io_err(&dst, e))?;
    Ok(())
}

/// True when `dir` holds a manifest whose whole file inventory still matches.
pub fn run_is_complete(dir: &Path) -> bool {
    let Ok(text) = fs::read_to_string(dir.join("manifest.json")) else { return false };
    let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) else { return false };
    manifest.files.iter().all(|f| {
        fs::read(dir.join(&f.name))
            .map(|bytes| bytes.len() == f.bytes && sha256_hex(&bytes) == f.sha256)
            .unwrap_or(false)
    })
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

/// Runs one experiment and writes rounds.csv, summary.json, and manifest.json
/// into `dir`, creating it as needed. Returns the summary for further use.
pub fn execute_run(cfg: &ExperimentConfig, dir: &Path, quiet: bool) -> Result<RunSummary, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let started = now_unix_ms();
    let output = run_experiment(cfg)?;
    let summary = output.summary;

    let mut files = Vec::new();
    files.push(write_file(dir, "rounds.csv", &rounds_csv(&summary))?);
    files.push(write_file(dir, "summary.json", &summary_json(&summary)?)?);
    write_manifest(
        dir,
        &RunManifest {
            tool_version: TOOL_VERSION.into(),
            seed: summary.config.seed,
            started_unix_ms: started,
            finished_unix_ms: now_unix_ms(),
            config: summary.config.clone(),
            files,
        },
    )?;

    if !quiet {
        let mut line = format!(
            "run {}: {} rounds, train loss {:.6}, val accuracy {:.4}",
            dir.display(),
            summary.config.rounds,
            summary.final_train_loss,
            summary.final_val_accuracy,
        );
        for r in &summary.attack_reports {
            let _ = write!(
                line,
                ", attack {}->{} rate {:.4}",
                r.source_class, r.target_class, r.rate
            );
        }
        println!("{line}");
    }
    Ok(summary)
}

/// Picks the output directory: the CLI flag wins, then the config's `out_dir`.
fn resolve_out_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = &cfg.out_dir {
        return Ok(PathBuf::from(p));
    }
    Err(CliError::Config("no output directory: pass --out or set out_dir in the config".into()))
}

/// `run` subcommand: one experiment, one artifact directory.
pub fn cmd_run(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    quiet: bool,
) -> Result<(), CliError> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = resolve_out_dir(out, &cfg)?;
    execute_run(&cfg, &dir, quiet)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep driver
// ---------------------------------------------------------------------------

/// Whether every sybil shares one target class or each sybil gets its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    Single,
    Multi,
}

impl TargetMode {
    /// Stable label used in cell directory names and matrix columns.
    pub fn label(self) -> &'static str {
        match self {
            TargetMode::Single => "single",
            TargetMode::Multi => "multi",
        }
    }
}

/// Parses a sybil-count spec: a range `1..4` (inclusive) or a comma list `1,3`.
pub fn parse_sybil_counts(spec: &str) -> Result<Vec<usize>, CliError> {
    let bad = |m: &str| CliError::Config(format!("sybil spec {spec:?}: {m}"));
    let mut counts: Vec<usize> = Vec::new();
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad("range bounds must be integers"))?;
        let hi: usize = hi.trim().parse().map_err(|_| bad("range bounds must be integers"))?;
        if lo > hi {
            return Err(bad("range is empty"));
        }
        counts.extend(lo..=hi);
    } else {
        for part in spec.split(',') {
            counts.push(part.trim().parse().map_err(|_| bad("counts must be integers"))?);
        }
    }
    counts.sort_unstable();
    counts.dedup();
    if counts.is_empty() {
        return Err(bad("no counts given"));
    }
    if counts[0] == 0 {
        return Err(bad("sybil counts must be at least 1"));
    }
    Ok(counts)
}

/// Parses the target-mode list (`single`, `multi`, or both, comma-separated).
pub fn parse_modes(spec: &str) -> Result<Vec<TargetMode>, CliError> {
    let mut modes = Vec::new();
    for part in spec.split(',') {
        let mode = match part.trim() {
            "single" => TargetMode::Single,
            "multi" => TargetMode::Multi,
            other => {
                return Err(CliError::Config(format!(
                    "unknown target mode {other:?} (expected single or multi)"
                )))
            }
        };
        if !modes.contains(&mode) {
            modes.push(mode);
        }
    }
    Ok(modes)
}

/// Parses and validates the aggregator list for a sweep.
pub fn parse_aggregators(spec: &str) -> Result<Vec<String>, CliError> {
    const KNOWN: [&str; 5] = ["fedavg", "krum", "multi_krum", "foolsgold", "safl"];
    let mut names = Vec::new();
    for part in spec.split(',') {
        let name = match part.trim() {
            "multikrum" => "multi_krum".to_string(),
            other => other.to_string(),
        };
        if !KNOWN.contains(&name.as_str()) {
            return Err(CliError::Config(format!(
                "unknown aggregator {name:?} (expected one of {})",
                KNOWN.join(", ")
            )));
        }
        if !names.contains(&name) {
            names.push(name);
        }
    }
    if names.is_empty() {
        return Err(CliError::Config("no aggregators given".into()));
    }
    Ok(names)
}

/// Builds the aggregator for one sweep cell. Krum variants size their byzantine
/// allowance to the cell's sybil count; the rest use their defaults.
pub fn aggregator_for_cell(name: &str, sybils: usize) -> AggregatorKind {
    match name {
        "fedavg" => AggregatorKind::FedAvg,
        "krum" => AggregatorKind::Krum { f: sybils },
        "multi_krum" => AggregatorKind::MultiKrum { f: sybils, m: None },
        "foolsgold" => AggregatorKind::FoolsGold {
            confidence: safl_core::aggregation::DEFAULT_FOOLSGOLD_CONFIDENCE,
        },
        "safl" => AggregatorKind::Safl(Default::default()),
        other => unreachable!("aggregator {other} passed validation"),
    }
}

/// Derives `k` distinct target classes for multi-target mode: ascending from the
/// template's target, wrapping modulo the class count, never the source class.
pub fn multi_targets(
    base_target: usize,
    source: usize,
    classes: usize,
    k: usize,
) -> Result<Vec<usize>, CliError> {
    if k + 1 > classes {
        return Err(CliError::Config(format!(
            "multi-target mode with {k} sybils needs at least {} classes, corpus has {classes}",
            k + 1
        )));
    }
    let mut out = Vec::with_capacity(k);
    let mut c = base_target;
    while out.len() < k {
        if c != source {
            out.push(c);
        }
        c = (c + 1) % classes;
    }
    Ok(out)
}

/// Number of classes in the configured corpus, loading data files if needed.
fn corpus_classes(cfg: &ExperimentConfig) -> Result<usize, CliError> {
    match &cfg.data {
        DataConfig::Synthetic { classes, .. } => Ok(*classes),
        DataConfig::Idx { .. } => {
            let (train, _) = build_data(cfg)?;
            Ok(train.num_classes())
        }
    }
}

/// The adversary template a sweep varies: exactly one, using the label-flip strategy.
fn sweep_template(cfg: &ExperimentConfig) -> Result<&AdversaryConfig, CliError> {
    match cfg.adversaries.as_slice() {
        [one] => {
            if !matches!(one.strategy, StrategyConfig::LabelFlip) {
                return Err(CliError::Config(
                    "sweep template adversary must use the label_flip strategy".into(),
                ));
            }
            Ok(one)
        }
        [] => Err(CliError::Config("sweep config must declare one adversary as template".into())),
        _ => Err(CliError::Config("sweep config must declare exactly one adversary".into())),
    }
}

/// Mean final attack rate over a run's target pairs — one matrix cell.
fn mean_attack_rate(summary: &RunSummary) -> f64 {
    let n = summary.attack_reports.len();
    if n == 0 {
        return 0.0;
    }
    summary.attack_reports.iter().map(|r| r.rate).sum::<f64>() / n as f64
}

/// Renders the sweep matrix as CSV: rows by sybil count, one column per cell kind.
fn matrix_csv(counts: &[usize], columns: &[String], rates: &[Vec<f64>]) -> String {
    let mut out = String::from("sybils");
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (row, k) in counts.iter().enumerate() {
        let _ = write!(out, "{k}");
        for rate in &rates[row] {
            out.push(',');
            out.push_str(&fmt_f64(*rate));
        }
        out.push('\n');
    }
    out
}

/// Renders the same matrix as a gnuplot-ready whitespace table.
fn matrix_dat(counts: &[usize], columns: &[String], rates: &[Vec<f64>]) -> String {
    let mut out = String::from("# sybils");
    for c in columns {
        out.push(' ');
        out.push_str(c);
    }
    out.push('\n');
    for (row, k) in counts.iter().enumerate() {
        let _ = write!(out, "{k}");
        for rate in &rates[row] {
            out.push(' ');
            out.push_str(&fmt_f64(*rate));
        }
        out.push('\n');
    }
    out
}

/// `sweep` subcommand: the cross-product of sybil counts, target modes, and
/// aggregators, one cell directory each, plus the attack-rate matrix files.
///
/// Cells whose manifest still matches their files on disk are skipped, so an
/// interrupted sweep resumes where it stopped.
pub fn cmd_sweep(
    config_path: &Path,
    out: Option<&Path>,
    sybils_spec: &str,
    modes_spec: &str,
    aggregators_spec: &str,
    seed: Option<u64>,
    quiet: bool,
) -> Result<(), CliError> {
    let mut base = load_config(config_path)?;
    if let Some(s) = seed {
        base.seed = s;
    }
    let root = resolve_out_dir(out, &base)?;
    let counts = parse_sybil_counts(sybils_spec)?;
    let modes = parse_modes(modes_spec)?;
    let aggregators = parse_aggregators(aggregators_spec)?;
    let template = sweep_template(&base)?.clone();
    let classes = corpus_classes(&base)?;

    let columns: Vec<String> = aggregators
        .iter()
        .flat_map(|a| modes.iter().map(move |m| format!("{a}_{}", m.label())))
        .collect();
    let mut rates: Vec<Vec<f64>> = Vec::with_capacity(counts.len());

    fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    for &k in &counts {
        let mut row = Vec::with_capacity(columns.len());
        for agg in &aggregators {
            for &mode in &modes {
                let name = format!("sybils{k}_{}_{agg}", mode.label());
                let dir = root.join(&name);
                let cell = |e: CliError| match e {
                    CliError::Config(m) => CliError::Config(format!("cell {name}: {m}")),
                    CliError::Runtime(m) => CliError::Runtime(format!("cell {name}: {m}")),
                };

                let summary = if run_is_complete(&dir) {
                    if !quiet {
                        println!("cell {name}: complete, skipping");
                    }
                    let text = fs::read_to_string(dir.join("summary.json"))
                        .map_err(|e| cell(io_err(&dir.join("summary.json"), e)))?;
                    serde_json::from_str::<RunSummary>(&text)
                        .map_err(|e| cell(CliError::Runtime(format!("summary.json: {e}"))))?
                } else {
                    let mut cfg = base.clone();
                    let mut adv = template.clone();
                    adv.num_sybils = k;
                    adv.targets = match mode {
                        TargetMode::Single => vec![template.targets[0]],
                        TargetMode::Multi => {
                            multi_targets(template.targets[0], template.source_class, classes, k)
                                .map_err(&cell)?
                        }
                    };
                    cfg.adversaries = vec![adv];
                    cfg.aggregator = aggregator_for_cell(agg, k);
                    cfg.out_dir = None;
                    execute_run(&cfg, &dir, quiet).map_err(&cell)?
                };
                row.push(mean_attack_rate(&summary));
            }
        }
        rates.push(row);
    }

    write_file(&root, "attack_rate_matrix.csv", &matrix_csv(&counts, &columns, &rates))?;
    write_file(&root, "attack_rate_matrix.dat", &matrix_dat(&counts, &columns, &rates))?;
    if !quiet {
        println!(
            "sweep {}: {} cells, matrix {}x{}",
            root.display(),
            counts.len() * columns.len(),
            counts.len(),
            columns.len()
        );
    }
    Ok(())
}
