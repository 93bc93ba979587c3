//! Command-line front end: synth, split, train, impute, evaluate, geocode,
//! gradcheck and benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use raceimpute_core::data::{NameKind, PersonRecord, RaceMapping, TractTable};
use raceimpute_core::gbdt::GbdtConfig;
use raceimpute_core::lstm::{
    grad_check_with, predict_batch, train_examples, Example, GeoMode, GradCheckOptions, LstmGeoConfig, LstmGeoModel,
};
use raceimpute_core::pipeline::{filter_features, score_bayes, train_filter, BayesMethod, Scored};
use raceimpute_core::split::{stratified_split, DatasetSplit, SplitRatios, SplitWarning};
use raceimpute_core::synth::{IndependenceMode, PriorTableSource, SynthConfig, SynthWorld};
use raceimpute_core::{RaceClass, RaceDistribution};
use serde::{Deserialize, Serialize};

use crate::artifact::{self, sha256_hex, FilterArtifact};
use crate::bench::{self, BenchmarkOptions, InstantClock};
use crate::error::{AppError, AppResult, EXIT_OK, EXIT_USAGE};
use crate::geocode::{ClientOptions, GeocodeCache, GeocodeClient, UreqTransport};
use crate::io::{self, fmt_f64, DatasetPaths, PredictionRow};
use crate::manifest::{manifest_path_for_dir, manifest_path_for_file, ManifestBuilder};
use crate::report::{self, emit_report, evaluate_model, DatasetFingerprint, Report};

/// Gradient checks pass when every relative error is below this.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "raceimpute", version, about = "Race/ethnicity imputation from names and census tracts")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled population with exact prior tables.
    Synth(SynthArgs),
    /// Stratified 80/10/10 train/validation/holdout split of a people file.
    Split(SplitArgs),
    /// Train an LSTM, LSTM+Geo or boosted post-filter model.
    Train(TrainArgs),
    /// Write per-row race probabilities for a people file.
    Impute(ImputeArgs),
    /// Score prediction files against labels and write reports.
    Evaluate(EvaluateArgs),
    /// Resolve addresses to census tracts.
    Geocode(GeocodeArgs),
    /// Compare analytic and finite-difference gradients on a micro model.
    Gradcheck(GradcheckArgs),
    /// Run the five-model comparison on a synthetic population.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Independent,
    SesConfounded,
}

impl From<ModeArg> for IndependenceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Independent => IndependenceMode::Independent,
            ModeArg::SesConfounded => IndependenceMode::SesConfounded,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML file overriding fields of the canonical benchmark config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    records: Option<usize>,
    #[arg(long)]
    tracts: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Emit prior tables estimated from the sample instead of the exact conditionals.
    #[arg(long)]
    estimated_priors: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SynthOverrides {
    seed: Option<u64>,
    records: Option<usize>,
    tracts: Option<usize>,
    concentration: Option<f64>,
    mode: Option<IndependenceMode>,
    ses_strength: Option<f64>,
    prevalences: Option<[f64; 5]>,
    middle_name_rate: Option<f64>,
    prior_tables: Option<PriorTableSource>,
    prior_population: Option<f64>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Labeled people CSV.
    #[arg(long)]
    input: PathBuf,
    /// TOML mapping of source race codes onto the five classes.
    #[arg(long)]
    race_map: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainModel {
    Lstm,
    LstmGeo,
    XgbFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Bench,
    Full,
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GeoModeArg {
    Head,
    PrefixTokens,
    Disabled,
}

impl From<GeoModeArg> for GeoMode {
    fn from(m: GeoModeArg) -> Self {
        match m {
            GeoModeArg::Head => GeoMode::Head,
            GeoModeArg::PrefixTokens => GeoMode::PrefixTokens,
            GeoModeArg::Disabled => GeoMode::Disabled,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: TrainModel,
    /// Dataset directory with people.csv and tracts.csv.
    #[arg(long)]
    data: PathBuf,
    /// Directory with train.csv and validation.csv from `split`; without it
    /// the people file is split with --seed.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    race_map: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// TOML overrides for the network (or filter) configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long, value_enum)]
    geo_mode: Option<GeoModeArg>,
    /// LSTM+Geo model whose outputs feed the post-filter.
    #[arg(long)]
    base_model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct LstmOverrides {
    embed_dim: Option<usize>,
    hidden_units: Option<usize>,
    num_layers: Option<usize>,
    dropout_rate: Option<f64>,
    max_len: Option<usize>,
    geo_mode: Option<GeoMode>,
    use_middle_name: Option<bool>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    early_stop_patience: Option<usize>,
    early_stop_min_delta: Option<f64>,
    max_epochs: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FilterOverrides {
    min_child_weight: Option<f64>,
    l2_lambda: Option<f64>,
    subsample: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ImputeModel {
    Bisg,
    Bifsg,
    Lstm,
    LstmGeo,
    LstmGeoXgb,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[arg(long, value_enum)]
    model: ImputeModel,
    /// People CSV to score.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    race_map: Option<PathBuf>,
    /// Directory supplying tracts.csv, surnames.csv, firstnames.csv and marginal.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    tracts: Option<PathBuf>,
    #[arg(long)]
    surnames: Option<PathBuf>,
    #[arg(long)]
    firstnames: Option<PathBuf>,
    #[arg(long)]
    marginal: Option<PathBuf>,
    /// LSTM or LSTM+Geo model file.
    #[arg(long)]
    model_file: Option<PathBuf>,
    /// Post-filter model file.
    #[arg(long)]
    filter_file: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Prediction CSV, optionally named as NAME=PATH; repeat for several models.
    #[arg(long = "predictions", required = true)]
    predictions: Vec<String>,
    /// Labeled people CSV joined to predictions by row_id.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    race_map: Option<PathBuf>,
    #[arg(long)]
    tracts: PathBuf,
    /// Comma-separated income edges in USD; defaults to the tract decile edges.
    #[arg(long, value_delimiter = ',')]
    bin_edges: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GeocodeArgs {
    /// CSV with an address column.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "address")]
    address_column: String,
    /// Persistent cache file; omitted means an in-memory cache.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Never contact the geocoder; cache misses come back unmatched.
    #[arg(long)]
    offline: bool,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value = crate::geocode::DEFAULT_BENCHMARK)]
    benchmark: String,
    #[arg(long, default_value = crate::geocode::DEFAULT_VINTAGE)]
    vintage: String,
    #[arg(long, default_value = crate::geocode::DEFAULT_ENDPOINT, hide = true)]
    endpoint: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GradGeoMode {
    All,
    Head,
    PrefixTokens,
    Disabled,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4, allow_negative_numbers = true)]
    epsilon: f64,
    #[arg(long, value_enum, default_value = "all")]
    geo_mode: GradGeoMode,
    /// Write the full JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Negate the analytic gradient of this tensor before comparing.
    #[arg(long, hide = true)]
    corrupt_tensor: Option<String>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Split and training seeds; one full run per seed.
    #[arg(long, value_delimiter = ',', default_value = "42,43,44")]
    seeds: Vec<u64>,
    /// Seed of the synthetic population.
    #[arg(long, default_value_t = raceimpute_core::synth::CANONICAL_SEED)]
    data_seed: u64,
    #[arg(long)]
    records: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let recorded: Vec<String> = args.into_iter().skip(1).collect();
    match run(cli, recorded) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                if !e.to_string().contains(&s.to_string()) {
                    eprintln!("  caused by: {s}");
                }
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn run(cli: Cli, args: Vec<String>) -> AppResult<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a, args),
        Command::Split(a) => cmd_split(a, args),
        Command::Train(a) => cmd_train(a, args),
        Command::Impute(a) => cmd_impute(a, args),
        Command::Evaluate(a) => cmd_evaluate(a, args),
        Command::Geocode(a) => cmd_geocode(a, args),
        Command::Gradcheck(a) => cmd_gradcheck(a, args),
        Command::Benchmark(a) => cmd_benchmark(a, args),
    }
}

fn warn(manifest: &mut ManifestBuilder, message: String) {
    eprintln!("warning: {message}");
    manifest.warn(message);
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    toml::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
}

fn mapping(path: Option<&Path>) -> AppResult<RaceMapping> {
    match path {
        Some(p) => io::read_race_mapping(p),
        None => Ok(RaceMapping::voter_file_default()),
    }
}

fn core(context: &str) -> impl Fn(raceimpute_core::Error) -> AppError + '_ {
    move |e| AppError::core(context, e)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn create_dir(dir: &Path) -> AppResult<()> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

fn resolve_synth_config(a: &SynthArgs) -> AppResult<SynthConfig> {
    let mut c = SynthConfig::canonical();
    if let Some(path) = &a.config {
        if !path.exists() {
            return Err(AppError::Config(format!("config file {} not found", path.display())));
        }
        let o: SynthOverrides = read_toml(path)?;
        c.seed = o.seed.unwrap_or(c.seed);
        c.num_records = o.records.unwrap_or(c.num_records);
        c.num_tracts = o.tracts.unwrap_or(c.num_tracts);
        c.concentration = o.concentration.unwrap_or(c.concentration);
        c.mode = o.mode.unwrap_or(c.mode);
        c.ses_strength = o.ses_strength.unwrap_or(c.ses_strength);
        if let Some(p) = o.prevalences {
            c.prevalences = RaceDistribution::new(p).map_err(|e| AppError::Config(format!("prevalences: {e}")))?;
        }
        c.middle_name_rate = o.middle_name_rate.unwrap_or(c.middle_name_rate);
        c.prior_tables = o.prior_tables.unwrap_or(c.prior_tables);
        c.prior_population = o.prior_population.unwrap_or(c.prior_population);
    }
    c.seed = a.seed.unwrap_or(c.seed);
    c.num_records = a.records.unwrap_or(c.num_records);
    c.num_tracts = a.tracts.unwrap_or(c.num_tracts);
    if let Some(m) = a.mode {
        c.mode = m.into();
    }
    if a.estimated_priors {
        c.prior_tables = PriorTableSource::Estimated;
    }
    c.validate().map_err(core("synth config"))?;
    Ok(c)
}

fn scored_rows(records: &[PersonRecord], scored: &[Scored]) -> Vec<PredictionRow> {
    records
        .iter()
        .zip(scored)
        .map(|(r, s)| PredictionRow {
            row_id: r.row_id.clone(),
            dist: s.dist,
            predicted: s.dist.classify(),
            imputed_geo: s.imputed_geo,
            degenerate: s.degenerate,
        })
        .collect()
}

fn cmd_synth(a: SynthArgs, args: Vec<String>) -> AppResult<()> {
    let config = resolve_synth_config(&a)?;
    let mut manifest = ManifestBuilder::new("synth", args, &config, Some(config.seed));
    if let Some(p) = &a.config {
        manifest.input(p);
    }
    let world = SynthWorld::build(&config).map_err(core("synth"))?;
    let data = world.generate().map_err(core("synth"))?;
    create_dir(&a.out)?;
    let paths = DatasetPaths::in_dir(&a.out);
    io::write_people(&paths.people, &data.records)?;
    io::write_tracts(&paths.tracts, &data.tracts)?;
    io::write_name_priors(&paths.surnames, &data.surnames)?;
    io::write_name_priors(&paths.firstnames, &data.first_names)?;
    io::write_marginal(&paths.marginal, &data.marginal)?;

    let oracle = data
        .records
        .iter()
        .map(|r| {
            let g = r.tract_geoid.as_ref().expect("synthetic records have tracts");
            world.bayes_optimal_posterior(&r.last, &r.first, g).map(|dist| Scored {
                dist,
                imputed_geo: false,
                degenerate: false,
            })
        })
        .collect::<raceimpute_core::Result<Vec<_>>>()
        .map_err(core("bayes-optimal oracle"))?;
    let oracle_path = a.out.join("bayes_optimal.csv");
    io::write_predictions(&oracle_path, &scored_rows(&data.records, &oracle))?;
    let config_path = a.out.join("synth_config.json");
    write_json(&config_path, &config)?;

    for p in [&paths.people, &paths.tracts, &paths.surnames, &paths.firstnames, &paths.marginal, &oracle_path, &config_path] {
        manifest.output(p);
    }
    let ceiling = world.bayes_optimal_accuracy(&data.records).map_err(core("bayes-optimal oracle"))?;
    eprintln!(
        "wrote {} records over {} tracts to {} (Bayes-optimal expected accuracy {:.4})",
        data.records.len(),
        data.tracts.len(),
        a.out.display(),
        ceiling
    );
    manifest.write(&manifest_path_for_dir(&a.out))?;
    Ok(())
}

fn split_warnings(manifest: &mut ManifestBuilder, warnings: &[SplitWarning]) {
    for w in warnings {
        match w {
            SplitWarning::EmptyClass { class, rows } => {
                warn(manifest, format!("class {class} has only {rows} rows; some partitions get none"))
            }
        }
    }
}

fn cmd_split(a: SplitArgs, args: Vec<String>) -> AppResult<()> {
    let mut manifest = ManifestBuilder::new("split", args, &(a.seed, SplitRatios::default()), Some(a.seed));
    let m = mapping(a.race_map.as_deref())?;
    let records = io::read_people(&a.input, &m)?;
    manifest.input(&a.input);
    if let Some(p) = &a.race_map {
        manifest.input(p);
    }
    let (split, warnings) = stratified_split(&records, SplitRatios::default(), a.seed).map_err(core("split"))?;
    split_warnings(&mut manifest, &warnings);
    create_dir(&a.out)?;
    for (name, part) in [("train.csv", &split.train), ("validation.csv", &split.validation), ("holdout.csv", &split.holdout)] {
        let p = a.out.join(name);
        io::write_people(&p, part)?;
        manifest.output(&p);
    }
    eprintln!(
        "split {} rows into {}/{}/{}",
        records.len(),
        split.train.len(),
        split.validation.len(),
        split.holdout.len()
    );
    manifest.write(&manifest_path_for_dir(&a.out))?;
    Ok(())
}

fn preset(p: Preset) -> LstmGeoConfig {
    match p {
        Preset::Desk => LstmGeoConfig::desk(),
        Preset::Bench => bench::benchmark_lstm_config(),
        Preset::Full => LstmGeoConfig::full(),
        Preset::Micro => LstmGeoConfig::micro(),
    }
}

fn resolve_lstm_config(a: &TrainArgs) -> AppResult<LstmGeoConfig> {
    let mut c = preset(a.preset);
    if let Some(path) = &a.config {
        let o: LstmOverrides = read_toml(path)?;
        c.embed_dim = o.embed_dim.unwrap_or(c.embed_dim);
        c.hidden_units = o.hidden_units.unwrap_or(c.hidden_units);
        c.num_layers = o.num_layers.unwrap_or(c.num_layers);
        c.dropout_rate = o.dropout_rate.unwrap_or(c.dropout_rate);
        c.max_len = o.max_len.unwrap_or(c.max_len);
        c.geo_mode = o.geo_mode.unwrap_or(c.geo_mode);
        c.use_middle_name = o.use_middle_name.unwrap_or(c.use_middle_name);
        c.learning_rate = o.learning_rate.unwrap_or(c.learning_rate);
        c.batch_size = o.batch_size.unwrap_or(c.batch_size);
        c.early_stop_patience = o.early_stop_patience.unwrap_or(c.early_stop_patience);
        c.early_stop_min_delta = o.early_stop_min_delta.unwrap_or(c.early_stop_min_delta);
        c.max_epochs = o.max_epochs.unwrap_or(c.max_epochs);
    }
    if let Some(g) = a.geo_mode {
        c.geo_mode = g.into();
    }
    match a.model {
        TrainModel::Lstm => {
            if c.geo_enabled() && (a.geo_mode.is_some()) {
                return Err(AppError::Usage("--model lstm is name-only; drop --geo-mode".into()));
            }
            c.geo_mode = GeoMode::Disabled;
        }
        TrainModel::LstmGeo => {
            if !c.geo_enabled() {
                return Err(AppError::Usage("--model lstm-geo needs --geo-mode head or prefix-tokens".into()));
            }
        }
        TrainModel::XgbFilter => {}
    }
    c.max_epochs = a.max_epochs.unwrap_or(c.max_epochs);
    c.seed = a.seed;
    c.validate().map_err(core("network config"))?;
    Ok(c)
}

/// Training and validation partitions, either from a split directory or
/// by splitting the dataset's people file with `seed`.
fn load_partitions(
    a: &TrainArgs,
    m: &RaceMapping,
    manifest: &mut ManifestBuilder,
) -> AppResult<(Vec<PersonRecord>, Vec<PersonRecord>)> {
    match &a.split {
        Some(dir) => {
            let train_path = dir.join("train.csv");
            let val_path = dir.join("validation.csv");
            let train = io::read_people(&train_path, m)?;
            let validation = io::read_people(&val_path, m)?;
            manifest.input(&train_path);
            manifest.input(&val_path);
            Ok((train, validation))
        }
        None => {
            let people = DatasetPaths::in_dir(&a.data).people;
            let records = io::read_people(&people, m)?;
            manifest.input(&people);
            let (split, warnings) = stratified_split(&records, SplitRatios::default(), a.seed).map_err(core("split"))?;
            split_warnings(manifest, &warnings);
            let DatasetSplit { train, validation, .. } = split;
            Ok((train, validation))
        }
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_train(a: TrainArgs, args: Vec<String>) -> AppResult<()> {
    if a.model == TrainModel::XgbFilter {
        return train_filter_cmd(a, args);
    }
    let config = resolve_lstm_config(&a)?;
    let mut manifest = ManifestBuilder::new("train", args, &config, Some(a.seed));
    let m = mapping(a.race_map.as_deref())?;
    let tracts_path = DatasetPaths::in_dir(&a.data).tracts;
    let tracts = io::read_tracts(&tracts_path)?;
    manifest.input(&tracts_path);
    if let Some(p) = &a.config {
        manifest.input(p);
    }
    let (train, validation) = load_partitions(&a, &m, &mut manifest)?;
    let encode = |rs: &[PersonRecord]| {
        rs.iter()
            .map(|r| Example::from_record(r, &config, &tracts))
            .collect::<raceimpute_core::Result<Vec<_>>>()
            .map_err(core("encoding records"))
    };
    let (train_set, val_set) = (encode(&train)?, encode(&validation)?);
    if config.max_epochs == 0 {
        warn(&mut manifest, "max_epochs is 0; writing the initialized model".into());
    }

    let log_path = sibling(&a.out, "log.csv");
    if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut log_file = fs::File::create(&log_path).map_err(|e| AppError::io(&log_path, e))?;
    writeln!(log_file, "epoch,train_loss,validation_loss").map_err(|e| AppError::io(&log_path, e))?;
    let mut log_err = None;
    let clock = InstantClock::start();
    let result = train_examples(&config, &train_set, &val_set, &clock, &mut |e| {
        eprintln!(
            "epoch {} train {:.4} validation {:.4} ({:.1}s)",
            e.epoch, e.train_loss, e.validation_loss, e.wall_seconds
        );
        let line = format!("{},{},{}\n", e.epoch, fmt_f64(e.train_loss), fmt_f64(e.validation_loss));
        if let Err(err) = log_file.write_all(line.as_bytes()) {
            log_err.get_or_insert(err);
        }
    });
    if let Some(err) = log_err {
        return Err(AppError::io(&log_path, err));
    }
    let (model, log) = result.map_err(|e| AppError::core(format!("training aborted; epochs so far are in {}", log_path.display()), e))?;
    let checksum = artifact::save_lstm(&a.out, &model)?;
    manifest.output(&a.out);
    manifest.output(&log_path);
    eprintln!(
        "trained {} epochs (best {:?}); model {} sha256 {}",
        log.epochs.len(),
        log.best_epoch,
        a.out.display(),
        checksum
    );
    manifest.write(&manifest_path_for_file(&a.out))?;
    Ok(())
}

fn train_filter_cmd(a: TrainArgs, args: Vec<String>) -> AppResult<()> {
    let base_path = a
        .base_model
        .clone()
        .ok_or_else(|| AppError::Usage("--model xgb-filter requires --base-model (an lstm-geo model file)".into()))?;
    let mut base = GbdtConfig {
        seed: a.seed,
        ..GbdtConfig::default()
    };
    if let Some(path) = &a.config {
        let o: FilterOverrides = read_toml(path)?;
        base.min_child_weight = o.min_child_weight.unwrap_or(base.min_child_weight);
        base.l2_lambda = o.l2_lambda.unwrap_or(base.l2_lambda);
        base.subsample = o.subsample.unwrap_or(base.subsample);
    }
    base.validate().map_err(core("filter config"))?;
    let mut manifest = ManifestBuilder::new("train", args, &base, Some(a.seed));
    let (model, checksum) = artifact::load_lstm(&base_path)?;
    manifest.input(&base_path);
    if !model.config.geo_enabled() {
        return Err(AppError::Usage(format!("{} is a name-only model; the filter needs lstm-geo", base_path.display())));
    }
    let m = mapping(a.race_map.as_deref())?;
    let tracts_path = DatasetPaths::in_dir(&a.data).tracts;
    let tracts = io::read_tracts(&tracts_path)?;
    manifest.input(&tracts_path);
    let (_, validation) = load_partitions(&a, &m, &mut manifest)?;

    let probs: Vec<RaceDistribution> = predict_batch(&model, &validation, &tracts).iter().map(|p| p.dist).collect();
    let x = filter_features(&validation, &probs, &tracts).map_err(core("filter features"))?;
    let y: Vec<RaceClass> = validation
        .iter()
        .map(|r| r.label.ok_or_else(|| AppError::core("filter labels", raceimpute_core::Error::MissingLabel(r.row_id.clone()))))
        .collect::<AppResult<_>>()?;
    let trained = train_filter(&x, &y, &base).map_err(core("filter training"))?;

    let grid_path = sibling(&a.out, "grid.csv");
    io::write_csv(
        &grid_path,
        &["num_rounds", "max_depth", "learning_rate", "selection_accuracy", "chosen"],
        trained.grid.iter().map(|g| {
            vec![
                g.config.num_rounds.to_string(),
                g.config.max_depth.to_string(),
                fmt_f64(g.config.learning_rate),
                fmt_f64(g.selection_accuracy),
                (g.config == trained.chosen).to_string(),
            ]
        }),
    )?;
    let importance_path = sibling(&a.out, "importance.csv");
    io::write_csv(
        &importance_path,
        &["feature", "gain"],
        trained.model.feature_importance().into_iter().map(|(f, g)| vec![f.to_string(), fmt_f64(g)]),
    )?;
    let artifact = FilterArtifact {
        model: trained.model,
        chosen: trained.chosen,
        grid: trained.grid,
        base_model_checksum: checksum,
    };
    artifact::save_filter(&a.out, &artifact)?;
    for p in [&a.out, &grid_path, &importance_path] {
        manifest.output(p);
    }
    eprintln!(
        "filter: {} rounds, depth {}, learning rate {} on {} validation rows",
        artifact.chosen.num_rounds,
        artifact.chosen.max_depth,
        artifact.chosen.learning_rate,
        validation.len()
    );
    manifest.write(&manifest_path_for_file(&a.out))?;
    Ok(())
}

struct TablePaths {
    tracts: Option<PathBuf>,
    surnames: Option<PathBuf>,
    firstnames: Option<PathBuf>,
    marginal: Option<PathBuf>,
}

impl TablePaths {
    fn resolve(a: &ImputeArgs) -> Self {
        let d = a.data.as_deref().map(DatasetPaths::in_dir);
        TablePaths {
            tracts: a.tracts.clone().or_else(|| d.as_ref().map(|d| d.tracts.clone())),
            surnames: a.surnames.clone().or_else(|| d.as_ref().map(|d| d.surnames.clone())),
            firstnames: a.firstnames.clone().or_else(|| d.as_ref().map(|d| d.firstnames.clone())),
            marginal: a.marginal.clone().or_else(|| d.as_ref().map(|d| d.marginal.clone())),
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, model: &str) -> AppResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| AppError::Usage(format!("--model {model} needs --{flag} (or --data with the file inside)")))
}

fn cmd_impute(a: ImputeArgs, args: Vec<String>) -> AppResult<()> {
    let model_name = a.model.to_possible_value().expect("value enum").get_name().to_string();
    let mut manifest = ManifestBuilder::new("impute", args, &model_name, None);
    let tables = TablePaths::resolve(&a);
    let m = mapping(a.race_map.as_deref())?;
    let records = io::read_people(&a.input, &m)?;
    manifest.input(&a.input);

    let load_tracts = |manifest: &mut ManifestBuilder, need: bool| -> AppResult<TractTable> {
        match (&tables.tracts, need) {
            (Some(p), _) => {
                manifest.input(p);
                io::read_tracts(p)
            }
            (None, false) => Ok(TractTable::default()),
            (None, true) => Err(AppError::Usage(format!("--model {model_name} needs --tracts (or --data)"))),
        }
    };

    let scored: Vec<Scored> = match a.model {
        ImputeModel::Bisg | ImputeModel::Bifsg => {
            let tracts = load_tracts(&mut manifest, true)?;
            let marginal_path = required(&tables.marginal, "marginal", &model_name)?;
            let marginal = io::read_marginal(marginal_path)?;
            manifest.input(marginal_path);
            let surname_path = required(&tables.surnames, "surnames", &model_name)?;
            let surnames = io::read_name_priors(surname_path, NameKind::Surname, marginal)?;
            manifest.input(surname_path);
            let (method, first) = if a.model == ImputeModel::Bifsg {
                let p = required(&tables.firstnames, "firstnames", &model_name)?;
                manifest.input(p);
                (BayesMethod::Bifsg, Some(io::read_name_priors(p, NameKind::Firstname, marginal)?))
            } else {
                (BayesMethod::Bisg, None)
            };
            score_bayes(method, &records, &surnames, first.as_ref(), &tracts).map_err(core("scoring"))?
        }
        ImputeModel::Lstm | ImputeModel::LstmGeo | ImputeModel::LstmGeoXgb => {
            let model_path = a
                .model_file
                .as_deref()
                .ok_or_else(|| AppError::Usage(format!("--model {model_name} needs --model-file")))?;
            let (model, checksum) = artifact::load_lstm(model_path)?;
            manifest.input(model_path);
            let wants_geo = a.model != ImputeModel::Lstm;
            if model.config.geo_enabled() != wants_geo {
                return Err(AppError::Usage(format!(
                    "{} is {} model but --model {model_name} was requested",
                    model_path.display(),
                    if model.config.geo_enabled() { "a geo-enabled" } else { "a name-only" }
                )));
            }
            let tracts = load_tracts(&mut manifest, wants_geo)?;
            let preds = score_lstm(&model, &records, &tracts);
            if a.model == ImputeModel::LstmGeoXgb {
                let filter_path = a
                    .filter_file
                    .as_deref()
                    .ok_or_else(|| AppError::Usage("--model lstm-geo-xgb needs --filter-file".into()))?;
                let filter = artifact::load_filter(filter_path)?;
                manifest.input(filter_path);
                if filter.base_model_checksum != checksum {
                    return Err(AppError::Usage(format!(
                        "{} was trained on a different base model than {}",
                        filter_path.display(),
                        model_path.display()
                    )));
                }
                let probs: Vec<RaceDistribution> = preds.iter().map(|p| p.dist).collect();
                let x = filter_features(&records, &probs, &tracts).map_err(core("filter features"))?;
                x.iter()
                    .zip(&preds)
                    .map(|(f, p)| Scored {
                        dist: filter.model.predict(f),
                        ..*p
                    })
                    .collect()
            } else {
                preds
            }
        }
    };
    io::write_predictions(&a.out, &scored_rows(&records, &scored))?;
    manifest.output(&a.out);
    let imputed = scored.iter().filter(|s| s.imputed_geo).count();
    let degenerate = scored.iter().filter(|s| s.degenerate).count();
    if imputed > 0 {
        warn(&mut manifest, format!("{imputed} rows had no known tract"));
    }
    if degenerate > 0 {
        warn(&mut manifest, format!("{degenerate} rows had a degenerate posterior"));
    }
    manifest.write(&manifest_path_for_file(&a.out))?;
    Ok(())
}

fn score_lstm(model: &LstmGeoModel, records: &[PersonRecord], tracts: &TractTable) -> Vec<Scored> {
    predict_batch(model, records, tracts)
        .into_iter()
        .map(|p| Scored {
            dist: p.dist,
            imputed_geo: p.imputed_geo,
            degenerate: false,
        })
        .collect()
}

fn parse_named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !name.contains(['/', '\\']) => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(spec);
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.to_string());
            (name, p)
        }
    }
}

fn cmd_evaluate(a: EvaluateArgs, args: Vec<String>) -> AppResult<()> {
    let mut manifest = ManifestBuilder::new("evaluate", args, &a.bin_edges, None);
    let m = mapping(a.race_map.as_deref())?;
    let labels = io::read_people(&a.labels, &m)?;
    manifest.input(&a.labels);
    let tracts = io::read_tracts(&a.tracts)?;
    manifest.input(&a.tracts);
    let edges = a.bin_edges.clone().unwrap_or_else(|| tracts.decile_income_edges());
    let by_id: BTreeMap<&str, &PersonRecord> = labels.iter().map(|r| (r.row_id.as_str(), r)).collect();

    let read_bytes = |p: &Path| fs::read(p).map_err(|e| AppError::io(p, e));
    let mut report = Report::new(DatasetFingerprint::of(&labels, Some(sha256_hex(&read_bytes(&a.labels)?))), edges.clone());
    report.tracts_sha256 = Some(sha256_hex(&read_bytes(&a.tracts)?));
    let mut names = BTreeSet::new();
    for spec in &a.predictions {
        let (name, path) = parse_named(spec);
        if !names.insert(report::file_stem(&name)) {
            return Err(AppError::Usage(format!("prediction set name {name:?} given twice")));
        }
        let rows = io::read_predictions(&path)?;
        manifest.input(&path);
        let mut seen = BTreeSet::new();
        let mut joined = Vec::with_capacity(rows.len());
        let mut failures = Vec::new();
        for r in &rows {
            match by_id.get(r.row_id.as_str()) {
                Some(rec) if rec.label.is_some() && seen.insert(r.row_id.as_str()) => joined.push((*rec).clone()),
                Some(rec) if rec.label.is_none() => failures.push(format!("{} is unlabeled", r.row_id)),
                Some(_) => failures.push(format!("{} appears twice", r.row_id)),
                None => failures.push(format!("{} not in labels", r.row_id)),
            }
        }
        if !failures.is_empty() {
            return Err(AppError::Usage(format!(
                "{}: {} prediction rows failed to join ({})",
                path.display(),
                failures.len(),
                failures.iter().take(3).cloned().collect::<Vec<_>>().join("; ")
            )));
        }
        let preds: Vec<RaceClass> = rows.iter().map(|r| r.predicted).collect();
        let checksum = sha256_hex(&read_bytes(&path)?);
        report.models.push(evaluate_model(&name, Some(checksum), &preds, &joined, &tracts, &edges)?);
    }
    let written = emit_report(&report, &a.out)?;
    for p in &written {
        manifest.output(p);
    }
    for line in report::comparison_rows(&report.models) {
        eprintln!("{}", line.join(","));
    }
    manifest.write(&manifest_path_for_dir(&a.out))?;
    Ok(())
}

fn cmd_geocode(a: GeocodeArgs, args: Vec<String>) -> AppResult<()> {
    let offline = a.offline || crate::geocode::offline_from_env();
    let options = ClientOptions {
        endpoint: a.endpoint.clone(),
        benchmark: a.benchmark.clone(),
        vintage: a.vintage.clone(),
        offline,
        ..ClientOptions::default()
    };
    let mut manifest = ManifestBuilder::new("geocode", args, &(&options.benchmark, &options.vintage, offline), None);
    let cache = match &a.cache {
        Some(p) => GeocodeCache::open(p).map_err(|e| AppError::Config(e.to_string()))?,
        None => GeocodeCache::in_memory(),
    };
    let client = GeocodeClient::new(Box::new(UreqTransport::default()), cache, options);

    let mut rdr = csv::Reader::from_path(&a.input).map_err(|e| AppError::csv(&a.input, e))?;
    manifest.input(&a.input);
    let headers = rdr.headers().map_err(|e| AppError::csv(&a.input, e))?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == a.address_column)
        .ok_or_else(|| AppError::Usage(format!("{} has no {:?} column", a.input.display(), a.address_column)))?;
    let rows: Vec<csv::StringRecord> = rdr
        .records()
        .collect::<Result<_, _>>()
        .map_err(|e| AppError::csv(&a.input, e))?;
    let addresses: Vec<String> = rows.iter().map(|r| r.get(col).unwrap_or("").to_string()).collect();
    let results = client.geocode_batch(&addresses, a.concurrency);

    let mut header: Vec<&str> = headers.iter().collect();
    header.extend(["tract_geoid", "geocode_matched", "geocode_error"]);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let out_rows: Vec<Vec<String>> = rows
        .iter()
        .zip(&results)
        .map(|(row, res)| {
            let mut out: Vec<String> = row.iter().map(str::to_string).collect();
            match res {
                Ok(r) => {
                    *counts.entry(r.source.as_str()).or_default() += 1;
                    out.push(r.geoid.as_ref().map(|g| g.to_string()).unwrap_or_default());
                    out.push(r.matched.to_string());
                    out.push(String::new());
                }
                Err(e) => {
                    *counts.entry("error").or_default() += 1;
                    out.extend([String::new(), "false".into(), e.to_string()]);
                }
            }
            out
        })
        .collect();
    io::write_csv(&a.out, &header, out_rows)?;
    manifest.output(&a.out);
    let matched = results.iter().filter(|r| matches!(r, Ok(g) if g.matched)).count();
    eprintln!(
        "geocoded {} rows: {matched} matched; {}",
        rows.len(),
        counts.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join(", ")
    );
    let errors = counts.get("error").copied().unwrap_or(0);
    if errors > 0 {
        warn(&mut manifest, format!("{errors} rows failed to geocode"));
    }
    manifest.write(&manifest_path_for_file(&a.out))?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, args: Vec<String>) -> AppResult<()> {
    let modes: Vec<GeoMode> = match a.geo_mode {
        GradGeoMode::All => vec![GeoMode::Head, GeoMode::PrefixTokens, GeoMode::Disabled],
        GradGeoMode::Head => vec![GeoMode::Head],
        GradGeoMode::PrefixTokens => vec![GeoMode::PrefixTokens],
        GradGeoMode::Disabled => vec![GeoMode::Disabled],
    };
    let options = GradCheckOptions {
        seed: a.seed,
        epsilon: a.epsilon,
        corrupt_tensor: a.corrupt_tensor.clone(),
        ..GradCheckOptions::default()
    };
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for mode in modes {
        let config = LstmGeoConfig {
            geo_mode: mode,
            ..LstmGeoConfig::micro()
        };
        let r = grad_check_with(&config, &options).map_err(core("gradcheck"))?;
        let ok = r.passed(GRADCHECK_TOLERANCE);
        println!(
            "{} {:?}: {} parameters, max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
            if ok { "PASS" } else { "FAIL" },
            mode,
            r.parameters,
            r.max_rel_error,
            r.worst_path,
            r.worst_analytic,
            r.worst_numeric
        );
        if !ok {
            failed.push(format!("{mode:?}: {:.3e} at {}", r.max_rel_error, r.worst_path));
        }
        reports.push((mode, r));
    }
    if let Some(out) = &a.out {
        let mut manifest = ManifestBuilder::new("gradcheck", args, &(a.seed, a.epsilon), Some(a.seed));
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_json(out, &reports)?;
        manifest.output(out);
        manifest.write(&manifest_path_for_file(out))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::CheckFailed(format!(
            "relative error above {GRADCHECK_TOLERANCE:e}: {}",
            failed.join("; ")
        )))
    }
}

#[derive(Serialize)]
struct BenchmarkRunConfig<'a> {
    synth: &'a SynthConfig,
    options: &'a BenchmarkOptions,
    seeds: &'a [u64],
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn cmd_benchmark(a: BenchmarkArgs, args: Vec<String>) -> AppResult<()> {
    if a.seeds.is_empty() {
        return Err(AppError::Usage("--seeds needs at least one value".into()));
    }
    let mut synth = SynthConfig::canonical();
    synth.seed = a.data_seed;
    synth.num_records = a.records.unwrap_or(synth.num_records);
    if let Some(m) = a.mode {
        synth.mode = m.into();
    }
    synth.validate().map_err(core("synth config"))?;
    let mut options = BenchmarkOptions::new(a.seeds[0]);
    options.lstm.max_epochs = a.max_epochs.unwrap_or(options.lstm.max_epochs);
    let run_config = BenchmarkRunConfig {
        synth: &synth,
        options: &options,
        seeds: &a.seeds,
    };
    let mut manifest = ManifestBuilder::new("benchmark", args, &run_config, Some(a.data_seed));

    let world = SynthWorld::build(&synth).map_err(core("synth"))?;
    let data = world.generate().map_err(core("synth"))?;
    create_dir(&a.out)?;
    let mut summary: Vec<Vec<String>> = Vec::new();
    let mut per_model: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for &seed in &a.seeds {
        eprintln!("seed {seed}");
        let opts = BenchmarkOptions { seed, ..options.clone() };
        let outcome = bench::run_benchmark(&world, &data, &opts, &mut |msg| eprintln!("  {msg}"))?;
        let report = bench::benchmark_report(&outcome, &data)?;
        for p in emit_report(&report, &a.out.join(format!("seed-{seed}")))? {
            manifest.output(&p);
        }
        for m in &report.models {
            let white_fpr = m.metrics.per_class[RaceClass::White.code()].fpr;
            summary.push(vec![seed.to_string(), m.name.clone(), fmt_f64(m.metrics.accuracy), fmt_f64(white_fpr)]);
            if !per_model.contains_key(&m.name) {
                order.push(m.name.clone());
            }
            per_model.entry(m.name.clone()).or_default().push((m.metrics.accuracy, white_fpr));
            eprintln!("  {:14} accuracy {:.4} white FPR {:.4}", m.name, m.metrics.accuracy, white_fpr);
        }
    }
    for name in &order {
        let v = &per_model[name];
        summary.push(vec![
            "median".into(),
            name.clone(),
            fmt_f64(median(v.iter().map(|x| x.0).collect())),
            fmt_f64(median(v.iter().map(|x| x.1).collect())),
        ]);
    }
    let summary_path = a.out.join("summary.csv");
    io::write_csv(&summary_path, &["seed", "model", "accuracy", "white_fpr"], summary)?;
    manifest.output(&summary_path);
    manifest.write(&manifest_path_for_dir(&a.out))?;
    Ok(())
}
