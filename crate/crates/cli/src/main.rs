//! `bcp-lab`: data generation, training, evaluation and plotting for
//! bidirectional copy-paste experiments.

mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bcp_core::datakit::{self, DatasetManifest, DatasetSpec, LabeledSample, Split};
use bcp_core::evalkit::{self, Bandwidth, FeatureSource};
use bcp_core::segnet::load_checkpoint;
use bcp_core::trainer::{self, MixerMode, PretrainMode, TrainConfig, TrainOptions};
use bcp_core::{LabelMap, ModelParams, NetConfig, Tensor};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use plot::Series;

const CONFIG_SNAPSHOT: &str = "config.json";
const THREADS_ENV: &str = "BCP_LAB_THREADS";

#[derive(Parser)]
#[command(name = "bcp-lab", version, about = "Semi-supervised segmentation with bidirectional copy-paste")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a labeled/unlabeled intensity shift.
    GenData {
        /// Dataset spec (JSON); built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training on the labeled split only.
    Pretrain {
        /// Training config (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the pretraining mode.
        #[arg(long, value_enum)]
        pretrain: Option<PretrainArg>,
    },
    /// Pretrain (unless --init is given) and self-train with a mean teacher.
    Train {
        /// Training config (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Start self-training from this checkpoint instead of pretraining.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue from a self-training checkpoint written by this command.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Train on ground truth and pseudo-labels without any mixing.
        #[arg(long)]
        no_bcp: bool,
        /// Skip largest-connected-component filtering of pseudo-labels.
        #[arg(long)]
        no_lcc: bool,
        /// Override the pretraining mode.
        #[arg(long, value_enum)]
        pretrain: Option<PretrainArg>,
        /// Override the mixing mode.
        #[arg(long, value_enum, conflicts_with = "no_bcp")]
        mixer: Option<MixerArg>,
    },
    /// Per-volume, per-class Dice, Jaccard, 95HD and ASD.
    Eval {
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Split to score.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Labeled vs unlabeled distribution gap per class.
    Diagnose {
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Per-voxel feature behind the density estimates.
        #[arg(long, value_enum, default_value_t = FeatureArg::Logit)]
        features: FeatureArg,
    },
    /// Segment one image volume.
    Predict {
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image volume (f32).
        #[arg(long)]
        input: PathBuf,
        /// Output label volume (u8).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a metrics CSV as an SVG chart.
    Plot {
        /// CSV written by train, pretrain, eval or diagnose.
        #[arg(long)]
        metrics: PathBuf,
        /// Output SVG.
        #[arg(long)]
        out: PathBuf,
        /// Line chart over the first column, or per-class density of one column.
        #[arg(long, value_enum, default_value_t = PlotKind::Auto)]
        kind: PlotKind,
        /// Columns to draw (comma separated); all numeric ones for line
        /// charts, `dice` for density charts, when omitted.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PretrainArg {
    Cp,
    Plain,
    None,
}

impl From<PretrainArg> for PretrainMode {
    fn from(a: PretrainArg) -> Self {
        match a {
            PretrainArg::Cp => PretrainMode::Cp,
            PretrainArg::Plain => PretrainMode::Plain,
            PretrainArg::None => PretrainMode::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MixerArg {
    Bcp,
    InOnly,
    OutOnly,
    WithinSet,
    Mixup,
    FgCutmix,
    None,
}

impl From<MixerArg> for MixerMode {
    fn from(a: MixerArg) -> Self {
        match a {
            MixerArg::Bcp => MixerMode::Bcp,
            MixerArg::InOnly => MixerMode::InOnly,
            MixerArg::OutOnly => MixerMode::OutOnly,
            MixerArg::WithinSet => MixerMode::WithinSet,
            MixerArg::Mixup => MixerMode::Mixup,
            MixerArg::FgCutmix => MixerMode::FgCutmix,
            MixerArg::None => MixerMode::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    Intensity,
    Logit,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PlotKind {
    Auto,
    Line,
    Density,
}

/// Failure class; decides the exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Data(_) => "data",
            Failure::Numeric(_) => "numeric",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<bcp_core::Error> for Failure {
    fn from(e: bcp_core::Error) -> Self {
        match e {
            bcp_core::Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage_err(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn require_file(flag: &str, p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag}: no such file `{}`", p.display())))
    }
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            require_file("--config", p)?;
            TrainConfig::load(p).map_err(usage_err)?
        }
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(usage_err)?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> CliResult<DatasetManifest> {
    require_file("--data", path)?;
    Ok(DatasetManifest::load(path)?)
}

fn load_model(path: &Path) -> CliResult<(NetConfig, ModelParams<f64>)> {
    require_file("--checkpoint", path)?;
    let ck = load_checkpoint(path)?;
    let params = ck.params("")?;
    Ok((ck.net, params))
}

fn prepare_run_dir(out: &Path, cfg: &TrainConfig) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| data_err(format!("creating {}: {e}", out.display())))?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    Ok(())
}

fn gen_data(spec: Option<&Path>, out: &Path) -> CliResult<()> {
    let spec = match spec {
        Some(p) => {
            require_file("--spec", p)?;
            let text = fs::read_to_string(p).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<DatasetSpec>(&text).map_err(|e| usage_err(format!("{}: {e}", p.display())))?
        }
        None => DatasetSpec::default(),
    };
    spec.validate().map_err(usage_err)?;
    let manifest = datakit::synth_generate(&spec, out)?;
    println!("wrote {} volumes to {}", manifest.records.len(), out.display());
    Ok(())
}

fn pretrain(config: Option<&Path>, data: &Path, out: &Path, mode: Option<PretrainArg>) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    if let Some(m) = mode {
        cfg.pretrain_mode = m.into();
    }
    let dataset = load_dataset(data)?;
    prepare_run_dir(out, &cfg)?;
    let p = trainer::pretrain_to(&dataset, &cfg, Some(out))?;
    if let Some(l) = p.losses.last() {
        println!("pretrained {} iterations, final loss {l:.5}", p.losses.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    data: &Path,
    init: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
    no_bcp: bool,
    no_lcc: bool,
    pretrain: Option<PretrainArg>,
    mixer: Option<MixerArg>,
) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    if no_bcp {
        cfg.mixer_mode = MixerMode::None;
    }
    if let Some(m) = mixer {
        cfg.mixer_mode = m.into();
    }
    if no_lcc {
        cfg.use_lcc = false;
    }
    if let Some(p) = pretrain {
        cfg.pretrain_mode = p.into();
    }
    cfg.validate().map_err(usage_err)?;
    let dataset = load_dataset(data)?;
    let mut opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        ..TrainOptions::default()
    };
    if let Some(p) = init {
        require_file("--init", p)?;
        let ck = load_checkpoint(p)?;
        if ck.net != cfg.net {
            return Err(Failure::Usage(format!(
                "--init: checkpoint network {:?} differs from config network {:?}",
                ck.net, cfg.net
            )));
        }
        opts.init = Some(ck.params("")?);
    }
    if let Some(p) = resume {
        require_file("--resume", p)?;
        opts.resume = Some(load_checkpoint(p)?);
    }
    prepare_run_dir(out, &cfg)?;
    let outcome = trainer::train(&dataset, &cfg, &opts)?;
    if let Some(row) = outcome.state.metrics.last() {
        println!("step {}: l_all {:.5}, val dice {:.4}", row.iter, row.l_all, row.val_dice);
    }
    Ok(())
}

fn split_samples(dataset: &DatasetManifest, split: SplitArg) -> CliResult<Vec<LabeledSample>> {
    Ok(match split {
        SplitArg::Labeled => dataset.load_labeled(Split::Labeled)?,
        SplitArg::Val => dataset.load_labeled(Split::Val)?,
        SplitArg::Test => dataset.load_labeled(Split::Test)?,
        SplitArg::Unlabeled => dataset.load_unlabeled_with_oracle()?,
    })
}

fn eval(checkpoint: &Path, data: &Path, split: SplitArg, out: &Path) -> CliResult<()> {
    let (net, params) = load_model(checkpoint)?;
    let dataset = load_dataset(data)?;
    let samples = split_samples(&dataset, split)?;
    let preds = evalkit::predict_all(&net, &params, &samples)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let gts: Vec<LabelMap> = samples.into_iter().map(|s| s.label).collect();
    let rows = evalkit::evaluate(&ids, &preds, &gts)?;
    evalkit::write_metrics_csv(out, &rows)?;
    println!(
        "{} volumes, mean foreground dice {:.4}",
        ids.len(),
        evalkit::mean_foreground_dice(&preds, &gts)?
    );
    Ok(())
}

fn diagnose(checkpoint: &Path, data: &Path, out: &Path, features: FeatureArg) -> CliResult<()> {
    let (net, params) = load_model(checkpoint)?;
    let dataset = load_dataset(data)?;
    let labeled = dataset.load_labeled(Split::Labeled)?;
    let unlabeled = dataset.load_unlabeled_with_oracle()?;
    let source = match features {
        FeatureArg::Intensity => FeatureSource::Intensity,
        FeatureArg::Logit => FeatureSource::Logit,
    };
    let rows = evalkit::diagnose(&net, &params, &labeled, &unlabeled, source)?;
    evalkit::write_diagnostics_csv(out, &rows)?;
    for r in &rows {
        println!(
            "class {}: kde gap {:.4}, dice labeled {:.4}, unlabeled {:.4}",
            r.class, r.kde_gap, r.dice_labeled, r.dice_unlabeled
        );
    }
    Ok(())
}

fn predict(checkpoint: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let (net, params) = load_model(checkpoint)?;
    require_file("--input", input)?;
    let image = datakit::load_image(input)?;
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = Tensor::new(shape, image.cast::<f64>().data().to_vec())?;
    let labels = trainer::predict(&net, &params, &x)?;
    datakit::save_labels(out, &labels)?;
    Ok(())
}

/// Header plus numeric columns; unparsable cells become NaN.
struct Table {
    headers: Vec<String>,
    columns: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> CliResult<Table> {
    require_file("--metrics", path)?;
    let mut reader = csv::Reader::from_path(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| data_err(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut columns = vec![Vec::new(); headers.len()];
    for rec in reader.records() {
        let rec = rec.map_err(|e| data_err(format!("{}: {e}", path.display())))?;
        for (col, cell) in columns.iter_mut().zip(rec.iter()) {
            col.push(cell.trim().parse::<f64>().unwrap_or(f64::NAN));
        }
    }
    Ok(Table { headers, columns })
}

fn column<'a>(t: &'a Table, name: &str) -> CliResult<&'a [f64]> {
    t.headers
        .iter()
        .position(|h| h == name)
        .map(|i| t.columns[i].as_slice())
        .ok_or_else(|| Failure::Usage(format!("--columns: no column `{name}` (have {})", t.headers.join(","))))
}

fn plot_lines(t: &Table, columns: &[String], title: &str) -> CliResult<String> {
    let x = &t.columns[0];
    let names: Vec<String> = if columns.is_empty() {
        t.headers
            .iter()
            .zip(&t.columns)
            .skip(1)
            .filter(|(_, c)| c.iter().any(|v| v.is_finite()))
            .map(|(h, _)| h.clone())
            .collect()
    } else {
        columns.to_vec()
    };
    let series = names
        .iter()
        .map(|n| {
            Ok(Series {
                name: n.clone(),
                points: x.iter().copied().zip(column(t, n)?.iter().copied()).collect(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(plot::line_chart(title, &t.headers[0], "value", &series))
}

fn density_series(name: String, values: &[f64]) -> CliResult<Series> {
    let xs: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if xs.is_empty() {
        return Err(Failure::Data(format!("column `{name}` has no finite values")));
    }
    let h = evalkit::silverman_bandwidth(&xs).unwrap_or(0.05);
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let grid = evalkit::linspace(lo - 3.0 * h, hi + 3.0 * h, 256);
    let curve = evalkit::kde(&xs, &grid, Bandwidth::Fixed(h))?;
    Ok(Series {
        name,
        points: curve.grid.into_iter().zip(curve.density).collect(),
    })
}

fn plot_density(t: &Table, columns: &[String], title: &str) -> CliResult<String> {
    let name = columns.first().map(String::as_str).unwrap_or("dice");
    let values = column(t, name)?;
    let series = match t.headers.iter().position(|h| h == "class") {
        Some(ci) => {
            let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
            for (c, v) in t.columns[ci].iter().zip(values) {
                groups.entry(*c as i64).or_default().push(*v);
            }
            groups
                .into_iter()
                .map(|(c, vs)| density_series(format!("class {c}"), &vs))
                .collect::<CliResult<Vec<_>>>()?
        }
        None => vec![density_series(name.to_string(), values)?],
    };
    Ok(plot::line_chart(title, name, "density", &series))
}

fn plot(metrics: &Path, out: &Path, kind: PlotKind, columns: &[String]) -> CliResult<()> {
    let t = read_table(metrics)?;
    if t.headers.is_empty() {
        return Err(Failure::Data(format!("{}: empty CSV", metrics.display())));
    }
    let kind = match kind {
        PlotKind::Auto if t.headers[0] == "iter" => PlotKind::Line,
        PlotKind::Auto => PlotKind::Density,
        k => k,
    };
    let title = metrics.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let svg = match kind {
        PlotKind::Density => plot_density(&t, columns, &title)?,
        _ => plot_lines(&t, columns, &title)?,
    };
    datakit::write_atomic(out, svg.as_bytes())?;
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(usage_err)
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { spec, out } => gen_data(spec.as_deref(), &out),
        Command::Pretrain {
            config,
            data,
            out,
            pretrain: mode,
        } => pretrain(config.as_deref(), &data, &out, mode),
        Command::Train {
            config,
            data,
            init,
            resume,
            out,
            no_bcp,
            no_lcc,
            pretrain,
            mixer,
        } => train(
            config.as_deref(),
            &data,
            init.as_deref(),
            resume.as_deref(),
            &out,
            no_bcp,
            no_lcc,
            pretrain,
            mixer,
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval(&checkpoint, &data, split, &out),
        Command::Diagnose {
            checkpoint,
            data,
            out,
            features,
        } => diagnose(&checkpoint, &data, &out, features),
        Command::Predict { checkpoint, input, out } => predict(&checkpoint, &input, &out),
        Command::Plot {
            metrics,
            out,
            kind,
            columns,
        } => plot(&metrics, &out, kind, &columns),
    }
}

fn subcommand_usage(name: Option<&str>) -> String {
    let mut cmd = Cli::command();
    let sub = name.and_then(|n| cmd.find_subcommand_mut(n).cloned());
    match sub {
        Some(mut s) => s.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version go to stdout with status 0; parse errors exit 2
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let name = std::env::args().nth(1);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.kind(), "code": f.code(), "message": f.message() });
            eprintln!("{line}");
            if matches!(f, Failure::Usage(_)) {
                eprintln!("{}", subcommand_usage(name.as_deref()).trim_end());
            }
            ExitCode::from(f.code())
        }
    }
}
