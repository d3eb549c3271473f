//! `prefixquant`: every pipeline stage as a subcommand. Stages exchange
//! model containers, prefix caches and JSON reports through files, so any
//! stage can be rerun on its own.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prefixquant::calibrate::{calibrate_model, CalibConfig};
use prefixquant::container::write_file;
use prefixquant::corpus::{generate_text, sample_windows};
use prefixquant::finetune::{finetune_model, TrainConfig, Trainable};
use prefixquant::harness::{
    error_table, evaluate, load_corpus, run_pipeline, scheme_hooks, split_corpus, Bits, EvalConfig, PipelineConfig,
    Report, SampleSpec, Scheme, FULL_PRECISION_BITS,
};
use prefixquant::model::{load_model, load_quantized, save_model, save_quantized, ModelConfig, QuantHookSet, SiteKind, ToyModel};
use prefixquant::outlier::{analyze, OutlierReport, OutlierThresholds};
use prefixquant::planted::{planted_model, PlantedConfig};
use prefixquant::prefix::{build_prefix_cache, select_prefix_from_report, verify_isolation, PrefixCache, PrefixOrder};
use prefixquant::rotation::{rotate_model, RotationFlags};
use prefixquant::tensor::Rng;
use prefixquant::{Error, Result};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "prefixquant", version, about = "Prefixed-outlier quantization of a toy decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialised model, optionally with planted outliers.
    GenModel(GenModel),
    /// Write a synthetic text corpus.
    GenCorpus(GenCorpus),
    /// Detect outlier tokens and write an outlier report.
    Analyze(Analyze),
    /// Choose the prefix tokens and write their key/value cache.
    FindPrefix(FindPrefix),
    /// Apply the Hadamard rotations and write the rotated model.
    Rotate(Rotate),
    /// Calibrate quantizers and write a quantized model.
    Calibrate(Calibrate),
    /// Fine-tune a quantized model block by block.
    Finetune(Finetune),
    /// Perplexity and block error of a quantized model.
    Eval(Eval),
    /// Quantization error split between outlier tokens and the rest, with
    /// and without rotation and prefix.
    ErrorTable(ErrorTableCmd),
    /// Run every stage and write all artifacts to a directory.
    Pipeline(Pipeline),
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Tiny,
    Default,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    /// BOS last.
    Listed,
    /// BOS first.
    Reversed,
}

impl From<Order> for PrefixOrder {
    fn from(o: Order) -> Self {
        match o {
            Order::Listed => PrefixOrder::Listed,
            Order::Reversed => PrefixOrder::Reversed,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum RotSite {
    R1,
    R2,
    R3,
    R4,
}

#[derive(Args)]
struct GenModel {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Size::Tiny)]
    size: Size,
    /// Plant an MLP unit that writes a massive activation at BOS and at the
    /// first marker byte of a sequence.
    #[arg(long)]
    planted: bool,
    #[arg(long, default_value = ".", value_parser = parse_byte)]
    marker: u8,
    #[arg(long, default_value_t = 150.0)]
    massive: f32,
}

#[derive(Args)]
struct GenCorpus {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 131_072)]
    bytes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Input {
    #[arg(long)]
    model: PathBuf,
    /// Text file; the bundled corpus when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct Detect {
    #[arg(long, default_value_t = 64.0)]
    eta1: f64,
    #[arg(long, default_value_t = 8.0)]
    eta2: f64,
    #[arg(long = "samples", default_value_t = 8)]
    samples: usize,
    #[arg(long = "len", default_value_t = 256)]
    len: usize,
}

impl Detect {
    fn thresholds(&self) -> Result<OutlierThresholds> {
        OutlierThresholds::new(self.eta1, self.eta2)
    }
}

#[derive(Args)]
struct Calib {
    /// Step of the clipping-factor grid.
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    /// Step-size candidates of the static search.
    #[arg(long, default_value_t = 100)]
    grid_s_points: usize,
    /// Zero-point candidates of the static search.
    #[arg(long, default_value_t = 64)]
    grid_z_candidates: usize,
    /// Skip the search and use max-min ranges.
    #[arg(long)]
    max_min: bool,
    #[arg(long, default_value_t = 8)]
    calib_samples: usize,
    #[arg(long, default_value_t = 256)]
    calib_len: usize,
}

impl Calib {
    fn config(&self) -> CalibConfig {
        let search = if self.max_min {
            CalibConfig::max_min()
        } else {
            CalibConfig {
                s_points: self.grid_s_points,
                z_candidates: self.grid_z_candidates,
                ..CalibConfig::with_step(self.grid_step)
            }
        };
        CalibConfig {
            n_samples: self.calib_samples,
            seq_len: self.calib_len,
            ..search
        }
    }
}

#[derive(Args)]
struct Train {
    /// Defaults to 10 with 8-bit or wider activations, 20 otherwise.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    train_samples: usize,
    #[arg(long, default_value_t = 256)]
    train_len: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr_qparams: f64,
    #[arg(long, default_value_t = 5e-6)]
    lr_weights: f64,
    /// Comma-separated subset of the trainable parameter groups.
    #[arg(long, value_delimiter = ',')]
    trainables: Option<Vec<Trainable>>,
}

impl Train {
    fn config(&self, act_bits: u8, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or_else(|| TrainConfig::epochs_for_bits(act_bits)),
            n_samples: self.train_samples,
            seq_len: self.train_len,
            batch: self.batch,
            lr_qparams: self.lr_qparams,
            lr_weights: self.lr_weights,
            trainables: self.trainables.clone().unwrap_or(d.trainables.clone()),
            seed,
            ..d
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 16)]
    eval_samples: usize,
    /// Context length of the perplexity windows.
    #[arg(long, default_value_t = 256)]
    eval_len: usize,
}

impl EvalArgs {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            sample: SampleSpec {
                n: self.eval_samples,
                len: self.eval_len,
            },
        }
    }
}

#[derive(Args)]
struct Analyze {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    detect: Detect,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prefix cache to prefill before every sequence.
    #[arg(long)]
    prefix: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-token maxima and ratios at every site.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FindPrefix {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    detect: Detect,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Order::Listed)]
    prefix_order: Order,
    /// Where to write the prefix cache.
    #[arg(long)]
    out: PathBuf,
    /// Plan and isolation check as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Rotate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated rotations to apply.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "r1,r2,r3,r4")]
    sites: Vec<RotSite>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Calibrate {
    #[command(flatten)]
    input: Input,
    #[arg(long, default_value = "O2")]
    scheme: Scheme,
    /// Weight, activation and KV bits, e.g. `4,4,4`.
    #[arg(long, default_value = "4,4,4")]
    bits: Bits,
    #[command(flatten)]
    calib: Calib,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    prefix: Option<PathBuf>,
    /// Quantized model container.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Finetune {
    /// Quantized model container.
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    train: Train,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    prefix: Option<PathBuf>,
    /// The prefix cache rebuilt for the fine-tuned weights.
    #[arg(long, requires = "prefix")]
    prefix_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    /// Quantized model container; a plain model is evaluated unquantized.
    #[command(flatten)]
    input: Input,
    /// Full-precision reference model; the evaluated model itself, without
    /// quantization, when omitted.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    prefix: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-block MSE.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ErrorTableCmd {
    #[command(flatten)]
    input: Input,
    #[arg(long, default_value = "O1")]
    scheme: Scheme,
    #[arg(long, default_value = "16,4,16")]
    bits: Bits,
    /// Block whose output error is attributed.
    #[arg(long, default_value_t = 1)]
    block: usize,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value_t = 128)]
    len: usize,
    #[arg(long, default_value_t = 64.0)]
    eta1: f64,
    #[arg(long, default_value_t = 8.0)]
    eta2: f64,
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    #[arg(long)]
    max_min: bool,
    /// Seeds the rotation and the window sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Per-block MSE of every stage.
    #[arg(long)]
    block_csv: Option<PathBuf>,
}

#[derive(Args)]
struct Pipeline {
    #[command(flatten)]
    input: Input,
    #[arg(long, default_value = "O2")]
    scheme: Scheme,
    #[arg(long, default_value = "4,4,4")]
    bits: Bits,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    detect: Detect,
    #[command(flatten)]
    calib: Calib,
    #[command(flatten)]
    train: Train,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_enum, default_value_t = Order::Listed)]
    prefix_order: Order,
    #[arg(long)]
    no_rotation: bool,
    #[arg(long)]
    no_prefix: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_byte(s: &str) -> std::result::Result<u8, String> {
    match s.as_bytes() {
        [b] => Ok(*b),
        _ => Err(format!("expected a single byte, got `{s}`")),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

fn write_report<C: Serialize, T: Serialize>(path: &Path, kind: &str, seed: u64, config: &C, data: T) -> Result<()> {
    let json = Report::new(kind, seed, config, data).to_json()?;
    write_text(path, &(json + "\n"))
}

fn load_prefix(path: Option<&Path>, model: &ToyModel) -> Result<Option<PrefixCache>> {
    let Some(p) = path else { return Ok(None) };
    let cache = PrefixCache::load(p)?;
    cache
        .check_model(model)
        .map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
    Ok(Some(cache))
}

fn draw(corpus: &[u32], n: usize, len: usize, seed: u64, what: &'static str) -> Result<Vec<Vec<u32>>> {
    let seqs = sample_windows(split_corpus(corpus).0, n, len, &mut Rng::seed(seed));
    if seqs.is_empty() {
        return Err(Error::Empty(what));
    }
    Ok(seqs)
}

/// Activation bits of the first activation site, if any.
fn act_bits(hooks: &QuantHookSet) -> u8 {
    hooks
        .iter()
        .find(|(id, _)| matches!(id.kind, SiteKind::Input(_)))
        .map_or(FULL_PRECISION_BITS, |(_, q)| q.spec.bits)
}

/// `layer,site,sequence,position,token,max,ratio`.
fn outlier_csv(report: &OutlierReport) -> String {
    let mut s = String::from("layer,site,sequence,position,token,max,ratio\n");
    for layer in &report.layers {
        for (site, per_seq) in &layer.sites {
            for (seq, stats) in per_seq.iter().enumerate() {
                for (pos, (m, r)) in stats.maxima.iter().zip(&stats.ratios).enumerate() {
                    let token = report.tokens[seq][pos];
                    s.push_str(&format!("{},{site},{seq},{pos},{token},{m},{r}\n", layer.layer));
                }
            }
        }
    }
    s
}

fn gen_model(a: GenModel) -> Result<()> {
    let config = match a.size {
        Size::Tiny => ModelConfig::tiny(),
        Size::Default => ModelConfig::default(),
    };
    let mut rng = Rng::seed(a.seed);
    let model = if a.planted {
        let planted = PlantedConfig {
            marker: a.marker,
            massive: a.massive,
        };
        planted_model(config, planted, &mut rng)?
    } else {
        ToyModel::init_random(config, &mut rng)?
    };
    save_model(&model, &a.out)?;
    tracing::info!(path = %a.out.display(), fingerprint = %model.fingerprint(), "model written");
    Ok(())
}

fn gen_corpus(a: GenCorpus) -> Result<()> {
    write_file(&a.out, &generate_text(a.bytes, &mut Rng::seed(a.seed)))
}

fn run_analyze(a: Analyze) -> Result<()> {
    let model = load_model(&a.input.model)?;
    let corpus = load_corpus(a.input.corpus.as_deref())?;
    let prefix = load_prefix(a.prefix.as_deref(), &model)?;
    let th = a.detect.thresholds()?;
    let seqs = draw(&corpus, a.detect.samples, a.detect.len, a.seed, "detection corpus")?;
    let report = analyze(&model, &seqs, &th, prefix.as_ref().map(|c| &c.kv))?;
    tracing::info!(o = report.o, "analyzed");
    if let Some(csv) = &a.csv {
        write_text(csv, &outlier_csv(&report))?;
    }
    let config = json!({
        "thresholds": th,
        "sample": SampleSpec { n: a.detect.samples, len: a.detect.len },
        "prefix": prefix.as_ref().map(|c| &c.plan),
    });
    write_report(&a.out, "outlier_report", a.seed, &config, &report)
}

fn run_find_prefix(a: FindPrefix) -> Result<()> {
    let model = load_model(&a.input.model)?;
    let corpus = load_corpus(a.input.corpus.as_deref())?;
    let th = a.detect.thresholds()?;
    let seqs = draw(&corpus, a.detect.samples, a.detect.len, a.seed, "detection corpus")?;
    let report = analyze(&model, &seqs, &th, None)?;
    let plan = select_prefix_from_report(&report, a.prefix_order.into())?;
    let cache = build_prefix_cache(&model, &plan)?;
    cache.save(&a.out)?;
    tracing::info!(plan = ?plan.token_ids, "prefix cache written");
    if let Some(path) = &a.report {
        let iso = verify_isolation(&model, &cache, &seqs, &th)?;
        let config = json!({
            "thresholds": th,
            "sample": SampleSpec { n: a.detect.samples, len: a.detect.len },
            "order": PrefixOrder::from(a.prefix_order),
        });
        write_report(path, "prefix_plan", a.seed, &config, &iso)?;
    }
    Ok(())
}

fn run_rotate(a: Rotate) -> Result<()> {
    let model = load_model(&a.model)?;
    let on = |s| a.sites.contains(&s);
    let flags = RotationFlags {
        r1: on(RotSite::R1),
        r2: on(RotSite::R2),
        r3: on(RotSite::R3),
        r4: on(RotSite::R4),
    };
    save_model(&rotate_model(&model, a.seed, flags)?, &a.out)
}

fn run_calibrate(a: Calibrate) -> Result<()> {
    let model = load_model(&a.input.model)?;
    let corpus = load_corpus(a.input.corpus.as_deref())?;
    let prefix = load_prefix(a.prefix.as_deref(), &model)?;
    let cfg = a.calib.config();
    cfg.validate()?;
    let seqs = draw(&corpus, cfg.n_samples, cfg.seq_len, a.seed, "calibration corpus")?;
    let base = scheme_hooks(&model.config, a.scheme, a.bits)?;
    let (hooks, report) = calibrate_model(&model, &base, prefix.as_ref().map(|c| &c.kv), &seqs, &cfg)?;
    save_quantized(&model, &hooks, &a.out)?;
    tracing::info!(sites = report.sites.len(), "calibrated");
    if let Some(path) = &a.report {
        let config = json!({ "scheme": a.scheme, "bits": a.bits, "calib": cfg });
        write_report(path, "calibration_report", a.seed, &config, &report)?;
    }
    Ok(())
}

fn run_finetune(a: Finetune) -> Result<()> {
    let (model, hooks) = load_quantized(&a.input.model)?;
    let corpus = load_corpus(a.input.corpus.as_deref())?;
    let prefix = load_prefix(a.prefix.as_deref(), &model)?;
    let cfg = a.train.config(act_bits(&hooks), a.seed);
    cfg.validate()?;
    let seqs = draw(&corpus, cfg.n_samples, cfg.seq_len, a.seed, "training corpus")?;
    let (trained, hooks, report) = finetune_model(&model, &hooks, prefix.as_ref().map(|c| &c.kv), &seqs, &cfg)?;
    save_quantized(&trained, &hooks, &a.out)?;
    match (&prefix, &a.prefix_out) {
        (Some(c), Some(path)) => build_prefix_cache(&trained, &c.plan)?.save(path)?,
        (Some(_), None) => tracing::warn!("weights changed; the input prefix cache no longer matches the output model"),
        _ => {}
    }
    if let Some(path) = &a.report {
        write_report(path, "finetune_report", a.seed, &cfg, &report)?;
    }
    Ok(())
}

fn run_eval(a: Eval) -> Result<()> {
    let (model, hooks) = load_quantized(&a.input.model)?;
    let reference = match &a.reference {
        Some(p) => load_model(p)?,
        None => model.clone(),
    };
    let corpus = load_corpus(a.input.corpus.as_deref())?;
    let prefix = load_prefix(a.prefix.as_deref(), &model)?;
    let cfg = a.eval.config();
    let report = evaluate(
        &reference,
        &model,
        &hooks,
        prefix.as_ref().map(|c| &c.kv),
        split_corpus(&corpus).1,
        &cfg,
    )?;
    tracing::info!(ppl_fp = report.ppl_fp, ppl_quant = report.ppl_quant, "evaluated");
    if let Some(csv) = &a.csv {
        write_text(csv, &report.block_csv())?;
    }
    write_report(&a.out, "eval_report", a.seed, &cfg, &report)
}

fn run_error_table(a: ErrorTableCmd) -> Result<()> {
    let model = load_model(&a.input.model)?;
    let corpus = load_corpus(a.input.corpus.as_deref())?;
    let th = OutlierThresholds::new(a.eta1, a.eta2)?;
    let calib = if a.max_min { CalibConfig::max_min() } else { CalibConfig::with_step(a.grid_step) };
    let seqs = draw(&corpus, a.samples, a.len, a.seed, "measurement corpus")?;
    let table = error_table(&model, &seqs, a.scheme, a.bits, &calib, &th, a.block, a.seed)?;
    if let Some(csv) = &a.csv {
        write_text(csv, &table.to_csv())?;
    }
    if let Some(csv) = &a.block_csv {
        write_text(csv, &table.per_block_csv())?;
    }
    let config = json!({
        "scheme": a.scheme,
        "bits": a.bits,
        "block": a.block,
        "sample": SampleSpec { n: a.samples, len: a.len },
        "thresholds": th,
        "calib": calib,
    });
    write_report(&a.out, "error_table", a.seed, &config, &table)
}

fn run_pipeline_cmd(a: Pipeline) -> Result<()> {
    let model = load_model(&a.input.model)?;
    let corpus = load_corpus(a.input.corpus.as_deref())?;
    let mut cfg = PipelineConfig::new(a.scheme, a.bits, a.seed);
    cfg.rotation = !a.no_rotation;
    cfg.prefix = !a.no_prefix;
    cfg.prefix_order = a.prefix_order.into();
    cfg.thresholds = a.detect.thresholds()?;
    cfg.detect = SampleSpec {
        n: a.detect.samples,
        len: a.detect.len,
    };
    cfg.calib = a.calib.config();
    let act = if a.scheme == Scheme::WeightOnly { FULL_PRECISION_BITS } else { a.bits.a };
    cfg.train = a.train.config(act, a.seed);
    cfg.eval = a.eval.config();

    let out = run_pipeline(&model, &corpus, &cfg)?;
    let dir = &a.out;
    let r = &out.report;
    write_report(&dir.join("outliers.json"), "outlier_report", a.seed, &cfg.thresholds, &out.outliers)?;
    if let (Some(iso), Some(cache)) = (&r.prefix, &out.prefix) {
        write_report(&dir.join("prefix_plan.json"), "prefix_plan", a.seed, &cfg, iso)?;
        cache.save(&dir.join("prefix.pqpc"))?;
    }
    write_report(&dir.join("calibration.json"), "calibration_report", a.seed, &cfg.calib, &r.calibration)?;
    if let Some(ft) = &r.finetune {
        write_report(&dir.join("finetune.json"), "finetune_report", a.seed, &cfg.train, ft)?;
    }
    write_report(&dir.join("eval.json"), "eval_report", a.seed, &cfg.eval, &r.eval)?;
    write_text(&dir.join("eval_blocks.csv"), &r.eval.block_csv())?;
    write_report(&dir.join("pipeline.json"), "pipeline_report", a.seed, &cfg, r)?;
    save_quantized(&out.model, &out.hooks, &dir.join("model.pqtm"))?;
    println!("ppl_fp {:.4} ppl_quant {:.4}", r.eval.ppl_fp, r.eval.ppl_quant);
    Ok(())
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("PREFIXQUANT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .map_err(|_| format!("PREFIXQUANT_THREADS must be a thread count, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Analyze(a) => run_analyze(a),
        Command::FindPrefix(a) => run_find_prefix(a),
        Command::Rotate(a) => run_rotate(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Eval(a) => run_eval(a),
        Command::ErrorTable(a) => run_error_table(a),
        Command::Pipeline(a) => run_pipeline_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
