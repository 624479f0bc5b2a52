//! Command-line front end. Every subcommand writes its artifacts plus one
//! `manifest.json` into its output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corrmine::correlation_stats;
use crate::dataio::{generate_synthetic, load_bundle, load_features, save_bundle, DatasetBundle, SynthConfig};
use crate::error::{Error, Result};
use crate::evalkit::{EvalReport, EvalSettings};
use crate::hashnet::{Activation, BinaryCodeMatrix, HashNet};
use crate::pipeline::{encode_all, encode_split, evaluate_codes, EvalPair, SplitCodes};
use crate::trainer::{TrainConfig, Trainer, Variant};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "assph", version, about = "Unsupervised cross-modal hashing")]
pub struct Cli {
    /// Worker threads; 1 keeps every output bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic bundle.
    Synth(SynthArgs),
    /// Dump the semantic similarity matrix and the initial correlation set.
    BuildSim(BuildSimArgs),
    /// Train both hash networks.
    Train(TrainArgs),
    /// Turn features into binary codes with a checkpoint.
    Encode(EncodeArgs),
    /// Evaluate codes or checkpoints against bundle labels.
    Eval(EvalArgs),
    /// Train and evaluate the full model and its ablation variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with SynthConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub dim_image: Option<usize>,
    #[arg(long)]
    pub dim_text: Option<usize>,
    #[arg(long)]
    pub label_cardinality: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub query_fraction: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Keep training instances out of the retrieval database.
    #[arg(long)]
    pub exclude_train_from_db: bool,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// Built-in base profile.
    #[arg(long, default_value = "paper-default")]
    pub profile: String,
    /// JSON file whose keys override the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. `--set epochs=5` or `--set weights.mu1=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub code_length: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildSimArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Apply one ablation switch (noadapt, paircorr, nocorr, nobinopt).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Encode the query and retrieval cells of this bundle with a run's
    /// checkpoints.
    #[arg(long, requires = "run", conflicts_with_all = ["features", "checkpoint"])]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Encode every row of one feature file.
    #[arg(long, requires = "checkpoint")]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Hidden activation of the checkpoint (read from the run config when
    /// encoding a bundle).
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Directory with the four split code files written by `encode`.
    #[arg(long, conflicts_with = "run")]
    pub codes: Option<PathBuf>,
    /// Training run directory; its checkpoints are encoded first.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated variants run next to the full model.
    #[arg(long, default_value = "noadapt,paircorr,nocorr,nobinopt")]
    pub variants: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_config: Option<SynthConfig>,
    /// sha256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// Output paths keyed by role.
    pub outputs: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, threads: usize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            threads,
            train_config: None,
            synth_config: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn output(&mut self, role: &str, path: &Path) {
        self.outputs.insert(role.into(), path.display().to_string());
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }
}

struct Timer(BTreeMap<String, f64>);

impl Timer {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.0.insert(stage.into(), t.elapsed().as_secs_f64());
        Ok(out)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn config_error(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{what}: {e}"))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c = value`, parsing `value` as JSON and falling back to a string.
fn set_path(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key} does not name a config field")))?
            .entry(part)
            .or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

/// Profile, then config file, then flags.
pub fn resolve_config(args: &ConfigArgs, threads: Option<usize>) -> Result<(TrainConfig, Vec<PathBuf>)> {
    let mut value = serde_json::to_value(TrainConfig::profile(&args.profile)?).expect("config serializes");
    let mut files = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: Value = serde_json::from_str(&text).map_err(|e| config_error("config file", e))?;
        if !overlay.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        merge(&mut value, overlay);
        files.push(path.clone());
    }
    for s in &args.sets {
        set_path(&mut value, s)?;
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).map_err(|e| config_error("config", e))?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(k) = args.code_length {
        cfg.code_length = k;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok((cfg, files))
}

fn bundle_inputs(manifest: &mut RunManifest, dir: &Path) -> Result<DatasetBundle> {
    let (bundle, bm) = load_bundle(dir)?;
    manifest.input(&dir.join(crate::dataio::BUNDLE_MANIFEST))?;
    manifest.input(&dir.join(&bm.image))?;
    manifest.input(&dir.join(&bm.text))?;
    if let Some(l) = &bm.labels {
        manifest.input(&dir.join(l))?;
    }
    Ok(bundle)
}

fn write_eval(dir: &Path, eval: &EvalPair, manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join("eval.json");
    write_json(&path, eval)?;
    manifest.output("eval", &path);
    for r in [&eval.i2t, &eval.t2i] {
        let tag = r.direction.to_string().to_ascii_lowercase();
        let pr = dir.join(format!("{tag}_pr.csv"));
        let topk = dir.join(format!("{tag}_topk.csv"));
        write_bytes(&pr, r.pr_csv().as_bytes())?;
        write_bytes(&topk, r.topk_csv().as_bytes())?;
        manifest.output(&format!("{tag}Pr"), &pr);
        manifest.output(&format!("{tag}Topk"), &topk);
    }
    Ok(())
}

const CODE_FILES: [&str; 4] = ["image_query.assb", "text_query.assb", "image_db.assb", "text_db.assb"];

fn write_codes(dir: &Path, codes: &SplitCodes, manifest: &mut RunManifest) -> Result<()> {
    let all = [&codes.image_query, &codes.text_query, &codes.image_db, &codes.text_db];
    for (name, c) in CODE_FILES.iter().zip(all) {
        let path = dir.join(name);
        c.save(&path)?;
        manifest.output(name.trim_end_matches(".assb"), &path);
    }
    Ok(())
}

fn read_codes(dir: &Path, manifest: &mut RunManifest) -> Result<SplitCodes> {
    let mut loaded = Vec::with_capacity(4);
    for name in CODE_FILES {
        let path = dir.join(name);
        manifest.input(&path)?;
        loaded.push(BinaryCodeMatrix::load(&path)?);
    }
    let mut it = loaded.into_iter();
    let mut next = || it.next().expect("four code files");
    Ok(SplitCodes {
        image_query: next(),
        text_query: next(),
        image_db: next(),
        text_db: next(),
    })
}

fn parse_activation(s: &str) -> Result<Activation> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase()))
        .map_err(|_| Error::Config(format!("unknown activation {s:?}")))
}

/// Loads `image.assp`, `text.assp` and the activation recorded in `config.json`.
fn load_run(dir: &Path, manifest: &mut RunManifest) -> Result<(HashNet, HashNet)> {
    let cfg_path = dir.join("config.json");
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::format("run config", e.to_string()))?;
    manifest.input(&cfg_path)?;
    let mut nets = Vec::with_capacity(2);
    for name in ["image.assp", "text.assp"] {
        let path = dir.join(name);
        manifest.input(&path)?;
        nets.push(HashNet::load(&path, cfg.activation)?);
    }
    let text_net = nets.pop().expect("text net");
    Ok((nets.pop().expect("image net"), text_net))
}

fn run_synth(a: SynthArgs, threads: usize) -> Result<()> {
    let mut m = RunManifest::new("synth", threads);
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            m.input(path)?;
            serde_json::from_str(&text).map_err(|e| config_error("synth config", e))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! take {
        ($($field:ident).+ <- $flag:expr) => {
            if let Some(v) = $flag {
                cfg.$($field).+ = v;
            }
        };
    }
    take!(classes <- a.classes);
    take!(instances <- a.instances);
    take!(dim_image <- a.dim_image);
    take!(dim_text <- a.dim_text);
    take!(label_cardinality <- a.label_cardinality);
    take!(noise_sigma <- a.noise_sigma);
    take!(seed <- a.seed);
    take!(split.query_fraction <- a.query_fraction);
    if a.train_size.is_some() {
        cfg.split.train_size = a.train_size;
    }
    if a.exclude_train_from_db {
        cfg.split.database_includes_train = false;
    }
    if a.split_seed.is_some() {
        cfg.split.seed = a.split_seed;
    }
    cfg.validate()?;

    let mut timer = Timer(BTreeMap::new());
    let bundle = timer.time("generate", || generate_synthetic(&cfg))?;
    let bm = timer.time("write", || save_bundle(&a.out, &bundle, Some(&cfg)))?;
    m.output("bundle", &a.out.join(crate::dataio::BUNDLE_MANIFEST));
    m.output("image", &a.out.join(&bm.image));
    m.output("text", &a.out.join(&bm.text));
    if let Some(l) = &bm.labels {
        m.output("labels", &a.out.join(l));
    }
    m.synth_config = Some(cfg);
    m.timings = timer.0;
    m.write(&a.out)
}

fn run_build_sim(a: BuildSimArgs, threads: Option<usize>) -> Result<()> {
    let (cfg, files) = resolve_config(&a.cfg, threads)?;
    let mut m = RunManifest::new("build-sim", cfg.threads);
    for f in &files {
        m.input(f)?;
    }
    let bundle = bundle_inputs(&mut m, &a.bundle)?;
    cfg.validate_for(&bundle)?;
    create_dir(&a.out)?;
    let mut timer = Timer(BTreeMap::new());
    let trainer = timer.time("build", || Trainer::new(&bundle, &cfg))?;

    let s_path = a.out.join("similarity.assf");
    write_bytes(&s_path, &trainer.similarity().to_assf_bytes())?;
    m.output("similarity", &s_path);
    let r_path = a.out.join("correlation.csv");
    write_bytes(&r_path, trainer.correlation().to_pair_csv().as_bytes())?;
    m.output("correlation", &r_path);
    if let Some(labels) = &bundle.labels {
        let stats = correlation_stats(trainer.correlation(), &labels.select(&bundle.split.train))?;
        let path = a.out.join("correlation_stats.json");
        write_json(&path, &stats)?;
        m.output("correlationStats", &path);
    }
    m.train_config = Some(cfg);
    m.timings = timer.0;
    m.write(&a.out)
}

/// Trains one configuration into `out` and returns its self-evaluation.
fn train_into(bundle: &DatasetBundle, cfg: &TrainConfig, out: &Path, m: &mut RunManifest) -> Result<Option<EvalPair>> {
    create_dir(out)?;
    let mut timer = Timer(BTreeMap::new());
    let trainer = timer.time("setup", || Trainer::new(bundle, cfg))?;
    let outcome = timer.time("train", || trainer.run())?;

    let cfg_path = out.join("config.json");
    write_json(&cfg_path, cfg)?;
    m.output("config", &cfg_path);
    for (name, net) in [("image.assp", &outcome.image), ("text.assp", &outcome.text)] {
        let path = out.join(name);
        net.save(&path)?;
        m.output(name.trim_end_matches(".assp"), &path);
    }
    let hist = out.join("history.jsonl");
    write_bytes(&hist, outcome.history.to_jsonl().as_bytes())?;
    m.output("history", &hist);
    let r_path = out.join("correlation.csv");
    write_bytes(&r_path, outcome.correlation.to_pair_csv().as_bytes())?;
    m.output("correlation", &r_path);

    let codes = timer.time("encode", || encode_split(bundle, &outcome.image, &outcome.text))?;
    write_codes(out, &codes, m)?;
    let eval = if bundle.labels.is_some() {
        let e = timer.time("eval", || evaluate_codes(bundle, &codes, &EvalSettings::default()))?;
        write_eval(out, &e, m)?;
        Some(e)
    } else {
        None
    };
    m.timings.extend(timer.0);
    Ok(eval)
}

fn run_train(a: TrainArgs, threads: Option<usize>) -> Result<()> {
    let (mut cfg, files) = resolve_config(&a.cfg, threads)?;
    if let Some(v) = &a.variant {
        cfg = v.parse::<Variant>()?.apply(&cfg);
    }
    let mut m = RunManifest::new("train", cfg.threads);
    for f in &files {
        m.input(f)?;
    }
    let bundle = bundle_inputs(&mut m, &a.bundle)?;
    cfg.validate_for(&bundle)?;
    train_into(&bundle, &cfg, &a.out, &mut m)?;
    m.train_config = Some(cfg);
    m.write(&a.out)
}

fn run_encode(a: EncodeArgs, threads: usize) -> Result<()> {
    let mut m = RunManifest::new("encode", threads);
    create_dir(&a.out)?;
    let mut timer = Timer(BTreeMap::new());
    match (&a.bundle, &a.run, &a.features, &a.checkpoint) {
        (Some(bundle_dir), Some(run), None, None) => {
            let bundle = bundle_inputs(&mut m, bundle_dir)?;
            let (image, text) = load_run(run, &mut m)?;
            let codes = timer.time("encode", || encode_split(&bundle, &image, &text))?;
            write_codes(&a.out, &codes, &mut m)?;
        }
        (None, _, Some(features), Some(checkpoint)) => {
            let activation = parse_activation(a.activation.as_deref().unwrap_or("relu"))?;
            m.input(checkpoint)?;
            m.input(features)?;
            let net = HashNet::load(checkpoint, activation)?;
            let f = load_features(features, Some(net.d_in()))?;
            let codes = timer.time("encode", || encode_all(&net, &f))?;
            let path = a.out.join("codes.assb");
            codes.save(&path)?;
            m.output("codes", &path);
        }
        _ => {
            return Err(Error::Config(
                "encode needs either --bundle with --run, or --features with --checkpoint".into(),
            ))
        }
    }
    m.timings = timer.0;
    m.write(&a.out)
}

fn run_eval(a: EvalArgs, threads: usize) -> Result<()> {
    let mut m = RunManifest::new("eval", threads);
    let bundle = bundle_inputs(&mut m, &a.bundle)?;
    create_dir(&a.out)?;
    let mut timer = Timer(BTreeMap::new());
    let codes = match (&a.codes, &a.run) {
        (Some(dir), None) => read_codes(dir, &mut m)?,
        (None, Some(run)) => {
            let (image, text) = load_run(run, &mut m)?;
            timer.time("encode", || encode_split(&bundle, &image, &text))?
        }
        _ => return Err(Error::Config("eval needs --codes or --run".into())),
    };
    let eval = timer.time("eval", || evaluate_codes(&bundle, &codes, &EvalSettings::default()))?;
    write_eval(&a.out, &eval, &mut m)?;
    m.timings = timer.0;
    m.write(&a.out)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AblationRow {
    pub variant: Variant,
    pub i2t_map_all: f64,
    pub t2i_map_all: f64,
    pub i2t: EvalReport,
    pub t2i: EvalReport,
}

fn run_ablate(a: AblateArgs, threads: Option<usize>) -> Result<()> {
    let (cfg, files) = resolve_config(&a.cfg, threads)?;
    let mut variants = vec![Variant::Full];
    for v in a.variants.split(',').filter(|s| !s.trim().is_empty()) {
        let v: Variant = v.parse()?;
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let mut m = RunManifest::new("ablate", cfg.threads);
    for f in &files {
        m.input(f)?;
    }
    let bundle = bundle_inputs(&mut m, &a.bundle)?;
    cfg.validate_for(&bundle)?;
    if bundle.labels.is_none() {
        return Err(Error::Config("ablate needs a bundle with labels".into()));
    }
    create_dir(&a.out)?;

    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let dir = a.out.join(v.name());
        let mut sub = RunManifest::new("train", cfg.threads);
        let vcfg = v.apply(&cfg);
        let eval = train_into(&bundle, &vcfg, &dir, &mut sub)?.expect("labels checked above");
        sub.inputs = m.inputs.clone();
        sub.train_config = Some(vcfg);
        sub.write(&dir)?;
        for (stage, secs) in sub.timings {
            m.timings.insert(format!("{}.{stage}", v.name()), secs);
        }
        m.output(v.name(), &dir);
        log::info!("{}: I2T {:.4} T2I {:.4}", v.name(), eval.i2t.map_all, eval.t2i.map_all);
        rows.push(AblationRow {
            variant: v,
            i2t_map_all: eval.i2t.map_all,
            t2i_map_all: eval.t2i.map_all,
            i2t: eval.i2t,
            t2i: eval.t2i,
        });
    }
    let table = a.out.join("ablation.json");
    write_json(&table, &rows)?;
    m.output("table", &table);
    m.train_config = Some(cfg);
    m.write(&a.out)
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub fn execute(cli: Cli) -> Result<()> {
    if cli.threads == Some(0) {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    let flag = cli.threads;
    let pool = thread_pool(flag.unwrap_or(1))?;
    let threads = flag.unwrap_or(1);
    match cli.command {
        Command::Synth(a) => pool.install(|| run_synth(a, threads)),
        Command::Encode(a) => pool.install(|| run_encode(a, threads)),
        Command::Eval(a) => pool.install(|| run_eval(a, threads)),
        Command::BuildSim(a) => with_config_pool(&a.cfg.clone(), flag, |t| run_build_sim(a, t)),
        Command::Train(a) => with_config_pool(&a.cfg.clone(), flag, |t| run_train(a, t)),
        Command::Ablate(a) => with_config_pool(&a.cfg.clone(), flag, |t| run_ablate(a, t)),
    }
}

/// Runs `f` in a pool sized by the flag, or else by the resolved config.
fn with_config_pool(args: &ConfigArgs, flag: Option<usize>, f: impl FnOnce(Option<usize>) -> Result<()> + Send) -> Result<()> {
    let threads = match flag {
        Some(t) => t,
        None => resolve_config(args, None)?.0.threads,
    };
    thread_pool(threads)?.install(|| f(Some(threads)))
}

/// Single-line JSON error report.
pub fn error_line(class: &str, code: i32, message: &str) -> String {
    serde_json::json!({ "error": { "class": class, "code": code, "message": message } }).to_string()
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("config", 2, first));
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let class = e.class();
            eprintln!("{}", error_line(class.as_str(), class.exit_code(), &e.to_string()));
            class.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_args() -> ConfigArgs {
        ConfigArgs {
            profile: "paper-default".into(),
            config: None,
            sets: vec![],
            epochs: None,
            code_length: None,
            seed: None,
        }
    }

    #[test]
    fn flags_override_file_and_profile() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"epochs": 7, "Ks": 30, "weights": {"mu2": 0.5}}"#).unwrap();
        let mut a = cfg_args();
        a.profile = "desk".into();
        a.config = Some(path);
        a.sets = vec!["Ks=40".into(), "weights.beta=2".into(), "activation=tanh".into()];
        a.code_length = Some(16);
        let (cfg, files) = resolve_config(&a, Some(2)).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!((cfg.epochs, cfg.ks, cfg.kr, cfg.code_length, cfg.threads), (7, 40, 10, 16, 2));
        assert_eq!((cfg.weights.mu1, cfg.weights.mu2, cfg.weights.beta), (2.0, 0.5, 2.0));
        assert_eq!(cfg.activation, Activation::Tanh);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let mut a = cfg_args();
        a.sets = vec!["epochs=0".into()];
        assert!(matches!(resolve_config(&a, None), Err(Error::Config(_))));
        a.sets = vec!["nonsense=1".into()];
        assert!(matches!(resolve_config(&a, None), Err(Error::Config(_))));
        a.sets = vec!["noequals".into()];
        assert!(matches!(resolve_config(&a, None), Err(Error::Config(_))));
        let mut a = cfg_args();
        a.profile = "huge".into();
        assert!(matches!(resolve_config(&a, None), Err(Error::Config(_))));
    }

    #[test]
    fn error_line_is_one_json_line() {
        let line = error_line("data", 3, "malformed labels: bad\nsecond");
        assert_eq!(line.lines().count(), 1);
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"]["code"], 3);
    }

    #[test]
    fn unknown_flag_exits_2() {
        assert_eq!(main_with_args(["assph", "train", "--bogus"]), 2);
        assert_eq!(main_with_args(["assph", "--threads", "0", "eval", "--bundle", "x", "--out", "y"]), 2);
    }
}
