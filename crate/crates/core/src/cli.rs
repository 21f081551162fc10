//! Command-line interface. [`run`] maps outcomes to exit codes:
//! 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::PerturbMode;
use crate::checkpoint::Checkpoint;
use crate::compare::{self, RunResult};
use crate::config::{self, parse_config, parse_epsilon, resolve_train, train_keys, TRAIN_KEYS};
use crate::convergence::{self, ConvexInstance, GapConfig, InstanceSpec};
use crate::data::{self, generate, GroupedDataset, Split, SpuriousSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detailed, MetricsReport};
use crate::rng::RngState;
use crate::trainers::{train, Method, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "advgdro", version, about = "Adversarial group DRO and baselines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic spurious-correlation dataset.
    GenData(GenDataArgs),
    /// Train one method.
    Train(TrainArgs),
    /// Train every method on one dataset, or compare finished runs.
    Compare(CompareArgs),
    /// Measure the suboptimality of the average iterate on a convex instance.
    Convergence(ConvergenceArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, default_value = "waterbirds-analog")]
    pub preset: String,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub core_strength: Option<f64>,
    #[arg(long)]
    pub spurious_strength: Option<f64>,
    #[arg(long)]
    pub core_dims: Option<usize>,
    #[arg(long)]
    pub spurious_dims: Option<usize>,
    #[arg(long)]
    pub noise_dims: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training keys settable from the command line; they override the config file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub eta_theta: Option<String>,
    #[arg(long)]
    pub eta_q: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub pgd_steps: Option<String>,
    #[arg(long)]
    pub eta_delta: Option<String>,
    #[arg(long)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub perturb_mode: Option<String>,
    #[arg(long)]
    pub normalize_group_weight: Option<String>,
    #[arg(long)]
    pub clamp_domain: Option<String>,
    #[arg(long)]
    pub sampling: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub eval_every: Option<String>,
    #[arg(long)]
    pub eval_eps: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub activation: Option<String>,
}

impl TrainFlags {
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let pairs = [
            ("method", &self.method),
            ("steps", &self.steps),
            ("batch_size", &self.batch_size),
            ("eta_theta", &self.eta_theta),
            ("eta_q", &self.eta_q),
            ("eps", &self.eps),
            ("pgd_steps", &self.pgd_steps),
            ("eta_delta", &self.eta_delta),
            ("sigma", &self.sigma),
            ("perturb_mode", &self.perturb_mode),
            ("normalize_group_weight", &self.normalize_group_weight),
            ("clamp_domain", &self.clamp_domain),
            ("sampling", &self.sampling),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("eval_eps", &self.eval_eps),
            ("momentum", &self.momentum),
            ("hidden", &self.hidden),
            ("activation", &self.activation),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Directory holding train.csv, val.csv and test.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Flat `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    /// Dataset directory to train every method on.
    #[arg(long, conflicts_with = "runs")]
    pub data: Option<PathBuf>,
    /// Finished run directories to compare instead of training.
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ConvergenceArgs {
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    #[arg(long, default_value_t = 100)]
    pub per_group: usize,
    #[arg(long, default_value = "0.05")]
    pub eps: String,
    #[arg(long, default_value_t = 1.0)]
    pub b_theta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated run lengths.
    #[arg(long, default_value = "100,1000,10000")]
    pub t: String,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1.0)]
    pub theta_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub q_rate: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub pgd_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub invocation: Command,
    pub resolved: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&read(path)?),
    })
}

/// Output directory that records the digest of every file written.
struct Outputs {
    dir: PathBuf,
    files: Vec<FileDigest>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        self.files.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(contents),
        });
        Ok(())
    }

    fn finish(mut self, invocation: Command, resolved: serde_json::Value, seed: u64, inputs: Vec<FileDigest>, started: u64) -> Result<()> {
        let id_src = serde_json::to_string(&(&resolved, &inputs)).map_err(|e| Error::Io(e.to_string()))?;
        let manifest = RunManifest {
            run_id: sha256_hex(id_src.as_bytes())[..16].to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            invocation,
            resolved,
            seed,
            inputs,
            outputs: std::mem::take(&mut self.files),
            started_unix: started,
            finished_unix: now(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Io(e.to_string()))
}

/// Parses `argv` (including the program name), runs it, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Convergence(a) => cmd_convergence(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

pub fn gen_data_spec(a: &GenDataArgs) -> Result<SpuriousSpec> {
    if a.preset != "waterbirds-analog" {
        return Err(Error::Config(format!("unknown preset `{}`", a.preset)));
    }
    if !(a.scale > 0.0) || !a.scale.is_finite() {
        return Err(Error::Config(format!("scale must be > 0, got {}", a.scale)));
    }
    let mut spec = SpuriousSpec::waterbirds_analog(a.scale, a.seed);
    if let Some(v) = a.core_strength {
        spec.core_strength = v;
    }
    if let Some(v) = a.spurious_strength {
        spec.spurious_strength = v;
    }
    if let Some(v) = a.core_dims {
        spec.core_dims = v;
    }
    if let Some(v) = a.spurious_dims {
        spec.spurious_dims = v;
    }
    if let Some(v) = a.noise_dims {
        spec.noise_dims = v;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let started = now();
    let spec = gen_data_spec(&a)?;
    let splits = generate(&spec)?;
    let mut out = Outputs::new(&a.out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let ds = splits.get(split);
        let manifest = data::DatasetManifest {
            n: ds.len(),
            d: ds.dim(),
            classes: ds.num_classes,
            groups: ds.num_groups,
            split,
            generator: Some(spec.clone()),
        };
        out.write(&format!("{split}.csv"), ds.to_csv().as_bytes())?;
        out.write(&format!("{split}.manifest"), manifest.to_text().as_bytes())?;
    }
    let seed = spec.seed;
    out.finish(Command::GenData(a), to_value(&spec)?, seed, Vec::new(), started)
}

struct LoadedData {
    train: GroupedDataset,
    val: GroupedDataset,
    test: GroupedDataset,
    inputs: Vec<FileDigest>,
    test_sha256: String,
}

fn load_data(dir: &Path) -> Result<LoadedData> {
    let dir = absolute(dir)?;
    let mut inputs = Vec::new();
    let mut get = |name: &str| -> Result<GroupedDataset> {
        let p = dir.join(format!("{name}.csv"));
        inputs.push(digest(&p)?);
        data::load(&p)
    };
    let train = get("train")?;
    let val = get("val")?;
    let test = get("test")?;
    let test_sha256 = inputs[2].sha256.clone();
    Ok(LoadedData {
        train,
        val,
        test,
        inputs,
        test_sha256,
    })
}

fn resolved_keys(config: Option<&Path>, flags: &TrainFlags, inputs: &mut Vec<FileDigest>) -> Result<BTreeMap<String, String>> {
    let file = match config {
        Some(p) => {
            let p = &absolute(p)?;
            let bytes = read(p)?;
            inputs.push(digest(p)?);
            let text = String::from_utf8(bytes).map_err(|_| Error::Config("config file is not UTF-8".into()))?;
            parse_config(&text, TRAIN_KEYS)?
        }
        None => BTreeMap::new(),
    };
    Ok(config::layer(&file, &flags.to_kv()))
}

/// Summary written next to every trained run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub method: Method,
    pub mode: Option<PerturbMode>,
    pub config: TrainConfig,
    pub selected_step: usize,
    pub selection_metric: Option<f64>,
    pub test: MetricsReport,
    pub test_sha256: String,
    pub final_q: Option<Vec<f64>>,
}

/// Trains `cfg`, evaluates the selected model on the test split, and writes
/// the run files under `prefix` in `out`.
fn train_and_record(cfg: &TrainConfig, d: &LoadedData, out: &mut Outputs, prefix: &str) -> Result<RunResult> {
    let rec = train(cfg, &d.train, Some(&d.val))?;
    let mode = cfg.attack.map(|a| a.mode);
    let label = compare::label(cfg.method, mode);
    let selected = rec.selected_params();
    let mut rng = RngState::derived(cfg.seed, "test");
    let ev = evaluate_detailed(selected, &d.test, Some(&cfg.eval_attack), &mut rng)?;
    ev.report.check_identities()?;
    for e in &rec.evals {
        e.report.check_identities()?;
    }

    out.write(&format!("{prefix}steps.csv"), rec.steps_csv().as_bytes())?;
    out.write(&format!("{prefix}evals.csv"), rec.evals_csv().as_bytes())?;
    let best_step = rec.best.as_ref().map_or(cfg.total_steps, |b| b.step);
    let best = Checkpoint::new(cfg.seed, best_step, rec.best.as_ref().map(|b| b.metric), selected.clone(), None);
    out.write(&format!("{prefix}best.ckpt"), best.to_text().as_bytes())?;
    let last = Checkpoint::new(cfg.seed, cfg.total_steps, None, rec.final_params.clone(), rec.final_weights.as_ref());
    out.write(&format!("{prefix}final.ckpt"), last.to_text().as_bytes())?;
    let mut preds = String::from("row,group,label,clean_pred,adv_pred\n");
    for i in 0..d.test.len() {
        preds.push_str(&format!(
            "{i},{},{},{},{}\n",
            d.test.groups[i], d.test.labels[i], ev.clean_pred[i], ev.adv_pred[i]
        ));
    }
    out.write(&format!("{prefix}test_predictions.csv"), preds.as_bytes())?;
    let summary = RunSummary {
        label: label.clone(),
        method: cfg.method,
        mode,
        config: cfg.clone(),
        selected_step: best_step,
        selection_metric: rec.best.as_ref().map(|b| b.metric),
        test: ev.report.clone(),
        test_sha256: d.test_sha256.clone(),
        final_q: rec.final_weights.as_ref().map(|w| w.q().to_vec()),
    };
    out.write(&format!("{prefix}summary.json"), &json(&summary)?)?;

    Ok(RunResult {
        label,
        method: cfg.method,
        mode,
        test: ev.report,
        labels: d.test.labels.clone(),
        groups: d.test.groups.clone(),
        clean_pred: ev.clean_pred,
        adv_pred: ev.adv_pred,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = now();
    let mut inputs = Vec::new();
    let kv = resolved_keys(a.config.as_deref(), &a.flags, &mut inputs)?;
    let cfg = resolve_train(&kv)?;
    let d = load_data(&a.data)?;
    inputs.splice(0..0, d.inputs.iter().cloned());
    let mut out = Outputs::new(&a.out)?;
    out.write("config.txt", config::to_text(&train_keys(&cfg)).as_bytes())?;
    let r = train_and_record(&cfg, &d, &mut out, "")?;
    println!(
        "{}: test average {:.4} robust {:.4} robust-adv {:.4}",
        r.label, r.test.average_acc, r.test.robust_acc, r.test.robust_adv_acc
    );
    let seed = cfg.seed;
    let mut invocation = a.clone();
    invocation.data = absolute(&a.data)?;
    invocation.config = a.config.as_deref().map(absolute).transpose()?;
    out.finish(Command::Train(invocation), to_value(&cfg)?, seed, inputs, started)
}

/// Resolved configurations of a full comparison, in [`compare::STANDARD_SET`] order.
pub fn compare_configs(shared: &BTreeMap<String, String>) -> Result<Vec<TrainConfig>> {
    for k in ["method", "perturb_mode"] {
        if shared.contains_key(k) {
            return Err(Error::Config(format!("`{k}` is chosen by compare and cannot be set")));
        }
    }
    let attack_keys = ["eps", "pgd_steps", "eta_delta", "sigma", "normalize_group_weight", "clamp_domain"];
    let dro_keys = ["eta_q", "sampling"];
    let eval_eps = match (shared.get("eval_eps"), shared.get("eps")) {
        (Some(e), _) | (None, Some(e)) => parse_epsilon(e)?.to_string(),
        (None, None) => (2.0f64 / 255.0).to_string(),
    };
    compare::STANDARD_SET
        .iter()
        .map(|&(method, mode)| {
            let mut kv: BTreeMap<String, String> = shared
                .iter()
                .filter(|(k, _)| {
                    (method.is_adversarial() || !attack_keys.contains(&k.as_str()))
                        && (method.is_dro() || !dro_keys.contains(&k.as_str()))
                })
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            kv.insert("method".into(), method.to_string());
            if let Some(m) = mode {
                kv.insert("perturb_mode".into(), m.to_string());
            }
            kv.insert("eval_eps".into(), eval_eps.clone());
            resolve_train(&kv)
        })
        .collect()
}

/// Results of [`run_comparison`].
pub struct Comparison {
    pub results: Vec<RunResult>,
    pub configs: Vec<TrainConfig>,
    pub outputs: Vec<FileDigest>,
    pub inputs: Vec<FileDigest>,
}

/// Trains the standard set on `data_dir` and writes every comparison file to `out_dir`.
pub fn run_comparison(data_dir: &Path, shared: &BTreeMap<String, String>, out_dir: &Path) -> Result<Comparison> {
    let cfgs = compare_configs(shared)?;
    let d = load_data(data_dir)?;
    let runs: Vec<(RunResult, Outputs)> = cfgs
        .par_iter()
        .map(|cfg| {
            let label = compare::label(cfg.method, cfg.attack.map(|a| a.mode));
            let mut o = Outputs {
                dir: out_dir.to_path_buf(),
                files: Vec::new(),
            };
            fs::create_dir_all(out_dir)?;
            let r = train_and_record(cfg, &d, &mut o, &format!("runs/{label}/"))?;
            Ok((r, o))
        })
        .collect::<Result<_>>()?;
    let mut out = Outputs::new(out_dir)?;
    let mut results = Vec::new();
    for (r, o) in runs {
        out.files.extend(o.files);
        results.push(r);
    }
    write_comparison(&mut out, &results, true)?;
    Ok(Comparison {
        results,
        configs: cfgs,
        outputs: out.files,
        inputs: d.inputs,
    })
}

fn write_comparison(out: &mut Outputs, results: &[RunResult], standard: bool) -> Result<()> {
    let (deltas, corrections) = if standard {
        out.write("table.csv", compare::table_csv(results).as_bytes())?;
        compare::standard_pairs(results)?
    } else {
        out.write("table.csv", compare::runs_table_csv(results).as_bytes())?;
        compare::all_pairs(results)?
    };
    out.write("deltas.csv", compare::deltas_csv(&deltas).as_bytes())?;
    out.write("corrections.csv", compare::corrections_csv(&corrections).as_bytes())?;
    Ok(())
}

/// Loads a finished run written by `train` or `compare`.
pub fn load_run(dir: &Path) -> Result<(RunResult, String)> {
    let s: RunSummary = serde_json::from_slice(&read(&dir.join("summary.json"))?)
        .map_err(|e| Error::Comparison(format!("{}: bad summary: {e}", dir.display())))?;
    let text = String::from_utf8(read(&dir.join("test_predictions.csv"))?)
        .map_err(|_| Error::Comparison("predictions are not UTF-8".into()))?;
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut clean = Vec::new();
    let mut adv = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<usize> = line
            .split(',')
            .map(|v| v.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Comparison(format!("{}: bad prediction line {}", dir.display(), i + 1)))?;
        if f.len() != 5 || f[0] != i - 1 {
            return Err(Error::Comparison(format!("{}: bad prediction line {}", dir.display(), i + 1)));
        }
        groups.push(f[1]);
        labels.push(f[2]);
        clean.push(f[3]);
        adv.push(f[4]);
    }
    Ok((
        RunResult {
            label: s.label,
            method: s.method,
            mode: s.mode,
            test: s.test,
            labels,
            groups,
            clean_pred: clean,
            adv_pred: adv,
        },
        s.test_sha256,
    ))
}

/// Compares finished runs; all must share one test set.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Vec<RunResult>> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare --runs needs at least two runs".into()));
    }
    let loaded: Vec<(RunResult, String)> = dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let first = &loaded[0].1;
    if let Some((i, _)) = loaded.iter().enumerate().find(|(_, (_, h))| h != first) {
        return Err(Error::Comparison(format!(
            "run {} used a different test set than run {}",
            dirs[i].display(),
            dirs[0].display()
        )));
    }
    Ok(loaded.into_iter().map(|(r, _)| r).collect())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let started = now();
    let mut invocation = a.clone();
    invocation.config = a.config.as_deref().map(absolute).transpose()?;
    invocation.data = a.data.as_deref().map(absolute).transpose()?;
    invocation.runs = a.runs.iter().map(|p| absolute(p)).collect::<Result<_>>()?;
    if !a.runs.is_empty() {
        let results = compare_runs(&a.runs)?;
        let mut out = Outputs::new(&a.out)?;
        write_comparison(&mut out, &results, false)?;
        let inputs = a
            .runs
            .iter()
            .flat_map(|d| [d.join("summary.json"), d.join("test_predictions.csv")])
            .map(|p| digest(&absolute(&p)?))
            .collect::<Result<_>>()?;
        let labels: Vec<&str> = results.iter().map(|r| r.label.as_str()).collect();
        return out.finish(Command::Compare(invocation), to_value(&labels)?, 0, inputs, started);
    }
    let data_dir = a
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("compare needs --data or --runs".into()))?;
    let mut inputs = Vec::new();
    let shared = resolved_keys(a.config.as_deref(), &a.flags, &mut inputs)?;
    let c = run_comparison(data_dir, &shared, &a.out)?;
    for r in &c.results {
        println!(
            "{:>15}: average {:.4} adversarial {:.4} robust {:.4} robust-adv {:.4}",
            r.label, r.test.average_acc, r.test.adversarial_acc, r.test.robust_acc, r.test.robust_adv_acc
        );
    }
    inputs.splice(0..0, c.inputs);
    let mut out = Outputs::new(&a.out)?;
    out.files = c.outputs;
    let seed = c.configs.first().map_or(0, |c| c.seed);
    out.finish(Command::Compare(invocation), to_value(&c.configs)?, seed, inputs, started)
}

pub fn parse_grid(s: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("bad T value `{t}`")))
        })
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config("empty T grid".into()));
    }
    Ok(v)
}

/// Pass/fail view of a convergence report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub report: convergence::ConvergenceReport,
    pub bound_ok: Vec<bool>,
    pub median_inversions: usize,
    pub loglog_slope: Option<f64>,
    pub instance: InstanceSpec,
    pub gap_config: GapConfig,
}

fn cmd_convergence(a: ConvergenceArgs) -> Result<()> {
    let started = now();
    let spec = InstanceSpec {
        groups: a.m,
        per_group: a.per_group,
        epsilon: parse_epsilon(&a.eps)?,
        b_theta: a.b_theta,
        noise: a.noise,
        seed: a.seed,
    };
    let ts = parse_grid(&a.t)?;
    if a.replicates == 0 || a.batch_size == 0 {
        return Err(Error::Config("replicates and batch size must be positive".into()));
    }
    let inst = ConvexInstance::synthetic(&spec).map_err(|e| Error::Config(e.to_string()))?;
    let gap = GapConfig {
        theta_rate: a.theta_rate,
        q_rate: a.q_rate,
        batch_size: a.batch_size,
        pgd_steps: a.pgd_steps,
        seed: a.seed,
        corrupt_skip_renormalize: false,
    };
    let report = convergence::run_report(&inst, &gap, &ts, a.replicates)?;
    let summary = ConvergenceSummary {
        bound_ok: convergence::check_bound(&report),
        median_inversions: convergence::inversions(&report.medians()),
        loglog_slope: report.slope().ok(),
        report,
        instance: spec.clone(),
        gap_config: gap,
    };
    let mut out = Outputs::new(&a.out)?;
    out.write("convergence.csv", summary.report.to_csv().as_bytes())?;
    out.write("convergence.json", &json(&summary)?)?;
    for (row, ok) in summary.report.rows.iter().zip(&summary.bound_ok) {
        println!(
            "T={:>7} eps_T={:.6} bound={:.6} {}",
            row.t,
            row.epsilon_t_mean,
            row.bound,
            if *ok { "pass" } else { "FAIL" }
        );
    }
    let converged = summary.report.oracle_converged;
    let all_ok = summary.bound_ok.iter().all(|&b| b);
    out.finish(Command::Convergence(a), to_value(&(&spec, &summary.gap_config))?, spec.seed, Vec::new(), started)?;
    if !converged {
        return Err(Error::Numeric(format!(
            "minimax oracle did not converge (certificate {:e}); report flagged",
            summary.report.oracle_certificate
        )));
    }
    if !all_ok {
        return Err(Error::Numeric("mean gap exceeded the analytic bound".into()));
    }
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let m: RunManifest = serde_json::from_slice(&read(&a.manifest)?)
        .map_err(|e| Error::Config(format!("bad manifest: {e}")))?;
    for input in &m.inputs {
        let now = digest(Path::new(&input.path))?;
        if now.sha256 != input.sha256 {
            return Err(Error::Data(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let invocation = match m.invocation {
        Command::GenData(mut x) => {
            x.out = a.out;
            Command::GenData(x)
        }
        Command::Train(mut x) => {
            x.out = a.out;
            Command::Train(x)
        }
        Command::Compare(mut x) => {
            x.out = a.out;
            Command::Compare(x)
        }
        Command::Convergence(mut x) => {
            x.out = a.out;
            Command::Convergence(x)
        }
        Command::Replay(_) => return Err(Error::Config("manifest records a replay".into())),
    };
    execute(invocation)
}
