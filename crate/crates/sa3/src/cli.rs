//! `sa3 generate | train | eval | ablate`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{debug, info};
use sa3_core::ablation::{AblationRow, AblationTable};
use sa3_core::aiam::DomainLabel;
use sa3_core::eval::{evaluate, EvalReport};
use sa3_core::model::{AttentionMode, Model};
use sa3_core::synth::{generate_benchmark, BenchmarkConfig, DatasetManifest, Split};
use sa3_core::train::{model_config, TrainConfig, Trainer};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{read_split, write_benchmark};
use crate::error::{Error, Result};
use crate::metrics::MetricsLog;

pub const CHECKPOINT_FILE: &str = "checkpoint.sa3w";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const AP_CSV_FILE: &str = "per_class_ap.csv";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const ABLATION_JSON_FILE: &str = "ablation.json";

#[derive(Debug, Parser)]
#[command(name = "sa3", version, about = "Cross-domain detection on a synthetic two-domain benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark (train/ and test/ splits).
    Generate(GenerateArgs),
    /// Train a detector and write checkpoint, metrics and resolved config.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Compare the attention variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub train_per_domain: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Overwrite the splits of an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

/// Overrides shared by the training commands; each wins over the config file.
#[derive(Debug, Args, Default)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Comma-separated decay iterations.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on source images only with every adaptation term off.
    #[arg(long)]
    pub source_only: bool,
    #[arg(long)]
    pub log_interval: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Attention mode of the checkpoint; inferred from its tensors if absent.
    #[arg(long)]
    pub attention: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Parallel training jobs; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SA3_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    if a.classes < 2 {
        return Err(Error::validation("classes", "at least 2 classes are required"));
    }
    let cfg = BenchmarkConfig {
        seed: a.seed,
        classes: a.classes,
        train_per_domain: a.train_per_domain,
        test: a.test,
        size: a.size,
    };
    let non_empty = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !a.force {
            return Err(Error::validation(
                "out",
                format!("{} is not empty; pass --force to overwrite", a.out.display()),
            ));
        }
        for split in [Split::Train, Split::Test] {
            let p = a.out.join(split.as_str());
            if p.exists() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let (train, test) = generate_benchmark(&cfg)?;
    write_benchmark(&train, &test, &a.out)?;
    println!(
        "generated {} source + {} target train records and {} test records in {}",
        train.domain(DomainLabel::Source).count(),
        train.domain(DomainLabel::Target).count(),
        test.records.len(),
        a.out.display()
    );
    Ok(())
}

/// Config file (if any) with the schedule flags applied.
fn base_config(s: &ScheduleArgs) -> Result<RunConfig> {
    let mut rc = match &s.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = s.iters {
        rc.total_iters = n;
    }
    if let Some(m) = &s.milestones {
        rc.lr_milestones = m.clone();
    }
    Ok(rc)
}

/// Resolves the configuration a `train` invocation will run with.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = base_config(&a.schedule)?;
    if let Some(d) = &a.data {
        rc.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        rc.out = Some(o.clone());
    }
    if let Some(at) = &a.attention {
        rc.attention = at.clone();
    }
    if let Some(s) = a.seed {
        rc.seed = s;
    }
    if a.source_only {
        rc.source_only = true;
    }
    if let Some(l) = a.log_interval {
        rc.log_interval = l;
    }
    rc.train_config()?;
    Ok(rc)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let rc = resolve_train_config(a)?;
    let cfg = rc.train_config()?;
    let data_dir = rc.data.clone().ok_or_else(|| Error::validation("data", "no dataset given"))?;
    let out = rc.out.clone().ok_or_else(|| Error::validation("out", "no output directory given"))?;
    let data = read_split(&data_dir, Split::Train)?;
    create_dir(&out)?;
    write_file(&out.join(CONFIG_FILE), rc.to_json())?;

    let mpath = out.join(METRICS_FILE);
    let file = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut log = MetricsLog::new(BufWriter::new(file), rc.log_interval);
    let mut io_err = None;
    let model = {
        let mc = model_config(&data, cfg.attention_mode)?;
        let mut trainer = Trainer::new(cfg.clone(), mc)?;
        info!("training {} iterations, attention {}", cfg.total_iters, cfg.attention_mode.as_str());
        trainer.run(&data, |iter, lr, parts| match log.record(iter, lr, parts) {
            Ok(Some(line)) => debug!("iter {} total {:.4}", line.iter, line.loss_total),
            Ok(None) => {}
            Err(e) => {
                io_err.get_or_insert(e);
            }
        })?;
        trainer.model
    };
    if let Some(e) = io_err {
        return Err(Error::io(&mpath, e));
    }
    log.into_inner().map_err(|e| Error::io(&mpath, e))?;
    let cpath = out.join(CHECKPOINT_FILE);
    checkpoint::save(&cpath, &model.params.named())?;
    println!("trained {} iterations; checkpoint {}", cfg.total_iters, cpath.display());
    Ok(())
}

/// Attention mode implied by a checkpoint's tensors. A kernel of width 3
/// at a depth where the adaptive rule also gives 3 is reported as `cis`;
/// the two modes are then the same network.
pub fn infer_attention(named: &[(String, sa3_core::Tensor)], deep_channels: usize) -> Result<AttentionMode> {
    let Some((_, k)) = named.iter().find(|(n, _)| n == "attention.kernel") else {
        return Ok(AttentionMode::None);
    };
    for mode in [AttentionMode::Cis, AttentionMode::FixedK] {
        if mode.kernel_width(deep_channels)? == Some(k.len()) {
            return Ok(mode);
        }
    }
    Err(Error::validation("checkpoint", format!("attention kernel of width {} fits no mode", k.len())))
}

pub fn load_model(path: &Path, data: &DatasetManifest, attention: Option<&str>) -> Result<Model> {
    let named = checkpoint::load(path)?;
    let probe = model_config(data, AttentionMode::None)?;
    let mode = match attention {
        Some(s) => AttentionMode::parse(s).map_err(|e| Error::validation("attention", e.to_string()))?,
        None => infer_attention(&named, probe.detector.deep_channels)?,
    };
    let mc = model_config(data, mode)?;
    Model::with_params(mc, &named).map_err(|e| Error::validation("checkpoint", e.to_string()))
}

#[derive(Serialize)]
struct ReportJson {
    map: f64,
    n_images: usize,
    iou_threshold: f64,
    per_class_ap: serde_json::Map<String, serde_json::Value>,
    n_gt: serde_json::Map<String, serde_json::Value>,
}

pub fn report_json(r: &EvalReport) -> String {
    let per_class_ap = r.per_class_ap.iter().map(|c| (c.name.clone(), c.ap.into())).collect();
    let n_gt = r.per_class_ap.iter().map(|c| (c.name.clone(), c.n_gt.into())).collect();
    let j = ReportJson { map: r.map, n_images: r.n_images, iou_threshold: r.iou_threshold, per_class_ap, n_gt };
    let mut s = serde_json::to_string_pretty(&j).expect("report serializes");
    s.push('\n');
    s
}

pub fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("class,ap\n");
    for c in &r.per_class_ap {
        s.push_str(&format!("{},{}\n", c.name, c.ap));
    }
    s.push_str(&format!("mAP,{}\n", r.map));
    s
}

pub fn write_report(r: &EvalReport, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_file(&out.join(REPORT_FILE), report_json(r))?;
    write_file(&out.join(AP_CSV_FILE), report_csv(r))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let data = read_split(&a.data, Split::Test)?;
    let model = load_model(&a.checkpoint, &data, a.attention.as_deref())?;
    let report = evaluate(&model, &data)?;
    write_report(&report, &a.out)?;
    println!("mAP {:.4} over {} images", report.map, report.n_images);
    Ok(())
}

/// Trains every (variant, seed) pair on up to `workers` threads. Results
/// do not depend on the worker count.
pub fn parallel_ablation(
    base: &TrainConfig,
    train: &DatasetManifest,
    test: &DatasetManifest,
    seeds: &[u64],
    workers: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "at least one seed is required"));
    }
    let mut variants = AttentionMode::ALL.to_vec();
    variants.sort_by_key(|v| v.as_str());
    let jobs: Vec<(AttentionMode, u64)> =
        variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<sa3_core::Result<f64>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(&(variant, seed)) = jobs.get(i) else { break };
                let cfg = TrainConfig { seed, attention_mode: variant, ..base.clone() };
                let r = sa3_core::train::train(&cfg, train).and_then(|m| evaluate(&m, test)).map(|r| r.map);
                if let Ok(m) = &r {
                    info!("{} seed {seed}: mAP {m:.4}", variant.as_str());
                }
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut maps = Vec::with_capacity(jobs.len());
    for r in results {
        maps.push(r.into_inner().unwrap().expect("every job ran")?);
    }
    let rows = variants
        .iter()
        .enumerate()
        .map(|(vi, &v)| AblationRow::from_maps(v, seeds.to_vec(), maps[vi * seeds.len()..(vi + 1) * seeds.len()].to_vec()))
        .collect();
    Ok(AblationTable { rows })
}

#[derive(Serialize)]
struct AblationRowJson<'a> {
    variant: &'a str,
    seeds: &'a [u64],
    maps: &'a [f64],
    mean: f64,
    std: f64,
}

pub fn ablation_csv(t: &AblationTable) -> String {
    let mut s = String::from("variant,mean,std,runs,maps\n");
    for r in &t.rows {
        let maps: Vec<String> = r.maps.iter().map(|m| m.to_string()).collect();
        s.push_str(&format!("{},{},{},{},{}\n", r.variant.as_str(), r.mean, r.std, r.maps.len(), maps.join(";")));
    }
    s
}

pub fn ablation_json(t: &AblationTable) -> String {
    let rows: Vec<AblationRowJson> = t
        .rows
        .iter()
        .map(|r| AblationRowJson { variant: r.variant.as_str(), seeds: &r.seeds, maps: &r.maps, mean: r.mean, std: r.std })
        .collect();
    let mut s = serde_json::to_string_pretty(&serde_json::json!({ "rows": rows })).expect("table serializes");
    s.push('\n');
    s
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let rc = base_config(&a.schedule)?;
    let base = rc.train_config()?;
    let train = read_split(&a.data, Split::Train)?;
    let test = read_split(&a.data, Split::Test)?;
    let workers = a.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let table = parallel_ablation(&base, &train, &test, &a.seeds, workers)?;
    create_dir(&a.out)?;
    write_file(&a.out.join(ABLATION_CSV_FILE), ablation_csv(&table))?;
    write_file(&a.out.join(ABLATION_JSON_FILE), ablation_json(&table))?;
    for r in &table.rows {
        println!("{:<8} {:.4} ± {:.4}", r.variant.as_str(), r.mean, r.std);
    }
    Ok(())
}
