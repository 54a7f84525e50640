use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hardreid::curation::{
    assess_corpus, detect_frontal_pose, discrepancy_report, read_keypoints, select_top, Candidate, FrontalThresholds,
    GrayImage, SelectScope,
};
use hardreid::data::{load_manifest, write_manifest, Split};
use hardreid::eval::{evaluate, write_per_query_csv, EvalMode, EvalProtocol};
use hardreid::experiment::{
    ablate, run_variant, sweep, write_ablation_csv, write_curve_csv, write_equivalence_csv, write_sweep_csv,
    ExperimentConfig, Variant,
};
use hardreid::model::{embed, Checkpoint};
use hardreid::synth::GeneratedSet;
use hardreid::trainer::{write_log_csv, write_timing_csv};
use hardreid::{Error, Result};

#[derive(Parser)]
#[command(name = "hardreid", version, about = "Hard-sample-aware metric learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario (base, coarse and fine manifests).
    Synth(SynthArgs),
    /// Score keypoint/PGM corpora and select library garments and anchors.
    Curate(CurateArgs),
    /// Closed-form generation plan, with a brute-force cross-check.
    Plan(PlanArgs),
    /// Coarse pretraining plus fitting; writes logs, curve and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a query/gallery manifest.
    Eval(EvalArgs),
    /// Fine set on/off × HSAL on/off grid.
    Ablate(GridArgs),
    /// Alpha × lambda grid of trainings.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML or JSON); `default` uses the built-in preset.
    #[arg(long, alias = "scenario")]
    config: Option<String>,
    /// Override a config key, e.g. `--set train.alpha=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn path(&self) -> Option<&Path> {
        self.config.as_deref().filter(|c| *c != "default").map(Path::new)
    }

    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.path(), &self.sets)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scenario seed (offsets `scenario.seed`).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurateArgs {
    /// Manifest whose `image_ref` entries point at PGM files (relative to the manifest).
    #[arg(long)]
    manifest: PathBuf,
    /// JSON-lines keypoint file.
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_m: usize,
    #[arg(long, default_value_t = 2)]
    top_n: usize,
    #[arg(long, default_value_t = 0.7)]
    vis_min: f64,
    #[arg(long, default_value_t = 0.05)]
    eps_y: f64,
    #[arg(long, default_value_t = 0.30)]
    eps_v: f64,
    #[arg(long, default_value_t = 0.04)]
    min_interocular: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Number of identities.
    #[arg(long = "C")]
    c: u64,
    /// Library garments tried on per anchor image.
    #[arg(long)]
    m: u64,
    /// Anchor images per identity.
    #[arg(long)]
    n: u64,
    /// Per-identity image counts, comma separated.
    #[arg(long = "K", value_delimiter = ',', allow_hyphen_values = true)]
    k: Vec<i64>,
    /// Also write plan.json and discrepancy.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scenario, initialization and batch-sampling seed offset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory written by `synth`; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train on the base set only.
    #[arg(long)]
    no_fine: bool,
    /// Plain triplet loss instead of the hardness-adjusted pair.
    #[arg(long)]
    no_hsal: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "cloth_changing")]
    mode: String,
    /// Keep same-identity same-camera gallery entries.
    #[arg(long)]
    keep_same_camera: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.4")]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    lambdas: Vec<f64>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config_path: Option<String>,
    overrides: Vec<String>,
    seed: Option<u64>,
    seeds: Vec<u64>,
    version: String,
    out_dir: Option<String>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    status: String,
    exit_code: i32,
    error: Option<String>,
    outputs: Vec<String>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Collects outputs in a staging directory; they are moved into place only
/// when the command succeeds.
struct Outputs {
    stage: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let stage = out.join(format!(".partial-{}", std::process::id()));
        if stage.exists() {
            fs::remove_dir_all(&stage)?;
        }
        fs::create_dir_all(&stage)?;
        Ok(Self {
            stage,
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.stage.join(name)
    }

    fn writer(&mut self, name: &str) -> Result<BufWriter<fs::File>> {
        Ok(BufWriter::new(fs::File::create(self.path(name))?))
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(self.path(name), text + "\n")?;
        Ok(())
    }

    fn commit(self, out: &Path) -> Result<Vec<String>> {
        for f in &self.files {
            fs::rename(self.stage.join(f), out.join(f))?;
        }
        fs::remove_dir_all(&self.stage)?;
        Ok(self.files)
    }

    fn discard(self) {
        let _ = fs::remove_dir_all(&self.stage);
    }
}

struct RunInfo {
    out: Option<PathBuf>,
    config: Option<ConfigArgs>,
    seed: Option<u64>,
    seeds: Vec<u64>,
}

fn info(cmd: &Command) -> (&'static str, RunInfo) {
    let cfg = |c: &ConfigArgs| Some(c.clone());
    match cmd {
        Command::Synth(a) => (
            "synth",
            RunInfo {
                out: Some(a.out.clone()),
                config: cfg(&a.config),
                seed: Some(a.seed),
                seeds: vec![],
            },
        ),
        Command::Curate(a) => (
            "curate",
            RunInfo {
                out: Some(a.out.clone()),
                config: None,
                seed: None,
                seeds: vec![],
            },
        ),
        Command::Plan(a) => (
            "plan",
            RunInfo {
                out: a.out.clone(),
                config: None,
                seed: None,
                seeds: vec![],
            },
        ),
        Command::Train(a) => (
            "train",
            RunInfo {
                out: Some(a.out.clone()),
                config: cfg(&a.config),
                seed: Some(a.seed),
                seeds: vec![],
            },
        ),
        Command::Eval(a) => (
            "eval",
            RunInfo {
                out: Some(a.out.clone()),
                config: None,
                seed: None,
                seeds: vec![],
            },
        ),
        Command::Ablate(a) => (
            "ablate",
            RunInfo {
                out: Some(a.out.clone()),
                config: cfg(&a.config),
                seed: None,
                seeds: a.seeds.clone().unwrap_or_default(),
            },
        ),
        Command::Sweep(a) => (
            "sweep",
            RunInfo {
                out: Some(a.grid.out.clone()),
                config: cfg(&a.grid.config),
                seed: None,
                seeds: a.grid.seeds.clone().unwrap_or_default(),
            },
        ),
    }
}

fn synth(a: &SynthArgs, o: &mut Outputs) -> Result<()> {
    let exp = a.config.load()?;
    let set = exp.generate(a.seed)?;
    write_manifest(&set.base, o.path("base.jsonl"))?;
    write_manifest(&set.coarse, o.path("coarse.jsonl"))?;
    write_manifest(&set.fine, o.path("fine.jsonl"))?;
    o.json("scenario.json", &set.provenance)?;
    if set.split_warnings > 0 {
        log::warn!("{} identities excluded from query/gallery", set.split_warnings);
    }
    Ok(())
}

fn load_generated(dir: &Path, exp: &ExperimentConfig, seed: u64) -> Result<GeneratedSet> {
    let base = load_manifest(dir.join("base.jsonl"))?;
    let coarse = load_manifest(dir.join("coarse.jsonl"))?;
    let fine = load_manifest(dir.join("fine.jsonl"))?;
    let mut provenance = exp.scenario_for(seed);
    let scenario = dir.join("scenario.json");
    if scenario.exists() {
        provenance = serde_json::from_str(&fs::read_to_string(scenario)?)?;
    }
    provenance.feature_dim = base
        .feature_dim()
        .ok_or_else(|| Error::Validation("base manifest has no feature vectors".into()))?;
    Ok(GeneratedSet {
        base,
        coarse,
        fine,
        provenance,
        split_warnings: 0,
    })
}

fn train(a: &TrainArgs, o: &mut Outputs) -> Result<()> {
    let exp = a.config.load()?;
    let set = match &a.data {
        Some(dir) => load_generated(dir, &exp, a.seed)?,
        None => exp.generate(a.seed)?,
    };
    let variant = Variant {
        with_fine: !a.no_fine,
        hsal: !a.no_hsal,
    };
    let run = run_variant(&exp, &set, a.seed, variant, &exp.train, true)?;
    write_log_csv(&run.pretrain_log, o.writer("pretrain_log.csv")?)?;
    write_log_csv(&run.log, o.writer("train_log.csv")?)?;
    write_timing_csv(&run.log, o.writer("timing.csv")?)?;
    write_curve_csv(&run.curve, o.writer("curve.csv")?)?;
    Checkpoint {
        config: run.net.clone(),
        params: run.params.clone(),
    }
    .save(o.path("checkpoint.json"))?;
    o.json("config.json", &exp)?;
    o.json("final_metrics.json", &run.final_metrics())?;
    Ok(())
}

fn eval(a: &EvalArgs, o: &mut Outputs) -> Result<()> {
    let mode: EvalMode = a.mode.parse()?;
    let protocol = EvalProtocol {
        mode,
        exclude_same_camera: !a.keep_same_camera,
    };
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_manifest(&a.manifest)?;
    let pick = |split: Split| -> Result<(Vec<hardreid::data::Sample>, ndarray::Array2<f64>)> {
        let samples: Vec<_> = ds.samples().iter().filter(|s| s.split == split).cloned().collect();
        let dim = ckpt.config.input_dim;
        let mut x = ndarray::Array2::zeros((samples.len(), dim));
        for (r, s) in samples.iter().enumerate() {
            let f = s
                .features
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("sample {:?} has no features", s.sample_id)))?;
            if f.len() != dim {
                return Err(Error::Validation(format!(
                    "sample {:?} has {} features, checkpoint expects {dim}",
                    s.sample_id,
                    f.len()
                )));
            }
            x.row_mut(r).assign(&ndarray::ArrayView1::from(f.as_slice()));
        }
        Ok((samples, embed(&ckpt.config, &ckpt.params, x.view())?))
    };
    let (q, qe) = pick(Split::Query)?;
    let (g, ge) = pick(Split::Gallery)?;
    let out = evaluate(qe.view(), ge.view(), &q, &g, &protocol)?;
    o.json("report.json", &out.report)?;
    write_per_query_csv(&out.per_query, o.writer("per_query_ap.csv")?)?;
    Ok(())
}

fn with_seeds(a: &GridArgs) -> Result<ExperimentConfig> {
    let mut exp = a.config.load()?;
    if let Some(seeds) = &a.seeds {
        exp.seeds = seeds.clone();
    }
    exp.validate()?;
    Ok(exp)
}

fn ablate_cmd(a: &GridArgs, o: &mut Outputs) -> Result<()> {
    let exp = with_seeds(a)?;
    let table = ablate(&exp)?;
    write_ablation_csv(&table.rows, o.writer("ablation.csv")?)?;
    write_ablation_csv(&table.per_seed, o.writer("ablation_per_seed.csv")?)?;
    o.json("config.json", &exp)?;
    Ok(())
}

fn sweep_cmd(a: &SweepArgs, o: &mut Outputs) -> Result<()> {
    let exp = with_seeds(&a.grid)?;
    let result = sweep(&exp, &a.alphas, &a.lambdas)?;
    write_sweep_csv(&result, o.writer("sweep.csv")?)?;
    write_equivalence_csv(&result.equivalence, o.writer("alpha0_equivalence.csv")?)?;
    o.json("config.json", &exp)?;
    Ok(())
}

fn curate(a: &CurateArgs, o: &mut Outputs) -> Result<()> {
    let thresholds = FrontalThresholds {
        vis_min: a.vis_min,
        eps_y: a.eps_y,
        eps_v: a.eps_v,
        min_interocular: a.min_interocular,
    };
    let ds = load_manifest(&a.manifest)?;
    let root = a.manifest.parent().unwrap_or(Path::new("."));
    let keypoints: BTreeMap<String, _> = read_keypoints(&a.keypoints)?
        .into_iter()
        .map(|k| (k.sample_id.clone(), k))
        .collect();
    let mut images = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        let rel = s
            .image_ref
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("sample {:?} has no image_ref", s.sample_id)))?;
        images.push(GrayImage::read_pgm(root.join(rel))?);
    }
    let quality = assess_corpus(&images);
    let mut candidates = Vec::with_capacity(ds.len());
    for (s, q) in ds.samples().iter().zip(quality) {
        let rec = keypoints
            .get(&s.sample_id)
            .ok_or_else(|| Error::Validation(format!("no keypoints for sample {:?}", s.sample_id)))?;
        let pose = detect_frontal_pose(rec, &thresholds)?;
        candidates.push(Candidate {
            sample_id: s.sample_id.clone(),
            identity: s.identity,
            pose_pass: pose.pass,
            pose_score: pose.score,
            quality: q,
        });
    }
    let mut w = csv::Writer::from_writer(o.writer("scores.csv")?);
    w.write_record([
        "sample_id",
        "identity",
        "pose_pass",
        "pose_score",
        "resolution",
        "sharpness",
        "composite",
    ])?;
    for c in &candidates {
        w.write_record([
            c.sample_id.clone(),
            c.identity.to_string(),
            c.pose_pass.to_string(),
            c.pose_score.to_string(),
            c.quality.resolution.to_string(),
            c.quality.sharpness.to_string(),
            c.quality.composite.to_string(),
        ])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Selection {
        garment_library: Vec<String>,
        anchors: Vec<String>,
    }
    o.json(
        "selection.json",
        &Selection {
            garment_library: select_top(&candidates, a.top_m, SelectScope::GlobalTopM),
            anchors: select_top(&candidates, a.top_n, SelectScope::PerIdentityTopN),
        },
    )?;
    Ok(())
}

fn plan(a: &PlanArgs, o: Option<&mut Outputs>) -> Result<()> {
    let report = discrepancy_report(a.c, a.m, a.n, &a.k)?;
    println!("{}", serde_json::to_string_pretty(&report.plan)?);
    if let Some(o) = o {
        o.json("plan.json", &report.plan)?;
        o.json("discrepancy.json", &report)?;
    }
    Ok(())
}

fn dispatch(cmd: &Command, o: Option<&mut Outputs>) -> Result<()> {
    if let Command::Plan(a) = cmd {
        return plan(a, o);
    }
    let o = o.ok_or_else(|| Error::Config("--out is required".into()))?;
    match cmd {
        Command::Synth(a) => synth(a, o),
        Command::Curate(a) => curate(a, o),
        Command::Plan(_) => unreachable!(),
        Command::Train(a) => train(a, o),
        Command::Eval(a) => eval(a, o),
        Command::Ablate(a) => ablate_cmd(a, o),
        Command::Sweep(a) => sweep_cmd(a, o),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let started = now_ms();
    let (name, run) = info(&cli.command);

    let mut outputs = match run.out.as_deref().map(Outputs::new).transpose() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = dispatch(&cli.command, outputs.as_mut());
    let (status, code, error, files) = match (result, outputs) {
        (Ok(()), Some(o)) => match o.commit(run.out.as_deref().expect("outputs imply --out")) {
            Ok(files) => ("ok", 0, None, files),
            Err(e) => ("error", e.exit_code(), Some(e.to_string()), vec![]),
        },
        (Ok(()), None) => ("ok", 0, None, vec![]),
        (Err(e), o) => {
            if let Some(o) = o {
                o.discard();
            }
            ("error", e.exit_code(), Some(e.to_string()), vec![])
        }
    };
    if let Some(err) = &error {
        eprintln!("error: {err}");
    }
    if let Some(out) = &run.out {
        let manifest = RunManifest {
            command: name.to_string(),
            argv,
            config_path: run.config.as_ref().and_then(|c| c.config.clone()),
            overrides: run.config.as_ref().map(|c| c.sets.clone()).unwrap_or_default(),
            seed: run.seed,
            seeds: run.seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
            out_dir: Some(out.display().to_string()),
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            status: status.to_string(),
            exit_code: code,
            error,
            outputs: files,
        };
        let written = serde_json::to_string_pretty(&manifest)
            .map_err(Error::from)
            .and_then(|text| fs::write(out.join("run_manifest.json"), text + "\n").map_err(Error::from));
        if let Err(e) = written {
            eprintln!("error: could not write run manifest: {e}");
        }
    }
    ExitCode::from(code as u8)
}
