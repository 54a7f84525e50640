//! End-to-end runs on synthetic scenarios: single trainings with accuracy
//! curves, the fine-set × HSAL ablation grid and the α × λ sweep.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_splits, EvalMode, EvalProtocol, EvalReport};
use crate::model::{embed, init_params, NetConfig, NetParams};
use crate::synth::{generate_scenario, GeneratedSet, ScenarioConfig};
use crate::trainer::{fit_with_observer, pretrain_coarse, ClassMap, TrainConfig, TrainLogRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    /// `input_dim` and `num_classes` are taken from the scenario.
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Each seed offsets the scenario, initialization and batch seeds.
    pub seeds: Vec<u64>,
}

/// The reference desk-scale experiment: a wider network and a faster
/// optimizer than the bare trainer defaults, so 50 epochs reach a plateau.
impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            net: NetConfig {
                hidden_dims: vec![128],
                embed_dim: 32,
                ..NetConfig::default()
            },
            train: TrainConfig {
                lr: 0.01,
                batches_per_epoch: 24,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Parse a TOML or JSON file (chosen by extension; TOML otherwise).
    /// Keys present in the file override [`ExperimentConfig::default`],
    /// including individual keys of nested tables.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(Some(path.as_ref()), &[])
    }

    /// Optional config file, then `section.key=value` overrides, on top of
    /// the defaults. Values are parsed as TOML literals, falling back to strings.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut merged = serde_json::to_value(Self::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            let overrides: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            } else {
                toml::from_str(&text)?
            };
            overlay(&mut merged, overrides);
        }
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not key=value")))?;
            let value = toml::from_str::<serde_json::Value>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.get_mut("v").map(serde_json::Value::take))
                .unwrap_or_else(|| serde_json::Value::String(raw.to_string()));
            let patch = key
                .split('.')
                .rev()
                .fold(value, |acc, part| serde_json::json!({ part: acc }));
            overlay(&mut merged, patch);
        }
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario_for(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.scenario.seed.wrapping_add(seed),
            ..self.scenario.clone()
        }
    }

    pub fn generate(&self, seed: u64) -> Result<GeneratedSet> {
        generate_scenario(&self.scenario_for(seed))
    }
}

fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub with_fine: bool,
    pub hsal: bool,
}

impl Variant {
    pub const GRID: [Variant; 4] = [
        Variant {
            with_fine: false,
            hsal: false,
        },
        Variant {
            with_fine: false,
            hsal: true,
        },
        Variant {
            with_fine: true,
            hsal: false,
        },
        Variant {
            with_fine: true,
            hsal: true,
        },
    ];

    pub fn name(&self) -> &'static str {
        match (self.with_fine, self.hsal) {
            (false, false) => "baseline",
            (false, true) => "+HSAL",
            (true, false) => "+fine",
            (true, true) => "+fine+HSAL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cc_rank1: Option<f64>,
    pub cc_map: Option<f64>,
    pub sc_rank1: Option<f64>,
    pub sc_map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub variant: Variant,
    /// One entry per epoch when tracked, otherwise only the last epoch.
    pub curve: Vec<EpochMetrics>,
    pub log: Vec<TrainLogRow>,
    pub pretrain_log: Vec<TrainLogRow>,
    pub params: NetParams,
    pub net: NetConfig,
}

impl RunResult {
    pub fn final_metrics(&self) -> EpochMetrics {
        *self.curve.last().expect("at least one epoch is evaluated")
    }
}

/// Query/gallery features as one matrix, in sample order.
fn features_of(ds: &Dataset) -> Result<ndarray::Array2<f64>> {
    let dim = ds
        .feature_dim()
        .ok_or_else(|| Error::Validation("evaluation set has no features".into()))?;
    let mut x = ndarray::Array2::zeros((ds.len(), dim));
    for (r, s) in ds.samples().iter().enumerate() {
        let f = s
            .features
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("sample {:?} has no features", s.sample_id)))?;
        x.row_mut(r).assign(&ndarray::ArrayView1::from(f.as_slice()));
    }
    Ok(x)
}

pub struct Evaluator {
    eval_set: Dataset,
    features: ndarray::Array2<f64>,
}

impl Evaluator {
    pub fn new(eval_set: Dataset) -> Result<Self> {
        if !eval_set.samples().iter().any(|s| s.split == Split::Query) {
            return Err(Error::Validation("evaluation set has no queries".into()));
        }
        let features = features_of(&eval_set)?;
        Ok(Self { eval_set, features })
    }

    pub fn report(&self, net: &NetConfig, params: &NetParams, mode: EvalMode) -> Result<EvalReport> {
        let emb = embed(net, params, self.features.view())?;
        Ok(evaluate_splits(self.eval_set.samples(), emb.view(), &EvalProtocol::new(mode))?.report)
    }

    pub fn metrics(&self, epoch: usize, net: &NetConfig, params: &NetParams) -> Result<EpochMetrics> {
        let emb = embed(net, params, self.features.view())?;
        let cc = evaluate_splits(
            self.eval_set.samples(),
            emb.view(),
            &EvalProtocol::new(EvalMode::ClothChanging),
        )?
        .report;
        let sc = evaluate_splits(
            self.eval_set.samples(),
            emb.view(),
            &EvalProtocol::new(EvalMode::SameClothes),
        )?
        .report;
        Ok(EpochMetrics {
            epoch,
            cc_rank1: cc.rank1(),
            cc_map: cc.map_score,
            sc_rank1: sc.rank1(),
            sc_map: sc.map_score,
        })
    }
}

/// Train one variant on a generated scenario. Coarse pretraining always
/// uses `exp.train`; `train` only governs the main phase.
pub fn run_variant(
    exp: &ExperimentConfig,
    set: &GeneratedSet,
    seed: u64,
    variant: Variant,
    train: &TrainConfig,
    track_curve: bool,
) -> Result<RunResult> {
    let base_train = set.base.subset(Split::Train)?;
    let classes = ClassMap::from_dataset(&base_train);
    let net = NetConfig {
        input_dim: set.provenance.feature_dim,
        num_classes: classes.num_classes(),
        init_seed: exp.net.init_seed.wrapping_add(seed),
        ..exp.net.clone()
    };
    let train = TrainConfig {
        hsal_enabled: variant.hsal,
        seed: train.seed.wrapping_add(seed),
        ..train.clone()
    };
    let pretrain = TrainConfig {
        hsal_enabled: false,
        seed: exp.train.seed.wrapping_add(seed),
        ..exp.train.clone()
    };
    let evaluator = Evaluator::new(set.eval_set()?)?;

    let mut params = init_params(&net)?;
    let mut pretrain_log = Vec::new();
    if pretrain.pretrain_epochs > 0 && !set.coarse.is_empty() {
        (params, pretrain_log) = pretrain_coarse(&net, params, &set.coarse, &classes, &pretrain)?;
    }
    let train_set = set.training_set(variant.with_fine)?;
    let mut curve = Vec::new();
    let epochs = train.epochs;
    let out = fit_with_observer(&net, params, &train_set, &classes, &train, &mut |epoch, p| {
        if track_curve || epoch == epochs {
            curve.push(evaluator.metrics(epoch, &net, p)?);
        }
        Ok(())
    })?;
    Ok(RunResult {
        seed,
        variant,
        curve,
        log: out.log,
        pretrain_log,
        params: out.params,
        net,
    })
}

fn mean(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.into_iter().collect();
    let v = v?;
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub with_fine: bool,
    pub hsal: bool,
    pub seed: Option<u64>,
    pub cc_rank1: Option<f64>,
    pub cc_map: Option<f64>,
    pub sc_rank1: Option<f64>,
    pub sc_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// Seed-averaged rows in grid order: baseline, +HSAL, +fine, +fine+HSAL.
    pub rows: Vec<AblationRow>,
    pub per_seed: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub fn ablate(exp: &ExperimentConfig) -> Result<AblationTable> {
    exp.validate()?;
    let mut per_seed = Vec::new();
    for &seed in &exp.seeds {
        let set = exp.generate(seed)?;
        for v in Variant::GRID {
            let m = run_variant(exp, &set, seed, v, &exp.train, false)?.final_metrics();
            per_seed.push(AblationRow {
                name: v.name().into(),
                with_fine: v.with_fine,
                hsal: v.hsal,
                seed: Some(seed),
                cc_rank1: m.cc_rank1,
                cc_map: m.cc_map,
                sc_rank1: m.sc_rank1,
                sc_map: m.sc_map,
            });
        }
    }
    let rows = Variant::GRID
        .iter()
        .map(|v| {
            let rs: Vec<&AblationRow> = per_seed.iter().filter(|r| r.name == v.name()).collect();
            AblationRow {
                name: v.name().into(),
                with_fine: v.with_fine,
                hsal: v.hsal,
                seed: None,
                cc_rank1: mean(rs.iter().map(|r| r.cc_rank1)),
                cc_map: mean(rs.iter().map(|r| r.cc_map)),
                sc_rank1: mean(rs.iter().map(|r| r.sc_rank1)),
                sc_map: mean(rs.iter().map(|r| r.sc_map)),
            }
        })
        .collect();
    Ok(AblationTable { rows, per_seed })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_ablation_csv(rows: &[AblationRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "variant", "fine", "hsal", "seed", "cc_rank1", "cc_map", "sc_rank1", "sc_map",
    ])?;
    for r in rows {
        out.write_record([
            r.name.clone(),
            r.with_fine.to_string(),
            r.hsal.to_string(),
            r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into()),
            opt(r.cc_rank1),
            opt(r.cc_map),
            opt(r.sc_rank1),
            opt(r.sc_map),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_curve_csv(curve: &[EpochMetrics], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "cc_rank1", "cc_map", "sc_rank1", "sc_map"])?;
    for m in curve {
        out.write_record([
            m.epoch.to_string(),
            opt(m.cc_rank1),
            opt(m.cc_map),
            opt(m.sc_rank1),
            opt(m.sc_map),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub lambda: f64,
    pub cc_rank1: Option<f64>,
    pub cc_map: Option<f64>,
}

/// Per-step agreement between `α = 0` and the HSAL-off run with `λ·(1 + adj_weight)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub lambda: f64,
    pub seed: u64,
    pub steps: usize,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Row-major over (alpha, lambda), averaged over seeds.
    pub cells: Vec<SweepCell>,
    pub equivalence: Vec<Equivalence>,
}

impl SweepResult {
    pub fn cell(&self, ai: usize, li: usize) -> &SweepCell {
        &self.cells[ai * self.lambdas.len() + li]
    }
}

/// Train base ∪ fine with HSAL for every (α, λ) pair.
pub fn sweep(exp: &ExperimentConfig, alphas: &[f64], lambdas: &[f64]) -> Result<SweepResult> {
    exp.validate()?;
    if alphas.is_empty() || lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha and one lambda".into()));
    }
    let on = Variant {
        with_fine: true,
        hsal: true,
    };
    let mut sums: Vec<Vec<(Option<f64>, Option<f64>)>> = vec![Vec::new(); alphas.len() * lambdas.len()];
    let mut equivalence = Vec::new();
    for &seed in &exp.seeds {
        let set = exp.generate(seed)?;
        for (ai, &alpha) in alphas.iter().enumerate() {
            for (li, &lambda) in lambdas.iter().enumerate() {
                let train = TrainConfig {
                    alpha,
                    lambda,
                    ..exp.train.clone()
                };
                train.validate()?;
                let run = run_variant(exp, &set, seed, on, &train, false)?;
                let m = run.final_metrics();
                sums[ai * lambdas.len() + li].push((m.cc_rank1, m.cc_map));
                if alpha == 0.0 {
                    let off = TrainConfig {
                        lambda: lambda * (1.0 + train.adj_weight),
                        ..train.clone()
                    };
                    let twin = run_variant(exp, &set, seed, Variant { hsal: false, ..on }, &off, false)?;
                    let max_abs_diff = run
                        .log
                        .iter()
                        .zip(&twin.log)
                        .map(|(a, b)| (a.l_total - b.l_total).abs())
                        .fold(0.0, f64::max);
                    equivalence.push(Equivalence {
                        lambda,
                        seed,
                        steps: run.log.len().min(twin.log.len()),
                        max_abs_diff,
                    });
                }
            }
        }
    }
    let mut cells = Vec::with_capacity(sums.len());
    for (ai, &alpha) in alphas.iter().enumerate() {
        for (li, &lambda) in lambdas.iter().enumerate() {
            let v = &sums[ai * lambdas.len() + li];
            cells.push(SweepCell {
                alpha,
                lambda,
                cc_rank1: mean(v.iter().map(|x| x.0)),
                cc_map: mean(v.iter().map(|x| x.1)),
            });
        }
    }
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        lambdas: lambdas.to_vec(),
        cells,
        equivalence,
    })
}

pub fn write_sweep_csv(result: &SweepResult, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["alpha", "lambda", "cc_rank1", "cc_map"])?;
    for c in &result.cells {
        out.write_record([
            c.alpha.to_string(),
            c.lambda.to_string(),
            opt(c.cc_rank1),
            opt(c.cc_map),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_equivalence_csv(rows: &[Equivalence], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lambda", "seed", "steps", "max_abs_diff"])?;
    for r in rows {
        out.write_record([
            r.lambda.to_string(),
            r.seed.to_string(),
            r.steps.to_string(),
            format!("{:e}", r.max_abs_diff),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// First epoch (1-based) at which the cloth-changing Rank-1 reaches `target`.
pub fn epochs_to_reach(curve: &[EpochMetrics], target: f64) -> Option<usize> {
    curve
        .iter()
        .find(|m| m.cc_rank1.is_some_and(|r| r >= target))
        .map(|m| m.epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub seed: u64,
    pub baseline_final: Option<f64>,
    /// Epoch at which the HSAL run first matches the baseline's final value.
    pub hsal_epochs_to_match: Option<usize>,
    pub baseline_curve: Vec<EpochMetrics>,
    pub hsal_curve: Vec<EpochMetrics>,
}

/// Plain-triplet vs HSAL on base ∪ fine, both tracked every epoch.
pub fn convergence_study(exp: &ExperimentConfig) -> Result<Vec<ConvergenceRow>> {
    exp.validate()?;
    let mut rows = Vec::new();
    for &seed in &exp.seeds {
        let set = exp.generate(seed)?;
        let base = run_variant(
            exp,
            &set,
            seed,
            Variant {
                with_fine: true,
                hsal: false,
            },
            &exp.train,
            true,
        )?;
        let hsal = run_variant(
            exp,
            &set,
            seed,
            Variant {
                with_fine: true,
                hsal: true,
            },
            &exp.train,
            true,
        )?;
        let target = base.final_metrics().cc_rank1;
        rows.push(ConvergenceRow {
            seed,
            baseline_final: target,
            hsal_epochs_to_match: target.and_then(|t| epochs_to_reach(&hsal.curve, t)),
            baseline_curve: base.curve,
            hsal_curve: hsal.curve,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            scenario: ScenarioConfig {
                num_identities: 6,
                feature_dim: 8,
                samples_per_cell: 4,
                train_per_cell: 2,
                ..ScenarioConfig::default()
            },
            net: NetConfig {
                hidden_dims: vec![16],
                embed_dim: 8,
                ..NetConfig::default()
            },
            train: TrainConfig {
                epochs: 3,
                batches_per_epoch: 2,
                pretrain_epochs: 1,
                batch_spec: crate::data::BatchSpec { p: 3, k: 2, seed: 0 },
                ..TrainConfig::default()
            },
            seeds: vec![0],
        }
    }

    #[test]
    fn curve_has_one_point_per_epoch() {
        let exp = tiny();
        let set = exp.generate(0).unwrap();
        let run = run_variant(&exp, &set, 0, Variant::GRID[3], &exp.train, true).unwrap();
        assert_eq!(run.curve.len(), 3);
        assert_eq!(run.log.len(), 6);
        assert_eq!(run.pretrain_log.len(), 2);
        let m = run.final_metrics();
        assert!(m.cc_rank1.is_some_and(|r| (0.0..=1.0).contains(&r)));
    }

    #[test]
    fn ablation_grid_shape() {
        let t = ablate(&tiny()).unwrap();
        let names: Vec<&str> = t.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["baseline", "+HSAL", "+fine", "+fine+HSAL"]);
        assert_eq!(t.per_seed.len(), 4);
        let mut buf = Vec::new();
        write_ablation_csv(&t.rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn sweep_grid_and_zero_alpha_equivalence() {
        let r = sweep(&tiny(), &[0.0, 0.2], &[0.05, 0.1, 0.2]).unwrap();
        assert_eq!(r.cells.len(), 6);
        assert_eq!(r.cell(1, 2).alpha, 0.2);
        assert_eq!(r.cell(1, 2).lambda, 0.2);
        assert_eq!(r.equivalence.len(), 3);
        for e in &r.equivalence {
            assert_eq!(e.steps, 6);
            assert!(e.max_abs_diff <= 1e-9, "{e:?}");
        }
    }

    #[test]
    fn reach_epoch() {
        let m = |epoch, r| EpochMetrics {
            epoch,
            cc_rank1: Some(r),
            cc_map: None,
            sc_rank1: None,
            sc_map: None,
        };
        let curve = [m(1, 0.1), m(2, 0.5), m(3, 0.4)];
        assert_eq!(epochs_to_reach(&curve, 0.45), Some(2));
        assert_eq!(epochs_to_reach(&curve, 0.9), None);
    }

    #[test]
    fn config_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "seeds = [4]\n[scenario]\nnum_identities = 8\n[train]\nepochs = 7\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seeds, [4]);
        assert_eq!(cfg.scenario.num_identities, 8);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lr, ExperimentConfig::default().train.lr);
        assert_eq!(cfg.net.hidden_dims, [128]);
        std::fs::write(&path, "[train]\nlr = -1.0\n").unwrap();
        assert!(matches!(ExperimentConfig::from_file(&path), Err(Error::Config(_))));
        let cfg = ExperimentConfig::load(
            None,
            &[
                "train.alpha=0.2".into(),
                "seeds=[7, 8]".into(),
                "train.mining=\"batch_all\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.alpha, 0.2);
        assert_eq!(cfg.seeds, [7, 8]);
        assert_eq!(cfg.train.mining, crate::losses::Mining::BatchAll);
        assert!(ExperimentConfig::load(None, &["train.alpha".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["train.epochs=oops".into()]).is_err());
    }
}
