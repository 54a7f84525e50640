//! Training loop: optional coarse pretraining, then fitting with the
//! hardness-aware aggregated triplet loss, optimized with Adam.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analyzer::{build_adjustment_matrices, build_assessment_matrices};
use crate::data::{BatchSpec, Dataset, Labels, Origin, PkSampler, UNKNOWN};
use crate::error::{Error, Result};
use crate::losses::{loss_stack, LossSettings, Mining, DEFAULT_ADJ_WEIGHT, DEFAULT_EPS, DEFAULT_MARGIN};
use crate::model::{backward, forward, NetConfig, NetParams};

/// Stream offset separating pretraining batches from fine-tuning batches.
const PRETRAIN_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_spec: BatchSpec,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub margin: f64,
    pub mining: Mining,
    pub hsal_enabled: bool,
    pub pretrain_epochs: usize,
    /// Batch-sampling seed; overrides `batch_spec.seed`.
    pub seed: u64,
    pub adj_weight: f64,
    pub viewpoint_hardness: bool,
    pub distance_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_spec: BatchSpec::default(),
            epochs: 50,
            batches_per_epoch: 12,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.1,
            lambda: 0.1,
            margin: DEFAULT_MARGIN,
            mining: Mining::BatchHard,
            hsal_enabled: true,
            pretrain_epochs: 10,
            seed: 0,
            adj_weight: DEFAULT_ADJ_WEIGHT,
            viewpoint_hardness: true,
            distance_eps: DEFAULT_EPS,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.batch_spec.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batches_per_epoch < 1 {
            return bad("batches_per_epoch must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.adj_weight >= 0.0) || !(self.distance_eps >= 0.0) {
            return bad("adam_eps must be > 0; adj_weight and distance_eps >= 0".into());
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            margin: self.margin,
            mining: self.mining,
            lambda: self.lambda,
            adj_weight: self.adj_weight,
            eps: self.distance_eps,
        }
    }

    /// Parse a TOML or JSON file (chosen by extension; TOML otherwise).
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One optimizer step's worth of logged values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: u64,
    pub l_cls: f64,
    pub l_tri_raw: f64,
    pub l_tri_adj: f64,
    pub l_total: f64,
    pub active_triplets_raw: usize,
    pub active_triplets_adj: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: NetParams,
    pub v: NetParams,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(params: &mut NetParams, grads: &NetParams, state: &mut AdamState, cfg: &AdamConfig, t: u64) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Maps identities to classifier rows and gathers batch tensors.
#[derive(Debug, Clone)]
pub struct ClassMap {
    identities: Vec<i64>,
}

impl ClassMap {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            identities: ds.identities().to_vec(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.identities.len()
    }

    pub fn class_of(&self, identity: i64) -> Option<usize> {
        self.identities.binary_search(&identity).ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitStats {
    pub steps: u64,
    /// How many times adjustment matrices were constructed.
    pub adjustment_builds: u64,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub params: NetParams,
    pub log: Vec<TrainLogRow>,
    pub stats: FitStats,
}

struct Phase<'a> {
    net: &'a NetConfig,
    dataset: &'a Dataset,
    classes: &'a ClassMap,
    config: &'a TrainConfig,
    epochs: usize,
    hsal: bool,
    stream_offset: u64,
}

fn gather(
    dataset: &Dataset,
    classes: &ClassMap,
    idx: &[usize],
    dim: usize,
) -> Result<(Array2<f64>, Vec<Labels>, Vec<usize>)> {
    let mut x = Array2::zeros((idx.len(), dim));
    let mut labels = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        let s = &dataset.samples()[i];
        let f = s
            .features
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("sample {:?} has no feature vector", s.sample_id)))?;
        if f.len() != dim {
            return Err(Error::Validation(format!(
                "sample {:?} has {} features, network expects {dim}",
                s.sample_id,
                f.len()
            )));
        }
        x.row_mut(r).assign(&ndarray::ArrayView1::from(f.as_slice()));
        labels.push(s.labels());
        targets.push(
            classes
                .class_of(s.identity)
                .ok_or_else(|| Error::Config(format!("identity {} has no classifier row", s.identity)))?,
        );
    }
    Ok((x, labels, targets))
}

fn run_phase(
    phase: Phase<'_>,
    params: &mut NetParams,
    on_epoch: &mut dyn FnMut(usize, &NetParams) -> Result<()>,
) -> Result<(Vec<TrainLogRow>, FitStats)> {
    let cfg = phase.config;
    let dim = phase.net.input_dim;
    let spec = BatchSpec {
        seed: cfg.seed,
        ..cfg.batch_spec
    };
    let sampler = PkSampler::new(phase.dataset, spec)?;
    let adam = AdamConfig::from(cfg);
    let settings = cfg.loss_settings();
    let mut state = AdamState::new(params);
    let mut log = Vec::with_capacity(phase.epochs * cfg.batches_per_epoch);
    let mut stats = FitStats::default();
    let clock = Instant::now();
    let mut t = 0u64;
    for epoch in 1..=phase.epochs {
        for _ in 0..cfg.batches_per_epoch {
            let step = t;
            t += 1;
            let idx = sampler.batch(phase.stream_offset + step);
            let (x, labels, targets) = gather(phase.dataset, phase.classes, &idx, dim)?;
            let ids: Vec<i64> = labels.iter().map(|l| l.identity).collect();
            let adj = if phase.hsal {
                stats.adjustment_builds += 1;
                let assess = build_assessment_matrices(&labels, cfg.viewpoint_hardness);
                Some(build_adjustment_matrices(&assess, cfg.alpha)?)
            } else {
                None
            };
            let fwd = forward(phase.net, params, x.view())?;
            let stack = loss_stack(
                fwd.embeddings.view(),
                fwd.logits.view(),
                &ids,
                &targets,
                &settings,
                adj.as_ref(),
            )?;
            let r = stack.report;
            if !r.l_total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step}: l_cls={} l_tri_raw={} l_tri_adj={} l_total={}",
                    r.l_cls, r.l_tri_raw, r.l_tri_adj, r.l_total
                )));
            }
            let grads = backward(
                params,
                &fwd.cache,
                stack.grad_embeddings.view(),
                stack.grad_logits.view(),
            )?;
            adam_step(params, &grads, &mut state, &adam, t);
            log.push(TrainLogRow {
                epoch,
                step,
                l_cls: r.l_cls,
                l_tri_raw: r.l_tri_raw,
                l_tri_adj: r.l_tri_adj,
                l_total: r.l_total,
                active_triplets_raw: r.active_triplets_raw,
                active_triplets_adj: r.active_triplets_adj,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            });
        }
        if !params.all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }
        on_epoch(epoch, params)?;
    }
    stats.steps = t;
    Ok((log, stats))
}

/// Pretrain on coarse-generated (unlabeled clothing) samples with
/// `L_cls + λ·L_tri(d)`; hardness adjustment stays off.
pub fn pretrain_coarse(
    net: &NetConfig,
    params: NetParams,
    coarse_set: &Dataset,
    classes: &ClassMap,
    config: &TrainConfig,
) -> Result<(NetParams, Vec<TrainLogRow>)> {
    config.validate()?;
    if coarse_set.is_empty() {
        return Err(Error::Config("coarse pretraining set is empty".into()));
    }
    if let Some(s) = coarse_set
        .samples()
        .iter()
        .find(|s| s.origin != Origin::CoarseGenerated || s.clothing != UNKNOWN)
    {
        return Err(Error::Config(format!(
            "sample {:?} is not a coarse-generated sample",
            s.sample_id
        )));
    }
    let mut params = params;
    if config.pretrain_epochs == 0 {
        return Ok((params, Vec::new()));
    }
    let phase = Phase {
        net,
        dataset: coarse_set,
        classes,
        config,
        epochs: config.pretrain_epochs,
        hsal: false,
        stream_offset: PRETRAIN_STREAM,
    };
    let (log, _) = run_phase(phase, &mut params, &mut |_, _| Ok(()))?;
    Ok((params, log))
}

/// Main training loop: exactly `epochs × batches_per_epoch` Adam steps.
pub fn fit(
    net: &NetConfig,
    params: NetParams,
    train_set: &Dataset,
    classes: &ClassMap,
    config: &TrainConfig,
) -> Result<FitOutput> {
    fit_with_observer(net, params, train_set, classes, config, &mut |_, _| Ok(()))
}

/// [`fit`] with a callback after every epoch (used for accuracy curves).
pub fn fit_with_observer(
    net: &NetConfig,
    params: NetParams,
    train_set: &Dataset,
    classes: &ClassMap,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &NetParams) -> Result<()>,
) -> Result<FitOutput> {
    config.validate()?;
    net.validate()?;
    if net.num_classes != classes.num_classes() {
        return Err(Error::Config(format!(
            "classifier has {} outputs but the class map has {} identities",
            net.num_classes,
            classes.num_classes()
        )));
    }
    let mut params = params;
    let phase = Phase {
        net,
        dataset: train_set,
        classes,
        config,
        epochs: config.epochs,
        hsal: config.hsal_enabled,
        stream_offset: 0,
    };
    let (log, stats) = run_phase(phase, &mut params, on_epoch)?;
    Ok(FitOutput { params, log, stats })
}

pub const LOG_COLUMNS: [&str; 8] = [
    "epoch",
    "step",
    "l_cls",
    "l_tri_raw",
    "l_tri_adj",
    "l_total",
    "active_triplets_raw",
    "active_triplets_adj",
];

/// Deterministic metric columns; wall-clock time goes to [`write_timing_csv`].
pub fn write_log_csv(rows: &[TrainLogRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LOG_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.l_cls.to_string(),
            r.l_tri_raw.to_string(),
            r.l_tri_adj.to_string(),
            r.l_total.to_string(),
            r.active_triplets_raw.to_string(),
            r.active_triplets_adj.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_timing_csv(rows: &[TrainLogRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "step", "wall_ms"])?;
    for r in rows {
        out.write_record([r.epoch.to_string(), r.step.to_string(), format!("{:.3}", r.wall_ms)])?;
    }
    out.flush()?;
    Ok(())
}
