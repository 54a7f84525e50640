//! C ABI over the `hardreid` core.
//!
//! Every entry point returns an [`HrStatus`]; on failure the message is
//! available from [`hr_last_error`] on the same thread. Arrays are passed as
//! pointer + length, matrices row-major. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use ndarray::{ArrayView2, ShapeBuilder};

use hardreid::analyzer::analyze_batch;
use hardreid::curation::{
    detect_frontal_pose, laplacian_variance, plan_generation, FrontalThresholds, GrayImage, KeypointRecord, Landmark,
    LANDMARKS,
};
use hardreid::data::{Labels, Origin, Sample, Split};
use hardreid::eval::{evaluate, EvalMode, EvalProtocol};
use hardreid::losses::{aggregated_triplet_loss_weighted, distance_backward, pairwise_distance, Mining};
use hardreid::model::{embed, Checkpoint};
use hardreid::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HrStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Validation = 3,
    Contract = 4,
    Numeric = 5,
    Io = 6,
    Parse = 7,
    Panic = 99,
}

/// Batch-hard or batch-all triplet mining; passed to functions as `int32_t`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HrMining {
    BatchHard = 0,
    BatchAll = 1,
}

/// Evaluation protocol; passed to functions as `int32_t`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HrEvalMode {
    Standard = 0,
    ClothChanging = 1,
    SameClothes = 2,
}

/// Labels of one batch, each array of length `n`. Use -1 for unknown
/// clothing or viewpoint.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HrLabels {
    pub n: usize,
    pub identity: *const i64,
    pub clothing: *const i64,
    pub viewpoint: *const i64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HrPlan {
    pub n_hp: u64,
    pub n_hn: u64,
    pub tryon_per_identity: u64,
    pub tryon_total: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HrPoseThresholds {
    pub vis_min: f64,
    pub eps_y: f64,
    pub eps_v: f64,
    pub min_interocular: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HrPoseVerdict {
    pub pass: bool,
    pub score: f64,
    pub visible: bool,
    pub eyes_level: bool,
    pub eyes_apart: bool,
    pub ears_symmetric: bool,
}

/// Metrics are NaN when no query had a valid match.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HrEvalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub queries_used: usize,
    pub queries_skipped: usize,
}

/// Loaded embedding network.
pub struct HrModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HrStatus {
    match e {
        Error::Config(_) | Error::Toml(_) => HrStatus::Config,
        Error::Validation(_) => HrStatus::Validation,
        Error::Contract(_) => HrStatus::Contract,
        Error::Numeric(_) => HrStatus::Numeric,
        Error::Io(_) => HrStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => HrStatus::Parse,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

type FfiResult<T> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> HrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HrStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            HrStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            HrStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(ptr: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn slice_out<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    ptr.as_mut().ok_or(Fail::Null(what))
}

fn checked_len(a: usize, b: usize) -> FfiResult<usize> {
    a.checked_mul(b)
        .ok_or_else(|| Fail::Core(Error::Validation(format!("array size {a}x{b} overflows"))))
}

unsafe fn read_labels(labels: *const HrLabels) -> FfiResult<Vec<Labels>> {
    let l = labels.as_ref().ok_or(Fail::Null("labels"))?;
    let ids = slice_in(l.identity, l.n, "labels.identity")?;
    let cloth = slice_in(l.clothing, l.n, "labels.clothing")?;
    let view = slice_in(l.viewpoint, l.n, "labels.viewpoint")?;
    Ok((0..l.n).map(|i| Labels::new(ids[i], cloth[i], view[i])).collect())
}

fn matrix<'a>(data: &'a [f64], rows: usize, cols: usize) -> FfiResult<ArrayView2<'a, f64>> {
    ArrayView2::from_shape((rows, cols).strides((cols, 1)), data)
        .map_err(|e| Fail::Core(Error::Contract(format!("matrix shape {rows}x{cols}: {e}"))))
}

/// Message for the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fill the n×n hard-positive and hard-negative scale matrices
/// (1+alpha / 1-alpha on hard pairs, 1 elsewhere).
///
/// # Safety
/// `labels` must describe valid arrays of length `n`; `out_hp_m` and
/// `out_hn_m` must have room for n*n doubles.
#[no_mangle]
pub unsafe extern "C" fn hr_analyze_batch(
    labels: *const HrLabels,
    viewpoint_hardness: bool,
    alpha: f64,
    out_hp_m: *mut f64,
    out_hn_m: *mut f64,
) -> HrStatus {
    guard(|| {
        let batch = read_labels(labels)?;
        let nn = checked_len(batch.len(), batch.len())?;
        let hp = slice_out(out_hp_m, nn, "out_hp_m")?;
        let hn = slice_out(out_hn_m, nn, "out_hn_m")?;
        let adj = analyze_batch(&batch, viewpoint_hardness, alpha)?;
        hp.iter_mut().zip(adj.hp_m.iter()).for_each(|(o, v)| *o = *v);
        hn.iter_mut().zip(adj.hn_m.iter()).for_each(|(o, v)| *o = *v);
        Ok(())
    })
}

/// Raw plus hardness-adjusted triplet loss on an n×dim feature batch, and
/// optionally its gradient w.r.t. the features.
///
/// # Safety
/// `features` must hold n*dim doubles with n = `labels->n`; `out_loss` must be
/// valid; `out_grad` may be NULL or point to n*dim doubles.
#[no_mangle]
pub unsafe extern "C" fn hr_aggregated_triplet_loss(
    labels: *const HrLabels,
    features: *const f64,
    dim: usize,
    viewpoint_hardness: bool,
    alpha: f64,
    margin: f64,
    adj_weight: f64,
    mining: i32,
    eps: f64,
    out_loss: *mut f64,
    out_grad: *mut f64,
) -> HrStatus {
    guard(|| {
        let batch = read_labels(labels)?;
        let n = batch.len();
        let len = checked_len(n, dim)?;
        let feats = matrix(slice_in(features, len, "features")?, n, dim)?;
        let loss = out_ref(out_loss, "out_loss")?;
        let mining = match mining {
            m if m == HrMining::BatchHard as i32 => Mining::BatchHard,
            m if m == HrMining::BatchAll as i32 => Mining::BatchAll,
            other => return Err(Error::Config(format!("unknown mining code {other}")).into()),
        };
        let adj = analyze_batch(&batch, viewpoint_hardness, alpha)?;
        let ids: Vec<i64> = batch.iter().map(|l| l.identity).collect();
        let dist = pairwise_distance(feats, eps);
        let agg = aggregated_triplet_loss_weighted(&dist, &adj, &ids, margin, mining, adj_weight)?;
        *loss = agg.loss;
        if !out_grad.is_null() {
            let g = distance_backward(feats, &dist, agg.grad.view())?;
            let out = slice_out(out_grad, len, "out_grad")?;
            out.iter_mut().zip(g.iter()).for_each(|(o, v)| *o = *v);
        }
        Ok(())
    })
}

/// Closed-form hard-pair counts for C identities with per-identity image
/// counts `k[0..c]`, m library garments and n anchors per identity.
///
/// # Safety
/// `k` must hold `c` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hr_plan_generation(c: u64, m: u64, n: u64, k: *const i64, out: *mut HrPlan) -> HrStatus {
    guard(|| {
        let len = usize::try_from(c).map_err(|_| Error::Validation(format!("C={c} too large")))?;
        let k = slice_in(k, len, "k")?;
        let out = out_ref(out, "out")?;
        let plan = plan_generation(c, m, n, k)?;
        *out = HrPlan {
            n_hp: plan.n_hp,
            n_hn: plan.n_hn,
            tryon_per_identity: plan.tryon_per_identity,
            tryon_total: plan.tryon_total,
        };
        Ok(())
    })
}

/// Variance of the 4-neighbour Laplacian response over interior pixels of a
/// row-major 8-bit grayscale image.
///
/// # Safety
/// `pixels` must hold width*height bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hr_laplacian_variance(
    width: usize,
    height: usize,
    pixels: *const u8,
    out: *mut f64,
) -> HrStatus {
    guard(|| {
        let len = checked_len(width, height)?;
        let px = slice_in(pixels, len, "pixels")?;
        let out = out_ref(out, "out")?;
        let img = GrayImage::new(width, height, px.to_vec())?;
        *out = laplacian_variance(&img);
        Ok(())
    })
}

/// Default frontal-pose thresholds.
#[no_mangle]
pub extern "C" fn hr_pose_thresholds_default() -> HrPoseThresholds {
    let t = FrontalThresholds::default();
    HrPoseThresholds {
        vis_min: t.vis_min,
        eps_y: t.eps_y,
        eps_v: t.eps_v,
        min_interocular: t.min_interocular,
    }
}

/// Frontal-pose check. `landmarks` holds 15 doubles: (x, y, visibility) for
/// nose, left eye, right eye, left ear, right ear in that order, with
/// coordinates normalized to [0, 1]. `thresholds` may be NULL for defaults.
///
/// # Safety
/// `landmarks` must hold 15 doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hr_detect_frontal_pose(
    landmarks: *const f64,
    thresholds: *const HrPoseThresholds,
    out: *mut HrPoseVerdict,
) -> HrStatus {
    guard(|| {
        let lm = slice_in(landmarks, 3 * LANDMARKS.len(), "landmarks")?;
        let out = out_ref(out, "out")?;
        let t = match thresholds.as_ref() {
            Some(t) => FrontalThresholds {
                vis_min: t.vis_min,
                eps_y: t.eps_y,
                eps_v: t.eps_v,
                min_interocular: t.min_interocular,
            },
            None => FrontalThresholds::default(),
        };
        let rec = KeypointRecord {
            sample_id: "ffi".into(),
            landmarks: LANDMARKS
                .iter()
                .zip(lm.chunks_exact(3))
                .map(|(name, v)| {
                    (
                        name.to_string(),
                        Landmark {
                            x: v[0],
                            y: v[1],
                            visibility: v[2],
                        },
                    )
                })
                .collect(),
        };
        let v = detect_frontal_pose(&rec, &t)?;
        *out = HrPoseVerdict {
            pass: v.pass,
            score: v.score,
            visible: v.visible,
            eyes_level: v.eyes_level,
            eyes_apart: v.eyes_apart,
            ears_symmetric: v.ears_symmetric,
        };
        Ok(())
    })
}

fn samples(labels: &[Labels], split: Split) -> Vec<Sample> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| Sample {
            sample_id: format!("{split:?}{i}"),
            identity: l.identity,
            clothing: l.clothing,
            viewpoint: l.viewpoint,
            split,
            origin: Origin::Real,
            features: None,
            image_ref: None,
        })
        .collect()
}

/// Rank-1/5/10 and mAP of query embeddings against gallery embeddings.
/// The viewpoint label doubles as the camera id.
///
/// # Safety
/// Embedding buffers must hold `query->n * dim` and `gallery->n * dim`
/// doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hr_evaluate(
    query: *const HrLabels,
    query_emb: *const f64,
    gallery: *const HrLabels,
    gallery_emb: *const f64,
    dim: usize,
    mode: i32,
    exclude_same_camera: bool,
    out: *mut HrEvalMetrics,
) -> HrStatus {
    guard(|| {
        let q = read_labels(query)?;
        let g = read_labels(gallery)?;
        let qe = matrix(
            slice_in(query_emb, checked_len(q.len(), dim)?, "query_emb")?,
            q.len(),
            dim,
        )?;
        let ge = matrix(
            slice_in(gallery_emb, checked_len(g.len(), dim)?, "gallery_emb")?,
            g.len(),
            dim,
        )?;
        let out = out_ref(out, "out")?;
        let mode = match mode {
            m if m == HrEvalMode::Standard as i32 => EvalMode::Standard,
            m if m == HrEvalMode::ClothChanging as i32 => EvalMode::ClothChanging,
            m if m == HrEvalMode::SameClothes as i32 => EvalMode::SameClothes,
            other => return Err(Error::Config(format!("unknown evaluation mode code {other}")).into()),
        };
        let protocol = EvalProtocol {
            mode,
            exclude_same_camera,
        };
        let r = evaluate(
            qe,
            ge,
            &samples(&q, Split::Query),
            &samples(&g, Split::Gallery),
            &protocol,
        )?
        .report;
        let at = |k: usize| r.rank_k.get(&k).copied().flatten().unwrap_or(f64::NAN);
        *out = HrEvalMetrics {
            rank1: at(1),
            rank5: at(5),
            rank10: at(10),
            map: r.map_score.unwrap_or(f64::NAN),
            queries_used: r.num_queries_used,
            queries_skipped: r.num_queries_skipped,
        };
        Ok(())
    })
}

unsafe fn finish_model(ckpt: Checkpoint, out: *mut *mut HrModel) -> FfiResult<()> {
    let out = out_ref(out, "out")?;
    ckpt.config.validate()?;
    *out = Box::into_raw(Box::new(HrModel { ckpt }));
    Ok(())
}

unsafe fn c_str<'a>(s: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if s.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| Fail::Core(Error::Validation(format!("{what} is not UTF-8: {e}"))))
}

/// Load a checkpoint file. Free the handle with [`hr_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hr_model_load(path: *const c_char, out: *mut *mut HrModel) -> HrStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        finish_model(Checkpoint::load(Path::new(path))?, out)
    })
}

/// Build a model from checkpoint JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hr_model_from_json(json: *const c_char, out: *mut *mut HrModel) -> HrStatus {
    guard(|| {
        let json = c_str(json, "json")?;
        finish_model(Checkpoint::from_json(json)?, out)
    })
}

/// Input feature dimension, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hr_model_input_dim(model: *const HrModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.config.input_dim)
}

/// Embedding dimension, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hr_model_embed_dim(model: *const HrModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.config.embed_dim)
}

/// Embed `n` feature rows (n × input_dim) into `out` (n × embed_dim).
///
/// # Safety
/// `model` must be a live handle; buffers must be sized as described.
#[no_mangle]
pub unsafe extern "C" fn hr_model_embed(
    model: *const HrModel,
    n: usize,
    features: *const f64,
    out: *mut f64,
) -> HrStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let cfg = &m.ckpt.config;
        let x = matrix(
            slice_in(features, checked_len(n, cfg.input_dim)?, "features")?,
            n,
            cfg.input_dim,
        )?;
        let dst = slice_out(out, checked_len(n, cfg.embed_dim)?, "out")?;
        let e = embed(cfg, &m.ckpt.params, x)?;
        dst.iter_mut().zip(e.iter()).for_each(|(o, v)| *o = *v);
        Ok(())
    })
}

/// Release a model handle. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hr_model_free(model: *mut HrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
