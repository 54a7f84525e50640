//! Retrieval metrics (CMC Rank-k, mAP) under standard, cloth-changing and
//! same-clothes protocols.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Split};
use crate::error::{Error, Result};

pub const RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Standard,
    ClothChanging,
    SameClothes,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "cloth_changing" | "cc" => Ok(Self::ClothChanging),
            "same_clothes" | "sc" => Ok(Self::SameClothes),
            _ => Err(Error::Config(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    pub exclude_same_camera: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            mode: EvalMode::Standard,
            exclude_same_camera: true,
        }
    }
}

impl EvalProtocol {
    pub fn new(mode: EvalMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

/// Metrics are `None` when no query had a positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub rank_k: BTreeMap<usize, Option<f64>>,
    pub map_score: Option<f64>,
    pub num_queries_used: usize,
    pub num_queries_skipped: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> Option<f64> {
        self.rank_k.get(&1).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub sample_id: String,
    /// `None` for skipped queries.
    pub ap: Option<f64>,
    /// 1-based rank of the first positive.
    pub first_hit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub per_query: Vec<QueryResult>,
}

/// Which gallery entries a query may be compared with, and which of those
/// are correct matches.
pub fn valid_gallery_mask(query: &Sample, gallery: &[Sample], protocol: &EvalProtocol) -> (Vec<bool>, Vec<bool>) {
    let mut valid = Vec::with_capacity(gallery.len());
    let mut positive = Vec::with_capacity(gallery.len());
    for g in gallery {
        let same_id = g.identity == query.identity;
        let same_cam = g.viewpoint == query.viewpoint;
        let same_clothes = g.clothing == query.clothing;
        let ok = !(protocol.exclude_same_camera && same_id && same_cam)
            && match protocol.mode {
                EvalMode::Standard => true,
                EvalMode::ClothChanging => !(same_id && same_clothes),
                EvalMode::SameClothes => !(same_id && !same_clothes),
            };
        valid.push(ok);
        positive.push(ok && same_id);
    }
    (valid, positive)
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Ranked positive flags for one query: valid gallery entries sorted by
/// (distance, gallery index).
fn ranked_hits(dist: &[f64], valid: &[bool], positive: &[bool]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dist.len()).filter(|&j| valid[j]).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order.into_iter().map(|j| positive[j]).collect()
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean precision at each true match. The sum of `k / rank_k` is kept as a
/// reduced fraction while it stays small, so the result is correctly rounded
/// (e.g. exactly `5.0 / 6.0` for matches at ranks 1 and 3); long rankings
/// fall back to float accumulation.
fn average_precision(hits: &[bool]) -> f64 {
    const EXACT: u128 = 1 << 53;
    let mut found = 0u128;
    let mut float_sum = 0.0;
    let mut frac = Some((0u128, 1u128));
    for (r, &h) in hits.iter().enumerate() {
        if !h {
            continue;
        }
        found += 1;
        let rank = r as u128 + 1;
        float_sum += found as f64 / rank as f64;
        frac = frac.and_then(|(num, den)| {
            let num = num.checked_mul(rank)?.checked_add(found.checked_mul(den)?)?;
            let den = den.checked_mul(rank)?;
            let g = gcd(num, den);
            Some((num / g, den / g))
        });
    }
    match frac {
        Some((num, den)) => {
            let den = den * found;
            let g = gcd(num, den);
            let (num, den) = (num / g, den / g);
            if num <= EXACT && den <= EXACT {
                return num as f64 / den as f64;
            }
            float_sum / found as f64
        }
        None => float_sum / found as f64,
    }
}

pub fn evaluate(
    query_emb: ArrayView2<f64>,
    gallery_emb: ArrayView2<f64>,
    queries: &[Sample],
    gallery: &[Sample],
    protocol: &EvalProtocol,
) -> Result<EvalOutput> {
    if queries.is_empty() {
        return Err(Error::Validation("no queries to evaluate".into()));
    }
    if query_emb.nrows() != queries.len() || gallery_emb.nrows() != gallery.len() {
        return Err(Error::Contract(format!(
            "embedding rows ({}, {}) do not match sample counts ({}, {})",
            query_emb.nrows(),
            gallery_emb.nrows(),
            queries.len(),
            gallery.len()
        )));
    }
    if query_emb.ncols() != gallery_emb.ncols() {
        return Err(Error::Contract(format!(
            "query dim {} != gallery dim {}",
            query_emb.ncols(),
            gallery_emb.ncols()
        )));
    }

    let mut per_query = Vec::with_capacity(queries.len());
    let mut hits_at = [0usize; RANKS.len()];
    let mut ap_sum = 0.0;
    let mut used = 0;
    for (qi, q) in queries.iter().enumerate() {
        let (valid, positive) = valid_gallery_mask(q, gallery, protocol);
        let dist: Vec<f64> = (0..gallery.len())
            .map(|j| euclidean(query_emb.row(qi), gallery_emb.row(j)))
            .collect();
        let hits = ranked_hits(&dist, &valid, &positive);
        let first_hit = hits.iter().position(|&h| h).map(|r| r + 1);
        let ap = first_hit.map(|_| average_precision(&hits));
        if let (Some(ap), Some(first)) = (ap, first_hit) {
            used += 1;
            ap_sum += ap;
            for (slot, &k) in hits_at.iter_mut().zip(RANKS.iter()) {
                if first <= k {
                    *slot += 1;
                }
            }
        }
        per_query.push(QueryResult {
            sample_id: q.sample_id.clone(),
            ap,
            first_hit,
        });
    }
    let defined = |x: f64| if used > 0 { Some(x / used as f64) } else { None };
    let report = EvalReport {
        protocol: *protocol,
        rank_k: RANKS
            .iter()
            .zip(hits_at)
            .map(|(&k, h)| (k, defined(h as f64)))
            .collect(),
        map_score: defined(ap_sum),
        num_queries_used: used,
        num_queries_skipped: queries.len() - used,
    };
    Ok(EvalOutput { report, per_query })
}

/// Evaluate with samples and embeddings given in one list; rows whose split
/// is neither query nor gallery are ignored.
pub fn evaluate_splits(samples: &[Sample], embeddings: ArrayView2<f64>, protocol: &EvalProtocol) -> Result<EvalOutput> {
    if embeddings.nrows() != samples.len() {
        return Err(Error::Contract(format!(
            "{} embeddings for {} samples",
            embeddings.nrows(),
            samples.len()
        )));
    }
    let pick = |split: Split| -> (Vec<Sample>, Array2<f64>) {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].split == split).collect();
        let rows = embeddings.select(ndarray::Axis(0), &idx);
        (idx.iter().map(|&i| samples[i].clone()).collect(), rows)
    };
    let (q, qe) = pick(Split::Query);
    let (g, ge) = pick(Split::Gallery);
    evaluate(qe.view(), ge.view(), &q, &g, protocol)
}

pub fn write_per_query_csv(rows: &[QueryResult], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample_id", "ap", "first_hit"])?;
    for r in rows {
        let ap = r.ap.map(|x| x.to_string()).unwrap_or_default();
        let hit = r.first_hit.map(|x| x.to_string()).unwrap_or_default();
        out.write_record([r.sample_id.as_str(), &ap, &hit])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Origin;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn s(id: &str, y: i64, c: i64, v: i64, split: Split) -> Sample {
        Sample {
            sample_id: id.into(),
            identity: y,
            clothing: c,
            viewpoint: v,
            split,
            origin: Origin::Real,
            features: Some(vec![0.0]),
            image_ref: None,
        }
    }

    #[test]
    fn mask_rules() {
        let q = s("q", 1, 0, 0, Split::Query);
        let g = [
            s("a", 1, 0, 1, Split::Gallery),
            s("b", 1, 1, 1, Split::Gallery),
            s("c", 1, 1, 0, Split::Gallery),
        ];
        let (v, p) = valid_gallery_mask(&q, &g, &EvalProtocol::new(EvalMode::ClothChanging));
        assert_eq!(v, [false, true, false]);
        assert_eq!(p, [false, true, false]);
        let (v, p) = valid_gallery_mask(&q, &g, &EvalProtocol::new(EvalMode::Standard));
        assert_eq!(v, [true, true, false]);
        assert_eq!(p, [true, true, false]);
        let (v, _) = valid_gallery_mask(&q, &g, &EvalProtocol::new(EvalMode::SameClothes));
        assert_eq!(v, [true, false, false]);
        let off = EvalProtocol {
            mode: EvalMode::Standard,
            exclude_same_camera: false,
        };
        assert_eq!(valid_gallery_mask(&q, &g, &off).0, [true, true, true]);
    }

    #[test]
    fn hand_fixture_ap() {
        let q = [s("q", 1, 0, 0, Split::Query)];
        let g = [
            s("a", 1, 1, 1, Split::Gallery),
            s("b", 2, 1, 1, Split::Gallery),
            s("c", 1, 2, 1, Split::Gallery),
        ];
        let qe = array![[0.0]];
        let ge = array![[1.0], [2.0], [3.0]];
        let out = evaluate(qe.view(), ge.view(), &q, &g, &EvalProtocol::default()).unwrap();
        assert_eq!(out.report.map_score, Some(5.0 / 6.0));
        assert_eq!(out.report.rank1(), Some(1.0));
        assert_eq!(out.per_query[0].first_hit, Some(1));
    }

    #[test]
    fn ap_long_rankings_match_float_sum() {
        let hits: Vec<bool> = (0..400).map(|i| i % 7 == 0 || i % 11 == 3).collect();
        let mut found = 0.0;
        let mut sum = 0.0;
        for (r, &h) in hits.iter().enumerate() {
            if h {
                found += 1.0;
                sum += found / (r + 1) as f64;
            }
        }
        assert!((average_precision(&hits) - sum / found).abs() < 1e-12);
        assert_eq!(average_precision(&[false, true, false, true]), 0.5);
    }

    #[test]
    fn no_positives_means_undefined() {
        let q = [s("q", 1, 0, 0, Split::Query)];
        let g = [s("a", 1, 0, 0, Split::Gallery), s("b", 2, 0, 1, Split::Gallery)];
        let out = evaluate(
            array![[0.0]].view(),
            array![[1.0], [2.0]].view(),
            &q,
            &g,
            &EvalProtocol::default(),
        )
        .unwrap();
        assert_eq!(out.report.num_queries_skipped, 1);
        assert_eq!(out.report.num_queries_used, 0);
        assert_eq!(out.report.map_score, None);
        assert!(out.report.rank_k.values().all(Option::is_none));
        let json = serde_json::to_value(&out.report).unwrap();
        assert!(json["map_score"].is_null());
    }

    #[test]
    fn input_contracts() {
        let q = [s("q", 1, 0, 0, Split::Query)];
        let g = [s("a", 1, 1, 1, Split::Gallery)];
        assert!(matches!(
            evaluate(
                array![[0.0, 1.0]].view(),
                array![[1.0]].view(),
                &q,
                &g,
                &EvalProtocol::default()
            ),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            evaluate(
                Array2::zeros((0, 1)).view(),
                array![[1.0]].view(),
                &[],
                &g,
                &EvalProtocol::default()
            ),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn equal_distances_break_by_gallery_index() {
        let q = [s("q", 1, 0, 0, Split::Query)];
        let g = [s("neg", 2, 1, 1, Split::Gallery), s("pos", 1, 1, 1, Split::Gallery)];
        let out = evaluate(
            array![[0.0]].view(),
            array![[1.0], [-1.0]].view(),
            &q,
            &g,
            &EvalProtocol::default(),
        )
        .unwrap();
        assert_eq!(out.per_query[0].first_hit, Some(2));
        assert_eq!(out.report.map_score, Some(0.5));
    }

    #[test]
    fn per_query_csv_marks_skipped() {
        let rows = [
            QueryResult {
                sample_id: "a".into(),
                ap: Some(0.5),
                first_hit: Some(2),
            },
            QueryResult {
                sample_id: "b".into(),
                ap: None,
                first_hit: None,
            },
        ];
        let mut buf = Vec::new();
        write_per_query_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(2), Some("b,,"));
    }

    type Instance = (Vec<(i64, i64, i64, f64)>, Vec<(i64, i64, i64)>);

    fn instance() -> impl Strategy<Value = Instance> {
        (
            prop::collection::vec((1i64..4, 0i64..3, 0i64..3, -10.0f64..10.0), 1..20),
            prop::collection::vec((1i64..4, 0i64..3, 0i64..3), 1..5),
        )
    }

    proptest! {
        #[test]
        fn distinct_distances_ignore_gallery_order((gal, qs) in instance(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut xs: Vec<f64> = gal.iter().map(|g| g.3).collect();
            xs.sort_by(f64::total_cmp);
            prop_assume!(xs.windows(2).all(|w| w[0] != w[1]) && xs.iter().all(|&x| x != 0.0 && xs.iter().all(|&y| x != -y)));
            let queries: Vec<Sample> = qs.iter().enumerate().map(|(i, &(y, c, v))| s(&format!("q{i}"), y, c, v, Split::Query)).collect();
            let qe = Array2::zeros((queries.len(), 1));
            let build = |order: &[usize]| {
                let g: Vec<Sample> = order.iter().map(|&i| s(&format!("g{i}"), gal[i].0, gal[i].1, gal[i].2, Split::Gallery)).collect();
                let ge = Array2::from_shape_fn((order.len(), 1), |(r, _)| gal[order[r]].3);
                evaluate(qe.view(), ge.view(), &queries, &g, &EvalProtocol::new(EvalMode::ClothChanging)).unwrap().report
            };
            let ident: Vec<usize> = (0..gal.len()).collect();
            let mut perm = ident.clone();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = (build(&ident), build(&perm));
            prop_assert_eq!(a.num_queries_used, b.num_queries_used);
            prop_assert_eq!(a.rank_k, b.rank_k);
            match (a.map_score, b.map_score) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}
