//! Distances, triplet losses (plain, hardness-adjusted, aggregated),
//! cross-entropy and the combined objective, each with exact gradients.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::analyzer::AdjustmentMatrices;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-12;
pub const DEFAULT_MARGIN: f64 = 0.3;
/// Weight of the adjusted-distance triplet term in the aggregated loss.
pub const DEFAULT_ADJ_WEIGHT: f64 = 0.5;

/// Euclidean distances between batch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub d: Array2<f64>,
    pub squared: bool,
    pub eps: f64,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.d.nrows()
    }
}

/// `d(i,j) = sqrt(|f_i - f_j|^2 + eps)` with the diagonal forced to zero.
pub fn pairwise_distance(features: ArrayView2<f64>, eps: f64) -> DistanceMatrix {
    let n = features.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = features
                .row(i)
                .iter()
                .zip(features.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = (s + eps).sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    DistanceMatrix { d, squared: false, eps }
}

/// Pull a gradient w.r.t. the distance matrix back onto the feature rows.
///
/// `grad` need not be symmetric; both `(i,j)` and `(j,i)` entries feed the
/// same underlying distance. Zero-distance pairs contribute nothing.
pub fn distance_backward(
    features: ArrayView2<f64>,
    dist: &DistanceMatrix,
    grad: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = features.nrows();
    if dist.n() != n || grad.dim() != (n, n) {
        return Err(Error::Contract(format!(
            "distance backward: features have {n} rows, distances {}x{}, gradient {:?}",
            dist.n(),
            dist.n(),
            grad.dim()
        )));
    }
    let mut out = Array2::zeros(features.raw_dim());
    for i in 0..n {
        for j in (i + 1)..n {
            let c = grad[[i, j]] + grad[[j, i]];
            let dij = dist.d[[i, j]];
            if c == 0.0 || dij == 0.0 {
                continue;
            }
            let scale = c / dij;
            for k in 0..features.ncols() {
                let diff = scale * (features[[i, k]] - features[[j, k]]);
                out[[i, k]] += diff;
                out[[j, k]] -= diff;
            }
        }
    }
    Ok(out)
}

/// `d'(i,j) = d(i,j) · hp_m(i,j) · hn_m(i,j)`.
pub fn adjust_distances(dist: &DistanceMatrix, adj: &AdjustmentMatrices) -> Result<DistanceMatrix> {
    if adj.hp_m.dim() != dist.d.dim() || adj.hn_m.dim() != dist.d.dim() {
        return Err(Error::Contract(format!(
            "adjustment matrices {:?}/{:?} do not match distances {:?}",
            adj.hp_m.dim(),
            adj.hn_m.dim(),
            dist.d.dim()
        )));
    }
    let mut d = dist.d.clone();
    Zip::from(&mut d)
        .and(&adj.hp_m)
        .and(&adj.hn_m)
        .for_each(|x, &hp, &hn| *x = *x * hp * hn);
    Ok(DistanceMatrix {
        d,
        squared: dist.squared,
        eps: dist.eps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// Hardest positive and hardest negative per anchor.
    #[default]
    BatchHard,
    /// Every valid (anchor, positive, negative) triplet.
    BatchAll,
}

impl std::str::FromStr for Mining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_hard" => Ok(Self::BatchHard),
            "batch_all" => Ok(Self::BatchAll),
            other => Err(Error::Config(format!("unknown mining scheme {other:?}"))),
        }
    }
}

/// Loss value and its gradient w.r.t. the distance matrix it was given.
#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
    /// Hinges with a strictly positive value.
    pub active: usize,
    /// Terms averaged over: anchors (batch-hard) or triplets (batch-all).
    pub terms: usize,
    /// Set when no anchor had both a positive and a negative.
    pub degenerate: bool,
}

impl TripletOutput {
    fn zero(n: usize) -> Self {
        Self {
            loss: 0.0,
            grad: Array2::zeros((n, n)),
            active: 0,
            terms: 0,
            degenerate: false,
        }
    }
}

pub fn triplet_loss(dist: &DistanceMatrix, identities: &[i64], margin: f64, mining: Mining) -> Result<TripletOutput> {
    let n = dist.n();
    if identities.len() != n {
        return Err(Error::Contract(format!(
            "{} identities for a {n}x{n} distance matrix",
            identities.len()
        )));
    }
    let d = &dist.d;
    let mut out = TripletOutput::zero(n);
    match mining {
        Mining::BatchHard => {
            // (anchor, hardest positive, hardest negative, hinge)
            let mut picks = Vec::with_capacity(n);
            for a in 0..n {
                let mut pos: Option<usize> = None;
                let mut neg: Option<usize> = None;
                for j in 0..n {
                    if j == a {
                        continue;
                    }
                    if identities[j] == identities[a] {
                        if pos.is_none_or(|p| d[[a, j]] > d[[a, p]]) {
                            pos = Some(j);
                        }
                    } else if neg.is_none_or(|q| d[[a, j]] < d[[a, q]]) {
                        neg = Some(j);
                    }
                }
                if let (Some(p), Some(q)) = (pos, neg) {
                    picks.push((a, p, q, d[[a, p]] - d[[a, q]] + margin));
                }
            }
            out.terms = picks.len();
            if picks.is_empty() {
                out.degenerate = true;
                return Ok(out);
            }
            let w = 1.0 / picks.len() as f64;
            let mut sum = 0.0;
            for (a, p, q, h) in picks {
                if h > 0.0 {
                    sum += h;
                    out.active += 1;
                    out.grad[[a, p]] += w;
                    out.grad[[a, q]] -= w;
                }
            }
            out.loss = sum * w;
        }
        Mining::BatchAll => {
            let mut count = 0usize;
            let mut active = Vec::new();
            let mut sum = 0.0;
            for a in 0..n {
                for p in 0..n {
                    if p == a || identities[p] != identities[a] {
                        continue;
                    }
                    for q in 0..n {
                        if identities[q] == identities[a] {
                            continue;
                        }
                        count += 1;
                        let h = d[[a, p]] - d[[a, q]] + margin;
                        if h > 0.0 {
                            sum += h;
                            active.push((a, p, q));
                        }
                    }
                }
            }
            out.terms = count;
            if count == 0 {
                out.degenerate = true;
                return Ok(out);
            }
            let w = 1.0 / count as f64;
            out.active = active.len();
            for (a, p, q) in active {
                out.grad[[a, p]] += w;
                out.grad[[a, q]] -= w;
            }
            out.loss = sum * w;
        }
    }
    Ok(out)
}

/// Triplet loss mined and evaluated on hardness-adjusted distances.
///
/// The returned gradient is w.r.t. the *raw* distances, i.e. the adjusted
/// gradient scaled elementwise by `hp_m ⊙ hn_m`.
pub fn hsda_triplet_loss(
    dist: &DistanceMatrix,
    adj: &AdjustmentMatrices,
    identities: &[i64],
    margin: f64,
    mining: Mining,
) -> Result<TripletOutput> {
    let adjusted = adjust_distances(dist, adj)?;
    let mut out = triplet_loss(&adjusted, identities, margin, mining)?;
    Zip::from(&mut out.grad)
        .and(&adj.hp_m)
        .and(&adj.hn_m)
        .for_each(|g, &hp, &hn| *g = *g * hp * hn);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AggregatedOutput {
    pub loss: f64,
    pub raw: TripletOutput,
    pub adjusted: TripletOutput,
    /// Gradient of `loss` w.r.t. the raw distances.
    pub grad: Array2<f64>,
}

/// `L_tri(d) + 0.5 · L_tri(d')`.
pub fn aggregated_triplet_loss(
    dist: &DistanceMatrix,
    adj: &AdjustmentMatrices,
    identities: &[i64],
    margin: f64,
    mining: Mining,
) -> Result<AggregatedOutput> {
    aggregated_triplet_loss_weighted(dist, adj, identities, margin, mining, DEFAULT_ADJ_WEIGHT)
}

/// `L_tri(d) + adj_weight · L_tri(d')`.
pub fn aggregated_triplet_loss_weighted(
    dist: &DistanceMatrix,
    adj: &AdjustmentMatrices,
    identities: &[i64],
    margin: f64,
    mining: Mining,
    adj_weight: f64,
) -> Result<AggregatedOutput> {
    let raw = triplet_loss(dist, identities, margin, mining)?;
    let adjusted = hsda_triplet_loss(dist, adj, identities, margin, mining)?;
    let loss = raw.loss + adj_weight * adjusted.loss;
    let mut grad = raw.grad.clone();
    grad.scaled_add(adj_weight, &adjusted.grad);
    Ok(AggregatedOutput {
        loss,
        raw,
        adjusted,
        grad,
    })
}

/// Mean softmax cross-entropy over rows; returns the loss and `d loss / d logits`.
pub fn cross_entropy(logits: ArrayView2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if targets.len() != n {
        return Err(Error::Contract(format!("{} targets for {n} logit rows", targets.len())));
    }
    if c < 2 {
        return Err(Error::Contract(format!("cross-entropy needs >= 2 classes, got {c}")));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Contract(format!(
            "target class {t} out of range for {c} classes"
        )));
    }
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        loss -= row[targets[i]] - max - log_sum;
        for (k, &z) in row.iter().enumerate() {
            let p = (z - max - log_sum).exp();
            grad[[i, k]] = (p - if k == targets[i] { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

pub fn total_loss(l_cls: f64, l_hatrip: f64, lambda: f64) -> f64 {
    l_cls + lambda * l_hatrip
}

/// Per-batch loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_tri_raw: f64,
    pub l_tri_adj: f64,
    pub l_hatrip: f64,
    pub l_total: f64,
    pub active_triplets_raw: usize,
    pub active_triplets_adj: usize,
}

/// Settings for the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub margin: f64,
    pub mining: Mining,
    pub lambda: f64,
    pub adj_weight: f64,
    pub eps: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            mining: Mining::BatchHard,
            lambda: 0.1,
            adj_weight: DEFAULT_ADJ_WEIGHT,
            eps: DEFAULT_EPS,
        }
    }
}

/// Combined objective with gradients w.r.t. embeddings and logits.
#[derive(Debug, Clone)]
pub struct LossStack {
    pub report: LossReport,
    pub grad_embeddings: Array2<f64>,
    pub grad_logits: Array2<f64>,
}

/// `L_cls + λ·(L_tri(d) + w·L_tri(d'))`, or `L_cls + λ·L_tri(d)` when `adj` is `None`.
pub fn loss_stack(
    embeddings: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    identities: &[i64],
    classes: &[usize],
    settings: &LossSettings,
    adj: Option<&AdjustmentMatrices>,
) -> Result<LossStack> {
    let dist = pairwise_distance(embeddings, settings.eps);
    let (l_cls, grad_logits) = cross_entropy(logits, classes)?;
    let (l_tri_raw, l_tri_adj, active_raw, active_adj, mut grad_dist) = match adj {
        Some(adj) => {
            let agg = aggregated_triplet_loss_weighted(
                &dist,
                adj,
                identities,
                settings.margin,
                settings.mining,
                settings.adj_weight,
            )?;
            (
                agg.raw.loss,
                agg.adjusted.loss,
                agg.raw.active,
                agg.adjusted.active,
                agg.grad,
            )
        }
        None => {
            let t = triplet_loss(&dist, identities, settings.margin, settings.mining)?;
            (t.loss, 0.0, t.active, 0, t.grad)
        }
    };
    let l_hatrip = l_tri_raw + settings.adj_weight * l_tri_adj;
    let l_total = total_loss(l_cls, l_hatrip, settings.lambda);
    grad_dist.mapv_inplace(|g| g * settings.lambda);
    let grad_embeddings = distance_backward(embeddings, &dist, grad_dist.view())?;
    Ok(LossStack {
        report: LossReport {
            l_cls,
            l_tri_raw,
            l_tri_adj,
            l_hatrip,
            l_total,
            active_triplets_raw: active_raw,
            active_triplets_adj: active_adj,
        },
        grad_embeddings,
        grad_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::{build_adjustment_matrices, build_assessment_matrices};
    use crate::data::Labels;
    use ndarray::array;

    fn dm(d: Array2<f64>) -> DistanceMatrix {
        DistanceMatrix {
            d,
            squared: false,
            eps: 0.0,
        }
    }

    #[test]
    fn pythagorean_distance() {
        let f = array![[0.0, 0.0], [3.0, 4.0]];
        let d = pairwise_distance(f.view(), 0.0);
        assert_eq!(d.d[[0, 1]], 5.0);
        assert_eq!(d.d[[1, 0]], 5.0);
        assert_eq!(d.d[[0, 0]], 0.0);
    }

    #[test]
    fn eps_smoothing_on_duplicates() {
        let f = array![[1.0, 1.0], [1.0, 1.0]];
        let d = pairwise_distance(f.view(), 1e-12);
        assert!((d.d[[0, 1]] - 1e-6).abs() < 1e-18);
        assert_eq!(d.d[[0, 0]], 0.0);
        assert_eq!(pairwise_distance(f.view(), 0.0).d[[0, 1]], 0.0);
    }

    fn adj_with(n: usize, hp: &[(usize, usize, f64)], hn: &[(usize, usize, f64)]) -> AdjustmentMatrices {
        let mut hp_m = Array2::from_elem((n, n), 1.0);
        let mut hn_m = Array2::from_elem((n, n), 1.0);
        for &(i, j, v) in hp {
            hp_m[[i, j]] = v;
            hp_m[[j, i]] = v;
        }
        for &(i, j, v) in hn {
            hn_m[[i, j]] = v;
            hn_m[[j, i]] = v;
        }
        AdjustmentMatrices { hp_m, hn_m, alpha: 0.0 }
    }

    #[test]
    fn adjust_examples() {
        let d = dm(array![[0.0, 2.0, 1.0], [2.0, 0.0, 2.0], [1.0, 2.0, 0.0]]);
        let adj = adj_with(3, &[(0, 1, 1.1)], &[]);
        let out = adjust_distances(&d, &adj).unwrap();
        assert!((out.d[[0, 1]] - 2.2).abs() < 1e-15);
        let adj = adj_with(3, &[], &[(1, 2, 0.8)]);
        let out = adjust_distances(&d, &adj).unwrap();
        assert!((out.d[[1, 2]] - 1.6).abs() < 1e-15);
        let adj = adj_with(3, &[], &[]);
        assert_eq!(adjust_distances(&d, &adj).unwrap().d, d.d);
        let adj = adj_with(2, &[], &[]);
        assert!(matches!(adjust_distances(&d, &adj), Err(Error::Contract(_))));
    }

    // anchor 0, positive 1, negative 2
    fn one_triplet(dap: f64, dan: f64) -> DistanceMatrix {
        dm(array![[0.0, dap, dan], [dap, 0.0, 5.0], [dan, 5.0, 0.0]])
    }

    #[test]
    fn inactive_triplet_has_zero_gradient() {
        let d = one_triplet(1.0, 2.0);
        // identities: anchor & positive share id 1; negative id 2.
        // Only anchor 0's row matters here; other anchors are far from active.
        let out = triplet_loss(&d, &[1, 1, 2], 0.3, Mining::BatchHard).unwrap();
        assert_eq!(out.grad.row(0).iter().filter(|&&g| g != 0.0).count(), 0);
    }

    #[test]
    fn active_triplet_contribution() {
        let d = one_triplet(1.0, 1.2);
        let out = triplet_loss(&d, &[1, 1, 2], 0.3, Mining::BatchHard).unwrap();
        // anchor 0: 1.0 - 1.2 + 0.3 = 0.1; anchor 1: 1.0 - 5.0 + 0.3 < 0; anchor 2 has no positive.
        assert_eq!(out.terms, 2);
        assert!((out.loss - 0.1 / 2.0).abs() < 1e-15);
        assert_eq!(out.grad[[0, 1]], 0.5);
        assert_eq!(out.grad[[0, 2]], -0.5);
        assert_eq!(out.active, 1);
    }

    #[test]
    fn batch_all_equal_distances_gives_margin() {
        let mut d = Array2::from_elem((4, 4), 1.7);
        d.diag_mut().fill(0.0);
        let out = triplet_loss(&dm(d), &[1, 1, 2, 2], 0.3, Mining::BatchAll).unwrap();
        // 4 anchors × 1 positive × 2 negatives
        assert_eq!(out.terms, 8);
        assert!((out.loss - 0.3).abs() < 1e-15);
        assert_eq!(out.active, 8);
    }

    #[test]
    fn degenerate_batch_flags() {
        let d = dm(array![[0.0, 1.0], [1.0, 0.0]]);
        let out = triplet_loss(&d, &[1, 2], 0.3, Mining::BatchHard).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn hsda_substitution() {
        let d = one_triplet(1.0, 1.2);
        let adj = adj_with(3, &[(0, 1, 1.2)], &[(0, 2, 0.8)]);
        let out = hsda_triplet_loss(&d, &adj, &[1, 1, 2], 0.3, Mining::BatchHard).unwrap();
        // anchor 0: 1.2·1.0 − 0.8·1.2 + 0.3 = 0.54, averaged over 2 anchors
        assert!((out.loss - 0.54 / 2.0).abs() < 1e-12);
        assert!((out.grad[[0, 1]] - 1.2 * 0.5).abs() < 1e-15);
        assert!((out.grad[[0, 2]] + 0.8 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn hsda_with_unit_factors_matches_plain() {
        let d = one_triplet(1.0, 1.2);
        let adj = adj_with(3, &[], &[]);
        let a = hsda_triplet_loss(&d, &adj, &[1, 1, 2], 0.3, Mining::BatchHard).unwrap();
        let b = triplet_loss(&d, &[1, 1, 2], 0.3, Mining::BatchHard).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn aggregated_weighting() {
        let d = one_triplet(1.0, 1.2);
        let adj = adj_with(3, &[], &[]);
        let agg = aggregated_triplet_loss(&d, &adj, &[1, 1, 2], 0.3, Mining::BatchHard).unwrap();
        assert_eq!(agg.loss, 1.5 * agg.raw.loss);
        let d = one_triplet(1.0, 3.0);
        let agg = aggregated_triplet_loss(&d, &adj, &[1, 1, 2], 0.3, Mining::BatchHard).unwrap();
        assert_eq!(agg.loss, 0.0);
        assert!(agg.grad.iter().all(|&g| g == 0.0));
        // 0.4 + 0.5·0.6
        assert!((0.4f64 + DEFAULT_ADJ_WEIGHT * 0.6 - 0.7).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(Array2::zeros((3, 4)).view(), &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(array![[0.0, 1000.0, 0.0]].view(), &[1]).unwrap();
        assert!(l.abs() < 1e-12);
        let (l, g) = cross_entropy(array![[1.0, 0.0]].view(), &[0]).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g[[0, 0]] - (s - 1.0)).abs() < 1e-12);
        assert!((g[[0, 1]] - (1.0 - s)).abs() < 1e-12);
        assert!(cross_entropy(array![[1.0]].view(), &[0]).is_err());
        assert!(cross_entropy(array![[1.0, 2.0]].view(), &[2]).is_err());
    }

    #[test]
    fn total_loss_cases() {
        assert!((total_loss(1.0, 0.5, 0.1) - 1.05).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 0.5, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 0.0, 0.1), 1.0);
    }

    #[test]
    fn loss_stack_report_invariants() {
        let emb = array![[0.0, 0.1], [0.3, -0.2], [1.0, 0.5], [0.9, 0.7]];
        let logits = array![[0.1, 0.2], [0.0, -0.3], [0.5, 0.1], [0.2, 0.2]];
        let labels = [
            Labels::new(1, 0, 0),
            Labels::new(1, 1, 0),
            Labels::new(2, 1, 1),
            Labels::new(2, 2, 1),
        ];
        let ids: Vec<i64> = labels.iter().map(|l| l.identity).collect();
        let adj = build_adjustment_matrices(&build_assessment_matrices(&labels, true), 0.2).unwrap();
        let settings = LossSettings::default();
        let s = loss_stack(emb.view(), logits.view(), &ids, &[0, 0, 1, 1], &settings, Some(&adj)).unwrap();
        let r = s.report;
        assert_eq!(r.l_hatrip, r.l_tri_raw + 0.5 * r.l_tri_adj);
        assert!((r.l_total - (r.l_cls + 0.1 * r.l_hatrip)).abs() < 1e-15);
        assert!(r.l_cls >= 0.0 && r.l_tri_raw >= 0.0 && r.l_tri_adj >= 0.0);
    }
}
