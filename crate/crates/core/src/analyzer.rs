//! Label-defined hardness for pairs inside a batch.
//!
//! A hard positive is a same-identity pair whose clothing differs (or, with
//! viewpoint hardness on, whose viewpoint differs). A hard negative is a
//! cross-identity pair wearing the same known garment. Unknown clothing
//! counts as "different" for positives and never matches for negatives;
//! unknown viewpoints never make a pair hard.

use ndarray::Array2;

use crate::data::{Labels, UNKNOWN};
use crate::error::{Error, Result};

/// Boolean n×n hard-positive / hard-negative indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct AssessmentMatrices {
    pub is_hp: Array2<bool>,
    pub is_hn: Array2<bool>,
}

impl AssessmentMatrices {
    pub fn n(&self) -> usize {
        self.is_hp.nrows()
    }

    pub fn count_hp(&self) -> usize {
        self.is_hp.iter().filter(|&&b| b).count()
    }

    pub fn count_hn(&self) -> usize {
        self.is_hn.iter().filter(|&&b| b).count()
    }
}

/// Distance scaling factors: 1+α on hard positives, 1−α on hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentMatrices {
    pub hp_m: Array2<f64>,
    pub hn_m: Array2<f64>,
    pub alpha: f64,
}

impl AdjustmentMatrices {
    pub fn n(&self) -> usize {
        self.hp_m.nrows()
    }
}

#[inline]
pub fn is_hard_positive(a: &Labels, b: &Labels, viewpoint_hardness: bool) -> bool {
    if a.identity != b.identity {
        return false;
    }
    let clothing_differs = a.clothing == UNKNOWN || b.clothing == UNKNOWN || a.clothing != b.clothing;
    let view_differs =
        viewpoint_hardness && a.viewpoint != UNKNOWN && b.viewpoint != UNKNOWN && a.viewpoint != b.viewpoint;
    clothing_differs || view_differs
}

#[inline]
pub fn is_hard_negative(a: &Labels, b: &Labels) -> bool {
    a.identity != b.identity && a.clothing != UNKNOWN && a.clothing == b.clothing
}

pub fn build_assessment_matrices(batch: &[Labels], viewpoint_hardness: bool) -> AssessmentMatrices {
    let n = batch.len();
    let mut is_hp = Array2::from_elem((n, n), false);
    let mut is_hn = Array2::from_elem((n, n), false);
    for i in 0..n {
        for j in (i + 1)..n {
            let hp = is_hard_positive(&batch[i], &batch[j], viewpoint_hardness);
            let hn = is_hard_negative(&batch[i], &batch[j]);
            is_hp[[i, j]] = hp;
            is_hp[[j, i]] = hp;
            is_hn[[i, j]] = hn;
            is_hn[[j, i]] = hn;
        }
    }
    AssessmentMatrices { is_hp, is_hn }
}

pub fn build_adjustment_matrices(assess: &AssessmentMatrices, alpha: f64) -> Result<AdjustmentMatrices> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    let hp_m = assess.is_hp.mapv(|b| if b { 1.0 + alpha } else { 1.0 });
    let hn_m = assess.is_hn.mapv(|b| if b { 1.0 - alpha } else { 1.0 });
    Ok(AdjustmentMatrices { hp_m, hn_m, alpha })
}

/// Both steps at once, for callers that only need the scaling factors.
pub fn analyze_batch(batch: &[Labels], viewpoint_hardness: bool, alpha: f64) -> Result<AdjustmentMatrices> {
    build_adjustment_matrices(&build_assessment_matrices(batch, viewpoint_hardness), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l(y: i64, c: i64, v: i64) -> Labels {
        Labels::new(y, c, v)
    }

    #[test]
    fn fixture_batch() {
        let batch = [l(1, 1, 1), l(1, 2, 1), l(2, 2, 2), l(1, 1, 1)];
        let m = build_assessment_matrices(&batch, true);
        assert!(m.is_hp[[0, 1]]);
        assert!(!m.is_hp[[0, 3]]);
        assert!(m.is_hn[[1, 2]]);
        assert!(!m.is_hn[[0, 2]]);
        for i in 0..4 {
            assert!(!m.is_hp[[i, i]] && !m.is_hn[[i, i]]);
        }
    }

    #[test]
    fn unknown_clothing_rule() {
        let m = build_assessment_matrices(&[l(1, UNKNOWN, 1), l(1, 1, 1)], true);
        assert!(m.is_hp[[0, 1]]);
        let m = build_assessment_matrices(&[l(1, UNKNOWN, 1), l(2, UNKNOWN, 1)], true);
        assert!(!m.is_hn[[0, 1]]);
    }

    #[test]
    fn viewpoint_flag() {
        let batch = [l(1, 1, 0), l(1, 1, 1)];
        assert!(build_assessment_matrices(&batch, true).is_hp[[0, 1]]);
        assert!(!build_assessment_matrices(&batch, false).is_hp[[0, 1]]);
        let batch = [l(1, 1, UNKNOWN), l(1, 1, 1)];
        assert!(!build_assessment_matrices(&batch, true).is_hp[[0, 1]]);
    }

    #[test]
    fn adjustment_values() {
        let batch = [l(1, 1, 1), l(1, 2, 1), l(2, 2, 2), l(1, 1, 1)];
        let assess = build_assessment_matrices(&batch, true);
        let adj = build_adjustment_matrices(&assess, 0.2).unwrap();
        assert_eq!(adj.hp_m[[0, 1]], 1.2);
        assert_eq!(adj.hn_m[[0, 1]], 1.0);
        assert_eq!(adj.hn_m[[1, 2]], 0.8);
        let adj = build_adjustment_matrices(&assess, 0.0).unwrap();
        assert!(adj.hp_m.iter().chain(adj.hn_m.iter()).all(|&x| x == 1.0));
    }

    #[test]
    fn alpha_range_checked() {
        let assess = build_assessment_matrices(&[l(1, 1, 1)], true);
        assert!(matches!(build_adjustment_matrices(&assess, 1.0), Err(Error::Config(_))));
        assert!(matches!(
            build_adjustment_matrices(&assess, -0.1),
            Err(Error::Config(_))
        ));
        assert!(build_adjustment_matrices(&assess, 0.99).is_ok());
    }

    fn labels_strategy() -> impl Strategy<Value = Vec<Labels>> {
        prop::collection::vec((1i64..5, -1i64..4, -1i64..3), 1..40)
            .prop_map(|v| v.into_iter().map(|(y, c, w)| l(y, c, w)).collect())
    }

    proptest! {
        #[test]
        fn matrices_are_symmetric_disjoint_zero_diagonal(batch in labels_strategy(), vh in any::<bool>(), alpha in 0.0f64..0.99) {
            let m = build_assessment_matrices(&batch, vh);
            let adj = build_adjustment_matrices(&m, alpha).unwrap();
            let n = batch.len();
            for i in 0..n {
                prop_assert!(!m.is_hp[[i, i]] && !m.is_hn[[i, i]]);
                prop_assert_eq!(adj.hp_m[[i, i]], 1.0);
                prop_assert_eq!(adj.hn_m[[i, i]], 1.0);
                for j in 0..n {
                    prop_assert_eq!(m.is_hp[[i, j]], m.is_hp[[j, i]]);
                    prop_assert_eq!(m.is_hn[[i, j]], m.is_hn[[j, i]]);
                    prop_assert!(!(m.is_hp[[i, j]] && m.is_hn[[i, j]]));
                    prop_assert!(adj.hp_m[[i, j]] == 1.0 || adj.hn_m[[i, j]] == 1.0);
                }
            }
        }
    }
}
