//! Synthetic feature-space clothes-changing scenarios.
//!
//! A sample is `β_id·u_y + β_c·g_c + β_v·w_v + ε` with unit-norm Gaussian
//! prototypes for identity, garment and viewpoint. Clothing dominates
//! (`β_c > β_id`), which is what makes matching across outfits hard.
//!
//! * **base**: per-identity garments. The last `heldout_garments` garments of
//!   every identity are never trained on. For the others, the first
//!   `train_per_cell` samples of every (identity, garment, viewpoint) cell are
//!   for training. Everything else is split into query and gallery.
//! * **fine**: identities re-dressed in a library of m garments taken from
//!   the base set, so people share outfits with other people (hard negatives).
//! * **coarse**: identities in fresh random garments, clothing unlabeled.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Origin, Sample, Split, UNKNOWN};
use crate::error::{Error, Result};

const FINE_STREAM: u64 = 1 << 32;
const COARSE_STREAM: u64 = 2 << 32;
const SPLIT_STREAM: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub num_identities: usize,
    pub feature_dim: usize,
    pub garments_per_identity: usize,
    pub viewpoints: usize,
    pub samples_per_cell: usize,
    /// Garments per identity reserved for evaluation.
    pub heldout_garments: usize,
    /// Samples per (identity, training garment, viewpoint) cell used for training.
    pub train_per_cell: usize,
    pub sigma_noise: f64,
    pub beta_identity: f64,
    pub beta_clothing: f64,
    pub beta_view: f64,
    /// Shared garment library size (m), drawn from the base garments.
    pub garment_library_m: usize,
    /// Anchor images per identity re-dressed from the library (n).
    pub topn_n: usize,
    /// Fine-set size as a fraction of the base training split; `None` keeps all m·n·C.
    pub fine_fraction: Option<f64>,
    pub coarse_per_identity: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_identities: 50,
            feature_dim: 32,
            garments_per_identity: 3,
            viewpoints: 2,
            samples_per_cell: 6,
            heldout_garments: 1,
            train_per_cell: 4,
            sigma_noise: 0.1,
            beta_identity: 1.0,
            beta_clothing: 1.5,
            beta_view: 0.5,
            garment_library_m: 5,
            topn_n: 2,
            fine_fraction: Some(0.19),
            coarse_per_identity: 4,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("feature_dim", self.feature_dim),
            ("garments_per_identity", self.garments_per_identity),
            ("viewpoints", self.viewpoints),
            ("samples_per_cell", self.samples_per_cell),
            ("train_per_cell", self.train_per_cell),
            ("garment_library_m", self.garment_library_m),
            ("topn_n", self.topn_n),
            ("coarse_per_identity", self.coarse_per_identity),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.num_identities < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        if self.garment_library_m > self.num_identities * self.garments_per_identity {
            return Err(Error::Config(format!(
                "garment_library_m ({}) exceeds the {} base garments",
                self.garment_library_m,
                self.num_identities * self.garments_per_identity
            )));
        }
        if self.heldout_garments >= self.garments_per_identity {
            return Err(Error::Config(
                "heldout_garments must leave at least one training garment".into(),
            ));
        }
        if self.train_per_cell > self.samples_per_cell {
            return Err(Error::Config("train_per_cell exceeds samples_per_cell".into()));
        }
        if !(self.beta_clothing > self.beta_identity) {
            return Err(Error::Config(format!(
                "beta_clothing ({}) must exceed beta_identity ({})",
                self.beta_clothing, self.beta_identity
            )));
        }
        if !(self.sigma_noise >= 0.0) || !(self.beta_identity >= 0.0) || !(self.beta_view >= 0.0) {
            return Err(Error::Config("noise and salience weights must be >= 0".into()));
        }
        if let Some(f) = self.fine_fraction {
            if !(f > 0.0) || !f.is_finite() {
                return Err(Error::Config(format!("fine_fraction must be > 0, got {f}")));
            }
        }
        Ok(())
    }

    fn base_clothing_id(&self, identity: usize, garment: usize) -> i64 {
        ((identity - 1) * self.garments_per_identity + garment) as i64
    }

    fn is_training_garment(&self, garment: usize) -> bool {
        garment + self.heldout_garments < self.garments_per_identity
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub base: Dataset,
    pub coarse: Dataset,
    pub fine: Dataset,
    pub provenance: ScenarioConfig,
    /// Identities dropped while assigning query/gallery.
    pub split_warnings: usize,
}

impl GeneratedSet {
    /// Training samples of base, plus fine when requested.
    pub fn training_set(&self, with_fine: bool) -> Result<Dataset> {
        let train = self.base.subset(Split::Train)?;
        if with_fine {
            Dataset::concat([&train, &self.fine])
        } else {
            Ok(train)
        }
    }

    /// Query and gallery samples of the base set.
    pub fn eval_set(&self) -> Result<Dataset> {
        Dataset::new(
            self.base
                .samples()
                .iter()
                .filter(|s| s.split != Split::Train)
                .cloned()
                .collect(),
        )
    }
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct Mixer<'a> {
    cfg: &'a ScenarioConfig,
    views: &'a [Vec<f64>],
}

impl Mixer<'_> {
    fn mix(&self, rng: &mut impl Rng, identity: &[f64], garment: &[f64], view: usize) -> Vec<f64> {
        let c = self.cfg;
        let w = &self.views[view];
        (0..c.feature_dim)
            .map(|i| {
                let noise: f64 = rng.sample(StandardNormal);
                c.beta_identity * identity[i]
                    + c.beta_clothing * garment[i]
                    + c.beta_view * w[i]
                    + c.sigma_noise * noise
            })
            .collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<GeneratedSet> {
    config.validate()?;
    let c = config;
    let d = c.feature_dim;
    let mut proto = stream_rng(c.seed, 0);
    let identities: Vec<Vec<f64>> = (0..c.num_identities).map(|_| unit_vector(&mut proto, d)).collect();
    let garments: Vec<Vec<Vec<f64>>> = (0..c.num_identities)
        .map(|_| {
            (0..c.garments_per_identity)
                .map(|_| unit_vector(&mut proto, d))
                .collect()
        })
        .collect();
    let views: Vec<Vec<f64>> = (0..c.viewpoints).map(|_| unit_vector(&mut proto, d)).collect();
    // library entries are (owner index, garment index) of base garments
    let library: Vec<(usize, usize)> = rand::seq::index::sample(
        &mut proto,
        c.num_identities * c.garments_per_identity,
        c.garment_library_m,
    )
    .into_iter()
    .map(|i| (i / c.garments_per_identity, i % c.garments_per_identity))
    .collect();
    let mixer = Mixer { cfg: c, views: &views };

    let mut base = Vec::new();
    // training samples per identity, for anchor selection
    let mut train_by_identity: Vec<Vec<usize>> = vec![Vec::new(); c.num_identities];
    for y in 1..=c.num_identities {
        let mut rng = stream_rng(c.seed, 1 + y as u64);
        for (k, garment) in garments[y - 1].iter().enumerate() {
            for v in 0..c.viewpoints {
                for s in 0..c.samples_per_cell {
                    let features = mixer.mix(&mut rng, &identities[y - 1], garment, v);
                    let train = c.is_training_garment(k) && s < c.train_per_cell;
                    if train {
                        train_by_identity[y - 1].push(base.len());
                    }
                    base.push(Sample {
                        sample_id: format!("b{y}-g{k}-v{v}-{s}"),
                        identity: y as i64,
                        clothing: c.base_clothing_id(y, k),
                        viewpoint: v as i64,
                        split: if train { Split::Train } else { Split::Gallery },
                        origin: Origin::Real,
                        features: Some(features),
                        image_ref: None,
                    });
                }
            }
        }
    }
    let base_train = base.iter().filter(|s| s.split == Split::Train).count();

    // Fine set: every identity contributes n anchors × m library garments,
    // trimmed to the budget by dealing one candidate per identity per round.
    let per_identity = c.topn_n * c.garment_library_m;
    let pool = per_identity * c.num_identities;
    let budget = match c.fine_fraction {
        Some(f) => ((f * base_train as f64).round() as usize).clamp(1, pool),
        None => pool,
    };
    let mut order: Vec<usize> = (1..=c.num_identities).collect();
    order.shuffle(&mut stream_rng(c.seed, FINE_STREAM));
    // anchors are spread evenly over each identity's training samples
    let anchors: BTreeMap<usize, Vec<usize>> = (1..=c.num_identities)
        .map(|y| {
            let candidates = &train_by_identity[y - 1];
            let picked = (0..c.topn_n)
                .map(|a| candidates[(a * candidates.len() / c.topn_n) % candidates.len()])
                .collect();
            (y, picked)
        })
        .collect();
    let mut fine = Vec::with_capacity(budget);
    'rounds: for r in 0..per_identity {
        for &y in &order {
            if fine.len() == budget {
                break 'rounds;
            }
            let a = r / c.garment_library_m;
            let j = (y + r) % c.garment_library_m;
            let anchor = &base[anchors[&y][a]];
            let view = anchor.viewpoint as usize;
            let mut rng = stream_rng(c.seed, FINE_STREAM + ((y as u64) << 16) + r as u64);
            let (owner, k) = library[j];
            let features = mixer.mix(&mut rng, &identities[y - 1], &garments[owner][k], view);
            fine.push(Sample {
                sample_id: format!("f{y}-a{a}-g{j}"),
                identity: y as i64,
                clothing: c.base_clothing_id(owner + 1, k),
                viewpoint: view as i64,
                split: Split::Train,
                origin: Origin::FineGenerated,
                features: Some(features),
                image_ref: None,
            });
        }
    }

    let mut coarse = Vec::with_capacity(c.num_identities * c.coarse_per_identity);
    for y in 1..=c.num_identities {
        let mut rng = stream_rng(c.seed, COARSE_STREAM + y as u64);
        for s in 0..c.coarse_per_identity {
            let garment = unit_vector(&mut rng, d);
            let view = s % c.viewpoints;
            let features = mixer.mix(&mut rng, &identities[y - 1], &garment, view);
            coarse.push(Sample {
                sample_id: format!("c{y}-{s}"),
                identity: y as i64,
                clothing: UNKNOWN,
                viewpoint: view as i64,
                split: Split::Train,
                origin: Origin::CoarseGenerated,
                features: Some(features),
                image_ref: None,
            });
        }
    }

    let (base, split_warnings) = split_query_gallery(&Dataset::new(base)?, SplitRule::CrossCamera, c.seed)?;
    Ok(GeneratedSet {
        base,
        coarse: Dataset::new(coarse)?,
        fine: Dataset::new(fine)?,
        provenance: c.clone(),
        split_warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Per identity, one viewpoint becomes the query camera; the rest is gallery.
    CrossCamera,
    /// Per identity, a random half (at least one) becomes query.
    Random,
}

/// Assign query/gallery to every non-train sample. Train samples are kept
/// as they are. Identities that cannot be split under `rule` are removed
/// from the evaluation pool; their count is returned.
pub fn split_query_gallery(dataset: &Dataset, rule: SplitRule, seed: u64) -> Result<(Dataset, usize)> {
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        if s.split != Split::Train {
            groups.entry(s.identity).or_default().push(i);
        }
    }
    let mut assigned: BTreeMap<usize, Split> = BTreeMap::new();
    let mut excluded = 0;
    for (&y, members) in &groups {
        let mut rng = stream_rng(seed, SPLIT_STREAM + y as u64);
        match rule {
            SplitRule::CrossCamera => {
                let views: BTreeSet<i64> = members.iter().map(|&i| dataset.samples()[i].viewpoint).collect();
                if views.len() < 2 {
                    excluded += 1;
                    continue;
                }
                let views: Vec<i64> = views.into_iter().collect();
                let q = views[rng.random_range(0..views.len())];
                for &i in members {
                    let split = if dataset.samples()[i].viewpoint == q {
                        Split::Query
                    } else {
                        Split::Gallery
                    };
                    assigned.insert(i, split);
                }
            }
            SplitRule::Random => {
                if members.len() < 2 {
                    excluded += 1;
                    continue;
                }
                let mut shuffled = members.clone();
                shuffled.shuffle(&mut rng);
                let nq = shuffled.len() / 2;
                for (r, &i) in shuffled.iter().enumerate() {
                    assigned.insert(i, if r < nq { Split::Query } else { Split::Gallery });
                }
            }
        }
    }
    let samples = dataset
        .samples()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if s.split == Split::Train {
                Some(s.clone())
            } else {
                assigned.get(&i).map(|&split| Sample { split, ..s.clone() })
            }
        })
        .collect();
    if excluded > 0 {
        log::warn!("{excluded} identities could not be split under {rule:?} and were excluded");
    }
    Ok((Dataset::new(samples)?, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::build_assessment_matrices;
    use crate::data::Labels;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            num_identities: 6,
            feature_dim: 8,
            samples_per_cell: 4,
            train_per_cell: 2,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn zero_noise_cells_are_identical() {
        let cfg = ScenarioConfig {
            sigma_noise: 0.0,
            ..small()
        };
        let set = generate_scenario(&cfg).unwrap();
        let find = |id: &str| {
            set.base
                .samples()
                .iter()
                .find(|s| s.sample_id == id)
                .unwrap()
                .features
                .clone()
        };
        assert_eq!(find("b1-g0-v0-0"), find("b1-g0-v0-1"));
        assert_ne!(find("b1-g0-v0-0"), find("b1-g0-v1-0"));
    }

    #[test]
    fn base_has_no_hard_negatives() {
        let set = generate_scenario(&small()).unwrap();
        let labels: Vec<Labels> = set.base.samples().iter().map(|s| s.labels()).collect();
        assert_eq!(build_assessment_matrices(&labels, true).count_hn(), 0);
    }

    #[test]
    fn fine_library_creates_shared_garments() {
        let cfg = ScenarioConfig {
            num_identities: 3,
            garment_library_m: 2,
            topn_n: 1,
            fine_fraction: None,
            ..small()
        };
        let set = generate_scenario(&cfg).unwrap();
        assert_eq!(set.fine.len(), 6);
        let both = Dataset::concat([&set.base, &set.fine]).unwrap();
        let s = both.samples();
        let shared = (0..s.len())
            .any(|i| (0..s.len()).any(|j| s[i].identity != s[j].identity && s[i].clothing == s[j].clothing));
        assert!(shared);
        assert!(set.coarse.samples().iter().all(|s| s.clothing == UNKNOWN));
    }

    #[test]
    fn fine_budget_tracks_fraction() {
        let cfg = ScenarioConfig::default();
        let set = generate_scenario(&cfg).unwrap();
        let train = set.base.subset(Split::Train).unwrap().len();
        let ratio = set.fine.len() as f64 / train as f64;
        assert!((0.18..=0.20).contains(&ratio), "ratio {ratio}");
        // budget spreads over identities
        let ids: BTreeSet<i64> = set.fine.samples().iter().map(|s| s.identity).collect();
        assert_eq!(ids.len(), cfg.num_identities);
    }

    #[test]
    fn held_out_garment_never_trains() {
        let cfg = small();
        let set = generate_scenario(&cfg).unwrap();
        let last = format!("-g{}-", cfg.garments_per_identity - 1);
        for s in set.base.samples() {
            if s.sample_id.contains(&last) {
                assert_ne!(s.split, Split::Train, "{}", s.sample_id);
            }
        }
        let train = set.base.subset(Split::Train).unwrap();
        let seen = cfg.num_identities * (cfg.garments_per_identity - 1) * cfg.viewpoints;
        assert_eq!(train.len(), seen * cfg.train_per_cell);
        let all = generate_scenario(&ScenarioConfig {
            heldout_garments: 0,
            ..cfg.clone()
        })
        .unwrap()
        .base;
        assert_eq!(
            all.subset(Split::Train).unwrap().len(),
            all.len() * cfg.train_per_cell / cfg.samples_per_cell
        );
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_scenario(&small()).unwrap();
        let b = generate_scenario(&small()).unwrap();
        assert_eq!(a.base.samples(), b.base.samples());
        assert_eq!(a.fine.samples(), b.fine.samples());
        assert_eq!(a.coarse.samples(), b.coarse.samples());
        let c = generate_scenario(&ScenarioConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.base.samples(), c.base.samples());
    }

    #[test]
    fn config_checks() {
        assert!(ScenarioConfig {
            beta_clothing: 0.5,
            ..small()
        }
        .validate()
        .is_err());
        assert!(ScenarioConfig {
            viewpoints: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(ScenarioConfig {
            train_per_cell: 9,
            ..small()
        }
        .validate()
        .is_err());
    }

    fn eval_sample(id: &str, y: i64, v: i64) -> Sample {
        Sample {
            sample_id: id.into(),
            identity: y,
            clothing: 0,
            viewpoint: v,
            split: Split::Gallery,
            origin: Origin::Real,
            features: Some(vec![0.0]),
            image_ref: None,
        }
    }

    #[test]
    fn cross_camera_split_separates_views() {
        let set = generate_scenario(&small()).unwrap();
        let s = set.base.samples();
        for q in s.iter().filter(|s| s.split == Split::Query) {
            for g in s
                .iter()
                .filter(|g| g.split == Split::Gallery && g.identity == q.identity)
            {
                assert_ne!(q.viewpoint, g.viewpoint);
            }
            assert!(s.iter().any(|g| g.split == Split::Gallery && g.identity == q.identity));
        }
        let again = generate_scenario(&small()).unwrap();
        assert_eq!(set.base.samples(), again.base.samples());
    }

    #[test]
    fn single_view_identity_is_excluded() {
        let ds = Dataset::new(vec![
            eval_sample("a", 1, 0),
            eval_sample("b", 1, 0),
            eval_sample("c", 2, 0),
            eval_sample("d", 2, 1),
        ])
        .unwrap();
        let (out, warnings) = split_query_gallery(&ds, SplitRule::CrossCamera, 3).unwrap();
        assert_eq!(warnings, 1);
        assert_eq!(out.len(), 2);
        assert!(out.samples().iter().all(|s| s.identity == 2));
        let (out, warnings) = split_query_gallery(&ds, SplitRule::Random, 3).unwrap();
        assert_eq!(warnings, 0);
        assert_eq!(out.samples().iter().filter(|s| s.split == Split::Query).count(), 2);
    }
}
