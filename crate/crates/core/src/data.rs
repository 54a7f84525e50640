//! Samples, datasets, manifest I/O, label unification and P×K sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel for an unknown clothing or viewpoint label.
pub const UNKNOWN: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    CoarseGenerated,
    FineGenerated,
}

/// One pedestrian observation. Field order matches the manifest line schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub identity: i64,
    pub clothing: i64,
    pub viewpoint: i64,
    pub split: Split,
    pub origin: Origin,
    pub features: Option<Vec<f64>>,
    pub image_ref: Option<String>,
}

impl Sample {
    pub fn labels(&self) -> Labels {
        Labels {
            identity: self.identity,
            clothing: self.clothing,
            viewpoint: self.viewpoint,
        }
    }

    fn validate(&self) -> Result<()> {
        let id = &self.sample_id;
        if id.is_empty() {
            return Err(Error::Validation("empty sample_id".into()));
        }
        if self.identity < 1 {
            return Err(Error::Validation(format!(
                "sample {id}: identity must be >= 1, got {}",
                self.identity
            )));
        }
        for (name, v) in [("clothing", self.clothing), ("viewpoint", self.viewpoint)] {
            if v < 0 && v != UNKNOWN {
                return Err(Error::Validation(format!(
                    "sample {id}: {name} must be >= 0 or {UNKNOWN}, got {v}"
                )));
            }
        }
        match (&self.features, &self.image_ref) {
            (Some(_), Some(_)) => {
                return Err(Error::Validation(format!(
                    "sample {id}: both features and image_ref are set"
                )))
            }
            (None, None) => {
                return Err(Error::Validation(format!(
                    "sample {id}: neither features nor image_ref is set"
                )))
            }
            _ => {}
        }
        if let Some(f) = &self.features {
            if f.is_empty() {
                return Err(Error::Validation(format!("sample {id}: empty feature vector")));
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("sample {id}: non-finite feature")));
            }
        }
        match self.origin {
            Origin::FineGenerated if self.clothing == UNKNOWN => Err(Error::Validation(format!(
                "sample {id}: fine_generated samples must carry a clothing label"
            ))),
            Origin::CoarseGenerated if self.clothing != UNKNOWN => Err(Error::Validation(format!(
                "sample {id}: coarse_generated samples must have clothing = {UNKNOWN}"
            ))),
            _ => Ok(()),
        }
    }
}

/// The three labels hardness is defined over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Labels {
    pub identity: i64,
    pub clothing: i64,
    pub viewpoint: i64,
}

impl Labels {
    pub fn new(identity: i64, clothing: i64, viewpoint: i64) -> Self {
        Self {
            identity,
            clothing,
            viewpoint,
        }
    }
}

/// An immutable, validated collection of samples.
///
/// Raw label values are kept verbatim so manifests round-trip; dense indices
/// (identity → class index, clothing/viewpoint → vocabulary position) are
/// derived at construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    identities: Vec<i64>,
    identity_index: HashMap<i64, usize>,
    clothing_vocab: BTreeSet<i64>,
    viewpoint_vocab: BTreeSet<i64>,
    feature_dim: Option<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        let mut feature_dim: Option<(usize, &str)> = None;
        let mut identities = BTreeSet::new();
        let mut clothing_vocab = BTreeSet::new();
        let mut viewpoint_vocab = BTreeSet::new();
        for s in &samples {
            s.validate()?;
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample_id {:?}", s.sample_id)));
            }
            if let Some(f) = &s.features {
                match feature_dim {
                    None => feature_dim = Some((f.len(), &s.sample_id)),
                    Some((d, first)) if d != f.len() => {
                        return Err(Error::Validation(format!(
                            "sample {:?} has feature dim {} but {:?} has {}",
                            s.sample_id,
                            f.len(),
                            first,
                            d
                        )))
                    }
                    _ => {}
                }
            }
            identities.insert(s.identity);
            if s.clothing != UNKNOWN {
                clothing_vocab.insert(s.clothing);
            }
            if s.viewpoint != UNKNOWN {
                viewpoint_vocab.insert(s.viewpoint);
            }
        }
        let identities: Vec<i64> = identities.into_iter().collect();
        let identity_index = identities.iter().enumerate().map(|(i, &y)| (y, i)).collect();
        Ok(Self {
            feature_dim: feature_dim.map(|(d, _)| d),
            samples,
            identities,
            identity_index,
            clothing_vocab,
            viewpoint_vocab,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of distinct identities (C).
    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Distinct identity ids in ascending order; position is the dense class index.
    pub fn identities(&self) -> &[i64] {
        &self.identities
    }

    pub fn class_index(&self, identity: i64) -> Option<usize> {
        self.identity_index.get(&identity).copied()
    }

    pub fn clothing_vocab(&self) -> &BTreeSet<i64> {
        &self.clothing_vocab
    }

    pub fn viewpoint_vocab(&self) -> &BTreeSet<i64> {
        &self.viewpoint_vocab
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }

    /// Samples of one split, as a new dataset.
    pub fn subset(&self, split: Split) -> Result<Dataset> {
        Dataset::new(self.samples.iter().filter(|s| s.split == split).cloned().collect())
    }

    /// Concatenation of several datasets; ids must stay unique.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let samples = parts.into_iter().flat_map(|d| d.samples.iter().cloned()).collect();
        Dataset::new(samples)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    read_manifest(BufReader::new(file))
}

/// Parse JSON-lines manifest content. Blank lines are ignored.
pub fn read_manifest(reader: impl BufRead) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        samples.push(sample);
    }
    Dataset::new(samples)
}

pub fn write_manifest(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_manifest_to(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_manifest_to(dataset: &Dataset, w: &mut impl Write) -> Result<()> {
    for s in dataset.samples() {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// How a dataset encodes clothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// Tags are only meaningful within one identity (e.g. indoor/outdoor).
    PerIdentityTag,
    /// Tags name a garment shared across identities.
    GlobalTag,
}

impl std::str::FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_identity_tag" => Ok(Self::PerIdentityTag),
            "global_tag" => Ok(Self::GlobalTag),
            other => Err(Error::Validation(format!("unknown label scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLabel {
    pub identity: i64,
    pub raw_clothes_tag: String,
    pub raw_camera_tag: String,
}

impl RawLabel {
    pub fn new(identity: i64, clothes: &str, camera: &str) -> Self {
        Self {
            identity,
            raw_clothes_tag: clothes.to_string(),
            raw_camera_tag: camera.to_string(),
        }
    }
}

/// Map raw (identity, clothes tag, camera tag) triples to integer
/// (clothing, viewpoint) ids, numbered from 0 in order of first appearance.
pub fn unify_labels(raw: &[RawLabel], scheme: LabelScheme) -> Result<Vec<(i64, i64)>> {
    let mut clothing_ids: HashMap<(Option<i64>, &str), i64> = HashMap::new();
    let mut camera_ids: HashMap<&str, i64> = HashMap::new();
    let mut out = Vec::with_capacity(raw.len());
    for (row, r) in raw.iter().enumerate() {
        if r.raw_clothes_tag.is_empty() || r.raw_camera_tag.is_empty() {
            return Err(Error::Validation(format!("row {}: empty raw tag", row + 1)));
        }
        let key = match scheme {
            LabelScheme::PerIdentityTag => (Some(r.identity), r.raw_clothes_tag.as_str()),
            LabelScheme::GlobalTag => (None, r.raw_clothes_tag.as_str()),
        };
        let next = clothing_ids.len() as i64;
        let c = *clothing_ids.entry(key).or_insert(next);
        let next = camera_ids.len() as i64;
        let v = *camera_ids.entry(r.raw_camera_tag.as_str()).or_insert(next);
        out.push((c, v));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    identity: i64,
    raw_clothes_tag: String,
    raw_camera_tag: String,
    scheme: String,
}

/// Read a raw-label CSV (identity, raw_clothes_tag, raw_camera_tag, scheme).
/// All rows must declare the same scheme.
pub fn read_label_csv(path: impl AsRef<Path>) -> Result<(Vec<RawLabel>, LabelScheme)> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut labels = Vec::new();
    let mut scheme: Option<LabelScheme> = None;
    for (i, row) in rdr.deserialize::<LabelRow>().enumerate() {
        let row = row?;
        let s: LabelScheme = row.scheme.parse()?;
        match scheme {
            None => scheme = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::Validation(format!(
                    "row {}: scheme {:?} differs from earlier rows",
                    i + 1,
                    row.scheme
                )))
            }
            _ => {}
        }
        labels.push(RawLabel {
            identity: row.identity,
            raw_clothes_tag: row.raw_clothes_tag,
            raw_camera_tag: row.raw_camera_tag,
        });
    }
    let scheme = scheme.ok_or_else(|| Error::Validation("label file has no rows".into()))?;
    Ok((labels, scheme))
}

/// P identities × K instances per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { p: 8, k: 4, seed: 0 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "batch spec needs P >= 2 and K >= 2, got P={} K={}",
                self.p, self.k
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// Identity-balanced sampler over the train split of a dataset.
///
/// Each batch is a pure function of `(spec.seed, step)`.
#[derive(Debug, Clone)]
pub struct PkSampler {
    spec: BatchSpec,
    groups: Vec<Vec<usize>>,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, spec: BatchSpec) -> Result<Self> {
        spec.validate()?;
        let mut by_identity: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.samples().iter().enumerate() {
            if s.split == Split::Train {
                by_identity.entry(s.identity).or_default().push(i);
            }
        }
        if by_identity.len() < spec.p {
            return Err(Error::Config(format!(
                "P={} identities per batch but only {} identities have training samples",
                spec.p,
                by_identity.len()
            )));
        }
        Ok(Self {
            spec,
            groups: by_identity.into_values().collect(),
        })
    }

    pub fn spec(&self) -> BatchSpec {
        self.spec
    }

    /// Dataset indices for the batch at `step`, grouped by identity.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(step);
        let k = self.spec.k;
        let mut out = Vec::with_capacity(self.spec.batch_size());
        for g in index::sample(&mut rng, self.groups.len(), self.spec.p) {
            let group = &self.groups[g];
            if group.len() >= k {
                out.extend(index::sample(&mut rng, group.len(), k).into_iter().map(|j| group[j]));
            } else {
                out.extend((0..k).map(|_| group[rng.random_range(0..group.len())]));
            }
        }
        out
    }
}

/// One P×K batch of samples drawn from `dataset`'s train split.
pub fn sample_batch_pk(dataset: &Dataset, spec: BatchSpec, step: u64) -> Result<Vec<Sample>> {
    let sampler = PkSampler::new(dataset, spec)?;
    Ok(sampler
        .batch(step)
        .into_iter()
        .map(|i| dataset.samples()[i].clone())
        .collect())
}
