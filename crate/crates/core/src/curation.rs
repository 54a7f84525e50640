//! Candidate selection for garment transfer, and generation budgeting.
//!
//! Keypoints and grayscale rasters come from files produced elsewhere; this
//! module only scores and ranks them. [`plan_generation`] gives the closed-form
//! pair counts for a try-on budget and [`enumerate_hard_pairs`] counts the same
//! thing by brute force from the pair definitions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Origin, Sample, Split, UNKNOWN};
use crate::error::{Error, Result};

pub const LANDMARKS: [&str; 5] = ["nose", "left_eye", "right_eye", "left_ear", "right_ear"];

/// Prompt attached to coarse (unlabeled) clothing generation requests.
pub const COARSE_PROMPT: &str = "generate a new cloth for the person.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub visibility: f64,
}

impl From<[f64; 3]> for Landmark {
    fn from([x, y, visibility]: [f64; 3]) -> Self {
        Self { x, y, visibility }
    }
}

impl From<Landmark> for [f64; 3] {
    fn from(l: Landmark) -> Self {
        [l.x, l.y, l.visibility]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub sample_id: String,
    pub landmarks: BTreeMap<String, Landmark>,
}

impl KeypointRecord {
    pub fn landmark(&self, name: &str) -> Result<Landmark> {
        self.landmarks
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("{}: missing landmark {name}", self.sample_id)))
    }

    pub fn validate(&self) -> Result<()> {
        for name in LANDMARKS {
            let l = self.landmark(name)?;
            if [l.x, l.y, l.visibility].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!(
                    "{}: landmark {name} out of [0, 1]: {:?}",
                    self.sample_id,
                    <[f64; 3]>::from(l)
                )));
            }
        }
        Ok(())
    }
}

/// Read a JSON-lines keypoint file. Blank lines are skipped.
pub fn read_keypoints(path: impl AsRef<Path>) -> Result<Vec<KeypointRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KeypointRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontalThresholds {
    pub vis_min: f64,
    pub eps_y: f64,
    pub eps_v: f64,
    pub min_interocular: f64,
}

impl Default for FrontalThresholds {
    fn default() -> Self {
        Self {
            vis_min: 0.7,
            eps_y: 0.05,
            eps_v: 0.30,
            min_interocular: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseVerdict {
    pub pass: bool,
    pub score: f64,
    pub visible: bool,
    pub eyes_level: bool,
    pub eyes_apart: bool,
    pub ears_symmetric: bool,
}

pub fn detect_frontal_pose(rec: &KeypointRecord, t: &FrontalThresholds) -> Result<PoseVerdict> {
    rec.validate()?;
    let nose = rec.landmark("nose")?;
    let le = rec.landmark("left_eye")?;
    let re = rec.landmark("right_eye")?;
    let lear = rec.landmark("left_ear")?;
    let rear = rec.landmark("right_ear")?;

    let face_vis = nose.visibility.max(le.visibility.min(re.visibility));
    let dy = (le.y - re.y).abs();
    let dx = (le.x - re.x).abs();
    let dv = (lear.visibility - rear.visibility).abs();

    let visible = face_vis > t.vis_min;
    let eyes_level = dy < t.eps_y;
    let eyes_apart = dx >= t.min_interocular;
    let ears_symmetric = dv < t.eps_v;

    let ratio = |num: f64, den: f64| if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
    let score =
        (ratio(face_vis - t.vis_min, 1.0 - t.vis_min) + ratio(t.eps_y - dy, t.eps_y) + ratio(t.eps_v - dv, t.eps_v))
            / 3.0;

    Ok(PoseVerdict {
        pass: visible && eyes_level && eyes_apart && ears_symmetric,
        score,
        visible,
        eyes_level,
        eyes_apart,
        ears_symmetric,
    })
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!("empty raster {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Validation(format!(
                "raster {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Result<Self> {
        let pixels = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Validation(format!("PGM: {msg}"));
        let mut pos = 0;
        let mut header = [0usize; 3];
        let token = |pos: &mut usize| -> Result<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        if token(&mut pos)? != "P5" {
            return Err(bad("not a binary graymap (P5)"));
        }
        for slot in header.iter_mut() {
            *slot = token(&mut pos)?.parse().map_err(|_| bad("bad header number"))?;
        }
        let [width, height, maxval] = header;
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit graymaps are supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height;
        if bytes.len() < pos + need {
            return Err(bad("truncated raster"));
        }
        Self::new(width, height, bytes[pos..pos + need].to_vec())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pgm(&fs::read(path)?)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_pgm())?)
    }
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
/// Images without an interior (either side < 3) score 0.
pub fn laplacian_variance(img: &GrayImage) -> f64 {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut responses = Vec::with_capacity((w - 2) * (h - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let p = |r: usize, c: usize| img.get(r, c) as i64;
            let lap = p(r - 1, c) + p(r + 1, c) + p(r, c - 1) + p(r, c + 1) - 4 * p(r, c);
            responses.push(lap as f64);
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub resolution: u64,
    pub sharpness: f64,
    pub composite: f64,
}

/// Fraction of the other values strictly below each value, ties counting half.
/// A single value gets 1.
pub fn rank_percentiles(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![1.0];
    }
    values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (mut below, mut ties) = (0usize, 0usize);
            for (j, &y) in values.iter().enumerate() {
                if i == j {
                    continue;
                }
                if y < x {
                    below += 1;
                } else if y == x {
                    ties += 1;
                }
            }
            (below as f64 + 0.5 * ties as f64) / (n - 1) as f64
        })
        .collect()
}

/// Score one image on its own; the composite of a lone image is 1.
pub fn assess_quality(img: &GrayImage) -> QualityScore {
    assess_corpus(std::slice::from_ref(img)).remove(0)
}

/// Score a corpus; composites are rank percentiles within it.
pub fn assess_corpus(images: &[GrayImage]) -> Vec<QualityScore> {
    let res: Vec<u64> = images.iter().map(|im| (im.width * im.height) as u64).collect();
    let sharp: Vec<f64> = images.iter().map(laplacian_variance).collect();
    let pr = rank_percentiles(&res.iter().map(|&r| r as f64).collect::<Vec<_>>());
    let ps = rank_percentiles(&sharp);
    (0..images.len())
        .map(|i| QualityScore {
            resolution: res[i],
            sharpness: sharp[i],
            composite: 0.5 * pr[i] + 0.5 * ps[i],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub sample_id: String,
    pub identity: i64,
    pub pose_pass: bool,
    pub pose_score: f64,
    pub quality: QualityScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectScope {
    GlobalTopM,
    PerIdentityTopN,
}

fn rank_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.quality
        .composite
        .total_cmp(&a.quality.composite)
        .then(b.pose_score.total_cmp(&a.pose_score))
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Pose-passing candidates ranked by composite quality, then pose score,
/// then sample id. Per-identity results are grouped by ascending identity.
pub fn select_top(candidates: &[Candidate], k: usize, scope: SelectScope) -> Vec<String> {
    let mut eligible: Vec<&Candidate> = candidates.iter().filter(|c| c.pose_pass).collect();
    eligible.sort_by(|a, b| rank_order(a, b));
    match scope {
        SelectScope::GlobalTopM => eligible.iter().take(k).map(|c| c.sample_id.clone()).collect(),
        SelectScope::PerIdentityTopN => {
            let mut groups: BTreeMap<i64, Vec<&Candidate>> = BTreeMap::new();
            for c in eligible {
                groups.entry(c.identity).or_default().push(c);
            }
            groups
                .values()
                .flat_map(|g| g.iter().take(k).map(|c| c.sample_id.clone()))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    #[serde(rename = "C")]
    pub c: u64,
    pub m: u64,
    pub n: u64,
    #[serde(rename = "K")]
    pub k: Vec<u64>,
    pub n_hp: u64,
    pub n_hn: u64,
    pub tryon_per_identity: u64,
    pub tryon_total: u64,
    pub coarse_prompt: String,
}

pub fn plan_generation(c: u64, m: u64, n: u64, k: &[i64]) -> Result<GenerationPlan> {
    if k.len() as u64 != c {
        return Err(Error::Validation(format!(
            "expected {c} per-identity counts, got {}",
            k.len()
        )));
    }
    if let Some(bad) = k.iter().find(|&&x| x < 0) {
        return Err(Error::Validation(format!(
            "per-identity counts must be >= 0, got {bad}"
        )));
    }
    let overflow = || Error::Validation("pair counts overflow 64 bits".into());
    let mn = m.checked_mul(n).ok_or_else(overflow)?;
    let mut n_hp: u64 = 0;
    for &ki in k {
        let term = if mn == 0 {
            0
        } else {
            mn.checked_mul((ki as u64).checked_add(mn - 1).ok_or_else(overflow)?)
                .ok_or_else(overflow)?
        };
        n_hp = n_hp.checked_add(term).ok_or_else(overflow)?;
    }
    let n_hn = [mn, c, n, c.saturating_sub(1)]
        .iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or_else(overflow)?;
    Ok(GenerationPlan {
        c,
        m,
        n,
        k: k.iter().map(|&x| x as u64).collect(),
        n_hp,
        n_hn,
        tryon_per_identity: mn,
        tryon_total: mn.checked_mul(c).ok_or_else(overflow)?,
        coarse_prompt: COARSE_PROMPT.to_string(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub hp: u64,
    pub hn: u64,
}

/// Ordered pairs (i, j), i ≠ j, satisfying the hard-pair definitions,
/// restricted to pairs whose first element passes `first`.
pub fn enumerate_hard_pairs_where(
    dataset: &Dataset,
    viewpoint_hardness: bool,
    first: impl Fn(&Sample) -> bool,
) -> PairCounts {
    let s = dataset.samples();
    let mut counts = PairCounts::default();
    for (i, a) in s.iter().enumerate() {
        if !first(a) {
            continue;
        }
        for (j, b) in s.iter().enumerate() {
            if i == j {
                continue;
            }
            if a.identity == b.identity {
                let cloth_diff = a.clothing == UNKNOWN || b.clothing == UNKNOWN || a.clothing != b.clothing;
                let view_diff = viewpoint_hardness
                    && a.viewpoint != UNKNOWN
                    && b.viewpoint != UNKNOWN
                    && a.viewpoint != b.viewpoint;
                if cloth_diff || view_diff {
                    counts.hp += 1;
                }
            } else if a.clothing != UNKNOWN && a.clothing == b.clothing {
                counts.hn += 1;
            }
        }
    }
    counts
}

/// Ordered hard pairs over the whole dataset.
pub fn enumerate_hard_pairs(dataset: &Dataset, viewpoint_hardness: bool) -> PairCounts {
    enumerate_hard_pairs_where(dataset, viewpoint_hardness, |_| true)
}

/// The closed-form counts next to a brute-force count over a dataset built
/// to match the plan: identity i has K_i originals in one outfit and one
/// viewpoint, plus n anchors re-dressed in each of m library garments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub plan: GenerationPlan,
    /// Ordered pairs whose first element is generated.
    pub enumerated_from_generated: PairCounts,
    /// Ordered pairs over the whole constructed dataset.
    pub enumerated_all: PairCounts,
    /// Same-identity generated pairs sharing a library garment.
    pub same_garment_generated_pairs: u64,
    pub notes: Vec<String>,
}

pub fn plan_dataset(plan: &GenerationPlan) -> Result<Dataset> {
    let mut samples = Vec::new();
    let sample = |id: String, y: u64, clothing: u64, origin| Sample {
        sample_id: id,
        identity: y as i64,
        clothing: clothing as i64,
        viewpoint: 0,
        split: Split::Train,
        origin,
        features: None,
        image_ref: Some("virtual".into()),
    };
    for y in 1..=plan.c {
        for r in 0..plan.k[(y - 1) as usize] {
            samples.push(sample(format!("o{y}-{r}"), y, y - 1, Origin::Real));
        }
        for a in 0..plan.n {
            for g in 0..plan.m {
                samples.push(sample(format!("g{y}-{a}-{g}"), y, plan.c + g, Origin::FineGenerated));
            }
        }
    }
    Dataset::new(samples)
}

pub fn discrepancy_report(c: u64, m: u64, n: u64, k: &[i64]) -> Result<DiscrepancyReport> {
    let plan = plan_generation(c, m, n, k)?;
    let ds = plan_dataset(&plan)?;
    let from_gen = enumerate_hard_pairs_where(&ds, true, |s| s.origin == Origin::FineGenerated);
    let all = enumerate_hard_pairs(&ds, true);
    let same_garment = c * m * n * n.saturating_sub(1);

    let mut notes = vec![format!(
        "closed form: n_hp={} n_hn={}; definition count over ordered pairs starting at a generated image: hp={} hn={}; over all ordered pairs: hp={} hn={}",
        plan.n_hp, plan.n_hn, from_gen.hp, from_gen.hn, all.hp, all.hn
    )];
    if m * n > 1 {
        notes.push(format!(
            "{} generated images per identity; the closed form pairs each of them with every other image of its identity",
            m * n
        ));
    }
    if from_gen.hp != plan.n_hp {
        notes.push(format!(
            "hard positives differ by {}: {same_garment} same-identity generated pairs wear the same library garment in the same view and fail the definition",
            plan.n_hp as i128 - from_gen.hp as i128
        ));
    }
    if from_gen.hn != plan.n_hn {
        notes.push(format!(
            "hard negatives differ by {}",
            plan.n_hn as i128 - from_gen.hn as i128
        ));
    }
    if all.hp != from_gen.hp {
        notes.push(format!(
            "counting both orders of generated/original pairs adds {} hard positives",
            all.hp - from_gen.hp
        ));
    }
    Ok(DiscrepancyReport {
        plan,
        enumerated_from_generated: from_gen,
        enumerated_all: all,
        same_garment_generated_pairs: same_garment,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::build_assessment_matrices;
    use crate::data::Labels;
    use proptest::prelude::*;

    fn record(nose: f64, eyes: (f64, f64), eye_y: (f64, f64), interocular: f64, ears: (f64, f64)) -> KeypointRecord {
        let mut lm = BTreeMap::new();
        lm.insert("nose".to_string(), Landmark::from([0.5, 0.4, nose]));
        lm.insert(
            "left_eye".to_string(),
            Landmark::from([0.5 - interocular / 2.0, eye_y.0, eyes.0]),
        );
        lm.insert(
            "right_eye".to_string(),
            Landmark::from([0.5 + interocular / 2.0, eye_y.1, eyes.1]),
        );
        lm.insert("left_ear".to_string(), Landmark::from([0.3, 0.32, ears.0]));
        lm.insert("right_ear".to_string(), Landmark::from([0.7, 0.32, ears.1]));
        KeypointRecord {
            sample_id: "k".into(),
            landmarks: lm,
        }
    }

    #[test]
    fn frontal_fixture_passes() {
        let r = record(0.9, (0.9, 0.9), (0.30, 0.31), 0.08, (0.50, 0.45));
        let v = detect_frontal_pose(&r, &FrontalThresholds::default()).unwrap();
        assert!(v.pass);
        assert!(v.score > 0.0 && v.score <= 1.0);
    }

    #[test]
    fn low_visibility_fails() {
        let r = record(0.5, (0.6, 0.6), (0.30, 0.31), 0.08, (0.50, 0.45));
        let v = detect_frontal_pose(&r, &FrontalThresholds::default()).unwrap();
        assert!(!v.pass && !v.visible);
    }

    #[test]
    fn asymmetric_ears_fail() {
        let r = record(0.9, (0.9, 0.9), (0.30, 0.31), 0.08, (0.9, 0.1));
        let v = detect_frontal_pose(&r, &FrontalThresholds::default()).unwrap();
        assert!(!v.pass && !v.ears_symmetric);
    }

    #[test]
    fn visibility_threshold_is_strict() {
        let t = FrontalThresholds::default();
        let at = record(0.7, (0.7, 0.7), (0.30, 0.31), 0.08, (0.5, 0.5));
        assert!(!detect_frontal_pose(&at, &t).unwrap().visible);
        let above = record(0.700001, (0.0, 0.0), (0.30, 0.31), 0.08, (0.5, 0.5));
        assert!(detect_frontal_pose(&above, &t).unwrap().visible);
    }

    #[test]
    fn missing_landmark_is_rejected() {
        let mut r = record(0.9, (0.9, 0.9), (0.3, 0.3), 0.08, (0.5, 0.5));
        r.landmarks.remove("left_ear");
        assert!(matches!(
            detect_frontal_pose(&r, &FrontalThresholds::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn keypoint_json_shape() {
        let line = r#"{"sample_id":"a","landmarks":{"nose":[0.5,0.4,0.9],"left_eye":[0.46,0.3,0.9],"right_eye":[0.54,0.31,0.9],"left_ear":[0.3,0.32,0.5],"right_ear":[0.7,0.32,0.45]}}"#;
        let r: KeypointRecord = serde_json::from_str(line).unwrap();
        assert!(detect_frontal_pose(&r, &FrontalThresholds::default()).unwrap().pass);
        let back: KeypointRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn constant_image_has_zero_sharpness() {
        let img = GrayImage::from_fn(7, 5, |_, _| 128).unwrap();
        assert_eq!(laplacian_variance(&img), 0.0);
    }

    #[test]
    fn hand_computed_laplacian_variance() {
        // 3 rows × 4 columns, single bright pixel at row 1, column 1
        let img = GrayImage::from_fn(4, 3, |r, c| if (r, c) == (1, 1) { 255 } else { 0 }).unwrap();
        assert_eq!(laplacian_variance(&img), 406406.25);
        let transposed = GrayImage::from_fn(3, 4, |r, c| if (r, c) == (1, 1) { 255 } else { 0 }).unwrap();
        assert_eq!(laplacian_variance(&transposed), 406406.25);
    }

    #[test]
    fn tiny_image_has_no_interior() {
        let img = GrayImage::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        assert_eq!(assess_quality(&img).sharpness, 0.0);
        assert!(GrayImage::new(0, 3, vec![]).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::from_fn(5, 3, |r, c| (r * 40 + c * 7) as u8).unwrap();
        assert_eq!(GrayImage::from_pgm(&img.to_pgm()).unwrap(), img);
        let mut commented = b"P5\n# made by hand\n5 3\n255\n".to_vec();
        commented.extend_from_slice(img.pixels());
        assert_eq!(GrayImage::from_pgm(&commented).unwrap(), img);
        assert!(GrayImage::from_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::from_pgm(b"P5\n4 4\n255\n\0\0").is_err());
    }

    #[test]
    fn corpus_composites() {
        let small_blurry = GrayImage::from_fn(4, 4, |_, _| 10).unwrap();
        let big_sharp = GrayImage::from_fn(8, 8, |r, c| if (r + c) % 2 == 0 { 255 } else { 0 }).unwrap();
        let scores = assess_corpus(&[small_blurry.clone(), big_sharp]);
        assert_eq!(scores[0].composite, 0.0);
        assert_eq!(scores[1].composite, 1.0);
        assert_eq!(assess_quality(&small_blurry).composite, 1.0);
        assert_eq!(rank_percentiles(&[1.0, 1.0, 2.0]), vec![0.25, 0.25, 1.0]);
    }

    fn cand(id: &str, y: i64, pass: bool, pose: f64, composite: f64) -> Candidate {
        Candidate {
            sample_id: id.into(),
            identity: y,
            pose_pass: pass,
            pose_score: pose,
            quality: QualityScore {
                resolution: 1,
                sharpness: 0.0,
                composite,
            },
        }
    }

    #[test]
    fn selection_filters_then_ranks() {
        let c = [
            cand("a", 1, true, 0.5, 0.3),
            cand("b", 1, false, 0.9, 0.9),
            cand("c", 2, true, 0.5, 0.6),
        ];
        assert_eq!(select_top(&c, 5, SelectScope::GlobalTopM), vec!["c", "a"]);
        let c = [cand("a", 1, true, 0.7, 0.5), cand("b", 1, true, 0.9, 0.5)];
        assert_eq!(select_top(&c, 2, SelectScope::GlobalTopM), vec!["b", "a"]);
        let c = [cand("z", 1, true, 0.7, 0.5), cand("y", 1, true, 0.7, 0.5)];
        assert_eq!(select_top(&c, 1, SelectScope::GlobalTopM), vec!["y"]);
        assert_eq!(select_top(&c[..1], 1, SelectScope::GlobalTopM), vec!["z"]);
    }

    #[test]
    fn per_identity_selection() {
        let c = [
            cand("a", 2, true, 0.5, 0.9),
            cand("b", 1, true, 0.5, 0.1),
            cand("c", 1, true, 0.5, 0.8),
            cand("d", 2, true, 0.5, 0.2),
            cand("e", 1, true, 0.5, 0.5),
        ];
        assert_eq!(
            select_top(&c, 2, SelectScope::PerIdentityTopN),
            vec!["c", "e", "a", "d"]
        );
    }

    #[test]
    fn plan_examples() {
        let p = plan_generation(2, 1, 1, &[3, 3]).unwrap();
        assert_eq!((p.n_hp, p.n_hn), (6, 2));
        assert_eq!(p.coarse_prompt, "generate a new cloth for the person.");
        let p = plan_generation(3, 2, 2, &[5, 5, 5]).unwrap();
        assert_eq!((p.n_hp, p.n_hn), (96, 48));
        let p = plan_generation(3, 0, 2, &[5, 5, 5]).unwrap();
        assert_eq!((p.n_hp, p.n_hn), (0, 0));
        assert!(matches!(plan_generation(2, 1, 1, &[3, -1]), Err(Error::Validation(_))));
        assert!(matches!(plan_generation(3, 1, 1, &[3, 3]), Err(Error::Validation(_))));
        let json = serde_json::to_value(plan_generation(2, 1, 1, &[3, 3]).unwrap()).unwrap();
        assert_eq!(json["C"], 2);
        assert_eq!(json["K"], serde_json::json!([3, 3]));
    }

    #[test]
    fn enumeration_trivial_and_fixture() {
        let one = Dataset::new(vec![
            crate::data::tests::feature_sample("a", 1, 0, 0, vec![0.0]),
            crate::data::tests::feature_sample("b", 1, 0, 0, vec![0.0]),
        ])
        .unwrap();
        assert_eq!(enumerate_hard_pairs(&one, true), PairCounts { hp: 0, hn: 0 });
        let fx = Dataset::new(
            [(1, 1, 1), (1, 2, 1), (2, 2, 2), (1, 1, 1)]
                .iter()
                .enumerate()
                .map(|(i, &(y, c, v))| crate::data::tests::feature_sample(&format!("s{i}"), y, c, v, vec![0.0]))
                .collect(),
        )
        .unwrap();
        let labels: Vec<Labels> = fx.samples().iter().map(|s| s.labels()).collect();
        let m = build_assessment_matrices(&labels, true);
        let e = enumerate_hard_pairs(&fx, true);
        assert_eq!((e.hp as usize, e.hn as usize), (m.count_hp(), m.count_hn()));
    }

    #[test]
    fn discrepancy_matches_on_single_anchor() {
        let r = discrepancy_report(2, 1, 1, &[3, 3]).unwrap();
        assert_eq!(r.enumerated_from_generated, PairCounts { hp: 6, hn: 2 });
        assert_eq!(r.enumerated_all.hp, 12);
        let r = discrepancy_report(3, 2, 2, &[5, 5, 5]).unwrap();
        // 3 identities × 2 garments × 2 anchors × 1 other anchor
        assert_eq!(r.same_garment_generated_pairs, 12);
        assert_eq!(r.enumerated_from_generated.hp, 96 - 12);
        assert_eq!(r.enumerated_from_generated.hn, 48);
        assert!(r.notes.len() > 1);
    }

    fn eq3(c: u64, m: u64, n: u64, k: &[i64]) -> (u64, u64) {
        let hp: u64 = k
            .iter()
            .map(|&ki| m * n * (ki as u64 + m * n) - if m * n > 0 { m * n } else { 0 })
            .sum();
        (hp, m * n * c * n * c.saturating_sub(1))
    }

    proptest! {
        #[test]
        fn plan_matches_formula(c in 1u64..=10, m in 0u64..=4, n in 0u64..=4, seed in prop::collection::vec(0i64..=20, 10)) {
            let k = &seed[..c as usize];
            let p = plan_generation(c, m, n, k).unwrap();
            prop_assert_eq!((p.n_hp, p.n_hn), eq3(c, m, n, k));
        }

        #[test]
        fn sharpness_is_translation_invariant(px in prop::collection::vec(0u8..=200, 20), shift in 0u8..=55) {
            let a = GrayImage::new(5, 4, px.clone()).unwrap();
            let b = GrayImage::new(5, 4, px.iter().map(|p| p + shift).collect()).unwrap();
            prop_assert_eq!(laplacian_variance(&a), laplacian_variance(&b));
        }

        #[test]
        fn raising_visibility_keeps_visible(nose in 0.0f64..1.0, e1 in 0.0f64..1.0, e2 in 0.0f64..1.0, bump in 0.0f64..1.0, which in 0usize..3) {
            let t = FrontalThresholds::default();
            let base = record(nose, (e1, e2), (0.3, 0.3), 0.08, (0.5, 0.5));
            let mut v = [nose, e1, e2];
            v[which] = (v[which] + bump).min(1.0);
            let raised = record(v[0], (v[1], v[2]), (0.3, 0.3), 0.08, (0.5, 0.5));
            if detect_frontal_pose(&base, &t).unwrap().visible {
                prop_assert!(detect_frontal_pose(&raised, &t).unwrap().visible);
            }
        }
    }
}
