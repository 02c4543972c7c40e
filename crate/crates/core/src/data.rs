//! Synthetic multi-source multi-target datasets and their on-disk format.
//!
//! The generator plants verb/noun class prototypes in a latent space and
//! derives each sample from its prototype through three controllable
//! distortions:
//!
//! - an *environmental* shift: a fixed random rotation + translation per
//!   kitchen, scaled by `env_shift`;
//! - a *temporal* shift: one extra rotation + translation applied to all
//!   target-domain samples, scaled by `temporal_shift`;
//! - per-modality projection to frame space, where every frame is scaled
//!   to the modality's configured mean L2 norm (`norm_scales`) after
//!   adding per-frame Gaussian direction noise.
//!
//! Norm scales are exact by construction, which is what the relative
//! norm-alignment loss feeds on. Target ground truth is only ever written
//! to the `target_eval` split, so a trainer reading `target_train` cannot
//! see target labels.
//!
//! Directory layout: `meta.json` plus `source_train.ndjson`,
//! `target_train.ndjson`, `target_eval.ndjson` (one JSON object per line).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── vocabulary ─────────────────────────────────────────────────────────

/// Input modality. The derive order is the canonical order
/// (`rgb < flow < audio`) used for fusion and for norm-ratio pairs.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Flow,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Flow, Modality::Audio];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "flow" => Ok(Modality::Flow),
            "audio" => Ok(Modality::Audio),
            other => Err(Error::arg("modality", format!("unknown modality {other:?}"))),
        }
    }
}

/// Labeled training distribution vs unlabelled deployment distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One video: per-modality frame-feature stacks plus labels when the
/// split carries them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub kitchen: usize,
    pub domain: Domain,
    pub frames: BTreeMap<Modality, Vec<Vec<f64>>>,
    pub verb: Option<usize>,
    pub noun: Option<usize>,
}

/// Shared dataset dimensions, stored in `meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kitchens: usize,
    pub modalities: Vec<Modality>,
    pub c_verb: usize,
    pub c_noun: usize,
    pub frames_per_sample: usize,
    pub frame_dim: usize,
}

/// All three splits plus their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_eval: Vec<Sample>,
}

// ── generation spec ────────────────────────────────────────────────────

fn default_kitchens() -> usize {
    3
}
fn default_modalities() -> Vec<Modality> {
    Modality::ALL.to_vec()
}
fn default_c_verb() -> usize {
    6
}
fn default_c_noun() -> usize {
    4
}
fn default_frames() -> usize {
    8
}
fn default_frame_dim() -> usize {
    16
}
fn default_samples() -> usize {
    32
}
fn default_class_sep() -> f64 {
    1.0
}
fn default_env_shift() -> f64 {
    1.0
}
fn default_temporal_shift() -> f64 {
    1.5
}
fn default_norm_scales() -> BTreeMap<Modality, f64> {
    BTreeMap::from([(Modality::Rgb, 10.0), (Modality::Flow, 5.0), (Modality::Audio, 1.0)])
}
fn default_noise_sigma() -> f64 {
    0.1
}

/// Knobs of the synthetic generator. All fields default to the desk-scale
/// benchmark configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub kitchens: usize,
    pub modalities: Vec<Modality>,
    pub c_verb: usize,
    pub c_noun: usize,
    pub frames_per_sample: usize,
    pub frame_dim: usize,
    /// Samples per kitchen in each split (source_train, target_train,
    /// target_eval all get this many per kitchen).
    pub samples_per_kitchen: usize,
    pub class_sep: f64,
    pub env_shift: f64,
    pub temporal_shift: f64,
    pub norm_scales: BTreeMap<Modality, f64>,
    pub noise_sigma: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            kitchens: default_kitchens(),
            modalities: default_modalities(),
            c_verb: default_c_verb(),
            c_noun: default_c_noun(),
            frames_per_sample: default_frames(),
            frame_dim: default_frame_dim(),
            samples_per_kitchen: default_samples(),
            class_sep: default_class_sep(),
            env_shift: default_env_shift(),
            temporal_shift: default_temporal_shift(),
            norm_scales: default_norm_scales(),
            noise_sigma: default_noise_sigma(),
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kitchens == 0 {
            return Err(Error::InvalidConfig("kitchens must be >= 1".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::InvalidConfig("at least one modality required".into()));
        }
        let unique: BTreeSet<_> = self.modalities.iter().collect();
        if unique.len() != self.modalities.len() {
            return Err(Error::InvalidConfig("duplicate modality".into()));
        }
        for (name, v) in [
            ("c_verb", self.c_verb),
            ("c_noun", self.c_noun),
            ("frames_per_sample", self.frames_per_sample),
            ("frame_dim", self.frame_dim),
            ("samples_per_kitchen", self.samples_per_kitchen),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.class_sep > 0.0) {
            return Err(Error::InvalidConfig("class_sep must be > 0".into()));
        }
        if self.env_shift < 0.0 || self.temporal_shift < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("shifts and noise_sigma must be >= 0".into()));
        }
        for &m in &self.modalities {
            match self.norm_scales.get(&m) {
                Some(&s) if s > 0.0 => {}
                Some(_) => {
                    return Err(Error::InvalidConfig(format!("norm scale for {m} must be > 0")))
                }
                None => return Err(Error::InvalidConfig(format!("missing norm scale for {m}"))),
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            kitchens: self.kitchens,
            modalities: self.modalities.clone(),
            c_verb: self.c_verb,
            c_noun: self.c_noun,
            frames_per_sample: self.frames_per_sample,
            frame_dim: self.frame_dim,
        }
    }
}

// ── generator internals ────────────────────────────────────────────────

/// Per-plane rotation angle scale at shift 1.0 (radians per unit of
/// standard normal draw).
const ROTATION_SCALE: f64 = 0.4;
/// Translation scale at shift 1.0, in units of `class_sep`.
const TRANSLATION_SCALE: f64 = 0.6;

/// Rotation (as Givens plane angles) plus translation in latent space.
struct AffineShift {
    /// `(axis_a, axis_b, angle)` applied in order.
    planes: Vec<(usize, usize, f64)>,
    translation: Vec<f64>,
}

impl AffineShift {
    fn draw(rng: &mut ChaCha8Rng, dim: usize, magnitude: f64, class_sep: f64) -> Self {
        let planes = (0..dim / 2)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                (2 * i, 2 * i + 1, magnitude * ROTATION_SCALE * z)
            })
            .collect();
        let translation = (0..dim)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                magnitude * TRANSLATION_SCALE * class_sep * z
            })
            .collect();
        AffineShift { planes, translation }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for &(a, b, angle) in &self.planes {
            let (sin, cos) = angle.sin_cos();
            let (va, vb) = (y[a], y[b]);
            y[a] = cos * va - sin * vb;
            y[b] = sin * va + cos * vb;
        }
        for (v, t) in y.iter_mut().zip(&self.translation) {
            *v += t;
        }
        y
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let mut unit = vec![0.0; v.len()];
        unit[0] = 1.0;
        unit
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

struct Generator {
    spec: GenSpec,
    prototypes: Vec<Vec<f64>>, // indexed verb * c_noun + noun
    kitchen_shift: Vec<AffineShift>,
    temporal_shift: AffineShift,
    projections: BTreeMap<Modality, Vec<f64>>, // latent_dim x frame_dim, row-major
}

/// Latent vectors recorded during generation, for generator sanity checks.
#[cfg_attr(not(test), allow(dead_code))]
struct GenTrace {
    prototypes: Vec<Vec<f64>>,
    /// `(latent, verb, noun, domain)` per emitted sample, all splits.
    latents: Vec<(Vec<f64>, usize, usize, Domain)>,
}

impl Generator {
    fn new(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Self {
        let dim = spec.frame_dim; // latent space shares the frame dimension
        let prototypes = (0..spec.c_verb * spec.c_noun)
            .map(|_| normal_vec(rng, dim).iter().map(|z| z * spec.class_sep).collect())
            .collect();
        let kitchen_shift = (0..spec.kitchens)
            .map(|_| AffineShift::draw(rng, dim, spec.env_shift, spec.class_sep))
            .collect();
        let temporal_shift = AffineShift::draw(rng, dim, spec.temporal_shift, spec.class_sep);
        let mut projections = BTreeMap::new();
        for &m in &spec.modalities {
            let scale = 1.0 / (dim as f64).sqrt();
            let p: Vec<f64> =
                (0..dim * dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
            projections.insert(m, p);
        }
        Generator {
            spec: spec.clone(),
            prototypes,
            kitchen_shift,
            temporal_shift,
            projections,
        }
    }

    fn project(&self, m: Modality, latent: &[f64]) -> Vec<f64> {
        let dim = self.spec.frame_dim;
        let p = &self.projections[&m];
        (0..dim)
            .map(|j| (0..dim).map(|i| latent[i] * p[i * dim + j]).sum())
            .collect()
    }

    fn emit_sample(
        &self,
        rng: &mut ChaCha8Rng,
        id: String,
        kitchen: usize,
        domain: Domain,
        labeled: bool,
    ) -> (Sample, Vec<f64>, usize, usize) {
        let spec = &self.spec;
        let verb = rng.random_range(0..spec.c_verb);
        let noun = rng.random_range(0..spec.c_noun);
        let mut latent = self.kitchen_shift[kitchen].apply(&self.prototypes[verb * spec.c_noun + noun]);
        if domain == Domain::Target {
            latent = self.temporal_shift.apply(&latent);
        }
        // Per-sample jitter, in the same units as the per-frame noise.
        for v in latent.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * z;
        }

        let mut frames = BTreeMap::new();
        for &m in &spec.modalities {
            let direction = normalize(&self.project(m, &latent));
            let scale = spec.norm_scales[&m];
            let rows: Vec<Vec<f64>> = (0..spec.frames_per_sample)
                .map(|_| {
                    let noisy: Vec<f64> = direction
                        .iter()
                        .map(|&d| d + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    normalize(&noisy).iter().map(|v| v * scale).collect()
                })
                .collect();
            frames.insert(m, rows);
        }

        let sample = Sample {
            id,
            kitchen,
            domain,
            frames,
            verb: labeled.then_some(verb),
            noun: labeled.then_some(noun),
        };
        (sample, latent, verb, noun)
    }
}

fn generate_traced(spec: &GenSpec, seed: u64) -> Result<(Dataset, GenTrace)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator::new(spec, &mut rng);

    let mut trace = GenTrace {
        prototypes: gen.prototypes.clone(),
        latents: Vec::new(),
    };
    let emit = |rng: &mut ChaCha8Rng,
                trace: &mut GenTrace,
                prefix: &str,
                domain: Domain,
                labeled: bool| {
        let mut split = Vec::new();
        for kitchen in 0..spec.kitchens {
            for i in 0..spec.samples_per_kitchen {
                let id = format!("{prefix}-k{kitchen}-{i:04}");
                let (sample, latent, verb, noun) =
                    gen.emit_sample(rng, id, kitchen, domain, labeled);
                trace.latents.push((latent, verb, noun, domain));
                split.push(sample);
            }
        }
        split
    };

    let source_train = emit(&mut rng, &mut trace, "src", Domain::Source, true);
    let target_train = emit(&mut rng, &mut trace, "tgt", Domain::Target, false);
    let target_eval = emit(&mut rng, &mut trace, "ev", Domain::Target, true);

    Ok((
        Dataset {
            meta: spec.meta(),
            source_train,
            target_train,
            target_eval,
        },
        trace,
    ))
}

/// Generate a dataset; deterministic per `(spec, seed)`.
pub fn generate(spec: &GenSpec, seed: u64) -> Result<Dataset> {
    generate_traced(spec, seed).map(|(d, _)| d)
}

// ── on-disk format ─────────────────────────────────────────────────────

const SPLIT_FILES: [&str; 3] = ["source_train.ndjson", "target_train.ndjson", "target_eval.ndjson"];

/// Write `meta.json` plus the three ndjson splits. Byte output is a pure
/// function of the dataset.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta_path = dir.join("meta.json");
    let mut meta_bytes = serde_json::to_vec_pretty(&dataset.meta)
        .map_err(|e| Error::InvalidConfig(format!("meta serialization: {e}")))?;
    meta_bytes.push(b'\n');
    fs::write(&meta_path, meta_bytes).map_err(|e| Error::io(meta_path.display().to_string(), e))?;

    for (file, split) in SPLIT_FILES.iter().zip([
        &dataset.source_train,
        &dataset.target_train,
        &dataset.target_eval,
    ]) {
        let path = dir.join(file);
        let mut out = Vec::new();
        for sample in split {
            serde_json::to_writer(&mut out, sample)
                .map_err(|e| Error::InvalidConfig(format!("sample serialization: {e}")))?;
            out.push(b'\n');
        }
        let mut f =
            fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn load_split(dir: &Path, file: &str) -> Result<Vec<Sample>> {
    let path = dir.join(file);
    let f = fs::File::open(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(f);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::DataFormat {
            path: path.display().to_string(),
            line: Some(i + 1),
            msg: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

fn check_sample(meta: &DatasetMeta, s: &Sample, file: &str, line: usize) -> Result<()> {
    let fail = |msg: String| Error::DataFormat {
        path: file.to_string(),
        line: Some(line),
        msg,
    };
    if s.kitchen >= meta.kitchens {
        return Err(fail(format!("kitchen {} out of range (K={})", s.kitchen, meta.kitchens)));
    }
    for &m in &meta.modalities {
        let frames = s
            .frames
            .get(&m)
            .ok_or_else(|| fail(format!("sample {} missing modality {m}", s.id)))?;
        if frames.len() != meta.frames_per_sample {
            return Err(fail(format!(
                "sample {} has {} frames for {m}, expected {}",
                s.id,
                frames.len(),
                meta.frames_per_sample
            )));
        }
        if frames.iter().any(|row| row.len() != meta.frame_dim) {
            return Err(fail(format!("sample {} has wrong frame_dim for {m}", s.id)));
        }
    }
    if let Some(v) = s.verb {
        if v >= meta.c_verb {
            return Err(fail(format!("verb {} out of range", v)));
        }
    }
    if let Some(n) = s.noun {
        if n >= meta.c_noun {
            return Err(fail(format!("noun {} out of range", n)));
        }
    }
    Ok(())
}

/// Load a dataset directory produced by [`save`], enforcing the split
/// invariants (source labeled, target_train unlabeled, ids disjoint).
pub fn load(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_bytes =
        fs::read(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::DataFormat {
        path: meta_path.display().to_string(),
        line: None,
        msg: e.to_string(),
    })?;

    let source_train = load_split(dir, SPLIT_FILES[0])?;
    let target_train = load_split(dir, SPLIT_FILES[1])?;
    let target_eval = load_split(dir, SPLIT_FILES[2])?;

    let mut seen = BTreeSet::new();
    for (file, split, domain, labeled) in [
        (SPLIT_FILES[0], &source_train, Domain::Source, Some(true)),
        (SPLIT_FILES[1], &target_train, Domain::Target, Some(false)),
        (SPLIT_FILES[2], &target_eval, Domain::Target, Some(true)),
    ] {
        for (i, s) in split.iter().enumerate() {
            let line = i + 1;
            check_sample(&meta, s, file, line)?;
            let fail = |msg: String| Error::DataFormat {
                path: file.to_string(),
                line: Some(line),
                msg,
            };
            if s.domain != domain {
                return Err(fail(format!("sample {} has wrong domain for this split", s.id)));
            }
            match labeled {
                Some(true) if s.verb.is_none() || s.noun.is_none() => {
                    return Err(fail(format!("sample {} must carry verb and noun labels", s.id)));
                }
                Some(false) if s.verb.is_some() || s.noun.is_some() => {
                    return Err(fail(format!(
                        "sample {} in an unlabeled split carries labels",
                        s.id
                    )));
                }
                _ => {}
            }
            if !seen.insert(s.id.clone()) {
                return Err(fail(format!("duplicate sample id {}", s.id)));
            }
        }
    }

    Ok(Dataset {
        meta,
        source_train,
        target_train,
        target_eval,
    })
}

// ── batching ───────────────────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn shuffle_key(seed: u64, epoch: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(epoch)) ^ splitmix64(stream.wrapping_add(0xa5a5)))
}

/// Deterministic shuffled index batches: shuffle keyed by `(seed, epoch,
/// stream)`, chunked into `batch_size` groups, final short batch kept.
pub fn make_batches(
    n_samples: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    stream: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::arg("make_batches", "batch_size must be >= 1"));
    }
    if n_samples == 0 {
        return Err(Error::arg("make_batches", "split is empty"));
    }
    let mut indices: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_key(seed, epoch, stream));
    // Fisher-Yates, explicit so the order is pinned by this crate.
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    Ok(indices.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Pair one source batch with one target batch of equal size per step.
/// The step count is driven by the longer stream; the shorter stream
/// cycles. Each pair is truncated to the smaller of the two batch sizes.
pub fn paired_batches(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let src = make_batches(n_source, batch_size, seed, epoch, 0)?;
    let tgt = make_batches(n_target, batch_size, seed, epoch, 1)?;
    let steps = src.len().max(tgt.len());
    let mut out = Vec::with_capacity(steps);
    for j in 0..steps {
        let mut s = src[j % src.len()].clone();
        let mut t = tgt[j % tgt.len()].clone();
        let n = s.len().min(t.len());
        s.truncate(n);
        t.truncate(n);
        out.push((s, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> GenSpec {
        GenSpec {
            kitchens: 2,
            c_verb: 3,
            c_noun: 2,
            frames_per_sample: 3,
            frame_dim: 8,
            samples_per_kitchen: 4,
            ..GenSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        assert_eq!(generate(&spec, 9).unwrap(), generate(&spec, 9).unwrap());
    }

    #[test]
    fn split_sizes_and_labels() {
        let spec = tiny_spec();
        let d = generate(&spec, 0).unwrap();
        let per_split = spec.kitchens * spec.samples_per_kitchen;
        assert_eq!(d.source_train.len(), per_split);
        assert_eq!(d.target_train.len(), per_split);
        assert_eq!(d.target_eval.len(), per_split);
        assert!(d.source_train.iter().all(|s| s.verb.is_some() && s.noun.is_some()));
        assert!(d.target_train.iter().all(|s| s.verb.is_none() && s.noun.is_none()));
        assert!(d.target_eval.iter().all(|s| s.verb.is_some() && s.noun.is_some()));
    }

    #[test]
    fn zero_shift_zero_noise_collapses_to_prototypes() {
        let mut spec = tiny_spec();
        spec.env_shift = 0.0;
        spec.temporal_shift = 0.0;
        spec.noise_sigma = 0.0;
        let (_, trace) = generate_traced(&spec, 4).unwrap();
        for (latent, verb, noun, _) in &trace.latents {
            let proto = &trace.prototypes[verb * spec.c_noun + noun];
            for (a, b) in latent.iter().zip(proto) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn nearest_prototype_is_perfect_without_shift_or_noise() {
        let mut spec = tiny_spec();
        spec.env_shift = 0.0;
        spec.temporal_shift = 0.0;
        spec.noise_sigma = 0.0;
        let (_, trace) = generate_traced(&spec, 11).unwrap();
        for (latent, verb, noun, _) in &trace.latents {
            let nearest = trace
                .prototypes
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(latent).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = b.iter().zip(latent).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            assert_eq!(nearest, verb * spec.c_noun + noun);
        }
    }

    #[test]
    fn frame_norms_match_configured_scales() {
        let spec = GenSpec {
            noise_sigma: 0.1, // <= 0.1 * min(norm_scales)
            ..tiny_spec()
        };
        let d = generate(&spec, 3).unwrap();
        for &m in &spec.modalities {
            let mut total = 0.0;
            let mut count = 0usize;
            for s in d.source_train.iter().chain(&d.target_train) {
                for row in &s.frames[&m] {
                    total += row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    count += 1;
                }
            }
            let mean = total / count as f64;
            let scale = spec.norm_scales[&m];
            assert!(
                (mean - scale).abs() / scale < 0.02,
                "{m}: mean norm {mean} vs scale {scale}"
            );
        }
    }

    #[test]
    fn norm_ratio_exact_without_noise() {
        let mut spec = tiny_spec();
        spec.noise_sigma = 0.0;
        let d = generate(&spec, 3).unwrap();
        let mean_norm = |m: Modality| {
            let mut total = 0.0;
            let mut count = 0usize;
            for s in &d.source_train {
                for row in &s.frames[&m] {
                    total += row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    count += 1;
                }
            }
            total / count as f64
        };
        let ratio = mean_norm(Modality::Rgb) / mean_norm(Modality::Audio);
        assert!((ratio - 10.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn save_load_round_trip_is_equal_and_bytes_stable() {
        let spec = tiny_spec();
        let d = generate(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a");
        save(&d, &first).unwrap();
        let loaded = load(&first).unwrap();
        assert_eq!(d, loaded);

        let second = dir.path().join("b");
        save(&loaded, &second).unwrap();
        for file in ["meta.json", "source_train.ndjson", "target_train.ndjson", "target_eval.ndjson"]
        {
            let a = fs::read(first.join(file)).unwrap();
            let b = fs::read(second.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs after round trip");
        }
    }

    #[test]
    fn load_missing_meta_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn load_rejects_labeled_target_train_sample() {
        let spec = tiny_spec();
        let mut d = generate(&spec, 5).unwrap();
        d.target_train[0].verb = Some(0);
        d.target_train[0].noun = Some(0);
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("carries labels"), "{err}");
    }

    #[test]
    fn load_reports_line_numbers() {
        let spec = tiny_spec();
        let d = generate(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        let path = dir.path().join("source_train.ndjson");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        let expected_line = spec.kitchens * spec.samples_per_kitchen + 1;
        assert!(err.contains(&format!("line {expected_line}")), "{err}");
    }

    #[test]
    fn batches_cover_split_with_short_tail() {
        let batches = make_batches(10, 4, 0, 0, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_deterministic_per_seed_epoch() {
        assert_eq!(make_batches(10, 4, 7, 3, 0).unwrap(), make_batches(10, 4, 7, 3, 0).unwrap());
    }

    #[test]
    fn epochs_reshuffle() {
        // Over 100 seeds at least one epoch pair must differ (overwhelmingly
        // all of them do).
        let mut any_differ = false;
        for seed in 0..100 {
            if make_batches(8, 8, seed, 0, 0).unwrap() != make_batches(8, 8, seed, 1, 0).unwrap() {
                any_differ = true;
                break;
            }
        }
        assert!(any_differ);
    }

    #[test]
    fn batch_size_zero_rejected() {
        assert!(make_batches(4, 0, 0, 0, 0).is_err());
    }

    #[test]
    fn paired_batches_have_equal_sizes_and_cycle() {
        let pairs = paired_batches(10, 6, 4, 0, 0).unwrap();
        // Source gives 3 batches (4,4,2), target gives 2 (4,2): steps = 3.
        assert_eq!(pairs.len(), 3);
        for (s, t) in &pairs {
            assert_eq!(s.len(), t.len());
            assert!(!s.is_empty());
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = tiny_spec();
        spec.class_sep = 0.0;
        assert!(generate(&spec, 0).is_err());
        let mut spec = tiny_spec();
        spec.norm_scales.remove(&Modality::Audio);
        assert!(generate(&spec, 0).is_err());
        let mut spec = tiny_spec();
        spec.kitchens = 0;
        assert!(generate(&spec, 0).is_err());
    }
}
