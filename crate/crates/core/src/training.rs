//! The experiment engine: paired source/target batches, multi-backbone
//! forward passes, the weighted adaptation objective, SGD with momentum,
//! checkpointing, and ensemble evaluation.
//!
//! Per step every backbone sees the same paired batch. Classification runs
//! on source only; norm alignment sees source and target features jointly;
//! each sample's frame/video adversarial branch is the one belonging to
//! its kitchen; the spatial branch sees everything with kitchen labels;
//! attentive entropy, consensus, and complement entropy run on target
//! only. All backbones share one scalar total and are updated from it.
//!
//! Everything is deterministic per `(config, seed)`: batch order comes
//! from counter-based shuffles, reductions run in fixed order, and
//! checkpoints capture the full optimizer state so a resumed run is
//! bit-identical to an uninterrupted one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, DatasetMeta, Domain, GenSpec, Modality, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::losses::{self, ComponentKey, LossReport, LossToggle, LossWeights};
use crate::metrics::{self, EvalReport};
use crate::nn::{self, Branch, BoundModel, ModelParams, ModelSpec};
use crate::tensor::Tensor;

// ── configuration ──────────────────────────────────────────────────────

fn default_lr() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay_factor() -> f64 {
    0.1
}

/// SGD settings with a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: default_lr(),
            momentum: default_momentum(),
            lr_decay_epochs: Vec::new(),
            decay_factor: default_decay_factor(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "decay_factor must be > 0, got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }
}

/// Learning rate at an epoch: `lr * factor^(decay epochs <= epoch)`.
pub fn lr_at(epoch: usize, opt: &OptimizerConfig) -> f64 {
    let decays = opt.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    opt.lr * opt.decay_factor.powi(decays as i32)
}

/// Where training data comes from: a saved dataset directory or an inline
/// generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Dir(PathBuf),
    Spec(GenSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Spec(GenSpec::default())
    }
}

fn default_feat_dim() -> usize {
    32
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_ensemble() -> usize {
    1
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSource,
    pub feat_dim: usize,
    /// Adaptation losses to activate; classification is always on.
    pub enabled_losses: BTreeSet<LossToggle>,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    /// Warm-start parameters from a checkpoint instead of random init.
    pub init_checkpoint: Option<PathBuf>,
    /// Keep encoder weights fixed (useful with `init_checkpoint` to adapt
    /// classifier heads and discriminators only).
    pub freeze_encoders: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::default(),
            feat_dim: default_feat_dim(),
            enabled_losses: BTreeSet::new(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            ensemble_size: default_ensemble(),
            seed: 0,
            init_checkpoint: None,
            freeze_encoders: false,
        }
    }
}

impl RunConfig {
    /// Validate everything before any work starts. Emits a warning (not an
    /// error) for a degenerate single-backbone consensus configuration.
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 {
            return Err(Error::InvalidConfig("feat_dim must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::InvalidConfig("ensemble_size must be >= 1".into()));
        }
        self.weights.validate()?;
        self.optimizer.validate()?;
        if let DataSource::Spec(spec) = &self.data {
            spec.validate()?;
        }
        if self.enabled_losses.contains(&LossToggle::Mec) && self.ensemble_size == 1 {
            eprintln!("warning: consensus loss with a single backbone is degenerate");
        }
        Ok(())
    }

    /// Stable hash of the full configuration, stored in checkpoints so a
    /// resume cannot silently change the experiment.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn model_spec(&self, meta: &DatasetMeta) -> ModelSpec {
        ModelSpec {
            modalities: meta.modalities.clone(),
            frame_dim: meta.frame_dim,
            feat_dim: self.feat_dim,
            c_verb: meta.c_verb,
            c_noun: meta.c_noun,
            kitchens: meta.kitchens,
        }
    }
}

// ── optimizer state ────────────────────────────────────────────────────

/// Momentum buffers aligned with [`ModelParams::named_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub buffers: Vec<Vec<f64>>,
}

impl MomentumState {
    pub fn zeros(params: &ModelParams) -> Self {
        MomentumState {
            buffers: params.named_params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One SGD-with-momentum update: `v <- momentum * v + g`,
/// `p <- p - lr * v`. `grads` must align with the parameter order; a
/// `None` gradient means zero (the branch never ran).
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[(String, Option<Vec<f64>>)],
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let named = params.named_params_mut();
    if named.len() != grads.len() || named.len() != state.buffers.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} params vs {} grads", named.len(), grads.len()),
        ));
    }
    for (((name, tensor), (gname, grad)), velocity) in
        named.into_iter().zip(grads).zip(&mut state.buffers)
    {
        if &name != gname {
            return Err(Error::arg("sgd_step", format!("gradient order mismatch at {name}")));
        }
        if let Some(g) = grad {
            if g.len() != tensor.numel() {
                return Err(Error::shape("sgd_step", format!("gradient size mismatch at {name}")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("gradient for parameter {name}")));
            }
        }
        let mut data = tensor.data().to_vec();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            velocity[i] = momentum * velocity[i] + g;
            data[i] -= lr * velocity[i];
        }
        *tensor = Tensor::new(tensor.shape().to_vec(), data)?.with_grad();
    }
    Ok(())
}

// ── checkpoints and logs ───────────────────────────────────────────────

/// One loss-log line: per-epoch mean of each component and of the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub components: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn to_entries(params: &ModelParams) -> Vec<ParamEntry> {
    params
        .named_params()
        .into_iter()
        .map(|(name, t)| ParamEntry {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

fn from_entries(spec: &ModelSpec, entries: &[ParamEntry]) -> Result<ModelParams> {
    let mut params = nn::init_params(spec, 0)?;
    let named = params.named_params_mut();
    if named.len() != entries.len() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint has {} parameters, model needs {}",
            entries.len(),
            named.len()
        )));
    }
    for ((name, tensor), entry) in named.into_iter().zip(entries) {
        if name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint parameter {} does not match model parameter {name}",
                entry.name
            )));
        }
        *tensor = Tensor::new(entry.shape.clone(), entry.data.clone())?.with_grad();
    }
    Ok(params)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned training snapshot: per-backbone parameters, momentum
/// buffers, completed epoch count, config hash, and the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub model_spec: ModelSpec,
    pub backbones: Vec<Vec<ParamEntry>>,
    pub momentum: Vec<Vec<ParamEntry>>,
    pub history: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)
            .map_err(|e| Error::InvalidConfig(format!("checkpoint serialization: {e}")))?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::DataFormat {
            path: path.display().to_string(),
            line: None,
            msg: e.to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::DataFormat {
                path: path.display().to_string(),
                line: None,
                msg: format!("unsupported checkpoint version {}", ckpt.version),
            });
        }
        Ok(ckpt)
    }

    pub fn models(&self) -> Result<Vec<ModelParams>> {
        self.backbones.iter().map(|e| from_entries(&self.model_spec, e)).collect()
    }

    fn momentum_states(&self) -> Vec<MomentumState> {
        self.momentum
            .iter()
            .map(|entries| MomentumState {
                buffers: entries.iter().map(|e| e.data.clone()).collect(),
            })
            .collect()
    }
}

// ── batch assembly ─────────────────────────────────────────────────────

struct BatchData {
    /// Per modality: `(n * t) x frame_dim` stacked frame rows.
    frames: BTreeMap<Modality, Vec<f64>>,
    kitchens: Vec<usize>,
    verbs: Vec<usize>,
    nouns: Vec<usize>,
    n: usize,
}

fn assemble_batch(samples: &[&Sample], meta: &DatasetMeta, labeled: bool) -> Result<BatchData> {
    let mut frames: BTreeMap<Modality, Vec<f64>> =
        meta.modalities.iter().map(|&m| (m, Vec::new())).collect();
    let mut kitchens = Vec::with_capacity(samples.len());
    let mut verbs = Vec::new();
    let mut nouns = Vec::new();
    for s in samples {
        kitchens.push(s.kitchen);
        if labeled {
            let (Some(v), Some(n)) = (s.verb, s.noun) else {
                return Err(Error::arg("assemble_batch", format!("sample {} lacks labels", s.id)));
            };
            verbs.push(v);
            nouns.push(n);
        }
        for &m in &meta.modalities {
            let rows = s
                .frames
                .get(&m)
                .ok_or_else(|| Error::arg("assemble_batch", format!("sample {} missing {m}", s.id)))?;
            let buf = frames.get_mut(&m).expect("initialized above");
            for row in rows {
                buf.extend_from_slice(row);
            }
        }
    }
    Ok(BatchData {
        frames,
        kitchens,
        verbs,
        nouns,
        n: samples.len(),
    })
}

fn bind_batch(
    g: &mut Graph,
    batch: &BatchData,
    meta: &DatasetMeta,
) -> Result<BTreeMap<Modality, VarId>> {
    let rows = batch.n * meta.frames_per_sample;
    batch
        .frames
        .iter()
        .map(|(&m, data)| Ok((m, g.constant(vec![rows, meta.frame_dim], data.clone())?)))
        .collect()
}

// ── the training step ──────────────────────────────────────────────────

/// Forward features of one backbone on one batch.
struct ForwardPass {
    per_modality: BTreeMap<Modality, VarId>,
    frame_fused: VarId,
    video_fused: VarId,
}

fn forward_batch(
    g: &mut Graph,
    model: &BoundModel,
    frames: &BTreeMap<Modality, VarId>,
    t: usize,
) -> Result<ForwardPass> {
    let per_modality = nn::encode_frames(g, model, frames)?;
    let frame_fused = nn::fuse_modalities(g, &per_modality)?;
    let video_fused = nn::temporal_pool(g, frame_fused, t)?;
    Ok(ForwardPass {
        per_modality,
        frame_fused,
        video_fused,
    })
}

/// Indices of samples per kitchen, in batch order.
fn kitchen_groups(kitchens: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &kitchen) in kitchens.iter().enumerate() {
        groups[kitchen].push(i);
    }
    groups
}

fn frame_indices(sample_indices: &[usize], t: usize) -> Vec<usize> {
    sample_indices
        .iter()
        .flat_map(|&i| (i * t..(i + 1) * t))
        .collect()
}

/// Mean norm of per-modality feature rows over source and target jointly.
fn joint_mean_norms(
    g: &mut Graph,
    src: &ForwardPass,
    tgt: &ForwardPass,
    rows_src: usize,
    rows_tgt: usize,
) -> Result<BTreeMap<Modality, VarId>> {
    let mut norms = BTreeMap::new();
    for (&m, &src_feat) in &src.per_modality {
        let tgt_feat = tgt.per_modality[&m];
        let ns = g.l2_norm_rows(src_feat)?;
        let nt = g.l2_norm_rows(tgt_feat)?;
        let ss = g.sum(ns)?;
        let st = g.sum(nt)?;
        let total = g.add(ss, st)?;
        norms.insert(m, g.mul_scalar(total, 1.0 / (rows_src + rows_tgt) as f64)?);
    }
    Ok(norms)
}

/// Per-target-video domain logits from each sample's own kitchen branch,
/// restored to batch order.
fn per_kitchen_video_logits(
    g: &mut Graph,
    model: &BoundModel,
    video_feats: VarId,
    kitchens: &[usize],
    beta: f64,
) -> Result<VarId> {
    let groups = kitchen_groups(kitchens, model.spec.kitchens);
    let mut parts = Vec::new();
    let mut order = Vec::new();
    for (k, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let feats = g.gather_rows(video_feats, group.clone())?;
        parts.push(nn::discriminate(g, model, feats, Branch::Video(k), beta)?);
        order.extend_from_slice(group);
    }
    let grouped = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    // Invert the grouping permutation so row i is sample i again.
    let mut inverse = vec![0usize; order.len()];
    for (pos, &sample) in order.iter().enumerate() {
        inverse[sample] = pos;
    }
    g.gather_rows(grouped, inverse)
}

struct StepOutput {
    report: LossReport,
    total: VarId,
}

#[allow(clippy::too_many_arguments)]
fn build_step_graph(
    g: &mut Graph,
    bounds: &[BoundModel],
    meta: &DatasetMeta,
    src: &BatchData,
    tgt: &BatchData,
    config: &RunConfig,
) -> Result<StepOutput> {
    let t = meta.frames_per_sample;
    let b = bounds.len();
    let enabled = &config.enabled_losses;
    let beta = config.weights.beta;

    let src_frames = bind_batch(g, src, meta)?;
    let tgt_frames = bind_batch(g, tgt, meta)?;

    // Per-backbone component values, keyed for later averaging.
    let mut per_backbone: BTreeMap<ComponentKey, Vec<VarId>> = BTreeMap::new();
    // Consensus needs every backbone's target log-probabilities.
    let mut mec_verb_logp = Vec::with_capacity(b);
    let mut mec_noun_logp = Vec::with_capacity(b);

    let needs_target_logits = enabled.contains(&LossToggle::AttentiveEntropy)
        || enabled.contains(&LossToggle::Mec)
        || enabled.contains(&LossToggle::Cent);

    for bound in bounds {
        let src_pass = forward_batch(g, bound, &src_frames, t)?;
        let tgt_pass = forward_batch(g, bound, &tgt_frames, t)?;

        let (verb_s, noun_s) = nn::classify(g, bound, src_pass.video_fused)?;
        let cls = losses::classification_loss(g, verb_s, noun_s, &src.verbs, &src.nouns)?;
        per_backbone.entry(ComponentKey::Classification).or_default().push(cls);

        if enabled.contains(&LossToggle::Rna) {
            let norms =
                joint_mean_norms(g, &src_pass, &tgt_pass, src.n * t, tgt.n * t)?;
            let rna = losses::rna_loss(g, &norms)?;
            per_backbone.entry(ComponentKey::Rna).or_default().push(rna);
        }

        let src_groups = kitchen_groups(&src.kitchens, meta.kitchens);
        let tgt_groups = kitchen_groups(&tgt.kitchens, meta.kitchens);

        if enabled.contains(&LossToggle::AdvFrame) {
            for k in 0..meta.kitchens {
                let loss = adversarial_branch(
                    g,
                    bound,
                    Branch::Frame(k),
                    beta[0],
                    src_pass.frame_fused,
                    tgt_pass.frame_fused,
                    &frame_indices(&src_groups[k], t),
                    &frame_indices(&tgt_groups[k], t),
                )?;
                if let Some(loss) = loss {
                    per_backbone.entry(ComponentKey::AdvFrame(k)).or_default().push(loss);
                }
            }
        }
        if enabled.contains(&LossToggle::AdvVideo) {
            for k in 0..meta.kitchens {
                let loss = adversarial_branch(
                    g,
                    bound,
                    Branch::Video(k),
                    beta[1],
                    src_pass.video_fused,
                    tgt_pass.video_fused,
                    &src_groups[k],
                    &tgt_groups[k],
                )?;
                if let Some(loss) = loss {
                    per_backbone.entry(ComponentKey::AdvVideo(k)).or_default().push(loss);
                }
            }
        }
        if enabled.contains(&LossToggle::AdvSpatial) {
            let all = g.concat_rows(&[src_pass.video_fused, tgt_pass.video_fused])?;
            let logits = nn::discriminate(g, bound, all, Branch::Spatial, beta[2])?;
            let labels: Vec<usize> =
                src.kitchens.iter().chain(&tgt.kitchens).copied().collect();
            let loss = losses::adversarial_domain_loss(g, logits, &labels)?;
            per_backbone.entry(ComponentKey::AdvSpatial).or_default().push(loss);
        }

        if needs_target_logits {
            let (verb_t, noun_t) = nn::classify(g, bound, tgt_pass.video_fused)?;

            if enabled.contains(&LossToggle::AttentiveEntropy) {
                let domain_logits =
                    per_kitchen_video_logits(g, bound, tgt_pass.video_fused, &tgt.kitchens, beta[1])?;
                let att = losses::attentive_entropy_loss(g, verb_t, noun_t, domain_logits)?;
                per_backbone.entry(ComponentKey::AttentiveEntropy).or_default().push(att);
            }
            if enabled.contains(&LossToggle::Cent) {
                let pv = g.softmax_rows(verb_t)?;
                let pn = g.softmax_rows(noun_t)?;
                let cv = losses::cent_loss(g, pv)?;
                let cn = losses::cent_loss(g, pn)?;
                let sum = g.add(cv, cn)?;
                let cent = g.mul_scalar(sum, 0.5)?;
                per_backbone.entry(ComponentKey::Cent).or_default().push(cent);
            }
            if enabled.contains(&LossToggle::Mec) {
                let pv = g.softmax_rows(verb_t)?;
                let pn = g.softmax_rows(noun_t)?;
                mec_verb_logp.push(g.log(pv)?);
                mec_noun_logp.push(g.log(pn)?);
            }
        }
    }

    let mut components: Vec<(ComponentKey, VarId)> = Vec::new();
    for (key, ids) in per_backbone {
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = g.add(acc, id)?;
        }
        let avg = g.mul_scalar(acc, 1.0 / ids.len() as f64)?;
        components.push((key, avg));
    }
    if enabled.contains(&LossToggle::Mec) {
        let mv = losses::mec_loss(g, &mec_verb_logp)?;
        let mn = losses::mec_loss(g, &mec_noun_logp)?;
        let sum = g.add(mv, mn)?;
        let mec = g.mul_scalar(sum, 0.5)?;
        components.push((ComponentKey::Mec, mec));
    }
    components.sort_by_key(|(k, _)| *k);

    let (total, report) = losses::total_loss(g, &components, &config.weights, enabled)?;
    Ok(StepOutput { report, total })
}

/// One per-kitchen adversarial branch: source rows labeled 0, target rows
/// labeled 1, mean cross-entropy over both. `None` when this kitchen has
/// no samples in the batch.
#[allow(clippy::too_many_arguments)]
fn adversarial_branch(
    g: &mut Graph,
    bound: &BoundModel,
    branch: Branch,
    beta: f64,
    src_feats: VarId,
    tgt_feats: VarId,
    src_rows: &[usize],
    tgt_rows: &[usize],
) -> Result<Option<VarId>> {
    let feats = match (src_rows.is_empty(), tgt_rows.is_empty()) {
        (true, true) => return Ok(None),
        (false, true) => g.gather_rows(src_feats, src_rows.to_vec())?,
        (true, false) => g.gather_rows(tgt_feats, tgt_rows.to_vec())?,
        (false, false) => {
            let s = g.gather_rows(src_feats, src_rows.to_vec())?;
            let t = g.gather_rows(tgt_feats, tgt_rows.to_vec())?;
            g.concat_rows(&[s, t])?
        }
    };
    let logits = nn::discriminate(g, bound, feats, branch, beta)?;
    let labels: Vec<usize> = std::iter::repeat_n(0, src_rows.len())
        .chain(std::iter::repeat_n(1, tgt_rows.len()))
        .collect();
    Ok(Some(losses::adversarial_domain_loss(g, logits, &labels)?))
}

// ── the training loop ──────────────────────────────────────────────────

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub models: Vec<ModelParams>,
    pub log: Vec<EpochLog>,
}

fn resolve_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Dir(dir) => data::load(dir),
        DataSource::Spec(spec) => data::generate(spec, config.seed),
    }
}

/// Pre-seeded component keys so every enabled branch appears in each epoch
/// log even if some batch never sampled a kitchen.
fn component_names(enabled: &BTreeSet<LossToggle>, kitchens: usize) -> Vec<String> {
    let mut names = vec![ComponentKey::Classification.name()];
    for toggle in enabled {
        match toggle {
            LossToggle::Rna => names.push(ComponentKey::Rna.name()),
            LossToggle::AdvFrame => {
                names.extend((0..kitchens).map(|k| ComponentKey::AdvFrame(k).name()))
            }
            LossToggle::AdvVideo => {
                names.extend((0..kitchens).map(|k| ComponentKey::AdvVideo(k).name()))
            }
            LossToggle::AdvSpatial => names.push(ComponentKey::AdvSpatial.name()),
            LossToggle::AttentiveEntropy => names.push(ComponentKey::AttentiveEntropy.name()),
            LossToggle::Mec => names.push(ComponentKey::Mec.name()),
            LossToggle::Cent => names.push(ComponentKey::Cent.name()),
        }
    }
    names
}

/// Train from scratch (or wherever `start` left off).
fn train_from(config: &RunConfig, start: Option<Checkpoint>) -> Result<TrainOutput> {
    config.validate()?;
    let dataset = resolve_dataset(config)?;
    let meta = &dataset.meta;
    let spec = config.model_spec(meta);
    let config_hash = config.hash();

    let (mut models, mut states, mut history, start_epoch) = match start {
        Some(ckpt) => {
            if ckpt.config_hash != config_hash {
                return Err(Error::InvalidConfig(
                    "checkpoint was produced by a different config".into(),
                ));
            }
            if ckpt.model_spec != spec {
                return Err(Error::InvalidConfig("checkpoint model does not fit dataset".into()));
            }
            let models = ckpt.models()?;
            let states = ckpt.momentum_states();
            (models, states, ckpt.history, ckpt.epoch)
        }
        None => {
            let models: Vec<ModelParams> = match &config.init_checkpoint {
                Some(path) => {
                    let ckpt = Checkpoint::load(path)?;
                    if ckpt.model_spec != spec {
                        return Err(Error::InvalidConfig(
                            "init checkpoint model does not fit dataset".into(),
                        ));
                    }
                    let models = ckpt.models()?;
                    if models.len() != config.ensemble_size {
                        return Err(Error::InvalidConfig(format!(
                            "init checkpoint holds {} backbones, config wants {}",
                            models.len(),
                            config.ensemble_size
                        )));
                    }
                    models
                }
                None => (0..config.ensemble_size)
                    .map(|i| nn::init_params(&spec, config.seed.wrapping_add(i as u64)))
                    .collect::<Result<_>>()?,
            };
            let states = models.iter().map(MomentumState::zeros).collect();
            (models, states, Vec::new(), 0)
        }
    };

    let names = component_names(&config.enabled_losses, meta.kitchens);
    for epoch in start_epoch..config.epochs {
        let lr = lr_at(epoch, &config.optimizer);
        let pairs = data::paired_batches(
            dataset.source_train.len(),
            dataset.target_train.len(),
            config.batch_size,
            config.seed,
            epoch as u64,
        )?;

        let mut component_sums: BTreeMap<String, f64> =
            names.iter().map(|n| (n.clone(), 0.0)).collect();
        let mut total_sum = 0.0;
        let steps = pairs.len();

        for (src_idx, tgt_idx) in pairs {
            let src_samples: Vec<&Sample> =
                src_idx.iter().map(|&i| &dataset.source_train[i]).collect();
            let tgt_samples: Vec<&Sample> =
                tgt_idx.iter().map(|&i| &dataset.target_train[i]).collect();
            let src = assemble_batch(&src_samples, meta, true)?;
            let tgt = assemble_batch(&tgt_samples, meta, false)?;

            let mut g = Graph::new();
            let bounds: Vec<BoundModel> = models.iter().map(|m| nn::bind_model(&mut g, m)).collect();
            let step = build_step_graph(&mut g, &bounds, meta, &src, &tgt, config)?;
            g.backward(step.total)?;

            for (model, (bound, state)) in models.iter_mut().zip(bounds.iter().zip(&mut states)) {
                let grads: Vec<(String, Option<Vec<f64>>)> = bound
                    .param_ids
                    .iter()
                    .map(|(name, id)| {
                        let grad = if config.freeze_encoders && name.starts_with("encoder.") {
                            None
                        } else {
                            g.grad(*id).map(<[f64]>::to_vec)
                        };
                        (name.clone(), grad)
                    })
                    .collect();
                sgd_step(model, &grads, state, lr, config.optimizer.momentum)?;
            }

            for (name, value) in &step.report.components {
                *component_sums.get_mut(name).expect("pre-seeded component") += value;
            }
            total_sum += step.report.total;
        }

        let components: BTreeMap<String, f64> = component_sums
            .into_iter()
            .map(|(name, sum)| (name, sum / steps as f64))
            .collect();
        history.push(EpochLog {
            epoch,
            lr,
            components,
            total: total_sum / steps as f64,
        });
    }

    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash,
        epoch: config.epochs,
        model_spec: spec,
        backbones: models.iter().map(to_entries).collect(),
        momentum: models
            .iter()
            .zip(&states)
            .map(|(m, s)| {
                m.named_params()
                    .into_iter()
                    .zip(&s.buffers)
                    .map(|((name, t), buf)| ParamEntry {
                        name,
                        shape: t.shape().to_vec(),
                        data: buf.clone(),
                    })
                    .collect()
            })
            .collect(),
        history: history.clone(),
    };

    Ok(TrainOutput {
        checkpoint,
        models,
        log: history,
    })
}

/// Run the configured experiment from scratch.
pub fn train(config: &RunConfig) -> Result<TrainOutput> {
    train_from(config, None)
}

/// Continue a checkpointed run up to `config.epochs`; the result is
/// bit-identical to the uninterrupted run.
pub fn resume(config: &RunConfig, checkpoint: Checkpoint) -> Result<TrainOutput> {
    train_from(config, Some(checkpoint))
}

/// Serialize the per-epoch loss log as ndjson.
pub fn log_to_ndjson(log: &[EpochLog]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut out, entry)
            .map_err(|e| Error::InvalidConfig(format!("log serialization: {e}")))?;
        out.push(b'\n');
    }
    Ok(out)
}

// ── prediction and evaluation ──────────────────────────────────────────

pub struct Predictions {
    /// Ensemble-averaged probabilities, one row per sample.
    pub verb_probs: Vec<Vec<f64>>,
    pub noun_probs: Vec<Vec<f64>>,
    /// Per-backbone top-1 classes (ties to the lowest index).
    pub verb_top1: Vec<Vec<usize>>,
    pub noun_top1: Vec<Vec<usize>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Forward every backbone over `samples` and late-fuse by averaging the
/// per-backbone softmax scores.
pub fn predict(models: &[ModelParams], samples: &[&Sample]) -> Result<Predictions> {
    if models.is_empty() {
        return Err(Error::arg("predict", "need at least one backbone"));
    }
    let spec = &models[0].spec;
    for m in models {
        if m.spec != *spec {
            return Err(Error::InvalidConfig("ensemble backbones have mismatched specs".into()));
        }
    }
    if samples.is_empty() {
        return Err(Error::arg("predict", "empty sample set"));
    }
    let meta = DatasetMeta {
        kitchens: spec.kitchens,
        modalities: spec.modalities.clone(),
        c_verb: spec.c_verb,
        c_noun: spec.c_noun,
        frames_per_sample: samples[0].frames[&spec.modalities[0]].len(),
        frame_dim: spec.frame_dim,
    };
    let batch = assemble_batch(samples, &meta, false)?;

    let mut g = Graph::new();
    let frames = bind_batch(&mut g, &batch, &meta)?;
    let n = samples.len();
    let b = models.len();

    let mut verb_probs = vec![vec![0.0; spec.c_verb]; n];
    let mut noun_probs = vec![vec![0.0; spec.c_noun]; n];
    let mut verb_top1 = Vec::with_capacity(b);
    let mut noun_top1 = Vec::with_capacity(b);

    for model in models {
        let bound = nn::bind_model(&mut g, model);
        let pass = forward_batch(&mut g, &bound, &frames, meta.frames_per_sample)?;
        let (verb_logits, noun_logits) = nn::classify(&mut g, &bound, pass.video_fused)?;
        let pv = g.softmax_rows(verb_logits)?;
        let pn = g.softmax_rows(noun_logits)?;
        let pv_vals = g.value(pv).to_vec();
        let pn_vals = g.value(pn).to_vec();
        let mut vt = Vec::with_capacity(n);
        let mut nt = Vec::with_capacity(n);
        for i in 0..n {
            let vrow = &pv_vals[i * spec.c_verb..(i + 1) * spec.c_verb];
            let nrow = &pn_vals[i * spec.c_noun..(i + 1) * spec.c_noun];
            for (acc, p) in verb_probs[i].iter_mut().zip(vrow) {
                *acc += p / b as f64;
            }
            for (acc, p) in noun_probs[i].iter_mut().zip(nrow) {
                *acc += p / b as f64;
            }
            vt.push(argmax(vrow));
            nt.push(argmax(nrow));
        }
        verb_top1.push(vt);
        noun_top1.push(nt);
    }

    Ok(Predictions {
        verb_probs,
        noun_probs,
        verb_top1,
        noun_top1,
    })
}

/// Late-fused class probabilities for one sample.
pub fn ensemble_predict(models: &[ModelParams], sample: &Sample) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = predict(models, &[sample])?;
    Ok((p.verb_probs[0].clone(), p.noun_probs[0].clone()))
}

/// Evaluate an ensemble on the labeled target split.
pub fn evaluate(models: &[ModelParams], dataset: &Dataset, per_kitchen: bool) -> Result<EvalReport> {
    let spec = models
        .first()
        .map(|m| &m.spec)
        .ok_or_else(|| Error::arg("evaluate", "need at least one backbone"))?;
    if spec.frame_dim != dataset.meta.frame_dim
        || spec.c_verb != dataset.meta.c_verb
        || spec.c_noun != dataset.meta.c_noun
        || spec.kitchens != dataset.meta.kitchens
        || spec.modalities != dataset.meta.modalities
    {
        return Err(Error::InvalidConfig(
            "checkpoint model does not match dataset dimensions".into(),
        ));
    }
    let samples: Vec<&Sample> = dataset.target_eval.iter().collect();
    let preds = predict(models, &samples)?;
    let verb_labels: Vec<usize> = samples.iter().map(|s| s.verb.expect("eval labels")).collect();
    let noun_labels: Vec<usize> = samples.iter().map(|s| s.noun.expect("eval labels")).collect();
    let kitchens: Vec<usize> = samples.iter().map(|s| s.kitchen).collect();
    let backbone_preds = if models.len() >= 2 {
        Some((preds.verb_top1.as_slice(), preds.noun_top1.as_slice()))
    } else {
        None
    };
    metrics::build_report(
        &preds.verb_probs,
        &preds.noun_probs,
        &verb_labels,
        &noun_labels,
        &kitchens,
        per_kitchen,
        backbone_preds,
    )
}
