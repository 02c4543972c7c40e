//! Network components: per-modality MLP encoders, temporal pooling,
//! verb/noun classifier heads, and the adversarial discriminator bank
//! (K frame-level + K video-level binary discriminators plus one K-way
//! kitchen discriminator, i.e. 2K+1 in total).
//!
//! Parameters live in [`ModelParams`] as plain tensors. To run a forward
//! pass, bind them into a [`Graph`] with [`bind_model`] and call the
//! functional ops on the returned [`BoundModel`].

use std::collections::BTreeMap;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;

/// Dimensions of one backbone. All MLPs use a single hidden layer of
/// width `feat_dim` with relu.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub modalities: Vec<Modality>,
    pub frame_dim: usize,
    pub feat_dim: usize,
    pub c_verb: usize,
    pub c_noun: usize,
    pub kitchens: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one modality".into()));
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(Error::InvalidConfig("duplicate modality in model spec".into()));
        }
        for (name, v) in [
            ("frame_dim", self.frame_dim),
            ("feat_dim", self.feat_dim),
            ("c_verb", self.c_verb),
            ("c_noun", self.c_noun),
            ("kitchens", self.kitchens),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the concatenated multi-modal feature.
    pub fn fused_dim(&self) -> usize {
        self.modalities.len() * self.feat_dim
    }
}

/// One linear layer; weight is `in x out`, bias is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Two-layer MLP with relu after the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
}

/// Per-modality frame encoders (`frame_dim -> feat_dim -> feat_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub by_modality: BTreeMap<Modality, MlpParams>,
}

/// Verb and noun heads over the fused video feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub verb: LinearParams,
    pub noun: LinearParams,
}

/// The 2K+1 adversarial discriminators for K kitchens: per-kitchen binary
/// discriminators at frame and video level, plus one K-way kitchen
/// discriminator over video features.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorBank {
    pub frame: Vec<MlpParams>,
    pub video: Vec<MlpParams>,
    pub spatial: MlpParams,
}

impl DiscriminatorBank {
    /// Total number of discriminators (always `2K + 1`).
    pub fn count(&self) -> usize {
        self.frame.len() + self.video.len() + 1
    }
}

/// All parameters of one backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub encoders: EncoderParams,
    pub classifiers: ClassifierParams,
    pub discriminators: DiscriminatorBank,
}

/// Which discriminator a feature is routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Per-kitchen frame-level binary discriminator.
    Frame(usize),
    /// Per-kitchen video-level binary discriminator.
    Video(usize),
    /// K-way kitchen discriminator over video features.
    Spatial,
}

// ── initialization ─────────────────────────────────────────────────────

fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> LinearParams {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new(-s, s).expect("valid uniform bounds");
    let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    LinearParams {
        weight: Tensor::new(vec![fan_in, fan_out], weight).expect("init shape").with_grad(),
        bias: Tensor::zeros(vec![fan_out]).expect("init shape").with_grad(),
    }
}

fn init_mlp(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> MlpParams {
    MlpParams {
        l1: init_linear(rng, input, hidden),
        l2: init_linear(rng, hidden, output),
    }
}

/// Initialize one backbone: weights uniform in `(-s, s)` with
/// `s = sqrt(6 / (fan_in + fan_out))`, biases zero, deterministic per seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = spec.feat_dim;

    let mut by_modality = BTreeMap::new();
    for &m in &spec.modalities {
        by_modality.insert(m, init_mlp(&mut rng, spec.frame_dim, f, f));
    }

    let classifiers = ClassifierParams {
        verb: init_linear(&mut rng, spec.fused_dim(), spec.c_verb),
        noun: init_linear(&mut rng, spec.fused_dim(), spec.c_noun),
    };

    let frame = (0..spec.kitchens).map(|_| init_mlp(&mut rng, spec.fused_dim(), f, 2)).collect();
    let video = (0..spec.kitchens).map(|_| init_mlp(&mut rng, spec.fused_dim(), f, 2)).collect();
    let spatial = init_mlp(&mut rng, spec.fused_dim(), f, spec.kitchens);

    Ok(ModelParams {
        spec: spec.clone(),
        encoders: EncoderParams { by_modality },
        classifiers,
        discriminators: DiscriminatorBank { frame, video, spatial },
    })
}

// ── named parameter traversal ──────────────────────────────────────────

impl ModelParams {
    /// Parameters in a fixed order: encoders (canonical modality order),
    /// classifier heads, frame discriminators, video discriminators,
    /// spatial discriminator. Each entry is `(name, tensor)`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: String, l: &'a LinearParams) {
            out.push((format!("{prefix}.weight"), &l.weight));
            out.push((format!("{prefix}.bias"), &l.bias));
        }
        fn push_mlp<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: String, m: &'a MlpParams) {
            push_linear(out, format!("{prefix}.l1"), &m.l1);
            push_linear(out, format!("{prefix}.l2"), &m.l2);
        }
        let mut out = Vec::new();
        for (modality, mlp) in &self.encoders.by_modality {
            push_mlp(&mut out, format!("encoder.{modality}"), mlp);
        }
        push_linear(&mut out, "classifier.verb".into(), &self.classifiers.verb);
        push_linear(&mut out, "classifier.noun".into(), &self.classifiers.noun);
        for (k, mlp) in self.discriminators.frame.iter().enumerate() {
            push_mlp(&mut out, format!("disc.frame{k}"), mlp);
        }
        for (k, mlp) in self.discriminators.video.iter().enumerate() {
            push_mlp(&mut out, format!("disc.video{k}"), mlp);
        }
        push_mlp(&mut out, "disc.spatial".into(), &self.discriminators.spatial);
        out
    }

    /// Mutable variant of [`ModelParams::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn push_linear<'a>(
            out: &mut Vec<(String, &'a mut Tensor)>,
            prefix: String,
            l: &'a mut LinearParams,
        ) {
            out.push((format!("{prefix}.weight"), &mut l.weight));
            out.push((format!("{prefix}.bias"), &mut l.bias));
        }
        fn push_mlp<'a>(
            out: &mut Vec<(String, &'a mut Tensor)>,
            prefix: String,
            m: &'a mut MlpParams,
        ) {
            push_linear(out, format!("{prefix}.l1"), &mut m.l1);
            push_linear(out, format!("{prefix}.l2"), &mut m.l2);
        }
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (modality, mlp) in &mut self.encoders.by_modality {
            push_mlp(&mut out, format!("encoder.{modality}"), mlp);
        }
        push_linear(&mut out, "classifier.verb".into(), &mut self.classifiers.verb);
        push_linear(&mut out, "classifier.noun".into(), &mut self.classifiers.noun);
        for (k, mlp) in self.discriminators.frame.iter_mut().enumerate() {
            push_mlp(&mut out, format!("disc.frame{k}"), mlp);
        }
        for (k, mlp) in self.discriminators.video.iter_mut().enumerate() {
            push_mlp(&mut out, format!("disc.video{k}"), mlp);
        }
        push_mlp(&mut out, "disc.spatial".into(), &mut self.discriminators.spatial);
        out
    }
}

// ── graph binding ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: VarId,
    pub bias: VarId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub l1: BoundLinear,
    pub l2: BoundLinear,
}

/// A backbone's parameters registered as differentiable leaves of a graph.
pub struct BoundModel {
    pub spec: ModelSpec,
    pub encoders: BTreeMap<Modality, BoundMlp>,
    pub verb: BoundLinear,
    pub noun: BoundLinear,
    pub frame_discs: Vec<BoundMlp>,
    pub video_discs: Vec<BoundMlp>,
    pub spatial_disc: BoundMlp,
    /// `(name, id)` in the same order as [`ModelParams::named_params`].
    pub param_ids: Vec<(String, VarId)>,
}

/// Register every parameter of `params` as a leaf of `g`.
pub fn bind_model(g: &mut Graph, params: &ModelParams) -> BoundModel {
    let mut ids = BTreeMap::new();
    let mut param_ids = Vec::new();
    for (name, t) in params.named_params() {
        let id = g.leaf(t);
        ids.insert(name.clone(), id);
        param_ids.push((name, id));
    }
    let lin = |prefix: &str| BoundLinear {
        weight: ids[&format!("{prefix}.weight")],
        bias: ids[&format!("{prefix}.bias")],
    };
    let mlp = |prefix: &str| BoundMlp {
        l1: lin(&format!("{prefix}.l1")),
        l2: lin(&format!("{prefix}.l2")),
    };
    let encoders = params
        .spec
        .modalities
        .iter()
        .map(|&m| (m, mlp(&format!("encoder.{m}"))))
        .collect();
    BoundModel {
        spec: params.spec.clone(),
        encoders,
        verb: lin("classifier.verb"),
        noun: lin("classifier.noun"),
        frame_discs: (0..params.spec.kitchens).map(|k| mlp(&format!("disc.frame{k}"))).collect(),
        video_discs: (0..params.spec.kitchens).map(|k| mlp(&format!("disc.video{k}"))).collect(),
        spatial_disc: mlp("disc.spatial"),
        param_ids,
    }
}

// ── forward ops ────────────────────────────────────────────────────────

/// `x W + b`.
pub fn linear(g: &mut Graph, l: &BoundLinear, x: VarId) -> Result<VarId> {
    let h = g.matmul(x, l.weight)?;
    g.add_row(h, l.bias)
}

/// `relu(x W1 + b1) W2 + b2`.
pub fn mlp(g: &mut Graph, m: &BoundMlp, x: VarId) -> Result<VarId> {
    let h = linear(g, &m.l1, x)?;
    let h = g.relu(h)?;
    linear(g, &m.l2, h)
}

/// Run each configured modality's encoder over its frame matrix
/// (`rows x frame_dim`, any row count). Returns per-modality features in
/// canonical modality order.
pub fn encode_frames(
    g: &mut Graph,
    model: &BoundModel,
    frames: &BTreeMap<Modality, VarId>,
) -> Result<BTreeMap<Modality, VarId>> {
    let mut out = BTreeMap::new();
    for (&m, enc) in &model.encoders {
        let x = frames
            .get(&m)
            .copied()
            .ok_or_else(|| Error::arg("encode_frames", format!("missing modality {m}")))?;
        out.insert(m, mlp(g, enc, x)?);
    }
    Ok(out)
}

/// Arithmetic mean over consecutive groups of `t` frame rows.
pub fn temporal_pool(g: &mut Graph, frame_feats: VarId, t: usize) -> Result<VarId> {
    if t == 0 {
        return Err(Error::arg("temporal_pool", "frame count must be >= 1"));
    }
    g.mean_pool_rows(frame_feats, t)
}

/// Concatenate per-modality features (canonical order) along columns.
pub fn fuse_modalities(g: &mut Graph, feats: &BTreeMap<Modality, VarId>) -> Result<VarId> {
    let ids: Vec<VarId> = feats.values().copied().collect();
    if ids.len() == 1 {
        return Ok(ids[0]);
    }
    g.concat_cols(&ids)
}

/// Raw verb and noun logits for fused video features.
pub fn classify(g: &mut Graph, model: &BoundModel, fused: VarId) -> Result<(VarId, VarId)> {
    let verb = linear(g, &model.verb, fused)?;
    let noun = linear(g, &model.noun, fused)?;
    Ok((verb, noun))
}

/// Route features through a gradient-reversal node (coefficient `beta`)
/// into the selected discriminator. Frame/video branches emit 2 logits,
/// the spatial branch emits K.
pub fn discriminate(
    g: &mut Graph,
    model: &BoundModel,
    feat: VarId,
    branch: Branch,
    beta: f64,
) -> Result<VarId> {
    if beta < 0.0 {
        return Err(Error::arg("discriminate", format!("beta must be >= 0, got {beta}")));
    }
    let disc = *match branch {
        Branch::Frame(k) => model
            .frame_discs
            .get(k)
            .ok_or_else(|| Error::arg("discriminate", format!("no frame branch for kitchen {k}")))?,
        Branch::Video(k) => model
            .video_discs
            .get(k)
            .ok_or_else(|| Error::arg("discriminate", format!("no video branch for kitchen {k}")))?,
        Branch::Spatial => &model.spatial_disc,
    };
    let reversed = g.grad_reverse(feat, beta)?;
    mlp(g, &disc, reversed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec {
            modalities: vec![Modality::Rgb, Modality::Flow, Modality::Audio],
            frame_dim: 4,
            feat_dim: 3,
            c_verb: 5,
            c_noun: 2,
            kitchens: 2,
        }
    }

    fn zeroed(spec: &ModelSpec) -> ModelParams {
        let mut p = init_params(spec, 0).unwrap();
        for (_, t) in p.named_params_mut() {
            *t = Tensor::zeros(t.shape().to_vec()).unwrap().with_grad();
        }
        p
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let s = spec();
        assert_eq!(init_params(&s, 42).unwrap(), init_params(&s, 42).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let s = spec();
        assert_ne!(init_params(&s, 1).unwrap(), init_params(&s, 2).unwrap());
    }

    #[test]
    fn biases_start_at_zero() {
        let p = init_params(&spec(), 7).unwrap();
        for (name, t) in p.named_params() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn nonpositive_dimension_rejected() {
        let mut s = spec();
        s.feat_dim = 0;
        assert!(init_params(&s, 0).is_err());
    }

    #[test]
    fn bank_has_2k_plus_1_discriminators() {
        for k in 1..=3 {
            let mut s = spec();
            s.kitchens = k;
            let p = init_params(&s, 0).unwrap();
            assert_eq!(p.discriminators.count(), 2 * k + 1);
        }
    }

    #[test]
    fn zero_weights_give_zero_features_and_logits() {
        let s = spec();
        let p = zeroed(&s);
        let mut g = Graph::new();
        let bound = bind_model(&mut g, &p);
        let frames: BTreeMap<Modality, VarId> = s
            .modalities
            .iter()
            .map(|&m| (m, g.constant(vec![2, 4], vec![1.0; 8]).unwrap()))
            .collect();
        let feats = encode_frames(&mut g, &bound, &frames).unwrap();
        for f in feats.values() {
            assert!(g.value(*f).iter().all(|&v| v == 0.0));
        }
        let mut pooled = BTreeMap::new();
        for (&m, &f) in &feats {
            pooled.insert(m, temporal_pool(&mut g, f, 2).unwrap());
        }
        let fused = fuse_modalities(&mut g, &pooled).unwrap();
        let (verb, noun) = classify(&mut g, &bound, fused).unwrap();
        assert_eq!(g.shape(verb), &[1, 5]);
        assert_eq!(g.shape(noun), &[1, 2]);
        assert!(g.value(verb).iter().chain(g.value(noun)).all(|&v| v == 0.0));
    }

    #[test]
    fn missing_modality_is_named_in_error() {
        let s = spec();
        let p = init_params(&s, 1).unwrap();
        let mut g = Graph::new();
        let bound = bind_model(&mut g, &p);
        let mut frames = BTreeMap::new();
        frames.insert(Modality::Rgb, g.constant(vec![1, 4], vec![0.0; 4]).unwrap());
        frames.insert(Modality::Flow, g.constant(vec![1, 4], vec![0.0; 4]).unwrap());
        let err = encode_frames(&mut g, &bound, &frames).unwrap_err().to_string();
        assert!(err.contains("audio"), "{err}");
    }

    #[test]
    fn identity_encoder_preserves_l2_norm() {
        // W1 = W2 = I on a positive input, so relu is transparent.
        let s = ModelSpec {
            modalities: vec![Modality::Rgb],
            frame_dim: 2,
            feat_dim: 2,
            c_verb: 2,
            c_noun: 2,
            kitchens: 1,
        };
        let mut p = zeroed(&s);
        for (name, t) in p.named_params_mut() {
            if name.starts_with("encoder.rgb") && name.ends_with(".weight") {
                *t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap().with_grad();
            }
        }
        let mut g = Graph::new();
        let bound = bind_model(&mut g, &p);
        let frames =
            BTreeMap::from([(Modality::Rgb, g.constant(vec![1, 2], vec![3.0, 4.0]).unwrap())]);
        let feats = encode_frames(&mut g, &bound, &frames).unwrap();
        let norm = g.l2_norm_rows(feats[&Modality::Rgb]).unwrap();
        assert_eq!(g.value(norm), &[5.0]);
    }

    #[test]
    fn encode_is_per_frame_so_permutation_permutes_rows() {
        let s = spec();
        let p = init_params(&s, 3).unwrap();
        let rows = [
            vec![0.1, -0.4, 0.7, 0.2],
            vec![1.0, 0.3, -0.2, 0.5],
            vec![-0.6, 0.9, 0.0, 0.1],
        ];
        let run = |order: [usize; 3]| {
            let mut g = Graph::new();
            let bound = bind_model(&mut g, &p);
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let frames: BTreeMap<Modality, VarId> = s
                .modalities
                .iter()
                .map(|&m| (m, g.constant(vec![3, 4], data.clone()).unwrap()))
                .collect();
            let feats = encode_frames(&mut g, &bound, &frames).unwrap();
            g.value(feats[&Modality::Rgb]).to_vec()
        };
        let base = run([0, 1, 2]);
        let perm = run([2, 0, 1]);
        let row = |v: &[f64], i: usize| v[i * 3..(i + 1) * 3].to_vec();
        assert_eq!(row(&perm, 0), row(&base, 2));
        assert_eq!(row(&perm, 1), row(&base, 0));
        assert_eq!(row(&perm, 2), row(&base, 1));
    }

    #[test]
    fn temporal_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pooled = temporal_pool(&mut g, x, 2).unwrap();
        assert_eq!(g.value(pooled), &[2.0, 3.0]);

        let single = g.constant(vec![1, 2], vec![7.0, -3.0]).unwrap();
        let pooled = temporal_pool(&mut g, single, 1).unwrap();
        assert_eq!(g.value(pooled), &[7.0, -3.0]);

        assert!(temporal_pool(&mut g, x, 0).is_err());
    }

    #[test]
    fn pooled_pipeline_is_frame_permutation_invariant() {
        let s = spec();
        let p = init_params(&s, 13).unwrap();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect())
            .collect();
        let run = |order: [usize; 4]| {
            let mut g = Graph::new();
            let bound = bind_model(&mut g, &p);
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let frames: BTreeMap<Modality, VarId> = s
                .modalities
                .iter()
                .map(|&m| (m, g.constant(vec![4, 4], data.clone()).unwrap()))
                .collect();
            let feats = encode_frames(&mut g, &bound, &frames).unwrap();
            let mut pooled = BTreeMap::new();
            for (&m, &f) in &feats {
                pooled.insert(m, temporal_pool(&mut g, f, 4).unwrap());
            }
            let fused = fuse_modalities(&mut g, &pooled).unwrap();
            let (verb, noun) = classify(&mut g, &bound, fused).unwrap();
            (g.value(verb).to_vec(), g.value(noun).to_vec())
        };
        let (v0, n0) = run([0, 1, 2, 3]);
        let (v1, n1) = run([3, 1, 0, 2]);
        for (a, b) in v0.iter().zip(&v1).chain(n0.iter().zip(&n1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_shift_is_linear_in_input() {
        let s = spec();
        let p = init_params(&s, 11).unwrap();
        let mut g = Graph::new();
        let bound = bind_model(&mut g, &p);
        let base: Vec<f64> = (0..s.fused_dim()).map(|i| 0.1 * i as f64).collect();
        let delta: Vec<f64> = (0..s.fused_dim()).map(|i| 0.01 * (i as f64 - 2.0)).collect();
        let x0 = g.constant(vec![1, s.fused_dim()], base.clone()).unwrap();
        let shifted: Vec<f64> = base.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let x1 = g.constant(vec![1, s.fused_dim()], shifted).unwrap();
        let (v0, _) = classify(&mut g, &bound, x0).unwrap();
        let (v1, _) = classify(&mut g, &bound, x1).unwrap();
        // Compare against a direct matmul of the delta with the verb weight.
        let d = g.constant(vec![1, s.fused_dim()], delta).unwrap();
        let wd = g.matmul(d, bound.verb.weight).unwrap();
        for j in 0..s.c_verb {
            let got = g.value(v1)[j] - g.value(v0)[j];
            assert!((got - g.value(wd)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn discriminate_forward_ignores_beta() {
        let s = spec();
        let p = init_params(&s, 5).unwrap();
        let mut g = Graph::new();
        let bound = bind_model(&mut g, &p);
        let feat = g.constant(vec![2, s.fused_dim()], vec![0.3; 2 * s.fused_dim()]).unwrap();
        let a = discriminate(&mut g, &bound, feat, Branch::Video(1), 0.0).unwrap();
        let b = discriminate(&mut g, &bound, feat, Branch::Video(1), 0.75).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn spatial_branch_emits_k_logits() {
        let mut s = spec();
        s.kitchens = 3;
        let p = init_params(&s, 5).unwrap();
        let mut g = Graph::new();
        let bound = bind_model(&mut g, &p);
        let feat = g.constant(vec![1, s.fused_dim()], vec![0.5; s.fused_dim()]).unwrap();
        let logits = discriminate(&mut g, &bound, feat, Branch::Spatial, 0.75).unwrap();
        assert_eq!(g.shape(logits), &[1, 3]);
    }

    #[test]
    fn unknown_branch_is_an_error() {
        let s = spec();
        let p = init_params(&s, 5).unwrap();
        let mut g = Graph::new();
        let bound = bind_model(&mut g, &p);
        let feat = g.constant(vec![1, s.fused_dim()], vec![0.5; s.fused_dim()]).unwrap();
        assert!(discriminate(&mut g, &bound, feat, Branch::Frame(9), 0.75).is_err());
        assert!(discriminate(&mut g, &bound, feat, Branch::Video(2), 0.75).is_err());
        assert!(discriminate(&mut g, &bound, feat, Branch::Spatial, -0.1).is_err());
    }

    #[test]
    fn beta_zero_blocks_gradient_into_features() {
        let s = spec();
        let p = init_params(&s, 5).unwrap();
        let mut g = Graph::new();
        let bound = bind_model(&mut g, &p);
        let feat = g.param(vec![2, s.fused_dim()], vec![0.2; 2 * s.fused_dim()]).unwrap();
        let logits = discriminate(&mut g, &bound, feat, Branch::Frame(0), 0.0).unwrap();
        let y = g.sum(logits).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(feat).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grl_scales_feature_gradient_by_minus_beta() {
        let s = spec();
        let p = init_params(&s, 9).unwrap();
        let beta = 0.75;
        let feat_data: Vec<f64> = (0..2 * s.fused_dim()).map(|i| 0.05 * i as f64 - 0.3).collect();

        let grads = |use_grl: bool| {
            let mut g = Graph::new();
            let bound = bind_model(&mut g, &p);
            let feat = g.param(vec![2, s.fused_dim()], feat_data.clone()).unwrap();
            let logits = if use_grl {
                discriminate(&mut g, &bound, feat, Branch::Video(0), beta).unwrap()
            } else {
                mlp(&mut g, &bound.video_discs[0], feat).unwrap()
            };
            let sm = g.softmax_rows(logits).unwrap();
            let lg = g.log(sm).unwrap();
            let y = g.mean(lg).unwrap();
            g.backward(y).unwrap();
            g.grad(feat).unwrap().to_vec()
        };

        let with_grl = grads(true);
        let without = grads(false);
        for (a, b) in with_grl.iter().zip(&without) {
            let expect = -beta * b;
            let denom = expect.abs().max(1e-30);
            assert!((a - expect).abs() / denom < 1e-10, "{a} vs {expect}");
        }
    }
}
