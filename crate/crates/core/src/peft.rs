//! Fine-tuning policies: which backbone parameters move, which lightweight
//! modules get attached, and how many trainable parameters that costs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{count_params, insert_linear, insert_norm, normal_tensor, xavier, Backbone, BackboneSpec, LinearIds, NormIds};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Scalar, Tensor, Trainable};
use crate::seed::rng_for;

pub const DEFAULT_PROMPTS: usize = 10;
pub const DEFAULT_ADAPTFORMER_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleMode {
    Learnable,
    Fixed(f64),
}

/// `r = None` selects [`default_bottleneck_dim`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FineTunePolicy {
    Frozen,
    ClassifierOnly,
    Full,
    Partial { k: usize },
    Mask { alpha: f64, seed: u64 },
    BitFit,
    Vpt { prompts: usize },
    Adapter { r: Option<usize> },
    Lora { r: Option<usize> },
    AdaptFormer { r: Option<usize>, scale: ScaleMode },
}

impl FineTunePolicy {
    pub fn adaptformer() -> Self {
        Self::AdaptFormer { r: None, scale: ScaleMode::Learnable }
    }

    /// One representative of every policy kind.
    pub fn all_kinds() -> Vec<Self> {
        vec![
            Self::Frozen,
            Self::ClassifierOnly,
            Self::Full,
            Self::Partial { k: 1 },
            Self::Mask { alpha: 0.1, seed: 0 },
            Self::BitFit,
            Self::Vpt { prompts: DEFAULT_PROMPTS },
            Self::Adapter { r: None },
            Self::Lora { r: None },
            Self::adaptformer(),
        ]
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Frozen => "frozen",
            Self::ClassifierOnly => "classifier_only",
            Self::Full => "full",
            Self::Partial { .. } => "partial",
            Self::Mask { .. } => "mask",
            Self::BitFit => "bitfit",
            Self::Vpt { .. } => "vpt",
            Self::Adapter { .. } => "adapter",
            Self::Lora { .. } => "lora",
            Self::AdaptFormer { .. } => "adaptformer",
        }
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        match *self {
            Self::Partial { k } if k > spec.layers => Err(Error::domain(format!(
                "partial fine-tuning of {k} blocks exceeds the {} available",
                spec.layers
            ))),
            Self::Mask { alpha, .. } if !(0.0..=1.0).contains(&alpha) => {
                Err(Error::domain(format!("mask fraction {alpha} outside [0, 1]")))
            }
            Self::Vpt { prompts: 0 } => Err(Error::domain("vpt needs at least one prompt")),
            Self::Adapter { r: Some(0) } | Self::Lora { r: Some(0) } | Self::AdaptFormer { r: Some(0), .. } => {
                Err(Error::domain("bottleneck dimension must be at least 1"))
            }
            Self::AdaptFormer { scale: ScaleMode::Fixed(s), .. } if !s.is_finite() => {
                Err(Error::domain(format!("adaptformer scale {s} is not finite")))
            }
            _ => Ok(()),
        }
    }

    /// Bottleneck width, resolving the default rule against `classes`.
    pub fn bottleneck(&self, classes: usize, layers: usize) -> Result<Option<usize>> {
        match *self {
            Self::Adapter { r } | Self::Lora { r } | Self::AdaptFormer { r, .. } => match r {
                Some(r) => Ok(Some(r)),
                None => default_bottleneck_dim(classes, layers).map(Some),
            },
            _ => Ok(None),
        }
    }
}

impl fmt::Display for FineTunePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = |r: &Option<usize>| r.map_or_else(|| "auto".to_string(), |r| r.to_string());
        match self {
            Self::Partial { k } => write!(f, "partial:{k}"),
            Self::Mask { alpha, seed } => write!(f, "mask:{alpha}:{seed}"),
            Self::Vpt { prompts } => write!(f, "vpt:{prompts}"),
            Self::Adapter { r: x } => write!(f, "adapter:{}", r(x)),
            Self::Lora { r: x } => write!(f, "lora:{}", r(x)),
            Self::AdaptFormer { r: x, scale } => match scale {
                ScaleMode::Learnable => write!(f, "adaptformer:{}:learnable", r(x)),
                ScaleMode::Fixed(s) => write!(f, "adaptformer:{}:{s}", r(x)),
            },
            other => f.write_str(other.kind()),
        }
    }
}

fn parse_num<N: FromStr>(what: &str, s: &str) -> Result<N> {
    s.parse().map_err(|_| Error::config(format!("invalid {what} {s:?}")))
}

fn parse_r(s: Option<&str>) -> Result<Option<usize>> {
    match s {
        None | Some("auto") => Ok(None),
        Some(v) => parse_num("bottleneck dimension", v).map(Some),
    }
}

impl FromStr for FineTunePolicy {
    type Err = Error;

    /// `name[:arg[:arg]]`, e.g. `partial:2`, `mask:0.1:7`, `adaptformer:auto:0.1`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let name = parts.next().unwrap_or_default();
        let a = parts.next();
        let b = parts.next();
        if parts.next().is_some() {
            return Err(Error::config(format!("too many policy arguments in {s:?}")));
        }
        let no_args = |p: Self| if a.is_some() { Err(Error::config(format!("{name} takes no arguments"))) } else { Ok(p) };
        let p = match name {
            "frozen" => no_args(Self::Frozen)?,
            "classifier_only" | "classifier-only" => no_args(Self::ClassifierOnly)?,
            "full" => no_args(Self::Full)?,
            "bitfit" => no_args(Self::BitFit)?,
            "partial" => Self::Partial {
                k: parse_num("layer count", a.ok_or_else(|| Error::config("partial needs a layer count"))?)?,
            },
            "mask" => Self::Mask {
                alpha: parse_num("mask fraction", a.ok_or_else(|| Error::config("mask needs a fraction"))?)?,
                seed: b.map(|v| parse_num("mask seed", v)).transpose()?.unwrap_or(0),
            },
            "vpt" => Self::Vpt { prompts: a.map(|v| parse_num("prompt count", v)).transpose()?.unwrap_or(DEFAULT_PROMPTS) },
            "adapter" => Self::Adapter { r: parse_r(a)? },
            "lora" => Self::Lora { r: parse_r(a)? },
            "adaptformer" => Self::AdaptFormer {
                r: parse_r(a)?,
                scale: match b {
                    None | Some("learnable") => ScaleMode::Learnable,
                    Some(v) => ScaleMode::Fixed(parse_num("adaptformer scale", v)?),
                },
            },
            other => return Err(Error::config(format!("unknown fine-tune policy {other:?}"))),
        };
        if !matches!(name, "mask" | "adaptformer") && b.is_some() {
            return Err(Error::config(format!("too many policy arguments in {s:?}")));
        }
        Ok(p)
    }
}

/// Largest power of two `r` with `r · 2L ≤ K`.
pub fn default_bottleneck_dim(classes: usize, layers: usize) -> Result<usize> {
    if classes == 0 || layers == 0 || classes < 2 * layers {
        return Err(Error::domain(format!(
            "bottleneck rule undefined for K={classes}, L={layers}; set r explicitly"
        )));
    }
    let ratio = classes / (2 * layers);
    Ok(1 << ratio.ilog2())
}

/// Binary mask with exactly `round(α·rows·cols)` ones at seeded uniform positions.
pub fn build_mask(rows: usize, cols: usize, alpha: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("mask fraction {alpha} outside [0, 1]")));
    }
    let n = rows * cols;
    let ones = (alpha * n as f64).round() as usize;
    let mut mask = vec![false; n];
    let mut rng = rng_for(seed, &[n as u64]);
    for i in rand::seq::index::sample(&mut rng, n, ones.min(n)) {
        mask[i] = true;
    }
    Ok(mask)
}

fn mask_ones(n: usize, alpha: f64) -> usize {
    (alpha * n as f64).round() as usize
}

/// Trainable backbone-side parameters a policy adds or unfreezes; the
/// classifier is not included.
pub fn count_policy_params(policy: &FineTunePolicy, spec: &BackboneSpec, classes: usize) -> Result<usize> {
    policy.validate(spec)?;
    let (l, d) = (spec.layers, spec.dim);
    let r = policy.bottleneck(classes, l)?;
    Ok(match *policy {
        FineTunePolicy::Frozen | FineTunePolicy::ClassifierOnly => 0,
        FineTunePolicy::Full => count_params(spec).total(),
        FineTunePolicy::Partial { k } => k * (12 * d * d + 13 * d) + 2 * d,
        FineTunePolicy::Mask { alpha, .. } => l * (4 * mask_ones(d * d, alpha) + 2 * mask_ones(4 * d * d, alpha)),
        FineTunePolicy::BitFit => l * 11 * d,
        FineTunePolicy::Vpt { prompts } => l * prompts * d,
        FineTunePolicy::Lora { .. } => l * 4 * r.unwrap() * d,
        FineTunePolicy::Adapter { .. } => {
            let r = r.unwrap();
            l * ((2 * r + 1) * d + r + 2 * d)
        }
        FineTunePolicy::AdaptFormer { scale, .. } => {
            let r = r.unwrap();
            let s = usize::from(scale == ScaleMode::Learnable);
            l * (2 * d + (2 * r + 1) * d + r + s)
        }
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LoraIds {
    pub q_down: ParamId,
    pub q_up: ParamId,
    pub v_down: ParamId,
    pub v_up: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterIds {
    pub ln: NormIds,
    pub down: LinearIds,
    pub up: LinearIds,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdaptScale {
    Fixed(f64),
    Learnable(ParamId),
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptFormerIds {
    pub ln: NormIds,
    pub down: LinearIds,
    pub up: LinearIds,
    pub scale: AdaptScale,
}

/// Lightweight modules attached to one block.
#[derive(Clone, Debug, Default)]
pub struct BlockModule {
    pub prompts: Option<ParamId>,
    pub lora: Option<LoraIds>,
    pub adapter: Option<AdapterIds>,
    pub adaptformer: Option<AdaptFormerIds>,
}

impl BlockModule {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.prompts);
        if let Some(l) = &self.lora {
            ids.extend([l.q_down, l.q_up, l.v_down, l.v_up]);
        }
        if let Some(a) = &self.adapter {
            ids.extend([a.ln.gamma, a.ln.beta, a.down.weight, a.down.bias, a.up.weight, a.up.bias]);
        }
        if let Some(a) = &self.adaptformer {
            ids.extend([a.ln.gamma, a.ln.beta, a.down.weight, a.down.bias, a.up.weight, a.up.bias]);
            if let AdaptScale::Learnable(s) = a.scale {
                ids.push(s);
            }
        }
        ids
    }
}

fn bottleneck_module<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    r: usize,
    rng: &mut R,
) -> Result<(NormIds, LinearIds, LinearIds)> {
    let ln = insert_norm(store, &format!("{prefix}.ln"), d)?;
    let down = insert_linear(store, &format!("{prefix}.down"), d, r, rng)?;
    let up = insert_linear(store, &format!("{prefix}.up"), r, d, rng)?;
    store.get_mut(up.weight).value.data_mut().fill(T::zero());
    Ok((ln, down, up))
}

/// Creates the policy's modules in `store` and sets every trainability flag.
/// `head` lists the classifier parameters, which always train.
pub fn attach_policy<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    backbone: &Backbone,
    head: &[ParamId],
    policy: &FineTunePolicy,
    classes: usize,
    rng: &mut R,
) -> Result<Vec<BlockModule>> {
    let spec = backbone.spec;
    policy.validate(&spec)?;
    let (l, d) = (spec.layers, spec.dim);
    let r = policy.bottleneck(classes, l)?;
    store.freeze_all();
    let mut modules = vec![BlockModule::default(); l];
    let mut unfreeze = Vec::new();
    match *policy {
        FineTunePolicy::Frozen | FineTunePolicy::ClassifierOnly => {}
        FineTunePolicy::Full => unfreeze.extend(backbone.param_ids()),
        FineTunePolicy::Partial { k } => {
            for b in &backbone.blocks[l - k..] {
                unfreeze.extend(b.all());
            }
            unfreeze.extend([backbone.norm.gamma, backbone.norm.beta]);
        }
        FineTunePolicy::Mask { alpha, seed } => {
            for (bi, b) in backbone.blocks.iter().enumerate() {
                for (mi, id) in b.matrices().into_iter().enumerate() {
                    let (rows, cols) = (store.value(id).rows(), store.value(id).cols());
                    let mask_seed = crate::seed::derive_seed(seed, &[bi as u64, mi as u64]);
                    store.set_trainable(id, Trainable::Masked(build_mask(rows, cols, alpha, mask_seed)?));
                }
            }
        }
        FineTunePolicy::BitFit => {
            for b in &backbone.blocks {
                unfreeze.extend(b.biases());
            }
        }
        FineTunePolicy::Vpt { prompts } => {
            for (bi, m) in modules.iter_mut().enumerate() {
                let id = store.insert(format!("blocks.{bi}.vpt.prompts"), normal_tensor(prompts, d, 0.02, rng))?;
                m.prompts = Some(id);
            }
        }
        FineTunePolicy::Lora { .. } => {
            let r = r.unwrap();
            for (bi, m) in modules.iter_mut().enumerate() {
                let p = format!("blocks.{bi}.lora");
                m.lora = Some(LoraIds {
                    q_down: store.insert(format!("{p}.q.down"), xavier(d, r, rng))?,
                    q_up: store.insert(format!("{p}.q.up"), Tensor::zeros(vec![r, d]))?,
                    v_down: store.insert(format!("{p}.v.down"), xavier(d, r, rng))?,
                    v_up: store.insert(format!("{p}.v.up"), Tensor::zeros(vec![r, d]))?,
                });
            }
        }
        FineTunePolicy::Adapter { .. } => {
            let r = r.unwrap();
            for (bi, m) in modules.iter_mut().enumerate() {
                let (ln, down, up) = bottleneck_module(store, &format!("blocks.{bi}.adapter"), d, r, rng)?;
                m.adapter = Some(AdapterIds { ln, down, up });
            }
        }
        FineTunePolicy::AdaptFormer { scale, .. } => {
            let r = r.unwrap();
            for (bi, m) in modules.iter_mut().enumerate() {
                let p = format!("blocks.{bi}.adaptformer");
                let (ln, down, up) = bottleneck_module(store, &p, d, r, rng)?;
                let scale = match scale {
                    ScaleMode::Fixed(s) => AdaptScale::Fixed(s),
                    ScaleMode::Learnable => AdaptScale::Learnable(store.insert(
                        format!("{p}.scale"),
                        Tensor::from_fn(vec![1, 1], |_| T::of(DEFAULT_ADAPTFORMER_SCALE)),
                    )?),
                };
                m.adaptformer = Some(AdaptFormerIds { ln, down, up, scale });
            }
        }
    }
    unfreeze.extend(modules.iter().flat_map(BlockModule::param_ids));
    unfreeze.extend_from_slice(head);
    for id in unfreeze {
        store.set_trainable(id, Trainable::Full);
    }
    Ok(modules)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionEntry {
    pub name: String,
    pub trainable: usize,
    pub total: usize,
    pub mask: Option<Vec<bool>>,
    pub classifier: bool,
}

/// Every parameter with at least one trainable entry.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainablePartition {
    pub entries: Vec<PartitionEntry>,
}

impl TrainablePartition {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, head: &[ParamId]) -> Self {
        let entries = store
            .iter()
            .filter_map(|(id, p)| {
                let total = p.value.numel();
                let trainable = p.trainable.trainable_count(total);
                (trainable > 0).then(|| PartitionEntry {
                    name: p.name.clone(),
                    trainable,
                    total,
                    mask: match &p.trainable {
                        Trainable::Masked(m) => Some(m.clone()),
                        _ => None,
                    },
                    classifier: head.contains(&id),
                })
            })
            .collect();
        Self { entries }
    }

    pub fn backbone_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.classifier).map(|e| e.trainable).sum()
    }

    pub fn classifier_count(&self) -> usize {
        self.entries.iter().filter(|e| e.classifier).map(|e| e.trainable).sum()
    }

    pub fn total(&self) -> usize {
        self.backbone_count() + self.classifier_count()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn bottleneck_rule() {
        assert_eq!(default_bottleneck_dim(1000, 12).unwrap(), 32);
        assert_eq!(default_bottleneck_dim(8142, 12).unwrap(), 256);
        assert_eq!(default_bottleneck_dim(365, 12).unwrap(), 8);
        assert_eq!(default_bottleneck_dim(100, 12).unwrap(), 4);
        assert_eq!(default_bottleneck_dim(24, 12).unwrap(), 1);
        assert!(matches!(default_bottleneck_dim(23, 12), Err(Error::Domain(_))));
    }

    #[test]
    fn mask_counts() {
        assert!(build_mask(4, 5, 0.0, 1).unwrap().iter().all(|&m| !m));
        assert!(build_mask(4, 5, 1.0, 1).unwrap().iter().all(|&m| m));
        assert_eq!(build_mask(10, 10, 0.1, 3).unwrap().iter().filter(|&&m| m).count(), 10);
        assert_eq!(build_mask(10, 10, 0.1, 3).unwrap(), build_mask(10, 10, 0.1, 3).unwrap());
        assert_ne!(build_mask(10, 10, 0.5, 3).unwrap(), build_mask(10, 10, 0.5, 4).unwrap());
    }

    #[test]
    fn structured_counts_at_vit_scale() {
        let b = BackboneSpec::vitb16();
        let af = |r| FineTunePolicy::AdaptFormer { r: Some(r), scale: ScaleMode::Learnable };
        assert_eq!(count_policy_params(&af(32), &b, 1000).unwrap(), 617_868);
        assert_eq!(count_policy_params(&FineTunePolicy::adaptformer(), &b, 1000).unwrap(), 617_868);
        assert_eq!(count_policy_params(&af(8), &b, 365).unwrap(), 175_212);
        assert_eq!(count_policy_params(&FineTunePolicy::BitFit, &b, 1000).unwrap(), 12 * 8448);
        let lora = FineTunePolicy::Lora { r: Some(4) };
        assert_eq!(count_policy_params(&lora, &b, 1000).unwrap(), 12 * 12_288);
        let l = BackboneSpec::vitl14();
        assert_eq!(count_policy_params(&af(16), &l, 1000).unwrap(), 860_568);
    }

    #[test]
    fn policy_strings_roundtrip() {
        for p in FineTunePolicy::all_kinds().into_iter().chain([
            FineTunePolicy::AdaptFormer { r: Some(4), scale: ScaleMode::Fixed(0.5) },
            FineTunePolicy::Lora { r: Some(2) },
            FineTunePolicy::Mask { alpha: 0.25, seed: 9 },
        ]) {
            assert_eq!(p.to_string().parse::<FineTunePolicy>().unwrap(), p);
        }
        assert_eq!("adaptformer".parse::<FineTunePolicy>().unwrap(), FineTunePolicy::adaptformer());
        assert_eq!("mask:0.1".parse::<FineTunePolicy>().unwrap(), FineTunePolicy::Mask { alpha: 0.1, seed: 0 });
        for bad in ["nope", "full:1", "partial", "partial:x", "lora:2:3"] {
            assert!(matches!(bad.parse::<FineTunePolicy>(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn partition_counts_match_accounting() {
        let spec = BackboneSpec::new(2, 8, 2, 2, 4, 3).unwrap();
        let classes = 8;
        for policy in FineTunePolicy::all_kinds().into_iter().chain([FineTunePolicy::Partial { k: 0 }, FineTunePolicy::Partial { k: 2 }])
        {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let bb = Backbone::init(&mut store, spec, &mut rng).unwrap();
            let head = store.insert("head.weight", Tensor::zeros(vec![classes, 8])).unwrap();
            attach_policy(&mut store, &bb, &[head], &policy, classes, &mut rng).unwrap();
            let part = TrainablePartition::from_store(&store, &[head]);
            assert_eq!(part.backbone_count(), count_policy_params(&policy, &spec, classes).unwrap(), "{policy}");
            assert_eq!(part.classifier_count(), classes * 8);
            for e in &part.entries {
                assert!(e.trainable <= e.total);
                if let Some(m) = &e.mask {
                    assert_eq!(m.iter().filter(|&&b| b).count(), e.trainable);
                }
            }
        }
    }

    #[test]
    fn partial_beyond_depth_is_rejected() {
        let spec = BackboneSpec::new(2, 8, 2, 2, 4, 3).unwrap();
        assert!(matches!(count_policy_params(&FineTunePolicy::Partial { k: 3 }, &spec, 10), Err(Error::Domain(_))));
    }

    #[test]
    fn adapter_budget_below_classifier() {
        for (k, l, d) in [(1000, 12, 768), (365, 12, 768), (8142, 24, 1024), (10, 2, 32)] {
            let r = default_bottleneck_dim(k, l).unwrap();
            assert!(l * 2 * r * d <= k * d);
        }
    }
}
