//! A backbone, its attached fine-tuning modules and a classifier head sharing
//! one parameter store.

use crate::backbone::{extract_feature, Backbone, BackboneSpec};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::head::{Head, HeadKind};
use crate::inference::Classifier;
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::peft::{attach_policy, BlockModule, FineTunePolicy, TrainablePartition};
use crate::seed::rng_for;

const BACKBONE_STREAM: u64 = 0xb0;
const HEAD_STREAM: u64 = 0x4e;
const MODULE_STREAM: u64 = 0x3d;

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub modules: Vec<BlockModule>,
    pub head: Head,
    pub policy: FineTunePolicy,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model with `policy` attached.
    pub fn new(spec: BackboneSpec, kind: HeadKind, classes: usize, policy: FineTunePolicy, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, spec, &mut rng_for(seed, &[BACKBONE_STREAM]))?;
        let head = Head::init(&mut store, kind, classes, spec.dim, &mut rng_for(seed, &[HEAD_STREAM]))?;
        let modules = attach_policy(
            &mut store,
            &backbone,
            &head.param_ids(),
            &policy,
            classes,
            &mut rng_for(seed, &[MODULE_STREAM]),
        )?;
        Ok(Self { store, backbone, modules, head, policy })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.backbone.spec
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.param_ids()
    }

    pub fn partition(&self) -> TrainablePartition {
        TrainablePartition::from_store(&self.store, &self.head_ids())
    }

    pub fn feature_var(&self, g: &mut Graph<'_, T>, image: &Image) -> Result<Var> {
        extract_feature(g, &self.backbone, &self.modules, image)
    }

    pub fn logits_var(&self, g: &mut Graph<'_, T>, image: &Image) -> Result<Var> {
        let f = self.feature_var(g, image)?;
        self.head.logits(g, f)
    }

    /// Mean logit-adjusted cross-entropy over `images` recorded on `g`.
    pub fn loss_var(&self, g: &mut Graph<'_, T>, images: &[&Image], labels: &[usize], offsets: &[T]) -> Result<Var> {
        let rows = images.iter().map(|im| self.logits_var(g, im)).collect::<Result<Vec<_>>>()?;
        let z = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        g.adjusted_cross_entropy(z, offsets, labels)
    }

    pub fn feature(&self, image: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad(&self.store);
        let f = self.feature_var(&mut g, image)?;
        Ok(g.value(f).iter().map(|v| v.as_f64()).collect())
    }

    pub fn weight_matrix(&self) -> Vec<f64> {
        self.store.value(self.head.weight).data().iter().map(|v| v.as_f64()).collect()
    }

    /// Copies every backbone parameter from `src` by name.
    pub fn load_backbone_from<U: Scalar>(&mut self, src: &ParamStore<U>) -> Result<()> {
        for id in self.backbone.param_ids() {
            let p = self.store.get_mut(id);
            let other = src
                .by_name(&p.name)
                .ok_or_else(|| Error::integrity(format!("source has no parameter {}", p.name)))?;
            if other.value.shape() != p.value.shape() {
                return Err(Error::integrity(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    other.value.shape(),
                    p.value.shape()
                )));
            }
            for (d, s) in p.value.data_mut().iter_mut().zip(other.value.data()) {
                *d = T::of(s.as_f64());
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::<U>::new();
        for (_, p) in self.store.iter() {
            let id = store.insert(p.name.clone(), p.value.cast()).expect("names are unique");
            store.set_trainable(id, p.trainable.clone());
        }
        Model {
            store,
            backbone: self.backbone.clone(),
            modules: self.modules.clone(),
            head: self.head,
            policy: self.policy,
        }
    }
}

impl<T: Scalar> Classifier for Model<T> {
    fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad(&self.store);
        let z = self.logits_var(&mut g, image)?;
        Ok(g.value(z).iter().map(|v| v.as_f64()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Trainable;
    use crate::peft::ScaleMode;

    fn spec() -> BackboneSpec {
        BackboneSpec::new(2, 8, 2, 2, 4, 3).unwrap()
    }

    fn image(seed: u64) -> Image {
        let data = (0..48).map(|i| ((i as u64 * 31 + seed * 17) % 23) as f32 / 23.0).collect();
        Image::new(4, 4, 3, data).unwrap()
    }

    #[test]
    fn zero_initialized_modules_start_at_the_frozen_backbone() {
        let base = Model::<f64>::new(spec(), HeadKind::cosine(), 8, FineTunePolicy::Frozen, 1).unwrap();
        for policy in [
            FineTunePolicy::Lora { r: Some(2) },
            FineTunePolicy::Adapter { r: Some(2) },
            FineTunePolicy::adaptformer(),
            FineTunePolicy::AdaptFormer { r: Some(3), scale: ScaleMode::Fixed(5.0) },
        ] {
            let m = Model::<f64>::new(spec(), HeadKind::cosine(), 8, policy, 1).unwrap();
            for s in 0..3 {
                assert_eq!(m.logits(&image(s)).unwrap(), base.logits(&image(s)).unwrap(), "{policy}");
            }
        }
    }

    #[test]
    fn adaptformer_with_zero_scale_is_plain() {
        let base = Model::<f64>::new(spec(), HeadKind::Linear, 8, FineTunePolicy::Frozen, 2).unwrap();
        let p = FineTunePolicy::AdaptFormer { r: Some(2), scale: ScaleMode::Fixed(0.0) };
        let mut m = Model::<f64>::new(spec(), HeadKind::Linear, 8, p, 2).unwrap();
        for (_, param) in m.store.iter_mut().filter(|(_, p)| p.name.contains("adaptformer")) {
            param.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin());
        }
        assert_eq!(m.logits(&image(0)).unwrap(), base.logits(&image(0)).unwrap());
    }

    #[test]
    fn vpt_keeps_output_shape() {
        let m = Model::<f64>::new(spec(), HeadKind::cosine(), 8, FineTunePolicy::Vpt { prompts: 3 }, 3).unwrap();
        let mut g = Graph::no_grad(&m.store);
        let f = m.feature_var(&mut g, &image(1)).unwrap();
        assert_eq!(g.shape(f), (1, 8));
    }

    #[test]
    fn cast_preserves_values_and_flags() {
        let m = Model::<f32>::new(spec(), HeadKind::cosine(), 8, FineTunePolicy::Mask { alpha: 0.2, seed: 4 }, 4).unwrap();
        let back = m.cast::<f64>().cast::<f32>();
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.value.data(), b.value.data());
            assert_eq!(a.trainable, b.trainable);
        }
        assert!(m.store.iter().any(|(_, p)| matches!(p.trainable, Trainable::Masked(_))));
    }

    #[test]
    fn backbone_transfer_checks_shapes() {
        let src = Model::<f32>::new(spec(), HeadKind::Linear, 4, FineTunePolicy::Full, 5).unwrap();
        let mut dst = Model::<f32>::new(spec(), HeadKind::cosine(), 8, FineTunePolicy::adaptformer(), 6).unwrap();
        dst.load_backbone_from(&src.store).unwrap();
        assert_eq!(dst.feature(&image(2)).unwrap(), src.feature(&image(2)).unwrap());
        let other = BackboneSpec::new(2, 4, 2, 2, 4, 3).unwrap();
        let wrong = Model::<f32>::new(other, HeadKind::Linear, 4, FineTunePolicy::Full, 5).unwrap();
        assert!(matches!(dst.load_backbone_from(&wrong.store), Err(Error::Integrity(_))));
    }
}
