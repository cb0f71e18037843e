//! "LFCK" checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LFCK" | version u16
//! spec: layers, dim, heads, patch, image_side, channels  (u32 each)
//! policy: u16 length + UTF-8 (the policy's text form)
//! head flag u8; if 1: kind tag u8 (0 linear, 1 l2, 2 cosine), sigma f64, classes u32
//! epoch u32 | step u64 | seed u64
//! parameters: count u32, then per array
//!     name (u16 length + UTF-8) | rank u8 | dims u32… | f32 values
//! momentum: same array table
//! crc32 of every preceding byte, u32
//! ```
//!
//! A backbone-only checkpoint has head flag 0 and carries only backbone
//! arrays. Decoding parses the whole file and checks every array against
//! the shapes implied by the declared spec before returning anything.

use std::collections::HashMap;
use std::path::Path;

use crate::backbone::{Backbone, BackboneSpec};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::head::HeadKind;
use crate::model::Model;
use crate::numerics::ParamStore;
use crate::peft::FineTunePolicy;
use crate::seed::rng_for;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadInfo {
    pub kind: HeadKind,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: BackboneSpec,
    pub policy: FineTunePolicy,
    /// `None` for a backbone-only checkpoint.
    pub head: Option<HeadInfo>,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub arrays: Vec<NamedArray>,
    /// Optimizer velocity, one array per trainable parameter.
    pub momentum: Vec<NamedArray>,
}

fn arrays_of(store: &ParamStore<f32>, keep: impl Fn(&str) -> bool) -> Vec<NamedArray> {
    store
        .iter()
        .filter(|(_, p)| keep(&p.name))
        .map(|(_, p)| NamedArray { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, epoch: usize, step: u64, seed: u64, momentum: Vec<NamedArray>) -> Self {
        Self {
            spec: *model.spec(),
            policy: model.policy,
            head: Some(HeadInfo { kind: model.head.kind, classes: model.classes() }),
            epoch,
            step,
            seed,
            arrays: arrays_of(&model.store, |_| true),
            momentum,
        }
    }

    /// Backbone parameters only, for use as a fine-tuning foundation.
    pub fn backbone_only(model: &Model<f32>, epoch: usize, step: u64, seed: u64) -> Self {
        let names: Vec<String> =
            model.backbone.param_ids().into_iter().map(|id| model.store.get(id).name.clone()).collect();
        Self {
            spec: *model.spec(),
            policy: FineTunePolicy::Full,
            head: None,
            epoch,
            step,
            seed,
            arrays: arrays_of(&model.store, |n| names.iter().any(|m| m == n)),
            momentum: Vec::new(),
        }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Parameter shapes implied by the header, in store order.
    fn expected_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let store = match self.head {
            Some(h) => Model::<f32>::new(self.spec, h.kind, h.classes, self.policy, self.seed)?.store,
            None => {
                let mut store = ParamStore::<f32>::new();
                Backbone::init(&mut store, self.spec, &mut rng_for(0, &[]))?;
                store
            }
        };
        Ok(store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect())
    }

    fn check_shapes(&self) -> Result<()> {
        let expected = self.expected_shapes()?;
        let index: HashMap<&str, &Vec<usize>> = expected.iter().map(|(n, s)| (n.as_str(), s)).collect();
        for table in [&self.arrays, &self.momentum] {
            for a in table.iter() {
                match index.get(a.name.as_str()) {
                    None => return Err(Error::integrity(format!("array {} is not part of the declared model", a.name))),
                    Some(s) if **s != a.shape => {
                        return Err(Error::integrity(format!(
                            "array {} has shape {:?}, the declared spec implies {:?}",
                            a.name, a.shape, s
                        )))
                    }
                    _ => {}
                }
            }
        }
        if let Some((name, _)) = expected.iter().find(|(n, _)| self.array(n).is_none()) {
            return Err(Error::integrity(format!("array {name} is missing")));
        }
        Ok(())
    }

    /// Copies the stored arrays into `model` after checking all of them.
    pub fn apply_to(&self, model: &mut Model<f32>) -> Result<()> {
        let mut targets = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let id = model
                .store
                .id(&a.name)
                .ok_or_else(|| Error::integrity(format!("array {} has no counterpart in the model", a.name)))?;
            let have = model.store.value(id).shape();
            if have != a.shape.as_slice() {
                return Err(Error::integrity(format!(
                    "array {} has shape {:?}, the model expects {:?}",
                    a.name, a.shape, have
                )));
            }
            targets.push(id);
        }
        if self.head.is_some() {
            if let Some((_, p)) = model.store.iter().find(|(_, p)| self.array(&p.name).is_none()) {
                return Err(Error::integrity(format!("checkpoint lacks array {}", p.name)));
            }
        }
        for (id, a) in targets.into_iter().zip(&self.arrays) {
            model.store.get_mut(id).value.data_mut().copy_from_slice(&a.data);
        }
        Ok(())
    }

    /// Rebuilds the full model; fails for backbone-only checkpoints.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let h = self.head.ok_or_else(|| Error::config("backbone-only checkpoint has no head"))?;
        let mut model = Model::new(self.spec, h.kind, h.classes, self.policy, self.seed)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        let s = &self.spec;
        for v in [s.layers, s.dim, s.heads, s.patch, s.image_side, s.channels] {
            w.usize32(v)?;
        }
        w.str16(&self.policy.to_string())?;
        match self.head {
            None => w.u8(0),
            Some(h) => {
                w.u8(1);
                let (tag, sigma) = match h.kind {
                    HeadKind::Linear => (0, 0.0),
                    HeadKind::L2Normalized => (1, 0.0),
                    HeadKind::Cosine { sigma } => (2, sigma),
                };
                w.u8(tag);
                w.f64(sigma);
                w.usize32(h.classes)?;
            }
        }
        w.usize32(self.epoch)?;
        w.u64(self.step);
        w.u64(self.seed);
        for table in [&self.arrays, &self.momentum] {
            w.usize32(table.len())?;
            for a in table.iter() {
                w.str16(&a.name)?;
                let rank = u8::try_from(a.shape.len()).map_err(|_| Error::format(format!("array {} rank too high", a.name)))?;
                w.u8(rank);
                for &d in &a.shape {
                    w.usize32(d)?;
                }
                if a.shape.iter().product::<usize>() != a.data.len() {
                    return Err(Error::shape(format!("array {} data does not match its shape", a.name)));
                }
                a.data.iter().for_each(|&v| w.f32(v));
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        if bytes.len() < 10 {
            return Err(Error::integrity("checkpoint truncated"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let mut r = Reader::new(body);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.usize32()?;
        }
        let policy_text = r.str16()?;
        let head_flag = r.u8()?;
        let head = match head_flag {
            0 => None,
            1 => {
                let tag = r.u8()?;
                let sigma = r.f64()?;
                let classes = r.usize32()?;
                let kind = match tag {
                    0 => HeadKind::Linear,
                    1 => HeadKind::L2Normalized,
                    2 => HeadKind::Cosine { sigma },
                    t => return Err(Error::integrity(format!("unknown head tag {t}"))),
                };
                Some(HeadInfo { kind, classes })
            }
            f => return Err(Error::integrity(format!("bad head flag {f}"))),
        };
        let epoch = r.usize32()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let mut tables = [Vec::new(), Vec::new()];
        for table in tables.iter_mut() {
            let n = r.usize32()?;
            for _ in 0..n {
                let name = r.str16()?;
                let rank = r.u8()? as usize;
                let shape = (0..rank).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
                let numel = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| Error::integrity(format!("array {name} is too large")))?;
                let data = r.f32s(numel).map_err(|_| Error::integrity(format!("checkpoint truncated inside array {name}")))?;
                table.push(NamedArray { name, shape, data });
            }
        }
        r.finish()?;
        if crc32fast::hash(body) != stored {
            return Err(Error::integrity("checkpoint checksum mismatch"));
        }
        let [layers, dim, heads, patch, image_side, channels] = dims;
        let spec = BackboneSpec::new(layers, dim, heads, patch, image_side, channels)
            .map_err(|e| Error::integrity(format!("invalid spec header: {e}")))?;
        let policy: FineTunePolicy =
            policy_text.parse().map_err(|e| Error::integrity(format!("invalid policy {policy_text:?}: {e}")))?;
        let [arrays, momentum] = tables;
        let ck = Checkpoint { spec, policy, head, epoch, step, seed, arrays, momentum };
        ck.check_shapes()?;
        Ok(ck)
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = ck.encode()?;
    let tmp = path.with_extension("lfck.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dim: usize) -> BackboneSpec {
        BackboneSpec::new(1, dim, 2, 2, 4, 3).unwrap()
    }

    fn model(dim: usize) -> Model<f32> {
        Model::new(spec(dim), HeadKind::cosine(), 3, FineTunePolicy::adaptformer(), 5).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = model(8);
        let mom = vec![NamedArray { name: "head.weight".into(), shape: vec![3, 8], data: (0..24).map(|i| i as f32 * 0.5).collect() }];
        let ck = Checkpoint::from_model(&m, 2, 17, 5, mom);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_model().unwrap();
        for ((_, a), (_, b)) in m.store.iter().zip(rebuilt.store.iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = Checkpoint::from_model(&model(4), 0, 0, 5, Vec::new()).encode().unwrap();
        for n in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..n]).is_err(), "prefix {n}");
        }
    }

    #[test]
    fn corruption_and_headers() {
        let bytes = Checkpoint::from_model(&model(4), 0, 0, 5, Vec::new()).encode().unwrap();
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(Checkpoint::decode(&flipped), Err(Error::Integrity(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&magic), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(Checkpoint::decode(&version), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_dim_names_the_array() {
        let ck = Checkpoint::from_model(&model(8), 0, 0, 5, Vec::new());
        let mut small = model(4);
        let before: Vec<Vec<f32>> = small.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
        match ck.apply_to(&mut small) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("embed.proj.weight"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
        let after: Vec<Vec<f32>> = small.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn header_and_arrays_must_agree() {
        let mut ck = Checkpoint::from_model(&model(8), 0, 0, 5, Vec::new());
        ck.spec = spec(4);
        match Checkpoint::decode(&ck.encode().unwrap()) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("embed.proj.weight"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn backbone_only_transfers() {
        let src = model(8);
        let ck = Checkpoint::decode(&Checkpoint::backbone_only(&src, 0, 0, 1).encode().unwrap()).unwrap();
        assert!(ck.head.is_none() && ck.array("head.weight").is_none());
        let mut dst = Model::<f32>::new(spec(8), HeadKind::Linear, 5, FineTunePolicy::Full, 9).unwrap();
        ck.apply_to(&mut dst).unwrap();
        assert_eq!(dst.feature(&crate::data::Image::zeros(4, 4, 3)).unwrap(), src.feature(&crate::data::Image::zeros(4, 4, 3)).unwrap());
        assert!(ck.to_model().is_err());
    }
}
