//! Classification heads and their initializers.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::xavier;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, l2_norm, softmax, Graph, ParamId, ParamStore, Scalar, Tensor, Var, NORM_FLOOR};
use crate::objective::ClassPrior;

pub const DEFAULT_SIGMA: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadKind {
    Linear,
    L2Normalized,
    Cosine { sigma: f64 },
}

impl HeadKind {
    pub fn cosine() -> Self {
        Self::Cosine { sigma: DEFAULT_SIGMA }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Cosine { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::domain(format!("cosine scale {sigma} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear => f.write_str("linear"),
            Self::L2Normalized => f.write_str("l2"),
            Self::Cosine { sigma } => write!(f, "cosine:{sigma}"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.trim().split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.trim(), None),
        };
        let kind = match (name, arg) {
            ("linear", None) => Self::Linear,
            ("l2" | "l2_normalized", None) => Self::L2Normalized,
            ("cosine", None) => Self::cosine(),
            ("cosine", Some(a)) => Self::Cosine {
                sigma: a.parse().map_err(|_| Error::config(format!("invalid cosine scale {a:?}")))?,
            },
            _ => return Err(Error::config(format!("unknown head kind {s:?}"))),
        };
        kind.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(kind)
    }
}

/// Classifier parameters `W ∈ R^{K×d}` (plus `b ∈ R^K` for the linear head).
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub classes: usize,
    pub dim: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Head {
    /// Randomly initialized head; the `init_*` routines give better starting rows.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        kind: HeadKind,
        classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        kind.validate()?;
        if classes < 2 {
            return Err(Error::domain(format!("a head needs at least 2 classes, got {classes}")));
        }
        let weight = store.insert("head.weight", xavier(classes, dim, rng))?;
        let bias = match kind {
            HeadKind::Linear => Some(store.insert("head.bias", Tensor::zeros(vec![1, classes]))?),
            _ => None,
        };
        Ok(Self { kind, classes, dim, weight, bias })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bias);
        ids
    }

    /// Logits for each row of `features` (`n × d` → `n × K`).
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let w = g.param(self.weight);
        match self.kind {
            HeadKind::Linear => {
                let z = g.matmul_bt(features, w)?;
                let b = g.param(self.bias.expect("linear head has a bias"));
                g.add_row(z, b)
            }
            HeadKind::L2Normalized => {
                let wn = g.normalize_rows(w);
                g.matmul_bt(features, wn)
            }
            HeadKind::Cosine { sigma } => {
                let f = g.normalize_rows(features);
                let wn = g.normalize_rows(w);
                let z = g.matmul_bt(f, wn)?;
                Ok(g.scale(z, T::of(sigma)))
            }
        }
    }

    pub fn set_weights<T: Scalar>(&self, store: &mut ParamStore<T>, w: &[f64]) -> Result<()> {
        if w.len() != self.classes * self.dim {
            return Err(Error::shape(format!(
                "{} weights for a {}x{} head",
                w.len(),
                self.classes,
                self.dim
            )));
        }
        for (dst, &src) in store.get_mut(self.weight).value.data_mut().iter_mut().zip(w) {
            *dst = T::of(src);
        }
        Ok(())
    }
}

/// Direct evaluation of a head on one feature.
pub fn classify(feature: &[f64], kind: HeadKind, weight: &[f64], bias: Option<&[f64]>) -> Result<Vec<f64>> {
    let d = feature.len();
    if d == 0 || weight.len() % d != 0 {
        return Err(Error::shape(format!("{} weights for feature dim {d}", weight.len())));
    }
    let rows = weight.chunks(d);
    let guard = |v: &[f64], what: &str| {
        if l2_norm(v) < NORM_FLOOR {
            Err(Error::numeric(format!("zero-norm {what} under a normalized head")))
        } else {
            Ok(())
        }
    };
    match kind {
        HeadKind::Linear => {
            let k = weight.len() / d;
            let b = bias.unwrap_or(&[]);
            if !b.is_empty() && b.len() != k {
                return Err(Error::shape(format!("{} biases for {k} classes", b.len())));
            }
            Ok(rows.enumerate().map(|(j, w)| dot(feature, w) + b.get(j).copied().unwrap_or(0.0)).collect())
        }
        HeadKind::L2Normalized => rows
            .map(|w| {
                guard(w, "classifier row")?;
                Ok(dot(feature, w) / l2_norm(w))
            })
            .collect(),
        HeadKind::Cosine { sigma } => {
            guard(feature, "feature")?;
            rows.map(|w| {
                guard(w, "classifier row")?;
                Ok(sigma * cosine(feature, w))
            })
            .collect()
        }
    }
}

/// Class text prototypes `ψ(t_k) ∈ R^{d_t}` with projections
/// `P_T ∈ R^{d_t×d_s}` and `P_I ∈ R^{d×d_s}`, all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub classes: usize,
    pub text_dim: usize,
    pub shared_dim: usize,
    pub dim: usize,
    pub prototypes: Vec<f64>,
    pub text_proj: Vec<f64>,
    pub image_proj: Vec<f64>,
}

pub const PROTOTYPE_MAGIC: &[u8; 4] = b"LFTP";
pub const PROTOTYPE_VERSION: u16 = 1;

impl PrototypeSet {
    pub fn new(
        classes: usize,
        text_dim: usize,
        shared_dim: usize,
        dim: usize,
        prototypes: Vec<f64>,
        text_proj: Vec<f64>,
        image_proj: Vec<f64>,
    ) -> Result<Self> {
        let s = Self { classes, text_dim, shared_dim, dim, prototypes, text_proj, image_proj };
        s.validate()?;
        Ok(s)
    }

    /// Identity projections (`d_t = d_s = d`).
    pub fn with_identity(classes: usize, dim: usize, prototypes: Vec<f64>) -> Result<Self> {
        let eye: Vec<f64> = (0..dim * dim).map(|i| if i / dim == i % dim { 1.0 } else { 0.0 }).collect();
        Self::new(classes, dim, dim, dim, prototypes, eye.clone(), eye)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.prototypes.len() == self.classes * self.text_dim
            && self.text_proj.len() == self.text_dim * self.shared_dim
            && self.image_proj.len() == self.dim * self.shared_dim;
        if !ok {
            return Err(Error::shape(format!(
                "prototype set K={} d_t={} d_s={} d={} has inconsistent array lengths",
                self.classes, self.text_dim, self.shared_dim, self.dim
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(PROTOTYPE_MAGIC);
        w.u16(PROTOTYPE_VERSION);
        for v in [self.classes, self.text_dim, self.shared_dim, self.dim] {
            w.usize32(v)?;
        }
        for &v in self.prototypes.iter().chain(&self.text_proj).chain(&self.image_proj) {
            w.f64(v);
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(PROTOTYPE_MAGIC, PROTOTYPE_VERSION)?;
        let (k, dt, ds, d) = (r.usize32()?, r.usize32()?, r.usize32()?, r.usize32()?);
        let prototypes = r.f64s(k * dt)?;
        let text_proj = r.f64s(dt * ds)?;
        let image_proj = r.f64s(d * ds)?;
        r.finish()?;
        Self::new(k, dt, ds, d, prototypes, text_proj, image_proj)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// `w_j = ψ(t_j) · P_T · P_Iᵀ`, as a row-major `K × d` matrix.
pub fn init_semantic(protos: &PrototypeSet, classes: usize, dim: usize) -> Result<Vec<f64>> {
    if protos.classes != classes {
        return Err(Error::config(format!(
            "prototype file has {} classes, dataset has {classes}",
            protos.classes
        )));
    }
    if protos.dim != dim {
        return Err(Error::config(format!("prototype image projection has dim {}, backbone has {dim}", protos.dim)));
    }
    let (dt, ds) = (protos.text_dim, protos.shared_dim);
    let mut w = Vec::with_capacity(classes * dim);
    for psi in protos.prototypes.chunks(dt) {
        let shared: Vec<f64> = (0..ds).map(|s| (0..dt).map(|t| psi[t] * protos.text_proj[t * ds + s]).sum()).collect();
        w.extend((0..dim).map(|i| dot(&shared, &protos.image_proj[i * ds..(i + 1) * ds])));
    }
    Ok(w)
}

/// Row `j` is the L2-normalized mean of the class-`j` features.
pub fn init_class_mean(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let means = class_means(features, labels, classes)?;
    let mut w = Vec::with_capacity(classes * means[0].len());
    for m in means {
        let n = l2_norm(&m).max(NORM_FLOOR);
        w.extend(m.iter().map(|v| v / n));
    }
    Ok(w)
}

pub(crate) fn class_means(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Vec<Vec<f64>>> {
    if features.len() != labels.len() {
        return Err(Error::shape(format!("{} features for {} labels", features.len(), labels.len())));
    }
    let d = features.first().map(Vec::len).ok_or_else(|| Error::domain("no features given"))?;
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (f, &y) in features.iter().zip(labels) {
        if y >= classes || f.len() != d {
            return Err(Error::shape(format!("feature of dim {} with label {y}", f.len())));
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(f) {
            *s += v;
        }
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::domain(format!("class {k} has no features")));
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(sums)
}

/// Full-batch gradient descent on the logit-adjusted loss of a bias-free
/// linear map over frozen features, starting from `W = 0`.
pub fn init_linear_probe(features: &[Vec<f64>], labels: &[usize], prior: &ClassPrior, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let k = prior.classes();
    let d = features.first().map(Vec::len).ok_or_else(|| Error::domain("no features given"))?;
    if features.len() != labels.len() {
        return Err(Error::shape(format!("{} features for {} labels", features.len(), labels.len())));
    }
    let offsets = prior.log_prior();
    let n = features.len() as f64;
    let mut w = vec![0.0; k * d];
    for _ in 0..steps {
        let mut grad = vec![0.0; k * d];
        for (f, &y) in features.iter().zip(labels) {
            let z: Vec<f64> = (0..k).map(|j| dot(f, &w[j * d..(j + 1) * d]) + offsets[j]).collect();
            let p = softmax(&z)?;
            for j in 0..k {
                let coef = p[j] - if j == y { 1.0 } else { 0.0 };
                for (gi, fi) in grad[j * d..(j + 1) * d].iter_mut().zip(f) {
                    *gi += coef * fi / n;
                }
            }
        }
        w.iter_mut().zip(&grad).for_each(|(wi, gi)| *wi -= lr * gi);
    }
    Ok(w)
}

pub fn weight_norms(weight: &[f64], dim: usize) -> Vec<f64> {
    weight.chunks(dim).map(l2_norm).collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::objective::estimate_prior;

    fn argmax(v: &[f64]) -> usize {
        v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
    }

    #[test]
    fn cosine_examples() {
        let w = [3.0, 4.0, -4.0, 3.0];
        let k = HeadKind::cosine();
        let z = classify(&[0.6 * 2.0, 0.8 * 2.0], k, &w, None).unwrap();
        assert!((z[0] - 25.0).abs() < 1e-12 && z[1].abs() < 1e-12);
        let scaled = [30.0, 40.0, -4.0, 3.0];
        let f = [0.3, -1.7];
        assert_eq!(argmax(&classify(&f, k, &w, None).unwrap()), argmax(&classify(&f, k, &scaled, None).unwrap()));
        assert!(matches!(classify(&[0.0, 0.0], k, &w, None), Err(Error::Numeric(_))));
    }

    #[test]
    fn graph_head_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [HeadKind::Linear, HeadKind::L2Normalized, HeadKind::Cosine { sigma: 15.0 }] {
            let mut store = ParamStore::<f64>::new();
            let head = Head::init(&mut store, kind, 3, 4, &mut rng).unwrap();
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            head.set_weights(&mut store, &w).unwrap();
            if let Some(b) = head.bias {
                store.get_mut(b).value.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
            }
            let f: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = Graph::no_grad(&store);
            let fv = g.constant(1, 4, f.clone()).unwrap();
            let z = head.logits(&mut g, fv).unwrap();
            let bias = head.bias.map(|b| store.value(b).data().to_vec());
            let expect = classify(&f, kind, &w, bias.as_deref()).unwrap();
            for (a, b) in g.value(z).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_kind_strings() {
        assert_eq!("cosine".parse::<HeadKind>().unwrap(), HeadKind::Cosine { sigma: 25.0 });
        assert_eq!("cosine:15".parse::<HeadKind>().unwrap(), HeadKind::Cosine { sigma: 15.0 });
        assert_eq!("linear".parse::<HeadKind>().unwrap().to_string(), "linear");
        assert!("cosine:-1".parse::<HeadKind>().is_err());
        assert!("mlp".parse::<HeadKind>().is_err());
    }

    #[test]
    fn semantic_init_identity_and_oracle() {
        let protos = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let set = PrototypeSet::with_identity(2, 3, protos.clone()).unwrap();
        assert_eq!(init_semantic(&set, 2, 3).unwrap(), protos);
        assert!(matches!(init_semantic(&set, 3, 3), Err(Error::Config(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (k, dt, ds, d) = (3, 6, 4, 5);
        let mut r = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let set = PrototypeSet::new(k, dt, ds, d, r(k * dt), r(dt * ds), r(d * ds)).unwrap();
        let w = init_semantic(&set, k, d).unwrap();
        for j in 0..k {
            for i in 0..d {
                let mut acc = 0.0;
                for t in 0..dt {
                    for s in 0..ds {
                        acc += set.prototypes[j * dt + t] * set.text_proj[t * ds + s] * set.image_proj[i * ds + s];
                    }
                }
                assert!((w[j * d + i] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototype_file_roundtrip() {
        let set = PrototypeSet::new(2, 2, 1, 3, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -0.5], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = set.encode().unwrap();
        assert_eq!(&bytes[..4], b"LFTP");
        assert_eq!(PrototypeSet::decode(&bytes).unwrap(), set);
        assert!(matches!(PrototypeSet::decode(&bytes[..bytes.len() - 1]), Err(Error::Integrity(_))));
    }

    #[test]
    fn class_mean_examples() {
        let w = init_class_mean(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]], &[0, 0, 1], 2).unwrap();
        let s = 0.5f64.sqrt();
        assert!((w[0] - s).abs() < 1e-12 && (w[1] - s).abs() < 1e-12);
        assert_eq!(&w[2..], &[0.0, 1.0]);
        assert!(matches!(init_class_mean(&[vec![1.0]], &[0], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_probe_examples() {
        let feats = vec![vec![1.0, 0.2], vec![0.8, -0.1], vec![-1.0, 0.1], vec![-0.7, -0.3]];
        let labels = [0, 0, 1, 1];
        let prior = estimate_prior(&[2, 2]).unwrap();
        assert!(init_linear_probe(&feats, &labels, &prior, 0, 1.0).unwrap().iter().all(|&v| v == 0.0));
        let w = init_linear_probe(&feats, &labels, &prior, 500, 1.0).unwrap();
        for (f, &y) in feats.iter().zip(&labels) {
            assert_eq!(argmax(&classify(f, HeadKind::Linear, &w, None).unwrap()), y);
        }
        let sym = init_linear_probe(&[vec![1.0], vec![-1.0]], &[0, 1], &prior, 50, 0.5).unwrap();
        assert!((sym[0].abs() - sym[1].abs()).abs() < 1e-12);
    }

    #[test]
    fn norms() {
        assert_eq!(weight_norms(&[1.0, 0.0, 0.0, 1.0], 2), vec![1.0, 1.0]);
        let n = weight_norms(&[3.0, 4.0, 1.0, 1.0, 0.0, -2.0], 2);
        assert_eq!(n[0], 5.0);
        assert!((n[1] - 2f64.sqrt()).abs() < 1e-15 && n[2] == 2.0);
    }
}
