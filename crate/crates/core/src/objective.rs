//! Class priors, the logit-adjusted loss and its ζ-generalization, and a
//! two-class Gaussian simulator for the distribution-shift bias.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ClassPrior {
    pub fn uniform(classes: usize) -> Self {
        Self { counts: vec![1; classes], probs: vec![1.0 / classes as f64; classes] }
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    pub fn log_prior(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }
}

pub fn estimate_prior(counts: &[usize]) -> Result<ClassPrior> {
    if counts.is_empty() {
        return Err(Error::domain("no class counts given"));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::domain(format!("class {k} has zero training samples")));
    }
    let total: usize = counts.iter().sum();
    Ok(ClassPrior {
        counts: counts.to_vec(),
        probs: counts.iter().map(|&n| n as f64 / total as f64).collect(),
    })
}

/// Per-class density ratio `ζ(k) = P_s(φ|y=k) / P_t(φ|y=k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZetaProfile(Vec<f64>);

impl ZetaProfile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::domain(format!("zeta entries must be positive, got {v}")));
        }
        Ok(Self(values))
    }

    pub fn ones(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn adjusted_loss(logits: &[f64], label: usize, offsets: impl Iterator<Item = f64>) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::domain(format!("label {label} out of range for {} classes", logits.len())));
    }
    let shifted: Vec<f64> = logits.iter().zip(offsets).map(|(z, o)| z + o).collect();
    if shifted.len() != logits.len() {
        return Err(Error::shape("offset count differs from logit count"));
    }
    Ok(-log_softmax(&shifted)?[label])
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    adjusted_loss(logits, label, std::iter::repeat(0.0))
}

/// `−log softmax(z + log π)_j`.
pub fn la_loss(logits: &[f64], label: usize, prior: &ClassPrior) -> Result<f64> {
    generalized_la_loss(logits, label, prior, &ZetaProfile::ones(prior.classes()))
}

/// `−log softmax(z + log π + log ζ)_j`.
pub fn generalized_la_loss(logits: &[f64], label: usize, prior: &ClassPrior, zeta: &ZetaProfile) -> Result<f64> {
    if prior.classes() != logits.len() || zeta.0.len() != logits.len() {
        return Err(Error::shape(format!(
            "{} logits with {} priors and {} zeta entries",
            logits.len(),
            prior.classes(),
            zeta.0.len()
        )));
    }
    adjusted_loss(logits, label, prior.probs.iter().zip(&zeta.0).map(|(p, z)| p.ln() + z.ln()))
}

/// `softmax(z + log π) − onehot(j)`.
pub fn la_loss_grad(logits: &[f64], label: usize, prior: &ClassPrior) -> Result<Vec<f64>> {
    let shifted: Vec<f64> = logits.iter().zip(&prior.probs).map(|(z, p)| z + p.ln()).collect();
    let mut g = softmax(&shifted)?;
    g[label] -= 1.0;
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(Error::domain(format!("invalid Gaussian N({mean}, {std}²)")));
        }
        Ok(Self { mean, std })
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 1.0;
        }
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        0.5 * erfc(-(x - self.mean) / (self.std * std::f64::consts::SQRT_2))
    }
}

/// Two-class, one-dimensional source/target setup.
#[derive(Clone, Debug, PartialEq)]
pub struct Prop1Input {
    pub source: [Gaussian; 2],
    pub target: [Gaussian; 2],
    /// Source training prior; the class with the smaller prior is the tail.
    pub prior: [f64; 2],
}

impl Prop1Input {
    pub fn new(source: [(f64, f64); 2], target: [(f64, f64); 2], prior: [f64; 2]) -> Result<Self> {
        if prior.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::domain("class priors must be positive"));
        }
        let s = prior[0] + prior[1];
        Ok(Self {
            source: [Gaussian::new(source[0].0, source[0].1)?, Gaussian::new(source[1].0, source[1].1)?],
            target: [Gaussian::new(target[0].0, target[0].1)?, Gaussian::new(target[1].0, target[1].1)?],
            prior: [prior[0] / s, prior[1] / s],
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            source: [self.source[1], self.source[0]],
            target: [self.target[1], self.target[0]],
            prior: [self.prior[1], self.prior[0]],
        }
    }

    pub fn tail(&self) -> usize {
        usize::from(self.prior[1] <= self.prior[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prop1Report {
    pub bayes_threshold: f64,
    pub source_threshold: f64,
    /// `(source − bayes) · sign(μ₁ − μ₀)`: positive moves the boundary into class 1.
    pub threshold_shift: f64,
    /// The same shift oriented towards the tail class.
    pub shift_against_tail: f64,
    pub tail_class: usize,
    pub bayes_recall: [f64; 2],
    pub source_recall: [f64; 2],
    pub tail_recall_drop: f64,
    pub quadrature_bayes_threshold: f64,
    pub quadrature_source_threshold: f64,
    pub quadrature_source_recall: [f64; 2],
    /// Largest disagreement between closed form and quadrature.
    pub crosscheck_error: f64,
}

impl Prop1Report {
    pub fn to_records(&self) -> Vec<(String, String)> {
        let mut r = vec![
            ("bayes_threshold".to_string(), format!("{}", self.bayes_threshold)),
            ("source_threshold".to_string(), format!("{}", self.source_threshold)),
            ("threshold_shift".to_string(), format!("{}", self.threshold_shift)),
            ("shift_against_tail".to_string(), format!("{}", self.shift_against_tail)),
            ("tail_class".to_string(), self.tail_class.to_string()),
        ];
        for k in 0..2 {
            r.push((format!("bayes_recall.{k}"), format!("{}", self.bayes_recall[k])));
            r.push((format!("source_recall.{k}"), format!("{}", self.source_recall[k])));
        }
        r.push(("tail_recall_drop".to_string(), format!("{}", self.tail_recall_drop)));
        r.push(("crosscheck_error".to_string(), format!("{:e}", self.crosscheck_error)));
        r
    }
}

/// `log p(x|1) − log p(x|0)` as `a x² + b x + c`.
fn log_ratio_coefficients(c0: &Gaussian, c1: &Gaussian) -> (f64, f64, f64) {
    let (v0, v1) = (c0.std * c0.std, c1.std * c1.std);
    let a = 0.5 / v0 - 0.5 / v1;
    let b = c1.mean / v1 - c0.mean / v0;
    let c = c0.mean * c0.mean / (2.0 * v0) - c1.mean * c1.mean / (2.0 * v1) + (c0.std / c1.std).ln();
    (a, b, c)
}

/// Closed-form decision boundary for "predict class 1 iff p(x|1) > p(x|0)":
/// the class-1 region as a union of intervals plus the boundary nearest the
/// midpoint of the means.
fn decision_rule(c0: &Gaussian, c1: &Gaussian) -> Result<(Vec<(f64, f64)>, f64)> {
    let (a, b, c) = log_ratio_coefficients(c0, c1);
    let mid = 0.5 * (c0.mean + c1.mean);
    let scale = 1.0 / (c0.std * c0.std) + 1.0 / (c1.std * c1.std);
    if a.abs() <= 1e-14 * scale {
        if b == 0.0 {
            return Err(Error::domain("class conditionals coincide; no decision boundary"));
        }
        let t = -c / b;
        let region = if b > 0.0 { vec![(t, f64::INFINITY)] } else { vec![(f64::NEG_INFINITY, t)] };
        return Ok((region, t));
    }
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return Err(Error::domain("one class dominates everywhere; no decision boundary"));
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (mut r1, mut r2) = (q / a, c / q);
    if r1 > r2 {
        std::mem::swap(&mut r1, &mut r2);
    }
    let region = if a > 0.0 {
        vec![(f64::NEG_INFINITY, r1), (r2, f64::INFINITY)]
    } else {
        vec![(r1, r2)]
    };
    let t = if (r1 - mid).abs() <= (r2 - mid).abs() { r1 } else { r2 };
    Ok((region, t))
}

fn mass(region: &[(f64, f64)], g: &Gaussian) -> f64 {
    region.iter().map(|&(lo, hi)| g.cdf(hi) - g.cdf(lo)).sum()
}

fn recalls(region: &[(f64, f64)], target: &[Gaussian; 2]) -> [f64; 2] {
    [1.0 - mass(region, &target[0]), mass(region, &target[1])]
}

const QUAD_POINTS: usize = 20_000;

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h)).sum();
    h * (0.5 * (f(lo) + f(hi)) + inner)
}

/// Sign changes of the log density ratio on a grid, refined by bisection.
fn numeric_boundaries(c0: &Gaussian, c1: &Gaussian, lo: f64, hi: f64) -> Vec<f64> {
    let d = |x: f64| c1.log_pdf(x) - c0.log_pdf(x);
    let n = QUAD_POINTS;
    let h = (hi - lo) / n as f64;
    let mut roots = Vec::new();
    for i in 0..n {
        let (mut a, mut b) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
        let (mut fa, fb) = (d(a), d(b));
        if fa == 0.0 {
            roots.push(a);
            continue;
        }
        if fa.signum() == fb.signum() {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            let fm = d(m);
            if fm.signum() == fa.signum() {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
            if b - a <= 1e-15 * (1.0 + m.abs()) {
                break;
            }
        }
        roots.push(0.5 * (a + b));
    }
    roots
}

fn quadrature_recall(region: &[(f64, f64)], target: &[Gaussian; 2], lo: f64, hi: f64) -> [f64; 2] {
    let inside = |g: &Gaussian| -> f64 {
        region
            .iter()
            .map(|&(a, b)| {
                let (a, b) = (a.max(lo), b.min(hi));
                if b > a {
                    trapezoid(|x| g.pdf(x), a, b, QUAD_POINTS)
                } else {
                    0.0
                }
            })
            .sum()
    };
    let total0 = trapezoid(|x| target[0].pdf(x), lo, hi, QUAD_POINTS);
    [total0 - inside(&target[0]), inside(&target[1])]
}

fn nearest(roots: &[f64], x: f64) -> f64 {
    roots.iter().copied().fold(f64::NAN, |best, r| if best.is_nan() || (r - x).abs() < (best - x).abs() { r } else { best })
}

/// Compares the Bayes rule under the target conditionals (uniform target
/// prior) with the rule a logit-adjusted model learns from the source
/// conditionals while assuming they equal the target ones.
pub fn prop1_simulate(input: &Prop1Input) -> Result<Prop1Report> {
    let [s0, s1] = input.source;
    let [t0, t1] = input.target;
    let (bayes_region, bayes_t) = decision_rule(&t0, &t1)?;
    let (src_region, src_t) = decision_rule(&s0, &s1)?;
    let bayes_recall = recalls(&bayes_region, &input.target);
    let source_recall = recalls(&src_region, &input.target);
    let toward1 = if t1.mean >= t0.mean { 1.0 } else { -1.0 };
    let shift = (src_t - bayes_t) * toward1;
    let tail = input.tail();
    let shift_against_tail = if tail == 1 { shift } else { -shift };

    let all = [s0, s1, t0, t1];
    let lo = all.iter().map(|g| g.mean - 12.0 * g.std).fold(f64::INFINITY, f64::min);
    let hi = all.iter().map(|g| g.mean + 12.0 * g.std).fold(f64::NEG_INFINITY, f64::max);
    let mid = 0.5 * (t0.mean + t1.mean);
    let q_bayes = nearest(&numeric_boundaries(&t0, &t1, lo, hi), mid);
    let q_src = nearest(&numeric_boundaries(&s0, &s1, lo, hi), 0.5 * (s0.mean + s1.mean));
    let q_recall = quadrature_recall(&src_region, &input.target, lo, hi);
    let crosscheck = [
        (q_bayes - bayes_t).abs(),
        (q_src - src_t).abs(),
        (q_recall[0] - source_recall[0]).abs(),
        (q_recall[1] - source_recall[1]).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    Ok(Prop1Report {
        bayes_threshold: bayes_t,
        source_threshold: src_t,
        threshold_shift: shift,
        shift_against_tail,
        tail_class: tail,
        bayes_recall,
        source_recall,
        tail_recall_drop: bayes_recall[tail] - source_recall[tail],
        quadrature_bayes_threshold: q_bayes,
        quadrature_source_threshold: q_src,
        quadrature_source_recall: q_recall,
        crosscheck_error: if crosscheck.is_nan() { f64::INFINITY } else { crosscheck },
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn prior_examples() {
        assert_eq!(estimate_prior(&[3, 1]).unwrap().probs, vec![0.75, 0.25]);
        assert_eq!(estimate_prior(&[4, 4]).unwrap().probs, vec![0.5, 0.5]);
        let p = estimate_prior(&[500, 50, 5]).unwrap();
        assert_eq!(p.probs, vec![500.0 / 555.0, 50.0 / 555.0, 5.0 / 555.0]);
        assert!(matches!(estimate_prior(&[3, 0]), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_examples() {
        let u = ClassPrior::uniform(2);
        assert!((la_loss(&[0.0, 0.0], 0, &u).unwrap() - 2f64.ln()).abs() < 1e-15);
        let skew = ClassPrior { counts: vec![9, 1], probs: vec![0.9, 0.1] };
        assert!((la_loss(&[0.0, 0.0], 1, &skew).unwrap() - 10f64.ln()).abs() < 1e-12);
        let z = ZetaProfile::new(vec![1.0, 0.5]).unwrap();
        assert!((generalized_la_loss(&[0.0, 0.0], 1, &u, &z).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(ZetaProfile::new(vec![1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn consistency_case_has_no_bias() {
        let inp = Prop1Input::new([(0.0, 1.0), (2.0, 1.0)], [(0.0, 1.0), (2.0, 1.0)], [0.9, 0.1]).unwrap();
        let r = prop1_simulate(&inp).unwrap();
        assert_eq!(r.threshold_shift, 0.0);
        assert_eq!(r.tail_recall_drop, 0.0);
        assert!((r.bayes_threshold - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shrunk_tail_biases_against_it() {
        let inp = Prop1Input::new([(0.0, 1.0), (2.0, 0.5)], [(0.0, 1.0), (2.0, 1.0)], [0.9, 0.1]).unwrap();
        let r = prop1_simulate(&inp).unwrap();
        assert_eq!(r.tail_class, 1);
        assert!(r.shift_against_tail > 0.0);
        assert!(r.source_recall[1] < r.bayes_recall[1]);
        assert!(r.crosscheck_error < 1e-6, "{}", r.crosscheck_error);
        let m = prop1_simulate(&inp.swapped()).unwrap();
        assert!((m.threshold_shift + r.threshold_shift).abs() < 1e-12);
        assert!((m.shift_against_tail - r.shift_against_tail).abs() < 1e-12);
        assert!((m.tail_recall_drop - r.tail_recall_drop).abs() < 1e-12);
    }

    #[test]
    fn invalid_sigma() {
        assert!(matches!(Prop1Input::new([(0.0, 0.0), (1.0, 1.0)], [(0.0, 1.0), (1.0, 1.0)], [0.5, 0.5]), Err(Error::Domain(_))));
    }

    fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, usize, Vec<usize>)> {
        (2usize..8).prop_flat_map(|k| {
            (prop::collection::vec(-8.0..8.0f64, k), 0..k, prop::collection::vec(1usize..500, k))
        })
    }

    proptest! {
        #[test]
        fn uniform_prior_is_cross_entropy((z, y, _) in logits_strategy()) {
            let k = z.len();
            let a = la_loss(&z, y, &ClassPrior::uniform(k)).unwrap();
            prop_assert!((a - cross_entropy(&z, y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn losses_shift_invariant((z, y, counts) in logits_strategy(), c in -50.0..50.0f64) {
            let p = estimate_prior(&counts).unwrap();
            let zc: Vec<f64> = z.iter().map(|v| v + c).collect();
            prop_assert!((la_loss(&z, y, &p).unwrap() - la_loss(&zc, y, &p).unwrap()).abs() < 1e-9);
            let zeta = ZetaProfile::new(counts.iter().map(|&n| n as f64 / 100.0).collect()).unwrap();
            let a = generalized_la_loss(&z, y, &p, &zeta).unwrap();
            prop_assert!((a - generalized_la_loss(&zc, y, &p, &zeta).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn unit_zeta_is_bitwise_la((z, y, counts) in logits_strategy()) {
            let p = estimate_prior(&counts).unwrap();
            let a = generalized_la_loss(&z, y, &p, &ZetaProfile::ones(z.len())).unwrap();
            prop_assert_eq!(a.to_bits(), la_loss(&z, y, &p).unwrap().to_bits());
        }

        #[test]
        fn shrinking_own_zeta_raises_loss((z, y, counts) in logits_strategy(), f in 0.01..0.99f64) {
            let p = estimate_prior(&counts).unwrap();
            let mut v = vec![1.0; z.len()];
            v[y] = f;
            let g = generalized_la_loss(&z, y, &p, &ZetaProfile::new(v).unwrap()).unwrap();
            prop_assert!(g > la_loss(&z, y, &p).unwrap());
        }
    }
}
