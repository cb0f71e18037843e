//! Minimalist crop-only augmentation with a scheduled scale floor, and the
//! conventional random-resized-crop baseline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::image::Image;
use crate::error::{Error, Result};

/// Maps training progress in `[0, 1]` to the fraction of the scale range
/// removed from the bottom of the crop-scale interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleFn {
    Minimal,
    Convex,
    Linear,
    Concave,
    Maximal,
}

impl ScheduleFn {
    pub const ALL: [ScheduleFn; 5] =
        [ScheduleFn::Minimal, ScheduleFn::Convex, ScheduleFn::Linear, ScheduleFn::Concave, ScheduleFn::Maximal];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            ScheduleFn::Minimal => 0.0,
            ScheduleFn::Convex => 1.0 - (1.0 - x * x).sqrt(),
            ScheduleFn::Linear => x,
            ScheduleFn::Concave => (1.0 - (1.0 - x) * (1.0 - x)).sqrt(),
            ScheduleFn::Maximal => 1.0,
        }
    }
}

impl fmt::Display for ScheduleFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScheduleFn::Minimal => "minimal",
            ScheduleFn::Convex => "convex",
            ScheduleFn::Linear => "linear",
            ScheduleFn::Concave => "concave",
            ScheduleFn::Maximal => "maximal",
        };
        f.write_str(s)
    }
}

impl FromStr for ScheduleFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimal" => Ok(ScheduleFn::Minimal),
            "convex" => Ok(ScheduleFn::Convex),
            "linear" => Ok(ScheduleFn::Linear),
            "concave" => Ok(ScheduleFn::Concave),
            "maximal" => Ok(ScheduleFn::Maximal),
            other => Err(Error::config(format!("unknown scheduling function {other:?}"))),
        }
    }
}

/// Crop-scale bounds, scheduling function and epoch budget for MDA.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugSchedule {
    pub lambda0: f64,
    pub lambda1: f64,
    pub g: ScheduleFn,
    pub epochs: usize,
}

impl AugSchedule {
    pub const DEFAULT_SCALE: (f64, f64) = (0.08, 1.0);

    pub fn new(lambda0: f64, lambda1: f64, g: ScheduleFn, epochs: usize) -> Result<Self> {
        if !(0.0 < lambda0 && lambda0 < lambda1 && lambda1 <= 1.0) {
            return Err(Error::config(format!("crop scale range ({lambda0}, {lambda1}) must satisfy 0 < l0 < l1 <= 1")));
        }
        if epochs == 0 {
            return Err(Error::config("schedule needs at least one epoch"));
        }
        Ok(Self { lambda0, lambda1, g, epochs })
    }

    pub fn with_defaults(g: ScheduleFn, epochs: usize) -> Result<Self> {
        Self::new(Self::DEFAULT_SCALE.0, Self::DEFAULT_SCALE.1, g, epochs)
    }

    /// Lower end of the scale interval sampled at epoch `t`.
    pub fn lower_bound(&self, t: usize) -> Result<f64> {
        Ok(self.lambda0 + mda_schedule_delta(t, self)?)
    }
}

/// `Δλ₀ = (λ₁ − λ₀)·g((t − 1)/(T − 1))` for 1-based epoch `t`.
///
/// With a single epoch the progress `0/0` is taken as 1.
pub fn mda_schedule_delta(t: usize, schedule: &AugSchedule) -> Result<f64> {
    let total = schedule.epochs;
    if t == 0 || t > total {
        return Err(Error::domain(format!("epoch {t} outside 1..={total}")));
    }
    let progress = if total == 1 { 1.0 } else { (t - 1) as f64 / (total - 1) as f64 };
    Ok((schedule.lambda1 - schedule.lambda0) * schedule.g.eval(progress))
}

/// Square crop window inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Side of the square crop covering `λ·h·w` pixels, clamped to the image.
pub fn square_side(h: usize, w: usize, lambda: f64) -> usize {
    let side = ((h * w) as f64 * lambda).sqrt().round() as usize;
    side.clamp(1, h.min(w))
}

/// Samples the MDA crop window for epoch `t`.
pub fn mda_window<R: Rng + ?Sized>(h: usize, w: usize, t: usize, schedule: &AugSchedule, rng: &mut R) -> Result<CropWindow> {
    let lo = schedule.lower_bound(t)?.min(schedule.lambda1);
    let lambda = if lo >= schedule.lambda1 { schedule.lambda1 } else { rng.random_range(lo..=schedule.lambda1) };
    let side = square_side(h, w, lambda);
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    Ok(CropWindow { top, left, side })
}

/// Minimalist augmentation: square crop at a scheduled scale, resized to `out × out`.
pub fn mda_crop<R: Rng + ?Sized>(
    image: &Image,
    t: usize,
    schedule: &AugSchedule,
    out: usize,
    rng: &mut R,
) -> Result<Image> {
    let win = mda_window(image.height, image.width, t, schedule, rng)?;
    Ok(image.crop(win.top, win.left, win.side, win.side)?.resize(out, out))
}

/// Parameters of the conventional random-resized-crop + flip pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RrcParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub flip_p: f64,
}

impl Default for RrcParams {
    fn default() -> Self {
        Self { scale: (0.08, 1.0), ratio: (3.0 / 4.0, 4.0 / 3.0), flip_p: 0.5 }
    }
}

fn sample<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Random-resized crop with aspect-ratio jitter, then horizontal flip.
pub fn rrc_crop<R: Rng + ?Sized>(image: &Image, params: &RrcParams, out: usize, rng: &mut R) -> Result<Image> {
    let (h, w) = (image.height, image.width);
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (params.ratio.0.ln(), params.ratio.1.ln());
    let mut window = None;
    for _ in 0..10 {
        let target = area * sample(rng, params.scale.0, params.scale.1);
        let aspect = sample(rng, log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            window = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = window.unwrap_or_else(|| {
        let in_ratio = w as f64 / h as f64;
        let (ch, cw) = if in_ratio < params.ratio.0 {
            (((w as f64) / params.ratio.0).round() as usize, w)
        } else if in_ratio > params.ratio.1 {
            (h, ((h as f64) * params.ratio.1).round() as usize)
        } else {
            (h, w)
        };
        let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    });
    let resized = image.crop(top, left, ch, cw)?.resize(out, out);
    let flip = params.flip_p > 0.0 && rng.random::<f64>() < params.flip_p;
    Ok(if flip { resized.flip_horizontal() } else { resized })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn schedule(g: ScheduleFn, epochs: usize) -> AugSchedule {
        AugSchedule::with_defaults(g, epochs).unwrap()
    }

    fn noisy(side: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Image::new(side, side, 3, (0..side * side * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn delta_at_endpoints() {
        for g in [ScheduleFn::Minimal, ScheduleFn::Convex, ScheduleFn::Linear, ScheduleFn::Concave] {
            assert_eq!(mda_schedule_delta(1, &schedule(g, 5)).unwrap(), 0.0);
        }
        for g in [ScheduleFn::Convex, ScheduleFn::Linear, ScheduleFn::Concave, ScheduleFn::Maximal] {
            let d = mda_schedule_delta(5, &schedule(g, 5)).unwrap();
            assert!((d - 0.92).abs() < 1e-12, "{g}: {d}");
        }
    }

    #[test]
    fn convex_midpoint() {
        // progress (t-1)/(T-1) = 3/5 = 0.6
        let d = mda_schedule_delta(4, &schedule(ScheduleFn::Convex, 6)).unwrap();
        assert!((d - 0.184).abs() < 1e-12, "{d}");
    }

    #[test]
    fn single_epoch_uses_g_of_one() {
        let d = mda_schedule_delta(1, &schedule(ScheduleFn::Linear, 1)).unwrap();
        assert!((d - 0.92).abs() < 1e-12);
    }

    #[test]
    fn epoch_out_of_range() {
        assert!(mda_schedule_delta(0, &schedule(ScheduleFn::Linear, 3)).is_err());
        assert!(mda_schedule_delta(4, &schedule(ScheduleFn::Linear, 3)).is_err());
    }

    #[test]
    fn bad_scale_range_is_config_error() {
        assert!(matches!(AugSchedule::new(0.5, 0.5, ScheduleFn::Linear, 3), Err(Error::Config(_))));
        assert!(AugSchedule::new(0.0, 1.0, ScheduleFn::Linear, 3).is_err());
    }

    #[test]
    fn crop_side_examples() {
        assert_eq!(square_side(224, 224, 0.25), 112);
        assert_eq!(square_side(10, 20, 1.0), 10);
    }

    #[test]
    fn final_epoch_is_full_image() {
        let img = noisy(12);
        let s = schedule(ScheduleFn::Convex, 4);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = mda_crop(&img, 4, &s, 12, &mut rng).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn rrc_identity_and_flip() {
        let img = noisy(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = RrcParams { scale: (1.0, 1.0), ratio: (1.0, 1.0), flip_p: 0.0 };
        assert_eq!(rrc_crop(&img, &p, 8, &mut rng).unwrap(), img);
        let p = RrcParams { flip_p: 1.0, ..p };
        assert_eq!(rrc_crop(&img, &p, 8, &mut rng).unwrap(), img.flip_horizontal());
    }

    #[test]
    fn rrc_is_seed_deterministic() {
        let img = noisy(16);
        let run = |seed| rrc_crop(&img, &RrcParams::default(), 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(11), run(11));
    }

    proptest::proptest! {
        #[test]
        fn lower_bound_monotone(epochs in 2usize..40, g in 0usize..5) {
            let s = schedule(ScheduleFn::ALL[g], epochs);
            let mut prev = f64::NEG_INFINITY;
            for t in 1..=epochs {
                let lb = s.lower_bound(t).unwrap();
                proptest::prop_assert!(lb >= prev);
                prev = lb;
            }
        }

        #[test]
        fn mda_window_is_square_and_inside(h in 4usize..40, w in 4usize..40, t in 1usize..6, seed in 0u64..1000) {
            let s = schedule(ScheduleFn::Convex, 5);
            let win = mda_window(h, w, t, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            proptest::prop_assert!(win.top + win.side <= h && win.left + win.side <= w);
        }
    }
}
