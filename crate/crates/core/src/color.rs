//! HSV conversion, the three chromatic perturbation operators, and the
//! foreground/background contrast vector.
//!
//! Every operator clamps its output to [0, 1].

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

static CLAMP_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Number of out-of-range channel values clamped by [`rgb_to_hsv`] so far.
pub fn clamp_warning_count() -> usize {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

pub const SCALE_MIN: f64 = 0.5;
pub const SCALE_MAX: f64 = 1.5;

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Hexcone HSV with all components in [0, 1); achromatic pixels get H = 0.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let mut c = rgb;
    for v in &mut c {
        if !(0.0..=1.0).contains(v) {
            CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
            *v = clamp01(*v);
        }
    }
    let [r, g, b] = c;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h.rem_euclid(1.0), s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let s = clamp01(s);
    let v = clamp01(v);
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-pixel HSV channels of an image, stored in the same interleaved layout.
pub fn image_to_hsv(x: &Image) -> Image {
    x.map_pixels(rgb_to_hsv)
}

pub fn image_from_hsv(hsv: &Image) -> Image {
    hsv.map_pixels(|p| hsv_to_rgb(p).map(clamp01))
}

/// Rotates every hue by `delta` (cyclic units, reduced mod 1).
pub fn hue_shift(x: &Image, delta: f64) -> Image {
    x.map_pixels(|p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([(h + delta).rem_euclid(1.0), s, v]).map(clamp01)
    })
}

/// Multiplies saturation by `factor`, clamped to [0, 1].
pub fn saturation_scale(x: &Image, factor: f64) -> Image {
    x.map_pixels(|p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([h, clamp01(s * factor), v]).map(clamp01)
    })
}

/// `x'_c = clamp(α_c · x_c)` with every `α_c` in [0.5, 1.5].
pub fn channel_rescale(x: &Image, alpha: [f64; 3]) -> Result<Image> {
    check_scales(alpha)?;
    Ok(scale_channels_unchecked(x, alpha))
}

pub(crate) fn scale_channels_unchecked(x: &Image, alpha: [f64; 3]) -> Image {
    x.map_pixels(|p| [0, 1, 2].map(|c| clamp01(alpha[c] * p[c])))
}

fn check_scales(alpha: [f64; 3]) -> Result<()> {
    if let Some(a) = alpha.iter().find(|a| !(SCALE_MIN..=SCALE_MAX).contains(*a)) {
        return Err(Error::invalid(format!(
            "channel scale {a} outside [{SCALE_MIN}, {SCALE_MAX}]"
        )));
    }
    Ok(())
}

/// `x' = clamp(γ(x − μ) + μ + β)` where μ is the mean over all pixels and
/// channels.
pub fn contrast_jitter(x: &Image, gamma: f64, beta: f64) -> Result<Image> {
    if !(gamma > 0.0) || !gamma.is_finite() || !beta.is_finite() {
        return Err(Error::invalid(format!(
            "contrast factor must be positive and finite, got gamma={gamma} beta={beta}"
        )));
    }
    let mu = x.data().iter().sum::<f64>() / x.data().len() as f64;
    Ok(x.map_pixels(|p| p.map(|v| clamp01(gamma * (v - mu) + mu + beta))))
}

/// The three perturbation operators, used to fix the composition order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Hue,
    Rescale,
    Jitter,
}

pub const DEFAULT_ORDER: [Operator; 3] = [Operator::Hue, Operator::Rescale, Operator::Jitter];

/// `(δ, α_RGB, γ, β)`: hue shift, channel scales, contrast and brightness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationParams {
    pub hue: f64,
    pub scale: [f64; 3],
    pub contrast: f64,
    pub brightness: f64,
}

impl Default for PerturbationParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl PerturbationParams {
    pub const IDENTITY: PerturbationParams = PerturbationParams {
        hue: 0.0,
        scale: [1.0; 3],
        contrast: 1.0,
        brightness: 0.0,
    };

    pub fn hue(delta: f64) -> Self {
        Self {
            hue: delta,
            ..Self::IDENTITY
        }
    }

    pub fn rescale(scale: [f64; 3]) -> Self {
        Self {
            scale,
            ..Self::IDENTITY
        }
    }

    pub fn jitter(contrast: f64, brightness: f64) -> Self {
        Self {
            contrast,
            brightness,
            ..Self::IDENTITY
        }
    }

    pub fn is_identity(&self) -> bool {
        self.hue_is_identity() && self.rescale_is_identity() && self.jitter_is_identity()
    }

    fn hue_is_identity(&self) -> bool {
        self.hue.rem_euclid(1.0) == 0.0
    }

    fn rescale_is_identity(&self) -> bool {
        self.scale == [1.0; 3]
    }

    fn jitter_is_identity(&self) -> bool {
        self.contrast == 1.0 && self.brightness == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !self.hue.is_finite() {
            return Err(Error::invalid("hue shift must be finite"));
        }
        check_scales(self.scale)?;
        if !(self.contrast > 0.0) || !self.contrast.is_finite() || !self.brightness.is_finite() {
            return Err(Error::invalid("contrast must be positive and brightness finite"));
        }
        Ok(())
    }

    /// Applies hue shift, channel rescaling and contrast jitter in that order.
    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.apply_ordered(x, DEFAULT_ORDER)
    }

    /// Applies the operators in `order`. Operators whose parameters are the
    /// identity are skipped, so they leave the image bit-identical.
    pub fn apply_ordered(&self, x: &Image, order: [Operator; 3]) -> Result<Image> {
        self.validate()?;
        let mut out = x.clone();
        for op in order {
            out = match op {
                Operator::Hue if !self.hue_is_identity() => hue_shift(&out, self.hue),
                Operator::Rescale if !self.rescale_is_identity() => {
                    scale_channels_unchecked(&out, self.scale)
                }
                Operator::Jitter if !self.jitter_is_identity() => {
                    contrast_jitter(&out, self.contrast, self.brightness)?
                }
                _ => out,
            };
        }
        Ok(out)
    }
}

/// Per-channel `|μ_fg − μ_bg|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastVector(pub [f64; 3]);

impl ContrastVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Absolute per-channel difference between the mean foreground colour and
/// the mean background colour. `fg_mask` is row-major, one entry per pixel.
pub fn fg_bg_contrast(x: &Image, fg_mask: &[bool]) -> Result<ContrastVector> {
    if fg_mask.len() != x.pixel_count() {
        return Err(Error::ShapeMismatch {
            context: "foreground mask",
            expected: vec![x.height(), x.width()],
            actual: vec![fg_mask.len()],
        });
    }
    let mut sums = [[0.0f64; 3]; 2];
    let mut counts = [0usize; 2];
    for (p, &fg) in x.pixels().zip(fg_mask) {
        let region = usize::from(!fg);
        counts[region] += 1;
        for c in 0..3 {
            sums[region][c] += p[c];
        }
    }
    if counts[0] == 0 {
        return Err(Error::Empty("foreground region"));
    }
    if counts[1] == 0 {
        return Err(Error::Empty("background region"));
    }
    Ok(ContrastVector([0, 1, 2].map(|c| {
        (sums[0][c] / counts[0] as f64 - sums[1][c] / counts[1] as f64).abs()
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn px(rgb: [f64; 3]) -> Image {
        Image::filled(1, 1, rgb)
    }

    #[test]
    fn hsv_of_primaries_and_gray() {
        assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0]);
        assert_eq!(rgb_to_hsv([0.5, 0.5, 0.5]), [0.0, 0.0, 0.5]);
        assert!(close(rgb_to_hsv([0.0, 1.0, 0.0]), [1.0 / 3.0, 1.0, 1.0], 1e-15));
        assert!(close(rgb_to_hsv([0.0, 0.0, 1.0]), [2.0 / 3.0, 1.0, 1.0], 1e-15));
    }

    #[test]
    fn out_of_range_channels_are_clamped_and_counted() {
        let before = clamp_warning_count();
        assert_eq!(rgb_to_hsv([1.5, -0.2, 0.0]), [0.0, 1.0, 1.0]);
        assert!(clamp_warning_count() >= before + 2);
    }

    #[test]
    fn hue_rotation_on_primaries() {
        let red = px([1.0, 0.0, 0.0]);
        assert!(close(hue_shift(&red, 1.0 / 3.0).pixel(0, 0), [0.0, 1.0, 0.0], 1e-12));
        assert!(close(hue_shift(&red, 0.5).pixel(0, 0), [0.0, 1.0, 1.0], 1e-12));
        assert!(close(hue_shift(&red, -2.0 / 3.0).pixel(0, 0), [0.0, 1.0, 0.0], 1e-12));
    }

    #[test]
    fn channel_rescale_examples() {
        let x = px([0.8, 0.4, 0.2]);
        assert_eq!(channel_rescale(&x, [1.0; 3]).unwrap(), x);
        assert!(close(
            channel_rescale(&x, [0.5, 1.0, 1.0]).unwrap().pixel(0, 0),
            [0.4, 0.4, 0.2],
            1e-15
        ));
        let x = px([0.8; 3]);
        assert_eq!(
            channel_rescale(&x, [1.5, 1.0, 1.0]).unwrap().pixel(0, 0),
            [1.0, 0.8, 0.8]
        );
        assert!(channel_rescale(&x, [1.6, 1.0, 1.0]).is_err());
        assert!(channel_rescale(&x, [1.0, 0.4, 1.0]).is_err());
    }

    #[test]
    fn contrast_jitter_examples() {
        let x = Image::from_fn(2, 2, |y, x| [0.1 * (y * 2 + x) as f64 + 0.2; 3]);
        assert_eq!(contrast_jitter(&x, 1.0, 0.0).unwrap().data(), x.data());
        let flat = Image::filled(3, 3, [0.3; 3]);
        let out = contrast_jitter(&flat, 3.7, 0.1).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        // two pixels 0.4 and 0.6 → μ = 0.5
        let two = Image::from_fn(1, 2, |_, x| [if x == 0 { 0.4 } else { 0.6 }; 3]);
        let out = contrast_jitter(&two, 2.0, 0.0).unwrap();
        assert!((out.pixel(0, 1)[0] - 0.7).abs() < 1e-15);
        assert!(contrast_jitter(&two, 0.0, 0.0).is_err());
        assert!(contrast_jitter(&two, -1.0, 0.0).is_err());
    }

    #[test]
    fn identity_params_leave_image_untouched() {
        let x = Image::from_fn(4, 4, |y, x| [0.1 * y as f64, 0.05 * x as f64, 0.9]);
        assert_eq!(PerturbationParams::IDENTITY.apply(&x).unwrap(), x);
        assert!(PerturbationParams::IDENTITY.is_identity());
    }

    #[test]
    fn hue_only_params_equal_hue_shift() {
        let x = Image::from_fn(4, 4, |y, x| [0.1 * y as f64, 0.05 * x as f64, 0.9]);
        let out = PerturbationParams::hue(0.1).apply(&x).unwrap();
        assert_eq!(out, hue_shift(&x, 0.1));
    }

    #[test]
    fn contrast_vector_examples() {
        let mask: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let bw = Image::from_fn(4, 4, |_, x| if x < 2 { [1.0; 3] } else { [0.0; 3] });
        assert_eq!(fg_bg_contrast(&bw, &mask).unwrap().0, [1.0, 1.0, 1.0]);
        let same = Image::filled(4, 4, [0.3, 0.6, 0.1]);
        assert_eq!(fg_bg_contrast(&same, &mask).unwrap().0, [0.0, 0.0, 0.0]);
        let rb = Image::from_fn(4, 4, |_, x| if x < 2 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] });
        assert_eq!(fg_bg_contrast(&rb, &mask).unwrap().0, [1.0, 0.0, 1.0]);
        assert!(fg_bg_contrast(&rb, &[true; 16]).is_err());
        assert!(fg_bg_contrast(&rb, &[false; 16]).is_err());
        assert!(fg_bg_contrast(&rb, &[true; 3]).is_err());
    }

    #[test]
    fn equalizing_rescale_reduces_contrast_norm() {
        // foreground (0.8, 0.3, 0.2) on background (0.4, 0.3, 0.4)
        let mask: Vec<bool> = (0..64).map(|i| (i / 8) < 4).collect();
        let x = Image::from_fn(8, 8, |y, _| if y < 4 { [0.8, 0.3, 0.2] } else { [0.4, 0.3, 0.4] });
        let before = fg_bg_contrast(&x, &mask).unwrap().norm();
        let shrunk = channel_rescale(&x, [0.5, 1.0, 1.5]).unwrap();
        let after = fg_bg_contrast(&shrunk, &mask).unwrap().norm();
        assert!(after < before, "{after} !< {before}");
    }

    fn arb_rgb() -> impl Strategy<Value = [f64; 3]> {
        [0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0]
    }

    proptest! {
        #[test]
        fn hsv_round_trip(rgb in arb_rgb()) {
            prop_assert!(close(hsv_to_rgb(rgb_to_hsv(rgb)), rgb, 1e-6));
        }

        #[test]
        fn hue_shift_preserves_saturation_and_value(rgb in arb_rgb(), delta in -2.0f64..2.0) {
            let [_, s, v] = rgb_to_hsv(rgb);
            let shifted = hue_shift(&px(rgb), delta).pixel(0, 0);
            let [_, s2, v2] = rgb_to_hsv(shifted);
            prop_assert!((s - s2).abs() < 1e-6 && (v - v2).abs() < 1e-6);
        }

        #[test]
        fn zero_hue_shift_is_identity(rgb in arb_rgb()) {
            prop_assert!(close(hue_shift(&px(rgb), 0.0).pixel(0, 0), rgb, 1e-6));
        }

        #[test]
        fn apply_equals_manual_composition(
            pixels in prop::collection::vec(arb_rgb(), 9),
            hue in -0.2f64..0.2,
            a in [0.5f64..1.5, 0.5f64..1.5, 0.5f64..1.5],
            gamma in 0.5f64..1.5,
            beta in -0.2f64..0.2,
        ) {
            let x = Image::from_fn(3, 3, |y, c| pixels[y * 3 + c]);
            let theta = PerturbationParams { hue, scale: a, contrast: gamma, brightness: beta };
            let manual = contrast_jitter(&channel_rescale(&hue_shift(&x, hue), a).unwrap(), gamma, beta).unwrap();
            let got = theta.apply(&x).unwrap();
            for (g, m) in got.data().iter().zip(manual.data()) {
                prop_assert!((g - m).abs() < 1e-12);
            }
        }
    }
}
