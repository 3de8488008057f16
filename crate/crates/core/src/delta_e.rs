//! CIEDE2000 colour difference on sRGB inputs (D65 white point).

use crate::error::{Error, Result};
use crate::image::Image;

/// CIE L*a*b* coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }
}

const D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const EPS: f64 = 216.0 / 24389.0;
    const KAPPA: f64 = 24389.0 / 27.0;
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

pub fn srgb_to_lab(rgb: [f64; 3]) -> Lab {
    let [r, g, b] = rgb.map(|c| srgb_to_linear(c.clamp(0.0, 1.0)));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let fx = lab_f(x / D65[0]);
    let fy = lab_f(y / D65[1]);
    let fz = lab_f(z / D65[2]);
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// CIEDE2000 with unit weighting factors.
pub fn ciede2000(c1: Lab, c2: Lab) -> f64 {
    let pow25_7 = 25f64.powi(7);
    let chroma1 = c1.a.hypot(c1.b);
    let chroma2 = c2.a.hypot(c2.b);
    let mean_c7 = ((chroma1 + chroma2) / 2.0).powi(7);
    let g = 0.5 * (1.0 - (mean_c7 / (mean_c7 + pow25_7)).sqrt());
    let a1 = (1.0 + g) * c1.a;
    let a2 = (1.0 + g) * c2.a;
    let cp1 = a1.hypot(c1.b);
    let cp2 = a2.hypot(c2.b);
    let hue_deg = |b: f64, a: f64| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            b.atan2(a).to_degrees().rem_euclid(360.0)
        }
    };
    let hp1 = hue_deg(c1.b, a1);
    let hp2 = hue_deg(c2.b, a2);

    let dl = c2.l - c1.l;
    let dc = cp2 - cp1;
    let chroma_product = cp1 * cp2;
    let dh = if chroma_product == 0.0 {
        0.0
    } else {
        let d = hp2 - hp1;
        if d.abs() <= 180.0 {
            d
        } else if d > 180.0 {
            d - 360.0
        } else {
            d + 360.0
        }
    };
    let big_dh = 2.0 * chroma_product.sqrt() * (dh / 2.0).to_radians().sin();

    let mean_l = (c1.l + c2.l) / 2.0;
    let mean_cp = (cp1 + cp2) / 2.0;
    let mean_hp = if chroma_product == 0.0 {
        hp1 + hp2
    } else if (hp1 - hp2).abs() <= 180.0 {
        (hp1 + hp2) / 2.0
    } else if hp1 + hp2 < 360.0 {
        (hp1 + hp2 + 360.0) / 2.0
    } else {
        (hp1 + hp2 - 360.0) / 2.0
    };

    let cosd = |deg: f64| deg.to_radians().cos();
    let t = 1.0 - 0.17 * cosd(mean_hp - 30.0) + 0.24 * cosd(2.0 * mean_hp) + 0.32 * cosd(3.0 * mean_hp + 6.0)
        - 0.20 * cosd(4.0 * mean_hp - 63.0);
    let d_theta = 30.0 * (-((mean_hp - 275.0) / 25.0).powi(2)).exp();
    let mean_cp7 = mean_cp.powi(7);
    let rc = 2.0 * (mean_cp7 / (mean_cp7 + pow25_7)).sqrt();
    let l50 = (mean_l - 50.0).powi(2);
    let sl = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let sc = 1.0 + 0.045 * mean_cp;
    let sh = 1.0 + 0.015 * mean_cp * t;
    let rt = -(2.0 * d_theta).to_radians().sin() * rc;

    let tl = dl / sl;
    let tc = dc / sc;
    let th = big_dh / sh;
    (tl * tl + tc * tc + th * th + rt * tc * th).max(0.0).sqrt()
}

/// ΔE00 between two sRGB colours with channels in [0, 1].
pub fn delta_e2000(c1: [f64; 3], c2: [f64; 3]) -> f64 {
    ciede2000(srgb_to_lab(c1), srgb_to_lab(c2))
}

/// Mean per-pixel ΔE00 between two equally sized images.
pub fn mean_delta_e(x: &Image, y: &Image) -> Result<f64> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::ShapeMismatch {
            context: "delta E images",
            expected: vec![x.height(), x.width()],
            actual: vec![y.height(), y.width()],
        });
    }
    let total: f64 = x.pixels().zip(y.pixels()).map(|(a, b)| delta_e2000(a, b)).sum();
    Ok(total / x.pixel_count() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_colors_have_zero_difference() {
        for c in [[0.0; 3], [1.0; 3], [0.3, 0.7, 0.1]] {
            assert_eq!(delta_e2000(c, c), 0.0);
        }
    }

    #[test]
    fn white_maps_to_l100() {
        let lab = srgb_to_lab([1.0; 3]);
        assert!((lab.l - 100.0).abs() < 1e-3);
        assert!(lab.a.abs() < 1e-2 && lab.b.abs() < 1e-2);
        let black = srgb_to_lab([0.0; 3]);
        assert!(black.l.abs() < 1e-12);
    }

    #[test]
    fn mean_delta_e_rejects_mismatched_images() {
        let a = Image::filled(2, 2, [0.0; 3]);
        let b = Image::filled(2, 3, [0.0; 3]);
        assert!(mean_delta_e(&a, &b).is_err());
        assert_eq!(mean_delta_e(&a, &a).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn symmetric(a in [0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0],
                     b in [0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0]) {
            let d1 = delta_e2000(a, b);
            let d2 = delta_e2000(b, a);
            prop_assert!(d1 >= 0.0);
            prop_assert!((d1 - d2).abs() < 1e-9);
        }
    }
}
