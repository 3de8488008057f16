//! Similarity measures between saliency maps and the saliency-derived
//! foreground mask.

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Data range of normalised maps.
const L: f64 = 1.0;

pub const SSIM_C1: f64 = (K1 * L) * (K1 * L);
pub const SSIM_C2: f64 = (K2 * L) * (K2 * L);

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn check_same(a: &SaliencyMap, b: &SaliencyMap, context: &'static str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![a.height(), a.width()],
            actual: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

/// Valid-mode separable filtering with the Gaussian window.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * horiz[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Local SSIM statistics combined into one window's score. Written so that
/// swapping the arguments, or passing equal statistics, is exact.
pub(crate) fn ssim_window(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    let num = (2.0 * (mu_a * mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2);
    let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
    num / den
}

/// Mean SSIM over all 11×11 Gaussian windows (σ = 1.5) that fit inside
/// the maps.
pub fn ssim(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let (da, db) = (a.data(), b.data());
    let sq_a: Vec<f64> = da.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = db.iter().map(|v| v * v).collect();
    let prod: Vec<f64> = da.iter().zip(db).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(da, h, w, &taps);
    let mu_b = filter_valid(db, h, w, &taps);
    let e_aa = filter_valid(&sq_a, h, w, &taps);
    let e_bb = filter_valid(&sq_b, h, w, &taps);
    let e_ab = filter_valid(&prod, h, w, &taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| ssim_window(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i]))
        .sum();
    Ok(total / n as f64)
}

/// Indices of the `k` largest values; ties go to the lower row-major index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// Percentage of the top-K pixels the two maps share, with
/// `K = round(k_fraction · H · W)`.
pub fn peak_overlap(a: &SaliencyMap, b: &SaliencyMap, k_fraction: f64) -> Result<f64> {
    check_same(a, b, "peak overlap")?;
    if !(k_fraction > 0.0 && k_fraction < 1.0) {
        return Err(Error::invalid(format!("k_fraction must be in (0, 1), got {k_fraction}")));
    }
    let n = a.data().len();
    let k = (k_fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::invalid("top-K set is empty for this map size"));
    }
    let mut in_a = vec![false; n];
    for i in top_k_indices(a.data(), k) {
        in_a[i] = true;
    }
    let shared = top_k_indices(b.data(), k).into_iter().filter(|&i| in_a[i]).count();
    Ok(shared as f64 / k as f64 * 100.0)
}

/// Mean absolute difference between two normalised maps.
pub fn l1_distance(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    check_same(a, b, "l1 distance")?;
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.data().len() as f64)
}

/// Pixels whose saliency reaches the top-τ threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub mask: Vec<bool>,
    pub threshold: f64,
    pub tau: f64,
}

impl ForegroundMask {
    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Threshold at the `k`-th largest value with `k = max(1, round(τ·n))`
/// (nearest rank on the upper tail); every pixel at or above it is
/// foreground, so ties can only enlarge the mask.
pub fn foreground_mask(m: &SaliencyMap, tau: f64) -> Result<ForegroundMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must be in (0, 1), got {tau}")));
    }
    let n = m.data().len();
    let k = ((tau * n as f64).round() as usize).clamp(1, n);
    let mut sorted = m.data().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    Ok(ForegroundMask {
        mask: m.data().iter().map(|&v| v >= threshold).collect(),
        threshold,
        tau,
    })
}
