//! Saliency-aware colour perturbation search under a prediction-preserving
//! constraint, dataset poisoning, and the random colour-skew baseline.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::color::{
    hue_shift, saturation_scale, scale_channels_unchecked, Operator, PerturbationParams, DEFAULT_ORDER,
};
use crate::data::Sample;
use crate::delta_e::mean_delta_e;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::ssim;
use crate::model::Model;
use crate::report::{cell, mean, percentile, std_dev, Table};
use crate::saliency::{grad_cam, grad_cam_if_predicted};
use crate::seed;

/// Candidate values per operator. The searched set is the identity, every
/// single-operator candidate and, when `pairwise` is set, every composite of
/// two enabled operators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Hue shifts δ in cyclic units.
    pub hue: Vec<f64>,
    /// Channel scales α, applied to each single channel and to all three.
    pub scale: Vec<f64>,
    /// Contrast factors γ.
    pub contrast: Vec<f64>,
    /// Brightness offsets β.
    pub brightness: Vec<f64>,
    pub operators: Vec<Operator>,
    pub pairwise: bool,
    /// Composition order of the operators.
    pub order: [Operator; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            hue: vec![-0.15, -0.10, -0.05, 0.05, 0.10, 0.15],
            scale: vec![0.6, 0.8, 1.0, 1.2, 1.4],
            contrast: vec![0.8, 1.0, 1.2],
            brightness: vec![-0.1, 0.0, 0.1],
            operators: vec![Operator::Hue, Operator::Rescale, Operator::Jitter],
            pairwise: true,
            order: DEFAULT_ORDER,
        }
    }
}

impl GridSpec {
    /// Smaller grid for federated runs.
    pub fn compact() -> Self {
        Self {
            hue: vec![-0.15, -0.05, 0.05, 0.15],
            scale: vec![0.7, 1.3],
            contrast: vec![0.8, 1.2],
            brightness: vec![-0.1, 0.0, 0.1],
            ..Self::default()
        }
    }

    /// The default candidate values restricted to one operator.
    pub fn only(op: Operator) -> Self {
        Self {
            operators: vec![op],
            pairwise: false,
            ..Self::default()
        }
    }

    pub fn identity() -> Self {
        Self {
            operators: Vec::new(),
            pairwise: false,
            ..Self::default()
        }
    }

    fn singles(&self, op: Operator) -> Vec<PerturbationParams> {
        let mut out = Vec::new();
        match op {
            Operator::Hue => {
                for &d in &self.hue {
                    out.push(PerturbationParams::hue(d));
                }
            }
            Operator::Rescale => {
                for &a in &self.scale {
                    for c in 0..3 {
                        let mut s = [1.0; 3];
                        s[c] = a;
                        out.push(PerturbationParams::rescale(s));
                    }
                    out.push(PerturbationParams::rescale([a; 3]));
                }
            }
            Operator::Jitter => {
                for &g in &self.contrast {
                    for &b in &self.brightness {
                        out.push(PerturbationParams::jitter(g, b));
                    }
                }
            }
        }
        out.retain(|p| !p.is_identity());
        out
    }

    /// All candidates in enumeration order; the identity is always first.
    pub fn candidates(&self) -> Result<Vec<PerturbationParams>> {
        let mut ops = Vec::new();
        for op in [Operator::Hue, Operator::Rescale, Operator::Jitter] {
            if self.operators.contains(&op) {
                ops.push(op);
            }
        }
        let mut out = vec![PerturbationParams::IDENTITY];
        for &op in &ops {
            out.extend(self.singles(op));
        }
        if self.pairwise {
            for i in 0..ops.len() {
                for j in i + 1..ops.len() {
                    for a in self.singles(ops[i]) {
                        for b in self.singles(ops[j]) {
                            out.push(merge(a, b));
                        }
                    }
                }
            }
        }
        for op in DEFAULT_ORDER {
            if !self.order.contains(&op) {
                return Err(Error::invalid(format!("operator order {:?} misses {op:?}", self.order)));
            }
        }
        for p in &out {
            p.validate()?;
        }
        Ok(out)
    }
}

fn merge(a: PerturbationParams, b: PerturbationParams) -> PerturbationParams {
    let id = PerturbationParams::IDENTITY;
    PerturbationParams {
        hue: if a.hue != id.hue { a.hue } else { b.hue },
        scale: if a.scale != id.scale { a.scale } else { b.scale },
        contrast: if a.contrast != id.contrast { a.contrast } else { b.contrast },
        brightness: if a.brightness != id.brightness { a.brightness } else { b.brightness },
    }
}

/// Result of the per-sample search.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub params: PerturbationParams,
    /// Position of `params` in the grid enumeration.
    pub candidate: usize,
    /// Class predicted for the clean sample (and for the output).
    pub predicted: usize,
    /// SSIM between clean and perturbed Grad-CAM.
    pub ssim: f64,
    /// Feasible candidates, the identity included.
    pub feasible: usize,
    /// Mean ΔE00 between clean and perturbed image.
    pub delta_e: f64,
    /// True when no non-identity candidate kept the prediction.
    pub fallback: bool,
}

/// SSIM score of every candidate, `None` where the prediction changes.
/// The identity is scored 1 without evaluation.
pub fn score_candidates(
    model: &Model,
    x: &Image,
    class: usize,
    reference: &crate::saliency::SaliencyMap,
    candidates: &[PerturbationParams],
    order: [Operator; 3],
) -> Result<Vec<Option<f64>>> {
    candidates
        .iter()
        .map(|p| {
            if p.is_identity() {
                return Ok(Some(1.0));
            }
            let xp = p.apply_ordered(x, order)?;
            match grad_cam_if_predicted(model, &xp, class)? {
                Some(cam) => ssim(reference, &cam).map(Some),
                None => Ok(None),
            }
        })
        .collect()
}

/// Picks the feasible candidate with the lowest SSIM, ties resolved toward
/// the earlier candidate.
pub fn select(scores: &[Option<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    best
}

/// Searches `grid` for the perturbation that most degrades the Grad-CAM of
/// the predicted class while keeping that prediction.
pub fn cpm_perturb(model: &Model, x: &Image, grid: &GridSpec) -> Result<(Image, AttackOutcome)> {
    let candidates = grid.candidates()?;
    cpm_search(model, x, &candidates, grid.order)
}

/// [`cpm_perturb`] over an explicit candidate list whose first entry is
/// the identity.
pub fn cpm_search(
    model: &Model,
    x: &Image,
    candidates: &[PerturbationParams],
    order: [Operator; 3],
) -> Result<(Image, AttackOutcome)> {
    if candidates.first().is_none_or(|p| !p.is_identity()) {
        return Err(Error::invalid("candidate list must start with the identity"));
    }
    let predicted = model.predict_label(x)?;
    let reference = grad_cam(model, x, predicted)?;
    let scores = score_candidates(model, x, predicted, &reference, candidates, order)?;
    let feasible = scores.iter().filter(|s| s.is_some()).count();
    let (candidate, s) = select(&scores).expect("identity is always feasible");
    let params = candidates[candidate];
    let out = params.apply_ordered(x, order)?;
    let delta_e = mean_delta_e(x, &out)?;
    Ok((
        out,
        AttackOutcome {
            params,
            candidate,
            predicted,
            ssim: s,
            feasible,
            delta_e,
            fallback: feasible == 1,
        },
    ))
}

/// Aggregate statistics of a poisoning pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonSummary {
    pub count: usize,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub p10_ssim: f64,
    pub median_ssim: f64,
    pub p90_ssim: f64,
    pub mean_delta_e: f64,
    /// Fraction of samples with a feasible non-identity candidate.
    pub success_rate: f64,
}

impl PoisonSummary {
    pub fn from_outcomes(outcomes: &[AttackOutcome]) -> Self {
        let s: Vec<f64> = outcomes.iter().map(|o| o.ssim).collect();
        let de: Vec<f64> = outcomes.iter().map(|o| o.delta_e).collect();
        let ok = outcomes.iter().filter(|o| !o.fallback).count();
        Self {
            count: outcomes.len(),
            mean_ssim: mean(&s),
            std_ssim: std_dev(&s),
            p10_ssim: percentile(&s, 10.0),
            median_ssim: percentile(&s, 50.0),
            p90_ssim: percentile(&s, 90.0),
            mean_delta_e: mean(&de),
            success_rate: ok as f64 / outcomes.len() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Poisoned {
    pub samples: Vec<Sample>,
    pub outcomes: Vec<AttackOutcome>,
    pub summary: PoisonSummary,
}

/// Replaces every image by its CPM output; labels are kept.
pub fn poison_dataset(model: &Model, data: &[Sample], grid: &GridSpec) -> Result<Poisoned> {
    if data.is_empty() {
        return Err(Error::Empty("dataset to poison"));
    }
    let candidates = grid.candidates()?;
    let mut samples = Vec::with_capacity(data.len());
    let mut outcomes = Vec::with_capacity(data.len());
    for s in data {
        let (image, outcome) = cpm_search(model, &s.image, &candidates, grid.order)?;
        samples.push(Sample { image, label: s.label });
        outcomes.push(outcome);
    }
    let summary = PoisonSummary::from_outcomes(&outcomes);
    Ok(Poisoned {
        samples,
        outcomes,
        summary,
    })
}

pub const OUTCOME_COLUMNS: [&str; 13] = [
    "sample_id",
    "predicted",
    "candidate",
    "hue",
    "scale_r",
    "scale_g",
    "scale_b",
    "contrast",
    "brightness",
    "ssim",
    "delta_e",
    "feasible",
    "fallback",
];

/// One CSV row per outcome, in `OUTCOME_COLUMNS` order.
pub fn outcomes_table(outcomes: &[AttackOutcome]) -> Table {
    let mut t = Table::new(&OUTCOME_COLUMNS);
    for (i, o) in outcomes.iter().enumerate() {
        let p = o.params;
        t.push(vec![
            cell(i),
            cell(o.predicted),
            cell(o.candidate),
            cell(p.hue),
            cell(p.scale[0]),
            cell(p.scale[1]),
            cell(p.scale[2]),
            cell(p.contrast),
            cell(p.brightness),
            cell(o.ssim),
            cell(o.delta_e),
            cell(o.feasible),
            cell(o.fallback),
        ])
        .expect("row matches header");
    }
    t
}

/// Half-widths of the random-skew ranges at `range = 1`.
pub const SKEW_HUE: f64 = 1.0 / 12.0;
pub const SKEW_SATURATION: f64 = 0.5;
pub const SKEW_SCALE: f64 = 0.2;

/// A sampled random skew; `None` components are not applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkewParams {
    pub hue: Option<f64>,
    pub saturation: Option<f64>,
    pub scale: Option<[f64; 3]>,
}

impl SkewParams {
    /// Samples a non-empty random subset of {hue, saturation, channel
    /// scale}. `range` multiplies the half-width of every interval.
    pub fn sample(seed: u64, range: f64) -> Self {
        let mut rng = seed::rng_for(seed, &[0x5E3]);
        let subset: u8 = rng.random_range(1..8);
        let mut uniform = |half: f64| 1.0 + rng.random_range(-half..=half);
        let hue = (subset & 1 != 0).then(|| uniform(SKEW_HUE * range) - 1.0);
        let saturation = (subset & 2 != 0).then(|| uniform(SKEW_SATURATION * range).max(0.0));
        let scale = (subset & 4 != 0).then(|| {
            [0; 3].map(|_| uniform(SKEW_SCALE * range).max(0.0))
        });
        Self { hue, saturation, scale }
    }

    /// Applies hue, saturation then channel scale, clamping to [0, 1].
    pub fn apply(&self, x: &Image) -> Image {
        let mut out = x.clone();
        if let Some(d) = self.hue {
            out = hue_shift(&out, d);
        }
        if let Some(s) = self.saturation {
            out = saturation_scale(&out, s);
        }
        if let Some(a) = self.scale {
            out = scale_channels_unchecked(&out, a);
        }
        out
    }
}

/// Unconstrained random colour skew with the standard ranges.
pub fn random_skew(x: &Image, seed: u64) -> Image {
    SkewParams::sample(seed, 1.0).apply(x)
}

/// Random skew with every range scaled by `range`.
pub fn random_skew_scaled(x: &Image, seed: u64, range: f64) -> (Image, SkewParams) {
    let p = SkewParams::sample(seed, range);
    (p.apply(x), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, ModelSpec};
    use crate::tensor::Tensor;

    #[test]
    fn default_grid_size_and_identity_first() {
        let c = GridSpec::default().candidates().unwrap();
        assert_eq!(c.len(), 303);
        assert!(c[0].is_identity());
        assert_eq!(c.iter().filter(|p| p.is_identity()).count(), 1);
        assert_eq!(GridSpec::only(Operator::Hue).candidates().unwrap().len(), 7);
        assert_eq!(GridSpec::only(Operator::Rescale).candidates().unwrap().len(), 17);
        assert_eq!(GridSpec::only(Operator::Jitter).candidates().unwrap().len(), 9);
        assert_eq!(GridSpec::identity().candidates().unwrap().len(), 1);
    }

    #[test]
    fn invalid_scale_rejected() {
        let g = GridSpec {
            scale: vec![1.6],
            ..GridSpec::default()
        };
        assert!(g.candidates().is_err());
    }

    #[test]
    fn select_prefers_earlier_on_ties() {
        assert_eq!(select(&[Some(1.0), None, Some(0.5), Some(0.5)]), Some((2, 0.5)));
        assert_eq!(select(&[Some(1.0), None]), Some((0, 1.0)));
    }

    fn stub(seed: u64) -> Model {
        // conv features depend on colour; the dense bias fixes the class
        let spec = ModelSpec::custom(
            vec![
                LayerSpec::Conv {
                    out_channels: 4,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { out: 2 },
            ],
            16,
            2,
        );
        let m = Model::build(spec.clone(), seed).unwrap();
        let mut w = m.weights().clone();
        let last = w.len() - 1;
        w.tensors_mut()[last] = Tensor::vector(vec![1e6, 0.0]).unwrap();
        Model::from_weights(spec, w).unwrap()
    }

    fn pattern() -> Image {
        Image::from_fn(16, 16, |y, x| {
            if (4..12).contains(&y) && (3..10).contains(&x) {
                [0.9, 0.2, 0.1]
            } else {
                [0.2, 0.5, 0.7 * (x as f64 / 16.0)]
            }
        })
    }

    #[test]
    fn identity_grid_falls_back() {
        let m = stub(1);
        let x = pattern();
        let (out, o) = cpm_perturb(&m, &x, &GridSpec::identity()).unwrap();
        assert_eq!(out, x);
        assert_eq!(o.ssim, 1.0);
        assert!(o.fallback);
        assert_eq!(o.delta_e, 0.0);
    }

    #[test]
    fn hue_search_matches_exhaustive_scoring() {
        let m = stub(3);
        let x = pattern();
        let grid = GridSpec::only(Operator::Hue);
        let (out, o) = cpm_perturb(&m, &x, &grid).unwrap();
        let reference = grad_cam(&m, &x, 0).unwrap();
        let cands = grid.candidates().unwrap();
        let mut best = (0, 1.0);
        for (i, p) in cands.iter().enumerate().skip(1) {
            let xp = p.apply(&x).unwrap();
            assert_eq!(m.predict_label(&xp).unwrap(), 0);
            let s = ssim(&reference, &grad_cam(&m, &xp, 0).unwrap()).unwrap();
            if s < best.1 {
                best = (i, s);
            }
        }
        assert_eq!(o.candidate, best.0);
        assert_eq!(o.ssim, best.1);
        assert!(o.ssim < 1.0);
        assert_eq!(o.feasible, cands.len());
        assert_eq!(m.predict_label(&out).unwrap(), 0);
    }

    #[test]
    fn larger_grid_never_worse() {
        let m = stub(5);
        let x = pattern();
        let (_, hue) = cpm_perturb(&m, &x, &GridSpec::only(Operator::Hue)).unwrap();
        let both = GridSpec {
            operators: vec![Operator::Hue, Operator::Jitter],
            pairwise: false,
            ..GridSpec::default()
        };
        let (_, wide) = cpm_perturb(&m, &x, &both).unwrap();
        assert!(wide.ssim <= hue.ssim);
    }

    #[test]
    fn poisoning_keeps_labels_and_size() {
        let m = stub(2);
        let data: Vec<Sample> = (0..3)
            .map(|i| Sample {
                image: pattern().map_pixels(|p| p.map(|v| v * (0.6 + 0.1 * i as f64))),
                label: i % 2,
            })
            .collect();
        let p = poison_dataset(&m, &data, &GridSpec::only(Operator::Jitter)).unwrap();
        assert_eq!(p.samples.len(), 3);
        for (a, b) in p.samples.iter().zip(&data) {
            assert_eq!(a.label, b.label);
            assert_eq!(m.predict_label(&a.image).unwrap(), m.predict_label(&b.image).unwrap());
        }
        let table = outcomes_table(&p.outcomes);
        let col = table.column_f64("ssim").unwrap();
        assert!((mean(&col) - p.summary.mean_ssim).abs() < 1e-12);
        assert!(poison_dataset(&m, &[], &GridSpec::default()).is_err());
        let id = poison_dataset(&m, &data, &GridSpec::identity()).unwrap();
        assert_eq!(id.samples, data);
    }

    #[test]
    fn random_skew_is_seeded_and_bounded() {
        let x = pattern();
        assert_eq!(random_skew(&x, 9), random_skew(&x, 9));
        let mut saw_hue = false;
        for s in 0..500 {
            let p = SkewParams::sample(s, 1.0);
            assert!(p.hue.is_some() || p.saturation.is_some() || p.scale.is_some());
            if let Some(d) = p.hue {
                saw_hue = true;
                assert!(d.abs() <= SKEW_HUE + 1e-15);
            }
            if let Some(sat) = p.saturation {
                assert!((0.5..=1.5).contains(&sat));
            }
            if let Some(a) = p.scale {
                assert!(a.iter().all(|v| (0.8..=1.2).contains(v)));
            }
        }
        assert!(saw_hue);
        let (same, _) = random_skew_scaled(&x, 4, 0.0);
        assert!(mean_delta_e(&x, &same).unwrap() < 1e-9);
    }
}
