//! Attribution maps: Grad-CAM, Grad-CAM++, vanilla gradients and
//! integrated gradients.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{gray_to_pgm, write_file, Image};
use crate::model::Model;
use crate::tensor::Tensor;

/// An `H×W` attribution map normalised to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    /// Wraps values that are already in [0, 1].
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidShape(vec![height, width]));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("saliency values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    /// Min-max normalises a raw map. A flat map becomes all zeros when its
    /// value is zero and all ones otherwise.
    pub fn normalized(height: usize, width: usize, raw: &[f64]) -> Result<Self> {
        if height == 0 || width == 0 || raw.len() != height * width {
            return Err(Error::InvalidShape(vec![height, width]));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite attribution values".into()));
        }
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let data = if range <= 1e-12 {
            let fill = if max.abs() <= 1e-12 { 0.0 } else { 1.0 };
            vec![fill; raw.len()]
        } else {
            raw.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect()
        };
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &SaliencyMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        gray_to_pgm(self.height, self.width, &self.data)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pgm())
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (h, w, data) = crate::image::parse_pgm(bytes)?;
        Self::new(h, w, data)
    }
}

/// Bilinear resize with half-pixel centres (edges clamped).
pub fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, s: usize, n_dst: usize| -> (usize, usize, f64) {
        let scale = s as f64 / n_dst as f64;
        let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Capture-layer activations `A` (`[K, h, w]`) and `∂y^c/∂A`.
#[derive(Clone, Debug)]
pub struct ActivationGradients {
    pub activations: Tensor,
    pub gradients: Tensor,
}

pub fn activation_gradients(model: &Model, x: &Image, class: usize) -> Result<ActivationGradients> {
    check_class(model, class)?;
    let mut pass = model.forward_for_attribution(x)?;
    let captured = pass
        .captured
        .ok_or_else(|| Error::UnknownLayer("model has no convolution to capture".into()))?;
    let score = pass.class_score(class)?;
    let gradients = pass.tape.grad_wrt(score, captured)?;
    let activations = pass.tape.value(captured)?.clone();
    Ok(ActivationGradients {
        activations,
        gradients,
    })
}

fn check_class(model: &Model, class: usize) -> Result<()> {
    if class >= model.spec().classes {
        return Err(Error::invalid(format!(
            "class {class} out of range for {} classes",
            model.spec().classes
        )));
    }
    Ok(())
}

fn weighted_sum_relu(ag: &ActivationGradients, weights: &[f64]) -> Vec<f64> {
    let a = &ag.activations;
    let (k, hw) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
    let mut raw = vec![0.0; hw];
    for (ch, &w) in weights.iter().enumerate().take(k) {
        for (r, &v) in raw.iter_mut().zip(&a.data()[ch * hw..(ch + 1) * hw]) {
            *r += w * v;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    raw
}

/// Un-normalised Grad-CAM at capture-layer resolution.
pub fn grad_cam_raw(ag: &ActivationGradients) -> Vec<f64> {
    let g = &ag.gradients;
    let hw = g.shape()[1] * g.shape()[2];
    let weights: Vec<f64> = g.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
    weighted_sum_relu(ag, &weights)
}

/// Un-normalised Grad-CAM++ at capture-layer resolution.
pub fn grad_cam_pp_raw(ag: &ActivationGradients) -> Vec<f64> {
    let g = &ag.gradients;
    let a = &ag.activations;
    let hw = g.shape()[1] * g.shape()[2];
    let weights: Vec<f64> = g
        .data()
        .chunks(hw)
        .zip(a.data().chunks(hw))
        .map(|(gc, ac)| {
            let act_sum: f64 = ac.iter().sum();
            gc.iter()
                .map(|&gv| {
                    let g2 = gv * gv;
                    let denom = 2.0 * g2 + act_sum * g2 * gv;
                    let alpha = if denom.abs() < 1e-12 { 0.0 } else { g2 / denom };
                    alpha * gv.max(0.0)
                })
                .sum()
        })
        .collect();
    weighted_sum_relu(ag, &weights)
}

fn upsampled(ag: &ActivationGradients, raw: &[f64], height: usize, width: usize) -> Result<SaliencyMap> {
    let (h, w) = (ag.activations.shape()[1], ag.activations.shape()[2]);
    let up = bilinear_resize(raw, h, w, height, width);
    SaliencyMap::normalized(height, width, &up)
}

/// Grad-CAM and Grad-CAM++ from one forward/backward pass.
pub fn cam_pair(model: &Model, x: &Image, class: usize) -> Result<(SaliencyMap, SaliencyMap)> {
    let ag = activation_gradients(model, x, class)?;
    let gc = upsampled(&ag, &grad_cam_raw(&ag), x.height(), x.width())?;
    let gcpp = upsampled(&ag, &grad_cam_pp_raw(&ag), x.height(), x.width())?;
    Ok((gc, gcpp))
}

/// Grad-CAM for `class`, computed only when the model predicts `class` for
/// `x`. Shares one forward pass between the prediction and the map.
pub fn grad_cam_if_predicted(model: &Model, x: &Image, class: usize) -> Result<Option<SaliencyMap>> {
    check_class(model, class)?;
    let mut pass = model.forward_for_attribution(x)?;
    if pass.logits().argmax() != class {
        return Ok(None);
    }
    let captured = pass
        .captured
        .ok_or_else(|| Error::UnknownLayer("model has no convolution to capture".into()))?;
    let score = pass.class_score(class)?;
    let ag = ActivationGradients {
        gradients: pass.tape.grad_wrt(score, captured)?,
        activations: pass.tape.value(captured)?.clone(),
    };
    upsampled(&ag, &grad_cam_raw(&ag), x.height(), x.width()).map(Some)
}

/// Grad-CAM for `class`, upsampled to the input resolution.
pub fn grad_cam(model: &Model, x: &Image, class: usize) -> Result<SaliencyMap> {
    let ag = activation_gradients(model, x, class)?;
    upsampled(&ag, &grad_cam_raw(&ag), x.height(), x.width())
}

pub fn grad_cam_pp(model: &Model, x: &Image, class: usize) -> Result<SaliencyMap> {
    let ag = activation_gradients(model, x, class)?;
    upsampled(&ag, &grad_cam_pp_raw(&ag), x.height(), x.width())
}

/// `∂y^c/∂x` as a `[3, H, W]` tensor.
pub fn input_gradient(model: &Model, x: &Image, class: usize) -> Result<Tensor> {
    check_class(model, class)?;
    let mut pass = model.forward(x, None, crate::model::GradTarget::Input)?;
    let score = pass.class_score(class)?;
    pass.tape.grad_wrt(score, pass.input)
}

fn channel_abs_max(t: &Tensor) -> Vec<f64> {
    let hw = t.shape()[1] * t.shape()[2];
    let d = t.data();
    (0..hw)
        .map(|i| d[i].abs().max(d[hw + i].abs()).max(d[2 * hw + i].abs()))
        .collect()
}

/// Channel-wise maximum of `|∂y^c/∂x|`.
pub fn vanilla_saliency(model: &Model, x: &Image, class: usize) -> Result<SaliencyMap> {
    let g = input_gradient(model, x, class)?;
    SaliencyMap::normalized(x.height(), x.width(), &channel_abs_max(&g))
}

/// Signed integrated-gradients attributions (`[3, H, W]`) against a black
/// baseline, using the midpoint rule with `steps` samples.
pub fn integrated_gradients_raw(model: &Model, x: &Image, class: usize, steps: u32) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    let input = x.to_chw();
    let mut mean_grad = vec![0.0; input.numel()];
    for k in 0..steps {
        let alpha = (f64::from(k) + 0.5) / f64::from(steps);
        let scaled = x.map_pixels(|p| p.map(|v| alpha * v));
        let g = input_gradient(model, &scaled, class)?;
        for (m, v) in mean_grad.iter_mut().zip(g.data()) {
            *m += v;
        }
    }
    let inv = 1.0 / f64::from(steps);
    let attr = input
        .data()
        .iter()
        .zip(&mean_grad)
        .map(|(xv, g)| xv * g * inv)
        .collect();
    Tensor::new(input.shape().to_vec(), attr)
}

pub fn integrated_gradients(model: &Model, x: &Image, class: usize, steps: u32) -> Result<SaliencyMap> {
    let attr = integrated_gradients_raw(model, x, class, steps)?;
    SaliencyMap::normalized(x.height(), x.width(), &channel_abs_max(&attr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, ModelSpec};
    use crate::weights::ModelWeights;

    #[test]
    fn normalization_rules() {
        let m = SaliencyMap::normalized(1, 3, &[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(m.data(), &[0.0, 0.5, 1.0]);
        let z = SaliencyMap::normalized(2, 2, &[0.0; 4]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let flat = SaliencyMap::normalized(1, 2, &[3.0, 3.0]).unwrap();
        assert_eq!(flat.data(), &[1.0, 1.0]);
        assert!(SaliencyMap::normalized(1, 2, &[f64::NAN, 0.0]).is_err());
        assert!(SaliencyMap::new(1, 1, vec![1.5]).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(bilinear_resize(&src, 3, 4, 3, 4), src);
        let c = bilinear_resize(&[0.7; 4], 2, 2, 5, 7);
        assert!(c.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        // 1-D upsample by 2: centres at -0.25, 0.25, 0.75, 1.25 of the source
        let up = bilinear_resize(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
    }

    fn single_channel_model() -> Model {
        // conv1 copies red, score = mean of the map
        let spec = ModelSpec::custom(
            vec![
                LayerSpec::Conv { out_channels: 1, kernel: 1 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out: 2 },
            ],
            4,
            2,
        );
        Model::from_weights(
            spec,
            ModelWeights::new(vec![
                Tensor::new(vec![1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap(),
                Tensor::zeros(&[1]),
                Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
                Tensor::zeros(&[2]),
            ]),
        )
        .unwrap()
    }

    #[test]
    fn grad_cam_of_mean_score_is_the_feature_map() {
        let model = single_channel_model();
        let x = Image::from_fn(4, 4, |y, x| [0.05 * (y * 4 + x) as f64, 0.3, 0.9]);
        let ag = activation_gradients(&model, &x, 0).unwrap();
        // ∂mean/∂A_ij = 1/16 everywhere
        assert!(ag.gradients.data().iter().all(|&g| (g - 1.0 / 16.0).abs() < 1e-15));
        let raw = grad_cam_raw(&ag);
        for (r, a) in raw.iter().zip(ag.activations.data()) {
            assert!((r - a / 16.0).abs() < 1e-15);
        }
        let map = grad_cam(&model, &x, 0).unwrap();
        let expected = SaliencyMap::normalized(4, 4, ag.activations.data()).unwrap();
        for (m, e) in map.data().iter().zip(expected.data()) {
            assert!((m - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_path_gives_zero_maps() {
        let model = single_channel_model();
        let x = Image::from_fn(4, 4, |y, _| [0.1 * y as f64, 0.2, 0.3]);
        // class 1 has zero weight on the feature
        let gc = grad_cam(&model, &x, 1).unwrap();
        assert!(gc.data().iter().all(|&v| v == 0.0));
        let gcpp = grad_cam_pp(&model, &x, 1).unwrap();
        assert!(gcpp.data().iter().all(|&v| v == 0.0));
        let vs = vanilla_saliency(&model, &x, 1).unwrap();
        assert!(vs.data().iter().all(|&v| v == 0.0));
        assert!(grad_cam(&model, &x, 2).is_err());
    }

    #[test]
    fn grad_cam_pp_reduces_to_grad_cam_on_single_pixel() {
        let ag = ActivationGradients {
            activations: Tensor::new(vec![1, 1, 1], vec![0.8]).unwrap(),
            gradients: Tensor::new(vec![1, 1, 1], vec![0.6]).unwrap(),
        };
        let gc = grad_cam_raw(&ag)[0];
        let pp = grad_cam_pp_raw(&ag)[0];
        // α = g²/(2g² + A g³) = 1/(2 + A g)
        let alpha = 1.0 / (2.0 + 0.8 * 0.6);
        assert!((gc - 0.6 * 0.8).abs() < 1e-15);
        assert!((pp - alpha * 0.6 * 0.8).abs() < 1e-15);
        assert!((pp / gc - alpha).abs() < 1e-12);
    }

    #[test]
    fn ig_on_linear_model_is_exact() {
        let spec = ModelSpec::custom(vec![LayerSpec::Dense { out: 2 }], 2, 2);
        let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin()).collect();
        let model = Model::from_weights(
            spec,
            ModelWeights::new(vec![Tensor::new(vec![2, 12], w.clone()).unwrap(), Tensor::zeros(&[2])]),
        )
        .unwrap();
        let x = Image::from_fn(2, 2, |y, x| [0.2 + 0.1 * y as f64, 0.5, 0.1 * x as f64]);
        let chw = x.to_chw();
        for steps in [1, 3, 16] {
            let attr = integrated_gradients_raw(&model, &x, 1, steps).unwrap();
            for i in 0..12 {
                assert!((attr.data()[i] - w[12 + i] * chw.data()[i]).abs() < 1e-12);
            }
        }
        assert!(integrated_gradients_raw(&model, &x, 1, 0).is_err());
    }
}
