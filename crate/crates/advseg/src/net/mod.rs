//! Miniature fully-convolutional encoder/decoder segmentation network.
//!
//! The encoder is a chain of stride-2 3x3 convolutions (each stage halves
//! the resolution), followed by a stride-1 "neck" convolution at the lowest
//! resolution. The decoder scores the deepest features with a 1x1
//! convolution, then repeatedly doubles the resolution with bilinear
//! upsampling; at configured skip stages a 1x1-scored copy of the encoder
//! features is summed in, so higher-resolution detail reaches the output.
//! Inputs live in [0, 1].
//!
//! All passes are hand-written compositions of the ops in
//! [`crate::tensor::ops`], so input and parameter gradients are exact.

mod io;
mod train;

pub use io::{load_checkpoint, save_checkpoint};
pub use train::{mean_loss, pixel_accuracy, train};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::ops;
use crate::tensor::{LayerGradients, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Network shape: class count, encoder widths, and skip-connection stages.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Output channels of each encoder stage; the stage count is the length.
    pub stage_widths: Vec<usize>,
    /// 1-based encoder stages whose features are fused into the decoder.
    pub skip_stages: Vec<usize>,
}

impl ModelConfig {
    /// The toy default: 5 classes, three stages of 8/16/32 channels, one
    /// skip connection at half of the encoder depth.
    pub fn toy_default() -> Self {
        ModelConfig {
            num_classes: 5,
            stage_widths: vec![8, 16, 32],
            skip_stages: vec![2],
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Inputs must be divisible by this in both spatial dimensions.
    pub fn resolution_divisor(&self) -> usize {
        1 << self.num_stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > u8::MAX as usize + 1 {
            return Err(Error::InvalidConfig("num_classes must fit in u8".into()));
        }
        if self.stage_widths.is_empty() {
            return Err(Error::InvalidConfig("at least one encoder stage".into()));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("stage widths must be positive".into()));
        }
        for &s in &self.skip_stages {
            if s == 0 || s >= self.num_stages() {
                return Err(Error::InvalidConfig(format!(
                    "skip stage {} out of 1..{}",
                    s,
                    self.num_stages()
                )));
            }
        }
        let mut sorted = self.skip_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.skip_stages.len() {
            return Err(Error::InvalidConfig("duplicate skip stages".into()));
        }
        Ok(())
    }

    fn ensure_input_shape(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let div = self.resolution_divisor();
        if c != 3 || h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "network input",
                format!("(3, H, W) with H, W divisible by {}", div),
                format!("({}, {}, {})", c, h, w),
            ));
        }
        Ok(())
    }
}

/// Training provenance carried with a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub epochs: u32,
    pub seed: u64,
    pub final_loss: Option<f32>,
}

/// An immutable parameter set: config, named tensors, and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
    pub meta: TrainMeta,
    /// Digest of the experiment config that produced this model, when known.
    pub config_digest: Option<String>,
}

/// Canonical parameter list (name, out_ch, in_ch, kh, kw) for a config.
fn param_layout(config: &ModelConfig) -> Vec<(String, usize, usize, usize, usize)> {
    let mut layout = Vec::new();
    let mut in_ch = 3;
    for (i, &width) in config.stage_widths.iter().enumerate() {
        layout.push((format!("enc{}", i + 1), width, in_ch, 3, 3));
        in_ch = width;
    }
    let deep = *config.stage_widths.last().expect("validated non-empty");
    layout.push(("neck".to_string(), deep, deep, 3, 3));
    layout.push(("score_final".to_string(), config.num_classes, deep, 1, 1));
    let mut skips = config.skip_stages.clone();
    skips.sort_unstable();
    for s in skips {
        layout.push((
            format!("skip{}", s),
            config.num_classes,
            config.stage_widths[s - 1],
            1,
            1,
        ));
    }
    layout
}

impl Checkpoint {
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    fn kernel(&self, name: &str) -> &Tensor {
        &self
            .params
            .iter()
            .find(|(n, _)| n == &format!("{name}.kernel"))
            .expect("parameter exists by construction")
            .1
    }

    fn bias(&self, name: &str) -> &Tensor {
        &self
            .params
            .iter()
            .find(|(n, _)| n == &format!("{name}.bias"))
            .expect("parameter exists by construction")
            .1
    }

    /// In-place SGD step: `param -= lr * grad` matched by name.
    pub(crate) fn apply_update(&mut self, grads: &[(String, Tensor)], lr: f32) -> Result<()> {
        for (name, g) in grads {
            let param = self
                .params
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
            param.1.add_scaled(g, -lr)?;
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<(String, Tensor)>,
        meta: TrainMeta,
        config_digest: Option<String>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if params.len() != 2 * layout.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                2 * layout.len(),
                params.len()
            )));
        }
        for (i, (name, oc, ic, kh, kw)) in layout.iter().enumerate() {
            let (kn, kt) = &params[2 * i];
            let (bn, bt) = &params[2 * i + 1];
            if kn != &format!("{name}.kernel") || kt.shape() != [*oc, *ic, *kh, *kw] {
                return Err(Error::InvalidConfig(format!(
                    "parameter {} has unexpected name/shape",
                    kn
                )));
            }
            if bn != &format!("{name}.bias") || bt.shape() != [*oc] {
                return Err(Error::InvalidConfig(format!(
                    "parameter {} has unexpected name/shape",
                    bn
                )));
            }
            kt.ensure_finite("checkpoint parameter")?;
            bt.ensure_finite("checkpoint parameter")?;
        }
        Ok(Checkpoint {
            config,
            params,
            meta,
            config_digest,
        })
    }
}

/// Initializes a model with fan-in-scaled uniform weights and zero biases,
/// deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (name, oc, ic, kh, kw) in param_layout(config) {
        let fan_in = (ic * kh * kw) as f32;
        let bound = 1.0 / fan_in.sqrt();
        let kernel = Tensor::from_fn(&[oc, ic, kh, kw], |_| rng.random_range(-bound..bound));
        params.push((format!("{name}.kernel"), kernel));
        params.push((format!("{name}.bias"), Tensor::zeros(&[oc])));
    }
    Ok(Checkpoint {
        config: config.clone(),
        params,
        meta: TrainMeta {
            epochs: 0,
            seed,
            final_loss: None,
        },
        config_digest: None,
    })
}

/// Activations cached by the forward pass for the backward pass.
pub(crate) struct Trace {
    /// Input to encoder conv `s+1`; `enc_in[0]` is the image.
    enc_in: Vec<Tensor>,
    /// Pre-activation output of each encoder conv.
    enc_pre: Vec<Tensor>,
    /// relu of the deepest encoder stage; input to the neck conv.
    deep: Tensor,
    neck_pre: Tensor,
    neck_out: Tensor,
}

/// Softmax-normalized probabilities (C, H, W) and argmax labels.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Tensor,
    pub labels: LabelMap,
}

fn as_batch(image: &Tensor) -> Result<(Tensor, bool)> {
    match image.rank() {
        3 => {
            let s = image.shape();
            Ok((image.reshaped(&[1, s[0], s[1], s[2]])?, true))
        }
        4 => {
            if image.shape()[0] != 1 {
                return Err(Error::shape(
                    "network input",
                    "batch = 1",
                    format!("{:?}", image.shape()),
                ));
            }
            Ok((image.clone(), false))
        }
        r => Err(Error::shape(
            "network input",
            "rank-3 (3, H, W) image",
            format!("rank-{}", r),
        )),
    }
}

pub(crate) fn forward(cp: &Checkpoint, x: &Tensor) -> Result<(Tensor, Trace)> {
    let (_, c, h, w) = x.dims4();
    cp.config.ensure_input_shape(c, h, w)?;
    let stages = cp.config.num_stages();

    let mut enc_in = Vec::with_capacity(stages);
    let mut enc_pre = Vec::with_capacity(stages);
    let mut cur = x.clone();
    for s in 1..=stages {
        let name = format!("enc{s}");
        let pre = ops::conv2d(&cur, cp.kernel(&name), cp.bias(&name), 2, 1)?;
        let out = ops::relu(&pre);
        enc_in.push(cur);
        enc_pre.push(pre);
        cur = out;
    }
    let deep = cur;
    let neck_pre = ops::conv2d(&deep, cp.kernel("neck"), cp.bias("neck"), 1, 1)?;
    let neck_out = ops::relu(&neck_pre);

    let mut d = ops::conv2d(
        &neck_out,
        cp.kernel("score_final"),
        cp.bias("score_final"),
        1,
        0,
    )?;
    for s in (1..stages).rev() {
        let up = ops::bilinear_upsample(&d, 2)?;
        d = if cp.config.skip_stages.contains(&s) {
            let name = format!("skip{s}");
            // enc_in[s] is relu(enc_pre[s-1]), the stage-s features
            let scored = ops::conv2d(&enc_in[s], cp.kernel(&name), cp.bias(&name), 1, 0)?;
            ops::add(&up, &scored)?
        } else {
            up
        };
    }
    let logits = ops::bilinear_upsample(&d, 2)?;

    Ok((
        logits,
        Trace {
            enc_in,
            enc_pre,
            deep,
            neck_pre,
            neck_out,
        },
    ))
}

/// Backpropagates `upstream` (gradient w.r.t. the logits) to the input and,
/// when requested, to every parameter.
pub(crate) fn backward(
    cp: &Checkpoint,
    trace: &Trace,
    upstream: &Tensor,
    want_param_grads: bool,
) -> Result<LayerGradients> {
    let stages = cp.config.num_stages();
    let mut param_grads: Vec<(String, Tensor)> = Vec::new();
    let mut push_conv_grads = |name: &str, lg: &mut LayerGradients| {
        for (pname, g) in lg.param_grads.drain(..) {
            param_grads.push((format!("{name}.{pname}"), g));
        }
    };

    // Decoder, unwound in reverse: logits <- up <- (add skip) <- ... <- score.
    let mut skip_input_grads: Vec<Option<Tensor>> = vec![None; stages];
    let mut g = ops::bilinear_upsample_backward(
        &decoder_shape(cp, trace, 1),
        upstream,
        2,
    )?;
    for s in 1..stages {
        if cp.config.skip_stages.contains(&s) {
            let name = format!("skip{s}");
            let mut lg = ops::conv2d_backward(
                &trace.enc_in[s],
                cp.kernel(&name),
                cp.bias(&name),
                &g,
                1,
                0,
                want_param_grads,
            )?;
            push_conv_grads(&name, &mut lg);
            skip_input_grads[s] = Some(lg.input_grad);
        }
        g = ops::bilinear_upsample_backward(&decoder_shape(cp, trace, s + 1), &g, 2)?;
    }

    let mut lg = ops::conv2d_backward(
        &trace.neck_out,
        cp.kernel("score_final"),
        cp.bias("score_final"),
        &g,
        1,
        0,
        want_param_grads,
    )?;
    push_conv_grads("score_final", &mut lg);

    let g_neck_pre = ops::relu_backward(&trace.neck_pre, &lg.input_grad)?;
    let mut lg = ops::conv2d_backward(
        &trace.deep,
        cp.kernel("neck"),
        cp.bias("neck"),
        &g_neck_pre,
        1,
        1,
        want_param_grads,
    )?;
    push_conv_grads("neck", &mut lg);

    // Encoder chain, deepest stage first; fold in skip contributions.
    let mut g_e = lg.input_grad;
    for s in (1..=stages).rev() {
        let g_pre = ops::relu_backward(&trace.enc_pre[s - 1], &g_e)?;
        let name = format!("enc{s}");
        let mut lg = ops::conv2d_backward(
            &trace.enc_in[s - 1],
            cp.kernel(&name),
            cp.bias(&name),
            &g_pre,
            2,
            1,
            want_param_grads,
        )?;
        push_conv_grads(&name, &mut lg);
        g_e = lg.input_grad;
        if s >= 2 {
            if let Some(sg) = &skip_input_grads[s - 1] {
                g_e = ops::add(&g_e, sg)?;
            }
        }
    }

    Ok(LayerGradients {
        input_grad: g_e,
        param_grads,
    })
}

/// Shape of the decoder activation at stage `s` (resolution H / 2^s).
fn decoder_shape(cp: &Checkpoint, trace: &Trace, s: usize) -> Vec<usize> {
    let (_, _, h, w) = trace.enc_in[0].dims4();
    vec![1, cp.config.num_classes, h >> s, w >> s]
}

/// Argmax over the leading class axis of (C, H, W) scores, lowest class
/// index winning ties. Invariant under adding any constant to all scores of
/// a pixel.
pub fn argmax_labels(scores: &Tensor) -> Result<LabelMap> {
    let (n, c, h, w) = scores.dims4();
    if n != 1 || c == 0 {
        return Err(Error::shape(
            "argmax_labels",
            "(C, H, W) scores",
            format!("{:?}", scores.shape()),
        ));
    }
    let plane = h * w;
    let d = scores.data();
    let mut labels = vec![0u8; plane];
    for pix in 0..plane {
        let mut best = (d[pix], 0u8);
        for ch in 1..c {
            let v = d[ch * plane + pix];
            if v > best.0 {
                best = (v, ch as u8);
            }
        }
        labels[pix] = best.1;
    }
    LabelMap::new(h, w, labels)
}

fn softmax_chw(logits: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = logits.dims4();
    let plane = h * w;
    let z = logits.data();
    let mut p = vec![0.0f32; c * plane];
    for pix in 0..plane {
        let mut zmax = f32::NEG_INFINITY;
        for ch in 0..c {
            zmax = zmax.max(z[ch * plane + pix]);
        }
        let mut denom = 0.0f32;
        for ch in 0..c {
            let e = (z[ch * plane + pix] - zmax).exp();
            p[ch * plane + pix] = e;
            denom += e;
        }
        for ch in 0..c {
            p[ch * plane + pix] /= denom;
        }
    }
    Tensor::new(&[c, h, w], p)
}

/// Full forward pass: per-pixel class probabilities and argmax labels.
pub fn predict(cp: &Checkpoint, image: &Tensor) -> Result<Prediction> {
    let (batched, _) = as_batch(image)?;
    let (logits, _) = forward(cp, &batched)?;
    logits.ensure_finite("network logits")?;
    let probs = softmax_chw(&logits)?;
    let labels = argmax_labels(&probs)?;
    Ok(Prediction { probs, labels })
}

/// Keep-mask of the confidence threshold: 0 where the pixel is already
/// predicted as its target class with probability above `tau`, else 1.
/// `tau = 1.0` disables masking (probabilities never exceed 1).
pub fn tau_keep_mask(probs: &Tensor, target: &LabelMap, tau: f32) -> Result<Tensor> {
    let (n, c, h, w) = probs.dims4();
    if n != 1 || target.height() != h || target.width() != w {
        return Err(Error::shape(
            "tau_keep_mask",
            format!("(C, {}, {}) probabilities", target.height(), target.width()),
            format!("{:?}", probs.shape()),
        ));
    }
    target.ensure_classes(c)?;
    let plane = h * w;
    let d = probs.data();
    let mask = Tensor::from_fn(&[h, w], |pix| {
        let t = target.data()[pix] as usize;
        if d[t * plane + pix] > tau {
            0.0
        } else {
            1.0
        }
    });
    Ok(mask)
}

/// Weighted spatial cross-entropy of the network output at `image` against
/// `target`, with the given per-pixel weights (no tau masking).
pub fn loss_with_weights(
    cp: &Checkpoint,
    image: &Tensor,
    target: &LabelMap,
    pixel_weights: &Tensor,
) -> Result<f32> {
    let (batched, _) = as_batch(image)?;
    let (logits, _) = forward(cp, &batched)?;
    Ok(ops::softmax_xent_map(&logits, target, pixel_weights)?.0)
}

/// Gradient of the weighted spatial cross-entropy w.r.t. `image`, with no
/// tau masking applied. Returns the loss alongside the gradient.
pub fn input_gradient_with_weights(
    cp: &Checkpoint,
    image: &Tensor,
    target: &LabelMap,
    pixel_weights: &Tensor,
) -> Result<(f32, Tensor)> {
    let (batched, squeeze) = as_batch(image)?;
    let (logits, trace) = forward(cp, &batched)?;
    let (loss, dlogits) = ops::softmax_xent_map(&logits, target, pixel_weights)?;
    let grads = backward(cp, &trace, &dlogits, false)?;
    let g = if squeeze {
        let s = grads.input_grad.shape().to_vec();
        grads.input_grad.reshaped(&s[1..])?
    } else {
        grads.input_grad
    };
    Ok((loss, g))
}

/// Gradient of the masked, weighted loss w.r.t. the input image.
///
/// Per-pixel loss terms are zeroed where the pixel is already predicted as
/// its target class with probability above `tau`; the mask is recomputed
/// from the forward pass at `image` on every call.
pub fn input_gradient(
    cp: &Checkpoint,
    image: &Tensor,
    target: &LabelMap,
    pixel_weights: &Tensor,
    tau: f32,
) -> Result<Tensor> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tau must lie in (0, 1], got {tau}"
        )));
    }
    let (batched, squeeze) = as_batch(image)?;
    let (logits, trace) = forward(cp, &batched)?;
    let probs = softmax_chw(&logits)?;
    let mask = tau_keep_mask(&probs, target, tau)?;
    let eff_weights = pixel_weights.reshaped(&[mask.len()])?.zip_map(
        &mask.reshaped(&[mask.len()])?,
        |w, m| w * m,
    )?;
    let eff_weights = eff_weights.reshaped(mask.shape())?;
    let (_, dlogits) = ops::softmax_xent_map(&logits, target, &eff_weights)?;
    let grads = backward(cp, &trace, &dlogits, false)?;
    let g = if squeeze {
        let s = grads.input_grad.shape().to_vec();
        grads.input_grad.reshaped(&s[1..])?
    } else {
        grads.input_grad
    };
    Ok(g)
}

/// Per-sample loss and parameter gradients on the unweighted loss; the
/// training step.
pub(crate) fn param_gradients(
    cp: &Checkpoint,
    image: &Tensor,
    target: &LabelMap,
) -> Result<(f32, Vec<(String, Tensor)>)> {
    let (batched, _) = as_batch(image)?;
    let (logits, trace) = forward(cp, &batched)?;
    let (h, w) = (target.height(), target.width());
    let weights = Tensor::filled(&[h, w], 1.0);
    let (loss, dlogits) = ops::softmax_xent_map(&logits, target, &weights)?;
    let grads = backward(cp, &trace, &dlogits, true)?;
    Ok((loss, grads.param_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            stage_widths: vec![4, 6],
            skip_stages: vec![1],
        }
    }

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0f32..1.0))
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = build_model(&cfg, 9).unwrap();
        let b = build_model(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = build_model(&cfg, 10).unwrap();
        assert!(
            a.params()
                .iter()
                .zip(c.params())
                .any(|((_, ta), (_, tb))| ta != tb),
            "different seeds must differ somewhere"
        );
    }

    #[test]
    fn forward_on_zero_input_is_finite() {
        let cp = build_model(&tiny_config(), 1).unwrap();
        let x = Tensor::zeros(&[3, 8, 8]);
        let pred = predict(&cp, &x).unwrap();
        pred.probs.ensure_finite("probs").unwrap();
    }

    #[test]
    fn probabilities_sum_to_one_per_pixel() {
        let cp = build_model(&tiny_config(), 2).unwrap();
        let pred = predict(&cp, &rand_image(8, 8, 3)).unwrap();
        let (_, c, h, w) = pred.probs.dims4();
        let plane = h * w;
        for pix in 0..plane {
            let s: f32 = (0..c).map(|ch| pred.probs.data()[ch * plane + pix]).sum();
            assert!((s - 1.0).abs() <= 1e-5, "pixel {} sums to {}", pix, s);
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let cp = build_model(&tiny_config(), 4).unwrap();
        let x = rand_image(8, 8, 5);
        let a = predict(&cp, &x).unwrap();
        let b = predict(&cp, &x).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn rejects_non_divisible_input() {
        let cp = build_model(&tiny_config(), 4).unwrap();
        let x = Tensor::zeros(&[3, 10, 8]);
        assert!(predict(&cp, &x).is_err());
    }

    #[test]
    fn argmax_invariant_under_per_pixel_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scores = Tensor::from_fn(&[4, 5, 5], |_| rng.random_range(-2.0f32..2.0));
        let base = argmax_labels(&scores).unwrap();
        let plane = 25;
        let shifted = Tensor::from_fn(&[4, 5, 5], |i| {
            scores.data()[i] + ((i % plane) as f32 * 0.37 - 1.0)
        });
        assert_eq!(argmax_labels(&shifted).unwrap(), base);
    }

    #[test]
    fn input_gradient_matches_finite_differences_with_frozen_mask() {
        let cp = build_model(&tiny_config(), 7).unwrap();
        let x = rand_image(16, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = LabelMap::new(16, 16, (0..256).map(|_| rng.random_range(0..3u8)).collect())
            .unwrap();
        let weights = Tensor::from_fn(&[16, 16], |_| rng.random_range(0.2f32..1.0));
        let tau = 0.75;

        // Freeze the mask at x, then check the masked loss's gradient.
        let pred = predict(&cp, &x).unwrap();
        let probs_b = pred.probs.reshaped(&[1, 3, 16, 16]).unwrap();
        let mask = tau_keep_mask(&probs_b, &target, tau).unwrap();
        let eff = weights.zip_map(&mask, |w, m| w * m).unwrap();

        let analytic = input_gradient(&cp, &x, &target, &weights, tau).unwrap();
        let err = grad_check(
            |xx| loss_with_weights(&cp, xx, &target, &eff),
            &analytic,
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "masked input gradient err {}", err);
    }

    #[test]
    fn fully_confident_target_zeroes_gradient() {
        // target = prediction and tau below every winning probability
        let cp = build_model(&tiny_config(), 11).unwrap();
        let x = rand_image(8, 8, 12);
        let pred = predict(&cp, &x).unwrap();
        // pick tau below the minimum predicted max-probability so every
        // pixel is masked
        let (_, c, h, w) = pred.probs.dims4();
        let plane = h * w;
        let mut min_top = f32::INFINITY;
        for pix in 0..plane {
            let top = (0..c)
                .map(|ch| pred.probs.data()[ch * plane + pix])
                .fold(f32::NEG_INFINITY, f32::max);
            min_top = min_top.min(top);
        }
        let tau = (min_top * 0.9).max(1e-3);
        let weights = Tensor::filled(&[h, w], 1.0);
        let g = input_gradient(&cp, &x, &pred.labels, &weights, tau).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tau_one_disables_masking() {
        let cp = build_model(&tiny_config(), 13).unwrap();
        let x = rand_image(8, 8, 14);
        let pred = predict(&cp, &x).unwrap();
        let weights = Tensor::filled(&[8, 8], 1.0);
        let masked = input_gradient(&cp, &x, &pred.labels, &weights, 1.0).unwrap();
        let (_, unmasked) =
            input_gradient_with_weights(&cp, &x, &pred.labels, &weights).unwrap();
        assert_eq!(masked, unmasked);
    }

    #[test]
    fn uniform_unmasked_gradient_equals_plain_composition() {
        // input_gradient with uniform weights and tau = 1 must equal the
        // gradient of the unweighted loss computed through the public
        // forward + softmax_xent_map + backward pieces.
        let cp = build_model(&tiny_config(), 15).unwrap();
        let x = rand_image(8, 8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let target =
            LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
        let weights = Tensor::filled(&[8, 8], 1.0);

        let via_api = input_gradient(&cp, &x, &target, &weights, 1.0).unwrap();

        let batched = x.reshaped(&[1, 3, 8, 8]).unwrap();
        let (logits, trace) = forward(&cp, &batched).unwrap();
        let (_, dlogits) = ops::softmax_xent_map(&logits, &target, &weights).unwrap();
        let composed = backward(&cp, &trace, &dlogits, false)
            .unwrap()
            .input_grad
            .reshaped(&[3, 8, 8])
            .unwrap();
        assert_eq!(via_api, composed);
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let cp = build_model(&tiny_config(), 19).unwrap();
        let x = rand_image(8, 8, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let target =
            LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
        let (_, grads) = param_gradients(&cp, &x, &target).unwrap();

        // check a couple of parameters end to end through the whole net
        for name in ["enc1.kernel", "skip1.bias", "score_final.kernel", "neck.bias"] {
            let (_, analytic) = grads.iter().find(|(n, _)| n == name).unwrap();
            let base = cp
                .params()
                .iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .clone();
            let weights = Tensor::filled(&[8, 8], 1.0);
            let err = grad_check(
                |p| {
                    let mut probe = cp.clone();
                    let slot = probe
                        .params
                        .iter_mut()
                        .find(|(n, _)| n == name)
                        .unwrap();
                    slot.1 = p.clone();
                    loss_with_weights(&probe, &x, &target, &weights)
                },
                analytic,
                &base,
                1e-3,
            )
            .unwrap();
            assert!(err <= 1e-3, "{} grad err {}", name, err);
        }
    }
}
