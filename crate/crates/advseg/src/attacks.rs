//! Perturbation generators: FGSM, the iterative targeted attack, and the
//! universal tiled-perturbation optimizer.
//!
//! All iterative attacks share the same update: a sign-gradient step of size
//! `alpha` on the (weighted, tau-masked) spatial loss, followed by clipping
//! every entry of the perturbation to `[-epsilon, epsilon]`. Perturbed
//! inputs are clamped to the valid [0, 1] range only when a perturbation is
//! *applied*; during optimization the gradient is taken at the unclamped
//! `x + xi`, matching the update rule itself.

use rayon::prelude::*;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::net::{self, Checkpoint};
use crate::targets::{TargetMode, TargetSpec};
use crate::tensor::{ops, tnsr, Tensor};

/// Attack hyperparameters.
///
/// `epsilon` and `alpha` are expressed in input units ([0, 1] range), so the
/// conventional 0..255 pixel values map as `10 -> 10/255` and the one-pixel
/// step as `1/255`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Max-norm bound on the perturbation.
    pub epsilon: f32,
    /// Sign-gradient step size.
    pub alpha: f32,
    /// Number of optimizer iterations.
    pub iterations: usize,
    /// Confidence threshold: loss terms of pixels already predicted as their
    /// target class with probability above `tau` are silenced.
    pub tau: f32,
    /// Foreground/background loss weight; `None` means the unweighted loss.
    pub omega: Option<f32>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 10.0 / 255.0,
            alpha: 1.0 / 255.0,
            iterations: 60,
            tau: 0.75,
            omega: Some(0.9999),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        if let Some(w) = self.omega {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidConfig(format!(
                    "omega must lie in [0, 1], got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Sign with `sign(0) = 0`, so a silenced (all-masked) gradient leaves the
/// perturbation untouched.
#[inline]
pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps every entry to `[-epsilon, epsilon]`.
pub fn clip_eps(t: &Tensor, epsilon: f32) -> Tensor {
    t.map(|v| v.clamp(-epsilon, epsilon))
}

/// Builds the per-pixel loss weights for a target: `omega` on the hidden
/// class pixels and `1 - omega` on the background, or uniform 1 when
/// `omega` is absent. Static targets always use uniform weights.
fn loss_weights(target: &TargetSpec, omega: Option<f32>, h: usize, w: usize) -> Result<Tensor> {
    let uniform = || Tensor::filled(&[h, w], 1.0);
    let Some(omega) = omega else {
        return Ok(uniform());
    };
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidConfig(format!(
            "omega must lie in [0, 1], got {omega}"
        )));
    }
    match target.mode {
        TargetMode::Static => Ok(uniform()),
        TargetMode::Dynamic => {
            let part = target.partition.as_ref().ok_or_else(|| {
                Error::InvalidConfig(
                    "omega given but dynamic target carries no pixel partition".into(),
                )
            })?;
            if part.height() != h || part.width() != w {
                return Err(Error::shape(
                    "loss_weights partition",
                    format!("{}x{}", h, w),
                    format!("{}x{}", part.height(), part.width()),
                ));
            }
            Ok(Tensor::from_fn(&[h, w], |pix| {
                if part.is_target(pix / w, pix % w) {
                    omega
                } else {
                    1.0 - omega
                }
            }))
        }
    }
}

/// Gradient of the weighted, tau-masked loss at `x` for the given target.
pub fn weighted_loss_grad(
    cp: &Checkpoint,
    x: &Tensor,
    target: &TargetSpec,
    omega: Option<f32>,
    tau: f32,
) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4();
    let weights = loss_weights(target, omega, h, w)?;
    net::input_gradient(cp, x, &target.target, &weights, tau)
}

/// Single-step untargeted attack: `xi = epsilon * sign(grad_x J(f(x), y_true))`.
pub fn fgsm(cp: &Checkpoint, x: &Tensor, y_true: &LabelMap, epsilon: f32) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4();
    let weights = Tensor::filled(&[h, w], 1.0);
    let (_, grad) = net::input_gradient_with_weights(cp, x, y_true, &weights)?;
    grad.ensure_finite("fgsm gradient")?;
    Ok(grad.map(|g| epsilon * sign(g)))
}

/// Iterative targeted attack: `n` clipped sign-gradient descent steps on the
/// weighted loss toward `target`. Returns the perturbation `xi` with
/// `max|xi| <= epsilon`; the adversarial example is `clamp(x + xi, 0, 1)`.
pub fn iterative_targeted(
    cp: &Checkpoint,
    x: &Tensor,
    target: &TargetSpec,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    iterative_targeted_observed(cp, x, target, cfg, |_, _| {})
}

/// [`iterative_targeted`] with a per-iteration observer over the running
/// perturbation, for tracing and equivalence checks.
pub fn iterative_targeted_observed(
    cp: &Checkpoint,
    x: &Tensor,
    target: &TargetSpec,
    cfg: &AttackConfig,
    mut observer: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    cfg.validate()?;
    let mut xi = Tensor::zeros(x.shape());
    for iteration in 0..cfg.iterations {
        let x_pert = ops::add(x, &xi)?;
        let grad = weighted_loss_grad(cp, &x_pert, target, cfg.omega, cfg.tau)?;
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::AttackDiverged { iteration });
        }
        let stepped = xi.zip_map(&grad, |v, g| v - cfg.alpha * sign(g))?;
        xi = clip_eps(&stepped, cfg.epsilon);
        observer(iteration, &xi);
    }
    Ok(xi)
}

/// A proto-perturbation of size (3, tile_h, tile_w), tiled periodically over
/// an (image_h, image_w) canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub proto: Tensor,
    pub tile_h: usize,
    pub tile_w: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl Perturbation {
    pub fn zero(tile_h: usize, tile_w: usize, image_h: usize, image_w: usize) -> Result<Self> {
        let p = Perturbation {
            proto: Tensor::zeros(&[3, tile_h, tile_w]),
            tile_h,
            tile_w,
            image_h,
            image_w,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_h == 0
            || self.tile_w == 0
            || self.image_h % self.tile_h != 0
            || self.image_w % self.tile_w != 0
        {
            return Err(Error::InvalidConfig(format!(
                "tile {}x{} does not divide image {}x{}",
                self.tile_h, self.tile_w, self.image_h, self.image_w
            )));
        }
        let (_, c, h, w) = self.proto.dims4();
        if c != 3 || h != self.tile_h || w != self.tile_w {
            return Err(Error::shape(
                "Perturbation proto",
                format!("(3, {}, {})", self.tile_h, self.tile_w),
                format!("{:?}", self.proto.shape()),
            ));
        }
        Ok(())
    }

    /// Number of vertical tile repetitions.
    pub fn tiles_down(&self) -> usize {
        self.image_h / self.tile_h
    }

    /// Number of horizontal tile repetitions.
    pub fn tiles_across(&self) -> usize {
        self.image_w / self.tile_w
    }

    /// The full-image perturbation: the proto repeated periodically, so
    /// `tiled[i][j] = tiled[i + tile_h][j] = tiled[i][j + tile_w]`.
    pub fn tiled(&self) -> Tensor {
        let (h, w) = (self.image_h, self.image_w);
        let (th, tw) = (self.tile_h, self.tile_w);
        let p = self.proto.data();
        let mut out = Tensor::zeros(&[3, h, w]);
        let o = out.data_mut();
        for c in 0..3 {
            for i in 0..h {
                let p_row = &p[(c * th + i % th) * tw..(c * th + i % th) * tw + tw];
                let o_row = &mut o[(c * h + i) * w..(c * h + i) * w + w];
                for (j, v) in o_row.iter_mut().enumerate() {
                    *v = p_row[j % tw];
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f32 {
        self.proto.max_abs()
    }
}

/// Mean of the (tile_h, tile_w) blocks of a full-image (3, H, W) tensor:
/// the derivative of the tiled forward pass w.r.t. the proto, averaged over
/// tiles as in the tiled-gradient definition.
pub fn tile_mean(full: &Tensor, tile_h: usize, tile_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = full.dims4();
    if n != 1 || tile_h == 0 || tile_w == 0 || h % tile_h != 0 || w % tile_w != 0 {
        return Err(Error::InvalidConfig(format!(
            "tile {}x{} does not divide gradient {}x{}",
            tile_h, tile_w, h, w
        )));
    }
    let (r, s) = (h / tile_h, w / tile_w);
    let scale = 1.0 / (r * s) as f32;
    let d = full.data();
    let mut out = Tensor::zeros(&[c, tile_h, tile_w]);
    let o = out.data_mut();
    for ch in 0..c {
        for i in 0..tile_h {
            for j in 0..tile_w {
                let mut acc = 0.0f32;
                for br in 0..r {
                    for bs in 0..s {
                        acc += d[(ch * h + br * tile_h + i) * w + bs * tile_w + j];
                    }
                }
                o[(ch * tile_h + i) * tile_w + j] = acc * scale;
            }
        }
    }
    Ok(out)
}

/// Optimizes a universal proto-perturbation over a training set of
/// (image, target) pairs: each iteration averages the input gradient over
/// every image and every tile, then takes one clipped sign step.
pub fn universal_perturbation(
    cp: &Checkpoint,
    trainset: &[(Tensor, TargetSpec)],
    cfg: &AttackConfig,
    tile_h: usize,
    tile_w: usize,
) -> Result<Perturbation> {
    universal_perturbation_observed(cp, trainset, cfg, tile_h, tile_w, |_, _| {})
}

/// [`universal_perturbation`] with a per-iteration observer over the proto.
pub fn universal_perturbation_observed(
    cp: &Checkpoint,
    trainset: &[(Tensor, TargetSpec)],
    cfg: &AttackConfig,
    tile_h: usize,
    tile_w: usize,
    mut observer: impl FnMut(usize, &Tensor),
) -> Result<Perturbation> {
    cfg.validate()?;
    let Some((first, _)) = trainset.first() else {
        return Err(Error::InvalidConfig("universal train set is empty".into()));
    };
    let (_, _, h, w) = first.dims4();
    for (x, t) in trainset {
        let (_, _, xh, xw) = x.dims4();
        if (xh, xw) != (h, w) || t.target.height() != h || t.target.width() != w {
            return Err(Error::shape(
                "universal_perturbation train set",
                format!("images and targets of {}x{}", h, w),
                format!("{}x{} / {}x{}", xh, xw, t.target.height(), t.target.width()),
            ));
        }
    }
    let mut pert = Perturbation::zero(tile_h, tile_w, h, w)?;
    let inv_m = 1.0 / trainset.len() as f32;

    for iteration in 0..cfg.iterations {
        let full = pert.tiled();
        let per_image: Vec<Tensor> = trainset
            .par_iter()
            .map(|(x, t)| {
                let x_pert = ops::add(x, &full)?;
                weighted_loss_grad(cp, &x_pert, t, cfg.omega, cfg.tau)
            })
            .collect::<Result<_>>()?;

        // fixed-order reduction, then the tile average
        let mut mean = per_image[0].clone();
        for g in &per_image[1..] {
            mean.add_scaled(g, 1.0)?;
        }
        mean.scale(inv_m);
        if mean.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::AttackDiverged { iteration });
        }
        let tiled_grad = tile_mean(&mean, tile_h, tile_w)?;

        let stepped = pert
            .proto
            .zip_map(&tiled_grad, |v, g| v - cfg.alpha * sign(g))?;
        pert.proto = clip_eps(&stepped, cfg.epsilon);
        observer(iteration, &pert.proto);
    }
    Ok(pert)
}

/// Applies a perturbation: `clamp(x + tiled, 0, 1)`.
pub fn apply(pert: &Perturbation, x: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4();
    if c != 3 || h != pert.image_h || w != pert.image_w {
        return Err(Error::shape(
            "apply perturbation",
            format!("(3, {}, {})", pert.image_h, pert.image_w),
            format!("{:?}", x.shape()),
        ));
    }
    let tiled = pert.tiled().reshaped(x.shape())?;
    Ok(x.zip_map(&tiled, |a, b| (a + b).clamp(0.0, 1.0))?)
}

/// Provenance carried in a perturbation's sidecar file.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMeta {
    pub config: AttackConfig,
    pub mode: String,
    pub model_sha256: Option<String>,
    pub config_sha256: Option<String>,
}

fn meta_path(tnsr_path: &Path) -> PathBuf {
    tnsr_path.with_extension("meta")
}

/// Saves `<path>` (TNSR proto) plus a `<path with .meta>` text sidecar.
pub fn save_perturbation(
    path: impl AsRef<Path>,
    pert: &Perturbation,
    meta: &PerturbationMeta,
) -> Result<()> {
    let path = path.as_ref();
    pert.validate()?;
    tnsr::save_tnsr(path, &pert.proto)?;
    let mut w = BufWriter::new(File::create(meta_path(path))?);
    writeln!(w, "ADVSEG-PERT 1")?;
    writeln!(w, "epsilon = {}", meta.config.epsilon)?;
    writeln!(w, "alpha = {}", meta.config.alpha)?;
    writeln!(w, "iterations = {}", meta.config.iterations)?;
    writeln!(w, "tau = {}", meta.config.tau)?;
    match meta.config.omega {
        Some(o) => writeln!(w, "omega = {}", o)?,
        None => writeln!(w, "omega = none")?,
    }
    writeln!(w, "tile_h = {}", pert.tile_h)?;
    writeln!(w, "tile_w = {}", pert.tile_w)?;
    writeln!(w, "image_h = {}", pert.image_h)?;
    writeln!(w, "image_w = {}", pert.image_w)?;
    writeln!(w, "mode = {}", meta.mode)?;
    writeln!(w, "model_sha256 = {}", meta.model_sha256.as_deref().unwrap_or("-"))?;
    writeln!(w, "config_sha256 = {}", meta.config_sha256.as_deref().unwrap_or("-"))?;
    w.flush()?;
    Ok(())
}

/// Loads a perturbation and its sidecar, validating tiling and the epsilon
/// bound.
pub fn load_perturbation(path: impl AsRef<Path>) -> Result<(Perturbation, PerturbationMeta)> {
    let path = path.as_ref();
    let proto = tnsr::load_tnsr(path)?;
    let side = meta_path(path);
    let display = side.display().to_string();
    let file = BufReader::new(File::open(&side).map_err(|_| {
        Error::MissingArtifact(format!("perturbation sidecar {display}"))
    })?);

    let mut fields = std::collections::BTreeMap::new();
    let mut first = true;
    for line in file.lines() {
        let line = line?;
        if first {
            if line != "ADVSEG-PERT 1" {
                return Err(Error::Parse {
                    path: display,
                    field: "magic".into(),
                    message: format!("expected 'ADVSEG-PERT 1', got '{line}'"),
                });
            }
            first = false;
            continue;
        }
        if let Some((k, v)) = line.split_once(" = ") {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let get = |key: &str| -> Result<String> {
        fields.get(key).cloned().ok_or_else(|| Error::Parse {
            path: display.clone(),
            field: key.to_string(),
            message: "missing field".into(),
        })
    };
    let parse = |key: &str| -> Result<f32> {
        get(key)?.parse::<f32>().map_err(|e| Error::Parse {
            path: display.clone(),
            field: key.to_string(),
            message: e.to_string(),
        })
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?.parse::<usize>().map_err(|e| Error::Parse {
            path: display.clone(),
            field: key.to_string(),
            message: e.to_string(),
        })
    };

    let omega = match get("omega")?.as_str() {
        "none" => None,
        raw => Some(raw.parse::<f32>().map_err(|e| Error::Parse {
            path: display.clone(),
            field: "omega".into(),
            message: e.to_string(),
        })?),
    };
    let config = AttackConfig {
        epsilon: parse("epsilon")?,
        alpha: parse("alpha")?,
        iterations: parse_usize("iterations")?,
        tau: parse("tau")?,
        omega,
    };
    let opt = |key: &str| -> Result<Option<String>> {
        Ok(match get(key)?.as_str() {
            "-" => None,
            hex => Some(hex.to_string()),
        })
    };
    let pert = Perturbation {
        proto,
        tile_h: parse_usize("tile_h")?,
        tile_w: parse_usize("tile_w")?,
        image_h: parse_usize("image_h")?,
        image_w: parse_usize("image_w")?,
    };
    pert.validate()?;
    if pert.max_abs() > config.epsilon * (1.0 + 1e-6) {
        return Err(Error::Parse {
            path: display,
            field: "epsilon".into(),
            message: format!(
                "proto max-norm {} exceeds epsilon {}",
                pert.max_abs(),
                config.epsilon
            ),
        });
    }
    let meta = PerturbationMeta {
        config,
        mode: get("mode")?,
        model_sha256: opt("model_sha256")?,
        config_sha256: opt("config_sha256")?,
    };
    Ok((pert, meta))
}
