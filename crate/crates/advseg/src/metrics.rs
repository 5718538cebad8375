//! Attack evaluation: success rate, hidden/preserved rates, IoU, and
//! cross-model transfer.
//!
//! Dataset-level rates are pixel-pooled (summed numerators over summed
//! denominators); per-image values are also reported for diagnostics.

use rayon::prelude::*;

use crate::attacks::{apply, Perturbation};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::net::{predict, Checkpoint};
use crate::scene::Sample;

fn ensure_same_dims(a: &LabelMap, b: &LabelMap, context: &'static str) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::shape(
            context,
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ))
    }
}

/// Fraction of pixels where the adversarial prediction equals the target:
/// the categorical accuracy between the two maps.
pub fn success_rate(pred_adv: &LabelMap, y_target: &LabelMap) -> Result<f64> {
    ensure_same_dims(pred_adv, y_target, "success_rate")?;
    let matched = pred_adv
        .data()
        .iter()
        .zip(y_target.data())
        .filter(|(a, b)| a == b)
        .count();
    Ok(matched as f64 / pred_adv.len() as f64)
}

/// Fraction of the pixels predicted as class `o` on the clean input that are
/// predicted as anything else on the adversarial input. `None` when the
/// clean prediction contains no `o` pixels.
pub fn hidden_rate(pred_clean: &LabelMap, pred_adv: &LabelMap, o: u8) -> Result<Option<f64>> {
    ensure_same_dims(pred_clean, pred_adv, "hidden_rate")?;
    let mut total = 0usize;
    let mut hidden = 0usize;
    for (c, a) in pred_clean.data().iter().zip(pred_adv.data()) {
        if *c == o {
            total += 1;
            if *a != o {
                hidden += 1;
            }
        }
    }
    Ok((total > 0).then(|| hidden as f64 / total as f64))
}

/// Categorical accuracy of the adversarial prediction against the clean
/// prediction, restricted to the clean background `I_bg` (pixels not
/// predicted as `o`). On `I_bg` the dynamic target equals the clean
/// prediction, so no fill is involved and no ground truth is consulted.
/// `None` when the background is empty.
pub fn background_preserved(
    pred_clean: &LabelMap,
    pred_adv: &LabelMap,
    o: u8,
) -> Result<Option<f64>> {
    ensure_same_dims(pred_clean, pred_adv, "background_preserved")?;
    let mut total = 0usize;
    let mut preserved = 0usize;
    for (c, a) in pred_clean.data().iter().zip(pred_adv.data()) {
        if *c != o {
            total += 1;
            if a == c {
                preserved += 1;
            }
        }
    }
    Ok((total > 0).then(|| preserved as f64 / total as f64))
}

/// Pooled per-class intersection/union counts over any number of prediction
/// pairs.
#[derive(Debug, Clone)]
pub struct IouAccumulator {
    intersection: Vec<u64>,
    pred_count: Vec<u64>,
    truth_count: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        IouAccumulator {
            intersection: vec![0; num_classes],
            pred_count: vec![0; num_classes],
            truth_count: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        ensure_same_dims(pred, truth, "IouAccumulator::add")?;
        let c = self.intersection.len();
        pred.ensure_classes(c)?;
        truth.ensure_classes(c)?;
        for (p, t) in pred.data().iter().zip(truth.data()) {
            self.pred_count[*p as usize] += 1;
            self.truth_count[*t as usize] += 1;
            if p == t {
                self.intersection[*p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for i in 0..self.intersection.len() {
            self.intersection[i] += other.intersection[i];
            self.pred_count[i] += other.pred_count[i];
            self.truth_count[i] += other.truth_count[i];
        }
    }

    /// Mean and per-class IoU; classes absent from both sides are `None` and
    /// excluded from the mean.
    pub fn iou(&self) -> (f64, Vec<Option<f64>>) {
        let mut per_class = Vec::with_capacity(self.intersection.len());
        let mut sum = 0.0f64;
        let mut present = 0usize;
        for i in 0..self.intersection.len() {
            let union = self.pred_count[i] + self.truth_count[i] - self.intersection[i];
            if union == 0 {
                per_class.push(None);
            } else {
                let v = self.intersection[i] as f64 / union as f64;
                per_class.push(Some(v));
                sum += v;
                present += 1;
            }
        }
        let mean = if present == 0 { 0.0 } else { sum / present as f64 };
        (mean, per_class)
    }
}

/// Class-wise intersection-over-union of a single prediction pair.
pub fn mean_iou(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.add(pred, truth)?;
    Ok(acc.iou())
}

/// What an evaluation compares adversarial predictions against.
#[derive(Debug, Clone)]
pub enum EvalTarget<'a> {
    /// One fixed target map for every image (success-rate protocol).
    Static(&'a LabelMap),
    /// Hide one class; measures hidden/preserved rates against the clean
    /// prediction of each image.
    HideClass(u8),
}

/// Per-image metric row.
#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub index: usize,
    pub success_rate: Option<f64>,
    pub hidden_rate: Option<f64>,
    pub background_preserved: Option<f64>,
    pub mean_iou: Option<f64>,
}

/// Pixel-pooled aggregate over a dataset.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub success_rate: Option<f64>,
    pub hidden_rate: Option<f64>,
    pub background_preserved: Option<f64>,
    pub mean_iou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub samples: usize,
}

/// Evaluation result: per-image rows plus the pooled aggregate.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: MetricsReport,
}

struct PerImageCounts {
    success: Option<(u64, u64)>,
    hidden: Option<(u64, u64)>,
    background: Option<(u64, u64)>,
    iou: IouAccumulator,
    miou: Option<f64>,
}

/// Evaluates a perturbation over a dataset. For every sample the adversarial
/// example is `clamp(x + tiled, 0, 1)`; metrics depend on the target kind.
/// The prediction mIoU against scene ground truth is always reported.
pub fn evaluate_perturbation(
    cp: &Checkpoint,
    pert: &Perturbation,
    samples: &[Sample],
    target: &EvalTarget,
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("evaluation dataset is empty".into()));
    }
    let num_classes = cp.config.num_classes;

    let rows: Vec<PerImageCounts> = samples
        .par_iter()
        .map(|s| -> Result<PerImageCounts> {
            let x_adv = apply(pert, &s.image)?;
            let pred_adv = predict(cp, &x_adv)?;

            let mut iou = IouAccumulator::new(num_classes);
            iou.add(&pred_adv.labels, &s.truth)?;
            let miou = Some(iou.iou().0);

            match target {
                EvalTarget::Static(t) => {
                    ensure_same_dims(&pred_adv.labels, t, "evaluate_perturbation target")?;
                    let matched = pred_adv
                        .labels
                        .data()
                        .iter()
                        .zip(t.data())
                        .filter(|(a, b)| a == b)
                        .count() as u64;
                    Ok(PerImageCounts {
                        success: Some((matched, pred_adv.labels.len() as u64)),
                        hidden: None,
                        background: None,
                        iou,
                        miou,
                    })
                }
                EvalTarget::HideClass(o) => {
                    let pred_clean = predict(cp, &s.image)?;
                    let mut hid = (0u64, 0u64);
                    let mut bg = (0u64, 0u64);
                    for (c, a) in pred_clean.labels.data().iter().zip(pred_adv.labels.data()) {
                        if *c == *o {
                            hid.1 += 1;
                            if *a != *o {
                                hid.0 += 1;
                            }
                        } else {
                            bg.1 += 1;
                            if a == c {
                                bg.0 += 1;
                            }
                        }
                    }
                    Ok(PerImageCounts {
                        success: None,
                        hidden: (hid.1 > 0).then_some(hid),
                        background: (bg.1 > 0).then_some(bg),
                        iou,
                        miou,
                    })
                }
            }
        })
        .collect::<Result<_>>()?;

    let ratio = |num: u64, den: u64| num as f64 / den as f64;
    let mut per_image = Vec::with_capacity(rows.len());
    let mut success = (0u64, 0u64);
    let mut hidden = (0u64, 0u64);
    let mut background = (0u64, 0u64);
    let mut pooled_iou = IouAccumulator::new(num_classes);
    for (index, row) in rows.iter().enumerate() {
        per_image.push(ImageMetrics {
            index,
            success_rate: row.success.map(|(n, d)| ratio(n, d)),
            hidden_rate: row.hidden.map(|(n, d)| ratio(n, d)),
            background_preserved: row.background.map(|(n, d)| ratio(n, d)),
            mean_iou: row.miou,
        });
        if let Some((n, d)) = row.success {
            success.0 += n;
            success.1 += d;
        }
        if let Some((n, d)) = row.hidden {
            hidden.0 += n;
            hidden.1 += d;
        }
        if let Some((n, d)) = row.background {
            background.0 += n;
            background.1 += d;
        }
        pooled_iou.merge(&row.iou);
    }
    let (miou, per_class) = pooled_iou.iou();
    let aggregate = MetricsReport {
        success_rate: (success.1 > 0).then(|| ratio(success.0, success.1)),
        hidden_rate: (hidden.1 > 0).then(|| ratio(hidden.0, hidden.1)),
        background_preserved: (background.1 > 0).then(|| ratio(background.0, background.1)),
        mean_iou: Some(miou),
        per_class_iou: per_class,
        samples: samples.len(),
    };
    Ok(EvalOutcome {
        per_image,
        aggregate,
    })
}

/// Pooled mIoU of clean predictions against scene ground truth.
pub fn dataset_miou(cp: &Checkpoint, samples: &[Sample]) -> Result<(f64, Vec<Option<f64>>)> {
    let accs: Vec<IouAccumulator> = samples
        .par_iter()
        .map(|s| -> Result<IouAccumulator> {
            let pred = predict(cp, &s.image)?;
            let mut acc = IouAccumulator::new(cp.config.num_classes);
            acc.add(&pred.labels, &s.truth)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut pooled = IouAccumulator::new(cp.config.num_classes);
    for a in &accs {
        pooled.merge(a);
    }
    Ok(pooled.iou())
}

/// Cross-model transfer evaluation.
#[derive(Debug, Clone)]
pub struct TransferReport {
    /// Victim mIoU on clean inputs.
    pub miou_clean: f64,
    /// Victim mIoU on inputs perturbed with the (foreign) perturbation.
    pub miou_adv: f64,
    /// `miou_clean - miou_adv`: the untargeted damage.
    pub miou_drop: f64,
    /// Agreement with the static adversarial target, when one applies.
    pub targeted_success: Option<f64>,
    pub samples: usize,
}

/// Applies a perturbation generated on one model to another (or the same)
/// victim and reports untargeted damage and targeted success.
pub fn transfer_eval(
    pert: &Perturbation,
    victim: &Checkpoint,
    samples: &[Sample],
    static_target: Option<&LabelMap>,
) -> Result<TransferReport> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("evaluation dataset is empty".into()));
    }
    let (miou_clean, _) = dataset_miou(victim, samples)?;

    let parts: Vec<(IouAccumulator, u64, u64)> = samples
        .par_iter()
        .map(|s| -> Result<(IouAccumulator, u64, u64)> {
            let x_adv = apply(pert, &s.image)?;
            let pred_adv = predict(victim, &x_adv)?;
            let mut acc = IouAccumulator::new(victim.config.num_classes);
            acc.add(&pred_adv.labels, &s.truth)?;
            let (matched, total) = match static_target {
                Some(t) => {
                    ensure_same_dims(&pred_adv.labels, t, "transfer_eval target")?;
                    let m = pred_adv
                        .labels
                        .data()
                        .iter()
                        .zip(t.data())
                        .filter(|(a, b)| a == b)
                        .count() as u64;
                    (m, pred_adv.labels.len() as u64)
                }
                None => (0, 0),
            };
            Ok((acc, matched, total))
        })
        .collect::<Result<_>>()?;

    let mut pooled = IouAccumulator::new(victim.config.num_classes);
    let mut success = (0u64, 0u64);
    for (acc, m, t) in &parts {
        pooled.merge(acc);
        success.0 += m;
        success.1 += t;
    }
    let (miou_adv, _) = pooled.iou();
    Ok(TransferReport {
        miou_clean,
        miou_adv,
        miou_drop: miou_clean - miou_adv,
        targeted_success: (success.1 > 0).then(|| success.0 as f64 / success.1 as f64),
        samples: samples.len(),
    })
}
