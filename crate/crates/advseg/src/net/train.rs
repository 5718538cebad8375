//! Plain mini-batch SGD on the unweighted spatial cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{param_gradients, Checkpoint};
use crate::scene::Sample;

const BATCH: usize = 8;

/// Trains a copy of `model` for `epochs` passes over `dataset` and returns
/// it with updated metadata. Deterministic given `seed`: the shuffle order
/// and the in-batch reduction order are fixed.
pub fn train(
    model: &Checkpoint,
    dataset: &[Sample],
    epochs: usize,
    lr: f32,
    seed: u64,
) -> Result<Checkpoint> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training dataset is empty".into()));
    }
    let mut cp = model.clone();
    if epochs == 0 {
        return Ok(cp);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut last_epoch_loss = f32::NAN;

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;

        for batch in order.chunks(BATCH) {
            let per_sample: Vec<_> = batch
                .par_iter()
                .map(|&i| param_gradients(&cp, &dataset[i].image, &dataset[i].truth))
                .collect::<Result<_>>()?;

            // fixed-order reduction keeps the update deterministic
            let mut iter = per_sample.into_iter();
            let (first_loss, mut acc) = iter.next().expect("non-empty batch");
            epoch_loss += first_loss as f64;
            for (loss, grads) in iter {
                epoch_loss += loss as f64;
                for (slot, (name, g)) in acc.iter_mut().zip(grads.iter()) {
                    debug_assert_eq!(&slot.0, name);
                    slot.1.add_scaled(g, 1.0)?;
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for (_, g) in &mut acc {
                g.scale(scale);
            }
            cp.apply_update(&acc, lr)?;
        }

        last_epoch_loss = (epoch_loss / dataset.len() as f64) as f32;
        if !last_epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: last_epoch_loss,
            });
        }
    }

    cp.meta.epochs += epochs as u32;
    cp.meta.seed = seed;
    cp.meta.final_loss = Some(last_epoch_loss);
    Ok(cp)
}

/// Mean training-set loss of the model (unweighted, no masking).
pub fn mean_loss(model: &Checkpoint, dataset: &[Sample]) -> Result<f32> {
    use crate::net::loss_with_weights;
    use crate::tensor::Tensor;
    let mut total = 0.0f64;
    for s in dataset {
        let (h, w) = (s.truth.height(), s.truth.width());
        let weights = Tensor::filled(&[h, w], 1.0);
        total += loss_with_weights(model, &s.image, &s.truth, &weights)? as f64;
    }
    Ok((total / dataset.len() as f64) as f32)
}

/// Fraction of pixels predicted correctly over a dataset.
pub fn pixel_accuracy(model: &Checkpoint, dataset: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in dataset {
        let pred = crate::net::predict(model, &s.image)?;
        correct += pred
            .labels
            .data()
            .iter()
            .zip(s.truth.data())
            .filter(|(a, b)| a == b)
            .count();
        total += s.truth.len();
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_model, ModelConfig};
    use crate::scene::{generate_dataset, SceneSpec};

    fn tiny_setup() -> (Checkpoint, Vec<Sample>) {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            ..SceneSpec::default()
        };
        let data = generate_dataset(&spec, 12).unwrap();
        let cfg = ModelConfig {
            num_classes: 5,
            stage_widths: vec![4, 8],
            skip_stages: vec![1],
        };
        (build_model(&cfg, 3).unwrap(), data)
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let (cp, data) = tiny_setup();
        let same = train(&cp, &data, 0, 0.1, 1).unwrap();
        assert_eq!(same, cp);
    }

    #[test]
    fn training_reduces_loss() {
        let (cp, data) = tiny_setup();
        let before = mean_loss(&cp, &data).unwrap();
        let trained = train(&cp, &data, 10, 0.3, 1).unwrap();
        let after = mean_loss(&trained, &data).unwrap();
        assert!(
            after < before,
            "loss should drop: before {} after {}",
            before,
            after
        );
        assert_eq!(trained.meta.epochs, 10);
        assert!(trained.meta.final_loss.is_some());
    }

    #[test]
    fn fixed_seed_reproduces_final_loss_bitwise() {
        let (cp, data) = tiny_setup();
        let a = train(&cp, &data, 4, 0.2, 7).unwrap();
        let b = train(&cp, &data, 4, 0.2, 7).unwrap();
        assert_eq!(
            a.meta.final_loss.unwrap().to_bits(),
            b.meta.final_loss.unwrap().to_bits()
        );
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_rejected() {
        let (cp, _) = tiny_setup();
        assert!(train(&cp, &[], 1, 0.1, 0).is_err());
    }
}
