//! Adversarial target segmentations.
//!
//! A *static* target is one fixed label map forced onto every input. A
//! *dynamic* target keeps the model's own prediction but removes one class
//! `o`, filling the hole with the label of the nearest background pixel
//! under squared-Euclidean distance. Ties are broken by smallest row, then
//! smallest column, so the fill is exactly reproducible.

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

/// Partition of the pixel grid into the hidden-class set `I_o` and the
/// background set `I_bg`, relative to a prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelPartition {
    height: usize,
    width: usize,
    source_class: u8,
    is_o: Vec<bool>,
    o_count: usize,
}

impl PixelPartition {
    /// Splits `pred` into `I_o = {(i,j) : pred_ij = o}` and its complement.
    pub fn from_prediction(pred: &LabelMap, o: u8) -> Self {
        let is_o: Vec<bool> = pred.data().iter().map(|&c| c == o).collect();
        let o_count = is_o.iter().filter(|&&b| b).count();
        PixelPartition {
            height: pred.height(),
            width: pred.width(),
            source_class: o,
            is_o,
            o_count,
        }
    }

    pub fn source_class(&self) -> u8 {
        self.source_class
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn is_target(&self, row: usize, col: usize) -> bool {
        self.is_o[row * self.width + col]
    }

    #[inline]
    pub fn is_background(&self, row: usize, col: usize) -> bool {
        !self.is_o[row * self.width + col]
    }

    pub fn target_count(&self) -> usize {
        self.o_count
    }

    pub fn background_count(&self) -> usize {
        self.is_o.len() - self.o_count
    }

    /// Per-row sorted column lists of background pixels.
    fn background_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.height];
        for row in 0..self.height {
            for col in 0..self.width {
                if self.is_background(row, col) {
                    rows[row].push(col);
                }
            }
        }
        rows
    }
}

/// How a target segmentation was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    Static,
    Dynamic,
}

/// A target label map plus, for dynamic targets, the partition it came from.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub target: LabelMap,
    pub partition: Option<PixelPartition>,
    pub mode: TargetMode,
}

/// Freezes a prediction as the target for every subsequent input.
pub fn static_target(pred_t0: &LabelMap) -> TargetSpec {
    TargetSpec {
        target: pred_t0.clone(),
        partition: None,
        mode: TargetMode::Static,
    }
}

/// Nearest background column to `col` within a sorted column list; ties pick
/// the smaller column.
fn nearest_col(cols: &[usize], col: usize) -> Option<(usize, usize)> {
    if cols.is_empty() {
        return None;
    }
    let idx = cols.partition_point(|&c| c < col);
    let mut best: Option<(usize, usize)> = None; // (dist2, col)
    if idx < cols.len() {
        let c = cols[idx];
        let d = c - col;
        best = Some((d * d, c));
    }
    if idx > 0 {
        let c = cols[idx - 1];
        let d = col - c;
        let cand = (d * d, c);
        best = Some(match best {
            // the left candidate has the smaller column, so it wins ties
            Some(b) if b.0 < cand.0 => b,
            _ => cand,
        });
    }
    best
}

fn nearest_in_rows(
    rows: &[Vec<usize>],
    row: usize,
    col: usize,
) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None; // (dist2, row, col)
    for (r, cols) in rows.iter().enumerate() {
        let dr = r.abs_diff(row);
        let dr2 = dr * dr;
        if let Some(b) = best {
            // rows are scanned in ascending order, so a tie keeps the
            // earlier (smaller) row; only strict improvements replace it
            if dr2 > b.0 {
                continue;
            }
        }
        if let Some((dc2, c)) = nearest_col(cols, col) {
            let d = dr2 + dc2;
            match best {
                Some(b) if b.0 <= d => {}
                _ => best = Some((d, r, c)),
            }
        }
    }
    best.map(|(_, r, c)| (r, c))
}

/// The background pixel minimizing `(i'-i)^2 + (j'-j)^2`, ties broken by
/// smallest row then smallest column. A background pixel maps to itself.
pub fn nearest_background_index(
    partition: &PixelPartition,
    row: usize,
    col: usize,
) -> Result<(usize, usize)> {
    if partition.background_count() == 0 {
        return Err(Error::EmptyBackground);
    }
    let rows = partition.background_rows();
    Ok(nearest_in_rows(&rows, row, col).expect("non-empty background"))
}

/// Builds the dynamic target: `pred` with class `o` removed and each removed
/// pixel replaced by the prediction at its nearest background pixel.
pub fn dynamic_target(pred: &LabelMap, o: u8) -> Result<TargetSpec> {
    let partition = PixelPartition::from_prediction(pred, o);
    if partition.background_count() == 0 {
        return Err(Error::EmptyBackground);
    }
    let mut target = pred.clone();
    if partition.target_count() > 0 {
        let rows = partition.background_rows();
        for row in 0..pred.height() {
            for col in 0..pred.width() {
                if partition.is_target(row, col) {
                    let (r, c) = nearest_in_rows(&rows, row, col).expect("non-empty background");
                    target.set(row, col, pred.get(r, c));
                }
            }
        }
    }
    Ok(TargetSpec {
        target,
        partition: Some(partition),
        mode: TargetMode::Dynamic,
    })
}

/// Per-pixel least-likely labels under the given class probabilities
/// (C, H, W); ties pick the lowest class index. Used as an adversarial
/// target by the least-likely-method baseline.
pub fn least_likely_target(probs: &Tensor) -> Result<TargetSpec> {
    let (n, c, h, w) = probs.dims4();
    if n != 1 || c < 2 {
        return Err(Error::shape(
            "least_likely_target",
            "(C >= 2, H, W) probabilities",
            format!("{:?}", probs.shape()),
        ));
    }
    let plane = h * w;
    let d = probs.data();
    let mut labels = vec![0u8; plane];
    for pix in 0..plane {
        let mut best = (f32::INFINITY, 0u8);
        for ch in 0..c {
            let p = d[ch * plane + pix];
            if p < best.0 {
                best = (p, ch as u8);
            }
        }
        labels[pix] = best.1;
    }
    Ok(TargetSpec {
        target: LabelMap::new(h, w, labels)?,
        partition: None,
        mode: TargetMode::Static,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive O(|I_o| * |I_bg|) oracle with the documented tie-break:
    /// scan background pixels in row-major order, keep strict improvements.
    fn brute_force_nearest(part: &PixelPartition, row: usize, col: usize) -> (usize, usize) {
        let mut best: Option<(usize, usize, usize)> = None;
        for r in 0..part.height() {
            for c in 0..part.width() {
                if part.is_background(r, c) {
                    let d = r.abs_diff(row).pow(2) + c.abs_diff(col).pow(2);
                    match best {
                        Some(b) if b.0 <= d => {}
                        _ => best = Some((d, r, c)),
                    }
                }
            }
        }
        let b = best.expect("non-empty background");
        (b.1, b.2)
    }

    fn map_from(rows: &[&[u8]]) -> LabelMap {
        let h = rows.len();
        let w = rows[0].len();
        LabelMap::new(h, w, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn static_target_copies_prediction() {
        let pred = map_from(&[&[0, 1], &[2, 3]]);
        let t = static_target(&pred);
        assert_eq!(t.target, pred);
        assert_eq!(t.mode, TargetMode::Static);
        assert!(t.partition.is_none());
    }

    #[test]
    fn dynamic_without_o_pixels_is_identity() {
        let pred = map_from(&[&[0, 1], &[1, 0]]);
        let t = dynamic_target(&pred, 4).unwrap();
        assert_eq!(t.target, pred);
        assert_eq!(t.partition.as_ref().unwrap().target_count(), 0);
    }

    #[test]
    fn unanimous_neighborhood_fills_center() {
        let pred = map_from(&[&[1, 1, 1], &[1, 4, 1], &[1, 1, 1]]);
        let t = dynamic_target(&pred, 4).unwrap();
        assert_eq!(t.target.get(1, 1), 1);
        assert_eq!(t.target.count_class(4), 0);
    }

    #[test]
    fn fill_takes_row_major_smallest_on_ties() {
        // center pixel is o; (0,1) and (1,0) are both at distance 1.
        // smallest row wins: the (0,1) label must be used.
        let pred = map_from(&[&[1, 2, 1], &[3, 4, 3], &[1, 3, 1]]);
        let t = dynamic_target(&pred, 4).unwrap();
        assert_eq!(t.target.get(1, 1), 2);
    }

    #[test]
    fn background_pixel_maps_to_itself() {
        let pred = map_from(&[&[0, 4], &[4, 4]]);
        let part = PixelPartition::from_prediction(&pred, 4);
        assert_eq!(nearest_background_index(&part, 0, 0).unwrap(), (0, 0));
    }

    #[test]
    fn single_background_pixel_always_wins() {
        let pred = map_from(&[&[4, 4, 4], &[4, 2, 4], &[4, 4, 4]]);
        let part = PixelPartition::from_prediction(&pred, 4);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(nearest_background_index(&part, r, c).unwrap(), (1, 1));
            }
        }
    }

    #[test]
    fn all_o_image_is_an_error() {
        let pred = LabelMap::filled(4, 4, 4);
        assert!(matches!(dynamic_target(&pred, 4), Err(Error::EmptyBackground)));
        let part = PixelPartition::from_prediction(&pred, 4);
        assert!(nearest_background_index(&part, 0, 0).is_err());
    }

    #[test]
    fn five_by_five_blob_matches_brute_force() {
        // two different background classes adjacent to an o-blob
        let pred = map_from(&[
            &[1, 1, 2, 2, 2],
            &[1, 4, 4, 4, 2],
            &[1, 4, 4, 4, 2],
            &[1, 4, 4, 4, 2],
            &[1, 1, 1, 2, 2],
        ]);
        let part = PixelPartition::from_prediction(&pred, 4);
        let t = dynamic_target(&pred, 4).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                if part.is_target(r, c) {
                    let (br, bc) = brute_force_nearest(&part, r, c);
                    assert_eq!(
                        nearest_background_index(&part, r, c).unwrap(),
                        (br, bc),
                        "pixel ({}, {})",
                        r,
                        c
                    );
                    assert_eq!(t.target.get(r, c), pred.get(br, bc));
                }
            }
        }
    }

    #[test]
    fn random_partitions_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..25 {
            let data: Vec<u8> = (0..16 * 16)
                .map(|_| if rng.random_bool(0.4) { 4 } else { rng.random_range(0..3u8) })
                .collect();
            let pred = LabelMap::new(16, 16, data).unwrap();
            let part = PixelPartition::from_prediction(&pred, 4);
            if part.background_count() == 0 {
                continue;
            }
            for r in 0..16 {
                for c in 0..16 {
                    assert_eq!(
                        nearest_background_index(&part, r, c).unwrap(),
                        brute_force_nearest(&part, r, c)
                    );
                }
            }
        }
    }

    #[test]
    fn dynamic_target_is_idempotent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let data: Vec<u8> = (0..12 * 12)
                .map(|_| if rng.random_bool(0.3) { 4 } else { rng.random_range(0..4u8) })
                .collect();
            let pred = LabelMap::new(12, 12, data).unwrap();
            let t1 = dynamic_target(&pred, 4).unwrap();
            assert_eq!(t1.target.count_class(4), 0);
            let t2 = dynamic_target(&t1.target, 4).unwrap();
            assert_eq!(t2.target, t1.target);
        }
    }

    #[test]
    fn filled_labels_come_from_background() {
        let pred = map_from(&[
            &[1, 1, 1, 1],
            &[1, 4, 4, 2],
            &[1, 4, 4, 2],
            &[3, 3, 2, 2],
        ]);
        let t = dynamic_target(&pred, 4).unwrap();
        let part = t.partition.as_ref().unwrap();
        for r in 0..4 {
            for c in 0..4 {
                if part.is_target(r, c) {
                    let filled = t.target.get(r, c);
                    assert!(pred.data().iter().any(|&v| v == filled && v != 4));
                }
            }
        }
    }

    #[test]
    fn least_likely_picks_minimum_probability() {
        let probs = Tensor::new(
            &[1, 3, 1, 2],
            vec![
                0.5, 0.2, // class 0
                0.3, 0.2, // class 1 (tie with class 0 at pixel 1)
                0.2, 0.6, // class 2
            ],
        )
        .unwrap();
        let t = least_likely_target(&probs).unwrap();
        assert_eq!(t.target.get(0, 0), 2);
        // tie at pixel 1 between classes 0 and 1: lowest index wins
        assert_eq!(t.target.get(0, 1), 0);
    }
}
