//! Per-pixel class index maps.

use crate::error::{Error, Result};

/// Dense H×W map of class indices. Serves as ground truth, prediction, and
/// adversarial target alike.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "LabelMap::new",
                format!("{} labels for {}x{}", height * width, height, width),
                format!("{} labels", data.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Errors if any label is `>= num_classes`.
    pub fn ensure_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| (c as usize) >= num_classes) {
            Some(&c) => Err(Error::ClassOutOfRange {
                class: c,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Number of pixels assigned to `class`.
    pub fn count_class(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    pub fn same_dims(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(LabelMap::new(2, 3, vec![0; 5]).is_err());
    }

    #[test]
    fn ensure_classes_names_offender() {
        let m = LabelMap::new(1, 3, vec![0, 4, 1]).unwrap();
        let err = m.ensure_classes(3).unwrap_err();
        assert!(matches!(err, Error::ClassOutOfRange { class: 4, .. }));
        assert!(m.ensure_classes(5).is_ok());
    }

    #[test]
    fn count_class_counts() {
        let m = LabelMap::new(2, 2, vec![1, 0, 1, 1]).unwrap();
        assert_eq!(m.count_class(1), 3);
        assert_eq!(m.count_class(0), 1);
        assert_eq!(m.count_class(7), 0);
    }
}
