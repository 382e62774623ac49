use crate::error::{invalid, Result};

/// Per-pixel class ids in `(batch, height, width)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 {
            return Err(invalid("label map dimensions must be >= 1"));
        }
        if data.len() != batch * height * width {
            return Err(invalid(format!("label data has {} entries, expected {}", data.len(), batch * height * width)));
        }
        Ok(Self { batch, height, width, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u32 {
        self.data[(b * self.height + y) * self.width + x]
    }

    /// Fails if any id is outside `0..classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&id| id as usize >= classes) {
            Some(id) => Err(invalid(format!("label id {id} >= class count {classes}"))),
            None => Ok(()),
        }
    }

    pub fn concat(parts: &[LabelMap]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("cannot concatenate zero label maps"))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(invalid("label maps differ in spatial size"));
            }
            batch += p.batch;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { batch, height: first.height, width: first.width, data })
    }

    /// Pixel count per class.
    pub fn histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for &id in &self.data {
            if let Some(slot) = h.get_mut(id as usize) {
                *slot += 1;
            }
        }
        h
    }
}
