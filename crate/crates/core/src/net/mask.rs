/// Binary pruning decision per unit: `true` means pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruningMask {
    bits: Vec<bool>,
}

impl PruningMask {
    pub fn keep_all(units: usize) -> Self {
        Self { bits: vec![false; units] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_pruned(&self, unit: usize) -> bool {
        self.bits[unit]
    }

    pub fn set_pruned(&mut self, unit: usize, pruned: bool) {
        self.bits[unit] = pruned;
    }

    pub fn pruned_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn kept_count(&self) -> usize {
        self.len() - self.pruned_count()
    }

    /// Fraction of units pruned.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.pruned_count() as f64 / self.bits.len() as f64
        }
    }
}
