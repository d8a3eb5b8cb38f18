use std::ops::Range;

/// One named, contiguous slice of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub layer: String,
    pub param: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns, treating a vector as a single column.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn name(&self) -> String {
        format!("{}.{}", self.layer, self.param)
    }
}

/// Ordered map from named parameters to slices of one flat vector. Entries are
/// contiguous and cover `[0, total_len)` exactly.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total_len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry and returns its index.
    pub fn push(&mut self, layer: &str, param: &str, shape: &[usize]) -> usize {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "bad shape {shape:?}");
        let entry = LayoutEntry {
            layer: layer.to_string(),
            param: param.to_string(),
            shape: shape.to_vec(),
            offset: self.total_len,
        };
        self.total_len += entry.len();
        self.entries.push(entry);
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn get(&self, index: usize) -> &LayoutEntry {
        &self.entries[index]
    }

    pub fn find(&self, layer: &str, param: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.param == param)
    }

    /// True when entries tile `[0, total_len)` without gaps or overlaps.
    pub fn is_contiguous(&self) -> bool {
        let mut next = 0;
        for e in &self.entries {
            if e.offset != next {
                return false;
            }
            next += e.len();
        }
        next == self.total_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_tiles_contiguously() {
        let mut l = ParamLayout::new();
        l.push("a", "weight", &[3, 2]);
        l.push("a", "bias", &[3]);
        l.push("b", "weight", &[1, 3]);
        assert_eq!(l.total_len(), 12);
        assert!(l.is_contiguous());
        assert_eq!(l.find("a", "bias").unwrap().range(), 6..9);
        assert_eq!(l.get(2).name(), "b.weight");
    }
}
