//! Range-based attention mask.
//!
//! Each query's allowed key set is stored as a short sorted list of
//! inclusive index ranges. Under the versatile-attention rules a query's
//! set is the union of its causal prefix with at most one segment
//! extension, so the list stays tiny and the mask costs O(n) memory
//! instead of O(n²).

/// Per-query allowed key ranges (inclusive, sorted, non-overlapping).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    ranges: Vec<Vec<(usize, usize)>>,
}

impl AttentionMask {
    pub(crate) fn from_ranges(ranges: Vec<Vec<(usize, usize)>>) -> Self {
        AttentionMask { ranges }
    }

    /// Fully dense mask: every query sees every key (single-segment tests).
    pub fn all_allowed(n: usize) -> Self {
        AttentionMask { ranges: vec![vec![(0, n.saturating_sub(1))]; n] }
    }

    /// Number of queries.
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.ranges[query].iter().any(|&(s, e)| s <= key && key <= e)
    }

    /// Iterate allowed keys of one query in ascending order.
    pub fn allowed_iter(&self, query: usize) -> impl Iterator<Item = usize> + '_ {
        self.ranges[query].iter().flat_map(|&(s, e)| s..=e)
    }

    pub fn allowed_count(&self, query: usize) -> usize {
        self.ranges[query].iter().map(|&(s, e)| e - s + 1).sum()
    }

    pub fn ranges(&self, query: usize) -> &[(usize, usize)] {
        &self.ranges[query]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_queries() {
        let m = AttentionMask::from_ranges(vec![vec![(0, 0)], vec![(0, 1), (3, 4)]]);
        assert!(m.allows(0, 0));
        assert!(!m.allows(0, 1));
        assert!(m.allows(1, 3));
        assert!(!m.allows(1, 2));
        assert_eq!(m.allowed_iter(1).collect::<Vec<_>>(), vec![0, 1, 3, 4]);
        assert_eq!(m.allowed_count(1), 4);
    }
}
