use std::ops::Range;

/// Split of `m` stacked detections into consecutive per-view runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    counts: Vec<usize>,
    offsets: Vec<usize>,
}

impl Partition {
    pub fn new(counts: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &c in &counts {
            acc += c;
            offsets.push(acc);
        }
        Self { counts, offsets }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_views(&self) -> usize {
        self.counts.len()
    }

    /// Total number of detections.
    pub fn m(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Global row range of view `v`.
    pub fn range(&self, v: usize) -> Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }

    pub fn global(&self, view: usize, index: usize) -> usize {
        self.offsets[view] + index
    }

    /// `(view, index_in_view)` of a global row.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let v = self.offsets.partition_point(|&o| o <= global) - 1;
        (v, global - self.offsets[v])
    }

    /// View of every global row.
    pub fn view_labels(&self) -> Vec<usize> {
        (0..self.n_views()).flat_map(|v| std::iter::repeat_n(v, self.counts[v])).collect()
    }

    /// Mean detections per view (zero when there are no views).
    pub fn mean_count(&self) -> f64 {
        if self.counts.is_empty() {
            0.0
        } else {
            self.m() as f64 / self.counts.len() as f64
        }
    }
}
