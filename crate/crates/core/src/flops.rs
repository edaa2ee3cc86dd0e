use serde::{Deserialize, Serialize};

/// Where a multiply-accumulate is booked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlopCategory {
    Attention,
    TttUpdate,
    TttApply,
    Conv,
    Projection,
}

impl FlopCategory {
    pub const ALL: [FlopCategory; 5] = [
        FlopCategory::Attention,
        FlopCategory::TttUpdate,
        FlopCategory::TttApply,
        FlopCategory::Conv,
        FlopCategory::Projection,
    ];

    fn index(self) -> usize {
        match self {
            FlopCategory::Attention => 0,
            FlopCategory::TttUpdate => 1,
            FlopCategory::TttApply => 2,
            FlopCategory::Conv => 3,
            FlopCategory::Projection => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlopCategory::Attention => "attention",
            FlopCategory::TttUpdate => "ttt_update",
            FlopCategory::TttApply => "ttt_apply",
            FlopCategory::Conv => "conv",
            FlopCategory::Projection => "projection",
        }
    }
}

/// Running multiply-accumulate counts, partitioned by category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    counts: [u64; 5],
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, category: FlopCategory, macs: u64) {
        self.counts[category.index()] += macs;
    }

    pub fn get(&self, category: FlopCategory) -> u64 {
        self.counts[category.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts = [0; 5];
    }

    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &FlopCounter) -> FlopCounter {
        let mut out = FlopCounter::default();
        for i in 0..5 {
            out.counts[i] = self.counts[i] - earlier.counts[i];
        }
        out
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for i in 0..5 {
            self.counts[i] += other.counts[i];
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (FlopCategory, u64)> + '_ {
        FlopCategory::ALL.iter().map(move |&c| (c, self.get(c)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additive_and_resettable() {
        let mut c = FlopCounter::new();
        c.add(FlopCategory::Attention, 10);
        c.add(FlopCategory::Conv, 5);
        c.add(FlopCategory::Attention, 1);
        assert_eq!(c.get(FlopCategory::Attention), 11);
        assert_eq!(c.total(), 16);
        let snap = c;
        c.add(FlopCategory::TttApply, 4);
        assert_eq!(c.since(&snap).total(), 4);
        c.reset();
        assert_eq!(c.total(), 0);
    }
}
