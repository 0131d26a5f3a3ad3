//! Balanced contiguous row partitioning.

use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};

/// Splits `len` rows over `workers`: the first `len % workers` ranges get
/// `⌈len/workers⌉` rows, the rest `⌊len/workers⌋`. Ranges may be empty.
pub fn partition_rows(len: usize, workers: usize) -> Result<Vec<Range<usize>>> {
    if workers == 0 {
        return Err(Error::NoWorkers);
    }
    let (base, extra) = (len / workers, len % workers);
    let mut start = 0;
    Ok((0..workers)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect())
}

/// Query and key-value row ownership for one cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSpec {
    pub q_ranges: Vec<Range<usize>>,
    pub kv_ranges: Vec<Range<usize>>,
}

impl ShardSpec {
    pub fn balanced(s_q: usize, s_kv: usize, workers: usize) -> Result<Self> {
        Ok(Self { q_ranges: partition_rows(s_q, workers)?, kv_ranges: partition_rows(s_kv, workers)? })
    }

    pub fn workers(&self) -> usize {
        self.q_ranges.len()
    }

    pub fn q_rows(&self, worker: usize) -> usize {
        self.q_ranges[worker].len()
    }

    pub fn kv_rows(&self, worker: usize) -> usize {
        self.kv_ranges[worker].len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(len: usize, n: usize) -> Vec<usize> {
        partition_rows(len, n).unwrap().iter().map(|r| r.len()).collect()
    }

    #[test]
    fn documented_examples() {
        assert_eq!(sizes(10, 4), [3, 3, 2, 2]);
        assert_eq!(sizes(8, 4), [2, 2, 2, 2]);
        assert_eq!(sizes(2, 4), [1, 1, 0, 0]);
        assert_eq!(partition_rows(5, 0), Err(Error::NoWorkers));
    }

    proptest! {
        #[test]
        fn ranges_cover_exactly(len in 0usize..500, n in 1usize..20) {
            let r = partition_rows(len, n).unwrap();
            prop_assert_eq!(r.len(), n);
            prop_assert_eq!(r[0].start, 0);
            prop_assert_eq!(r[n - 1].end, len);
            for w in r.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            let max = r.iter().map(|x| x.len()).max().unwrap();
            let min = r.iter().map(|x| x.len()).min().unwrap();
            prop_assert!(max - min <= 1);
        }
    }
}
