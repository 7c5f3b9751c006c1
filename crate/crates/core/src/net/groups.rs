use std::ops::Range;

use super::network::NetError;

/// Splits `units` decision units into `n` contiguous groups ordered by unit
/// index. The first `units % n` groups receive the extra element, so group
/// sizes differ by at most one.
pub fn group_partition(units: usize, n: usize) -> Result<Vec<Range<usize>>, NetError> {
    if n == 0 || n > units {
        return Err(NetError::InvalidGroupCount { units, n });
    }
    let base = units / n;
    let extra = units % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for g in 0..n {
        let len = base + usize::from(g < extra);
        out.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, units);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_all_units_in_order() {
        let parts = group_partition(10, 4).unwrap();
        assert_eq!(parts, vec![0..3, 3..6, 6..8, 8..10]);
    }

    #[test]
    fn exact_division() {
        let parts = group_partition(8, 4).unwrap();
        assert!(parts.iter().all(|r| r.len() == 2));
    }

    #[test]
    fn single_group_takes_everything() {
        let parts = group_partition(5, 1).unwrap();
        assert_eq!(parts, vec![0..5]);
    }

    #[test]
    fn invalid_counts_are_rejected() {
        assert!(matches!(group_partition(3, 0), Err(NetError::InvalidGroupCount { .. })));
        assert!(matches!(group_partition(3, 4), Err(NetError::InvalidGroupCount { .. })));
    }

    #[test]
    fn sizes_differ_by_at_most_one() {
        for units in 1..40 {
            for n in 1..=units {
                let parts = group_partition(units, n).unwrap();
                let sizes: Vec<usize> = parts.iter().map(|r| r.len()).collect();
                let max = *sizes.iter().max().unwrap();
                let min = *sizes.iter().min().unwrap();
                assert!(max - min <= 1);
                assert_eq!(sizes.iter().sum::<usize>(), units);
            }
        }
    }
}
