/// Carries the last observed value of each dimension forward. Leading
/// missing entries become 0; values under `mask == 0` are never read.
pub fn forward_fill(x: &[Vec<f64>], mask: &[Vec<u8>]) -> Vec<Vec<f64>> {
    let width = x.first().map(Vec::len).unwrap_or(0);
    let mut last = vec![0.0; width];
    x.iter()
        .zip(mask)
        .map(|(row, mrow)| {
            for (j, (&v, &m)) in row.iter().zip(mrow).enumerate() {
                if m == 1 {
                    last[j] = v;
                }
            }
            last.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn carries_forward() {
        let x = vec![vec![5.0], vec![f64::NAN], vec![-3.0]];
        let m = vec![vec![1], vec![0], vec![0]];
        assert_eq!(forward_fill(&x, &m), vec![vec![5.0], vec![5.0], vec![5.0]]);
    }

    #[test]
    fn fully_observed_is_identity() {
        let x = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let m = vec![vec![1, 1], vec![1, 1]];
        assert_eq!(forward_fill(&x, &m), x);
    }

    #[test]
    fn fully_missing_is_zero() {
        let x = vec![vec![7.0, 8.0], vec![9.0, 1.0]];
        let m = vec![vec![0, 0], vec![0, 0]];
        assert_eq!(forward_fill(&x, &m), vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    proptest! {
        #[test]
        fn idempotent(
            x in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..12),
            seed in proptest::collection::vec(0u8..2, 36),
        ) {
            let m: Vec<Vec<u8>> = (0..x.len()).map(|t| seed[t*3..t*3+3].to_vec()).collect();
            let once = forward_fill(&x, &m);
            let ones = vec![vec![1u8; 3]; x.len()];
            // filling the filled series again (now fully observed) changes nothing,
            // and neither does refilling with the original mask
            prop_assert_eq!(forward_fill(&once, &ones), once.clone());
            prop_assert_eq!(forward_fill(&once, &m), once);
        }
    }
}
