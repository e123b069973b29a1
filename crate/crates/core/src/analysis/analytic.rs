use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::schedule::ScheduleKind;

/// Closed-form bubble ratio of `kind` on `n` ranks under equal forward,
/// backward-p1 and backward-p2 costs.
pub fn bubble_ratio_analytic(kind: ScheduleKind, n: usize, two_bp: bool) -> Result<Ratio<i64>> {
    if n < 1 {
        return Err(Error::InvalidArgument("bubble ratio needs at least one rank".into()));
    }
    let n = n as i64;
    let idle = n - 1;
    let (num, den) = match (kind, two_bp) {
        (ScheduleKind::Naive, false) => (idle, n),
        (ScheduleKind::Naive, true) => (2 * idle, 2 * n + 1),
        (ScheduleKind::GPipe, false) => (idle, 2 * n - 1),
        (ScheduleKind::GPipe, true) => (2 * idle, 2 * idle + 3 * n),
        (ScheduleKind::OneFOneB1, false) => (idle, 2 * n - 1),
        (ScheduleKind::OneFOneB1, true) => (idle, idle + 3 * n),
        (ScheduleKind::OneFOneB2, false) => (idle, 3 * n - 1),
        (ScheduleKind::OneFOneB2, true) => (idle, idle + 6 * n),
        (ScheduleKind::OneFOneB2MemEff, _) => {
            return Err(Error::InvalidArgument(
                "no closed form for the memory-efficient 1f1b-2 variant; simulate it".into(),
            ))
        }
    };
    Ok(Ratio::new(num, den))
}

/// Throughput of the 2BP run relative to the baseline, from the two bubble
/// ratios: `(1 - with) / (1 - without)`.
pub fn throughput_gain(without: Ratio<i64>, with: Ratio<i64>) -> Result<Ratio<i64>> {
    let one = Ratio::from_integer(1);
    let zero = Ratio::from_integer(0);
    for r in [without, with] {
        if r < zero || r >= one {
            return Err(Error::InvalidArgument(format!("bubble ratio {r} outside [0, 1)")));
        }
    }
    Ok((one - with) / (one - without))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64, d: i64) -> Ratio<i64> {
        Ratio::new(n, d)
    }

    #[test]
    fn single_rank_has_no_bubble() {
        for kind in ScheduleKind::BASE {
            for two_bp in [false, true] {
                assert_eq!(bubble_ratio_analytic(kind, 1, two_bp).unwrap(), r(0, 1));
            }
        }
    }

    #[test]
    fn values_at_four_ranks() {
        use ScheduleKind::*;
        let expect = [
            (Naive, r(3, 4), r(2, 3), r(4, 3)),
            (GPipe, r(3, 7), r(1, 3), r(7, 6)),
            (OneFOneB1, r(3, 7), r(1, 5), r(7, 5)),
            (OneFOneB2, r(3, 11), r(1, 9), r(11, 9)),
        ];
        for (kind, a, b, gain) in expect {
            let got_a = bubble_ratio_analytic(kind, 4, false).unwrap();
            let got_b = bubble_ratio_analytic(kind, 4, true).unwrap();
            assert_eq!((got_a, got_b), (a, b), "{kind}");
            assert_eq!(throughput_gain(got_a, got_b).unwrap(), gain, "{kind}");
        }
        assert_eq!(bubble_ratio_analytic(OneFOneB2, 8, true).unwrap(), r(7, 55));
    }

    #[test]
    fn gain_edge_cases() {
        assert_eq!(throughput_gain(r(1, 3), r(1, 3)).unwrap(), r(1, 1));
        assert!(throughput_gain(r(1, 1), r(0, 1)).is_err());
        assert!(bubble_ratio_analytic(ScheduleKind::GPipe, 0, false).is_err());
        assert!(bubble_ratio_analytic(ScheduleKind::OneFOneB2MemEff, 4, true).is_err());
    }
}
