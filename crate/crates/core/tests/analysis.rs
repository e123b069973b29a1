use num_rational::Ratio;

use twobp::analysis::{
    bubble_ratio_analytic, bubble_ratio_from_timeline, peak_memory, simulate_timeline, BubbleReport, CostModel,
    MemoryModel, RankCosts,
};
use twobp::schedule::{generate_schedule, ScheduleConfig, ScheduleKind};

fn sim(kind: ScheduleKind, n: usize, two_bp: bool, cost: &CostModel) -> twobp::analysis::Timeline {
    simulate_timeline(&generate_schedule(&ScheduleConfig::new(kind, n, two_bp)).unwrap(), cost).unwrap()
}

#[test]
fn simulated_equals_analytic_for_every_rank_count() {
    for kind in ScheduleKind::BASE {
        for n in 1..=16 {
            for two_bp in [false, true] {
                let t = sim(kind, n, two_bp, &CostModel::unit(n));
                assert_eq!(
                    bubble_ratio_from_timeline(&t).unwrap(),
                    bubble_ratio_analytic(kind, n, two_bp).unwrap(),
                    "{kind} N={n} 2bp={two_bp}"
                );
            }
        }
    }
}

#[test]
fn two_bp_never_lengthens_the_step() {
    for kind in ScheduleKind::BASE {
        for n in 1..=16 {
            let cost = CostModel::unit(n);
            let (a, b) = (sim(kind, n, false, &cost), sim(kind, n, true, &cost));
            assert!(b.makespan() <= a.makespan(), "{kind} N={n}");
            if n >= 2 {
                assert!(bubble_ratio_from_timeline(&b).unwrap() < bubble_ratio_from_timeline(&a).unwrap());
            }
        }
    }
}

#[test]
fn events_on_a_rank_never_overlap() {
    let cost = CostModel::uniform(4, RankCosts { t_f: 2, t_b1: 3, t_b2: 1 }, 1);
    let t = sim(ScheduleKind::OneFOneB2, 4, true, &cost);
    for r in 0..4 {
        let ev: Vec<_> = t.events.iter().filter(|e| e.rank == r).collect();
        assert!(ev.windows(2).all(|w| w[1].start >= w[0].end));
    }
    let report = BubbleReport::from_timeline(&t).unwrap();
    let exact = bubble_ratio_from_timeline(&t).unwrap();
    assert!((report.bubble_ratio - (*exact.numer() as f64 / *exact.denom() as f64)).abs() < 1e-12);
    assert_eq!(report.busy.len(), 4);
    for (b, i) in report.busy.iter().zip(&report.idle) {
        assert!((b + i - report.makespan).abs() < 1e-9);
    }
}

#[test]
fn uneven_costs_shift_the_gain() {
    // cheap backward-p2 leaves less to hide in the bubbles
    let gain = |t_b2| {
        let cost = CostModel::uniform(4, RankCosts { t_f: 2, t_b1: 2, t_b2 }, 0);
        Ratio::new(
            sim(ScheduleKind::OneFOneB1, 4, false, &cost).makespan() as i64,
            sim(ScheduleKind::OneFOneB1, 4, true, &cost).makespan() as i64,
        )
    };
    assert!(gain(1) < gain(2));
    assert!(gain(1) >= Ratio::from_integer(1));
}

#[test]
fn memeff_peak_is_between_plain_and_non_2bp() {
    for p in [2, 4, 8] {
        let peaks = |kind, two_bp| {
            peak_memory(&generate_schedule(&ScheduleConfig::new(kind, p, two_bp)).unwrap(), &MemoryModel::hold_all(p))
                .unwrap()
        };
        let none = peaks(ScheduleKind::OneFOneB2, false).interm_deriv[p - 1];
        let plain = peaks(ScheduleKind::OneFOneB2, true).interm_deriv[p - 1];
        let eff = peaks(ScheduleKind::OneFOneB2MemEff, true).interm_deriv[p - 1];
        assert_eq!(none, Ratio::from_integer(0));
        assert!(none < eff && eff < plain, "P={p}: {none} {eff} {plain}");
    }
}

#[test]
fn counters_drain_by_the_flush() {
    for kind in ScheduleKind::ALL {
        for rho in [Ratio::from_integer(0), Ratio::new(1, 2), Ratio::from_integer(1)] {
            let s = generate_schedule(&ScheduleConfig::new(kind, 4, true)).unwrap();
            assert!(peak_memory(&s, &MemoryModel::uniform(4, rho)).is_ok(), "{kind} rho={rho}");
        }
    }
}
