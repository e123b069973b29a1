use twobp::schedule::{
    generate_memeff_1f1b2, generate_schedule, parse_streams, validate_schedule, B2Mode, Instruction,
    InstructionStream, ScheduleConfig, ScheduleKind,
};
use Instruction::*;

fn gen(kind: ScheduleKind, p: usize, two_bp: bool) -> Vec<InstructionStream> {
    generate_schedule(&ScheduleConfig::new(kind, p, two_bp)).unwrap()
}

fn grid() -> Vec<ScheduleConfig> {
    let mut out = Vec::new();
    for kind in ScheduleKind::ALL {
        for p in [1, 2, 4, 8] {
            for two_bp in [false, true] {
                for mode in [B2Mode::Concat, B2Mode::Loop] {
                    let cfg = ScheduleConfig::new(kind, p, two_bp).with_b2_mode(mode);
                    if cfg.validate().is_ok() {
                        out.push(cfg);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn naive_single_rank() {
    let s = gen(ScheduleKind::Naive, 1, false);
    assert_eq!(
        s[0].instructions,
        vec![LoadInput(0), Forward(0), ComputeLoss(0), BackwardFull(0), OptimizerStep]
    );
}

#[test]
fn one_f_one_b_two_ranks_with_2bp() {
    let s = gen(ScheduleKind::OneFOneB1, 2, true);
    let last = &s[1].instructions;
    let f0 = last.iter().position(|i| *i == Forward(0)).unwrap();
    assert_eq!(last[f0 + 1..f0 + 3], [ComputeLoss(0), BackwardP1(0)]);
    let last_b1 = last.iter().position(|i| *i == BackwardP1(1)).unwrap();
    assert!(last[..last_b1].iter().all(|i| !matches!(i, BackwardP2 { .. })));

    let first = &s[0].instructions;
    let b1_0 = first.iter().position(|i| *i == BackwardP1(0)).unwrap();
    let b1_1 = first.iter().position(|i| *i == BackwardP1(1)).unwrap();
    let slots: Vec<_> = first[b1_0..b1_1]
        .iter()
        .filter(|i| matches!(i, BackwardP2 { .. }))
        .collect();
    assert_eq!(
        slots,
        vec![&BackwardP2 {
            micro_batches: vec![0],
            mode: B2Mode::Concat
        }]
    );
}

#[test]
fn gpipe_defers_every_backward_p2() {
    for stream in gen(ScheduleKind::GPipe, 4, true) {
        let tail = &stream.instructions[stream.len() - 3..];
        let b1 = if stream.rank == 0 { &tail[0] } else { &stream.instructions[stream.len() - 4] };
        assert_eq!(*b1, BackwardP1(3), "rank {}", stream.rank);
        assert_eq!(
            tail[1..],
            [
                BackwardP2 {
                    micro_batches: vec![0, 1, 2, 3],
                    mode: B2Mode::Concat
                },
                OptimizerStep
            ],
            "rank {}",
            stream.rank
        );
    }
}

#[test]
fn memeff_drains_first_half_midway() {
    let cfg = ScheduleConfig::new(ScheduleKind::OneFOneB2MemEff, 2, true);
    let s = generate_memeff_1f1b2(&cfg).unwrap();
    let last = &s[1].instructions;
    let drain = BackwardP2 {
        micro_batches: vec![0, 1],
        mode: B2Mode::Concat,
    };
    let at = last.iter().position(|i| *i == drain).unwrap();
    assert!(at < last.iter().position(|i| *i == Forward(2)).unwrap());
    assert_eq!(
        last[last.len() - 2],
        BackwardP2 {
            micro_batches: vec![2, 3],
            mode: B2Mode::Concat
        }
    );
    assert!(generate_memeff_1f1b2(&ScheduleConfig::new(ScheduleKind::OneFOneB2, 2, true)).is_err());
}

#[test]
fn whole_grid_validates() {
    for cfg in grid() {
        let s = generate_schedule(&cfg).unwrap();
        assert_eq!(s.len(), cfg.ranks);
        validate_schedule(&s).unwrap_or_else(|v| panic!("{cfg:?}: {v}"));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ScheduleConfig::new(ScheduleKind::OneFOneB1, 4, true).with_micro_batches(3),
        ScheduleConfig::new(ScheduleKind::OneFOneB2, 2, false).with_micro_batches(2),
        ScheduleConfig::new(ScheduleKind::Naive, 2, false).with_micro_batches(2),
        ScheduleConfig::new(ScheduleKind::OneFOneB2MemEff, 2, false),
        ScheduleConfig::new(ScheduleKind::GPipe, 0, false),
    ];
    for cfg in bad {
        assert!(generate_schedule(&cfg).is_err(), "{cfg:?}");
    }
    let gpipe_wide = ScheduleConfig::new(ScheduleKind::GPipe, 2, true).with_micro_batches(5);
    validate_schedule(&generate_schedule(&gpipe_wide).unwrap()).unwrap();
}

#[test]
fn work_is_conserved() {
    for cfg in grid() {
        let m = cfg.micro_batches;
        for s in generate_schedule(&cfg).unwrap() {
            let count = |f: &dyn Fn(&Instruction) -> bool| s.iter().filter(|i| f(i)).count();
            assert_eq!(count(&|i| matches!(i, Forward(_))), m);
            assert_eq!(count(&|i| matches!(i, BackwardP1(_) | BackwardFull(_))), m);
            let mut covered: Vec<usize> = s
                .iter()
                .filter_map(|i| match i {
                    BackwardP2 { micro_batches, .. } => Some(micro_batches.clone()),
                    _ => None,
                })
                .flatten()
                .collect();
            covered.sort_unstable();
            let expect: Vec<usize> = if cfg.two_bp { (0..m).collect() } else { Vec::new() };
            assert_eq!(covered, expect, "{cfg:?} rank {}", s.rank);
            assert_eq!(count(&|i| *i == OptimizerStep), 1);
            assert_eq!(s.instructions.last(), Some(&OptimizerStep));
        }
    }
}

#[test]
fn two_bp_only_rearranges_backward_work() {
    let movement = |s: &InstructionStream| -> Vec<Instruction> {
        s.iter()
            .filter(|i| {
                matches!(
                    i,
                    Forward(_) | SendAct(_) | RecvAct(_) | SendGrad(_) | RecvGrad(_) | LoadInput(_) | ComputeLoss(_)
                )
            })
            .cloned()
            .collect()
    };
    for kind in ScheduleKind::BASE {
        for p in [1, 2, 4, 8] {
            let plain = gen(kind, p, false);
            let split = gen(kind, p, true);
            for (a, b) in plain.iter().zip(&split) {
                assert_eq!(movement(a), movement(b), "{kind} P={p} rank {}", a.rank);
            }
        }
    }
}

#[test]
fn text_form_round_trips() {
    for cfg in grid() {
        let s = generate_schedule(&cfg).unwrap();
        let text: String = s.iter().map(|x| format!("{x}\n")).collect();
        assert_eq!(parse_streams(&text).unwrap(), s, "{text}");
    }
}

#[test]
fn text_form_golden() {
    let s = gen(ScheduleKind::OneFOneB1, 2, true);
    let text: Vec<String> = s.iter().map(ToString::to_string).collect();
    assert_eq!(
        text,
        vec![
            "rank 0: L0 F0 SA0 L1 F1 SA1 RG0 B1:0 B2:{0}c RG1 B1:1 B2:{1}c OPT",
            "rank 1: RA0 F0 LOSS0 B1:0 SG0 RA1 F1 LOSS1 B1:1 SG1 B2:{0,1}c OPT",
        ]
    );
}
