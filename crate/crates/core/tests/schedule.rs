use pppo::schedule::*;
use proptest::prelude::*;

fn report(step: u64, accuracy: f64) -> ValReport {
    ValReport { step, accuracy, k: 8, per_instance_correct: Vec::new() }
}

#[test]
fn scripted_trajectory_climbs_by_patience() {
    let mut s = ScheduleState::default();
    // One improving report, then flat forever.
    let accs = [0.30, 0.30, 0.29, 0.30, 0.28, 0.30, 0.30, 0.25, 0.30, 0.30, 0.30, 0.30, 0.30, 0.30, 0.30, 0.30];
    let mut trajectory = vec![s.eta()];
    let mut event_steps = Vec::new();
    for (i, &a) in accs.iter().enumerate() {
        let step = 5 * (i as u64 + 1);
        if let Some(e) = s.observe(&report(step, a)) {
            assert_eq!(e.old_eta, *trajectory.last().unwrap());
            trajectory.push(e.new_eta);
            event_steps.push(e.step);
        }
        assert!(s.eta() <= 0.35);
    }
    assert_eq!(trajectory, vec![0.15, 0.20, 0.25, 0.30, 0.35]);
    // Reports 2..4 are the first stagnant run, 5..7 the next, and so on.
    assert_eq!(event_steps, vec![20, 35, 50, 65]);
}

#[test]
fn improvement_resets_the_counter() {
    let mut s = ScheduleState::default();
    for (i, a) in [0.1, 0.1, 0.1, 0.2, 0.2, 0.2].into_iter().enumerate() {
        assert!(s.observe(&report(i as u64, a)).is_none());
    }
    assert_eq!(s.eta(), 0.15);
    assert_eq!(s.stagnant_count, 2);
    let next = update_eta(&s, &report(9, 0.2));
    assert_eq!(next.eta(), 0.20);
    assert_eq!(s.eta(), 0.15, "the pure form leaves its input alone");
}

#[test]
fn cap_holds() {
    let mut s = ScheduleState { level: 4, ..ScheduleState::default() };
    assert_eq!(s.eta(), 0.35);
    for i in 0..20 {
        assert!(s.observe(&report(i, 0.0)).is_none() || i == 0);
    }
    assert_eq!(s.eta(), 0.35);
}

#[test]
fn previous_comparison_reacts_to_drops_from_the_last_report() {
    let mut s = ScheduleState { comparison: Comparison::Previous, ..ScheduleState::default() };
    for (i, a) in [0.5, 0.2, 0.3, 0.25, 0.25, 0.24].into_iter().enumerate() {
        s.observe(&report(i as u64, a));
    }
    assert_eq!(s.eta(), 0.20);
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(ScheduleState::new(0.0, 0.05, 0.35, 3).is_err());
    assert!(ScheduleState::new(0.4, 0.05, 0.35, 3).is_err());
    assert!(ScheduleState::new(0.15, 0.05, 1.2, 3).is_err());
    assert!(ScheduleState::new(0.15, 0.05, 0.35, 0).is_err());
}

proptest! {
    #[test]
    fn eta_stays_on_the_grid(accs in prop::collection::vec(0.0f64..1.0, 0..80)) {
        let mut s = ScheduleState::default();
        let grid = [0.15, 0.20, 0.25, 0.30, 0.35];
        let mut prev = s.eta();
        for (i, a) in accs.into_iter().enumerate() {
            s.observe(&report(i as u64, a));
            prop_assert!(grid.contains(&s.eta()));
            prop_assert!(s.eta() >= prev);
            prev = s.eta();
        }
    }
}
