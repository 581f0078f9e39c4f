use dynpset_core::harness::{replay_trace, run_scenario, shipped, SHIPPED};
use dynpset_core::psetop::OpState;

#[test]
fn shipped_scenarios_replay_clean() {
    for (name, _) in SHIPPED {
        let sc = shipped(name).unwrap();
        let out = run_scenario(&sc).unwrap_or_else(|e| panic!("{name}: {e}"));
        let report = replay_trace(&out.trace);
        assert!(report.is_pass(), "{name}: {report}");
        for op in &out.metrics.ops {
            assert!(
                matches!(op.state, OpState::Completed | OpState::Denied),
                "{name}: op {} left {:?}",
                op.op,
                op.state
            );
        }
        assert!(out.metrics.ticks < sc.horizon, "{name} hit its horizon");
    }
}

#[test]
fn empty_scenario_has_zero_utilization() {
    let mut sc = shipped("grow_add").unwrap();
    sc.jobs.clear();
    let out = run_scenario(&sc).unwrap();
    assert_eq!(out.metrics.occupied_slot_ticks, 0);
    assert_eq!(out.metrics.mean_utilization, 0.0);
    assert!(replay_trace(&out.trace).is_pass());
}
