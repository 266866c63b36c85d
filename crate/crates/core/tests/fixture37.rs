use std::path::Path;

use microgrid_reconfig::admm::PartitionDoc;
use microgrid_reconfig::feeder_file::parse_feeder;
use microgrid_reconfig::grid::{is_radial, FeederModel};
use microgrid_reconfig::reconfig::{assemble, CostSpec};
use microgrid_reconfig::scenario::NetInjectionBounds;

fn load(name: &str) -> String {
    std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("fixtures")
            .join(name),
    )
    .unwrap()
}

fn feeder() -> FeederModel {
    parse_feeder(&load("feeder37.toml")).unwrap()
}

#[test]
fn added_lines_and_switches() {
    let m = feeder();
    assert_eq!(m.nodes().len(), 36);
    assert_eq!(m.lines().len(), 43);
    assert_eq!(m.switchable_lines().len(), 17);
    // Config 724 resistance per mile on the diagonal, scaled by length.
    let added = [
        ((8, 14), 1144.0, 1.2936),
        ((6, 20), 1320.0, 2.0952),
        ((10, 16), 847.0, 2.0952),
        ((20, 26), 815.0, 2.0952),
        ((16, 24), 1580.0, 2.0952),
        ((10, 17), 1137.0, 2.0952),
        ((24, 33), 1315.0, 2.0952),
        ((26, 35), 377.0, 2.0952),
    ];
    for ((a, b), ft, r_mile) in added {
        let l = &m.lines()[m.line_position(a, b).unwrap()];
        assert!(l.switchable);
        assert_eq!(l.phases.len(), 3);
        let expect = ft / 5280.0 * r_mile;
        assert!((l.z[(0, 0)].re - expect).abs() < 1e-12, "{a}-{b}");
    }
}

#[test]
fn all_closed_is_meshed_and_ratings_as_declared() {
    let m = feeder();
    assert!(!is_radial(&m, &vec![true; m.lines().len()]));
    for l in m.lines() {
        let expect = match (l.from.0, l.to.0) {
            (1, 2) => 300.0,
            (2, 3) | (3, 17) => 150.0,
            _ => 100.0,
        };
        assert_eq!(l.i_max, expect, "{}", l.label());
    }
    assert_eq!(m.dg_count(), 7);
    assert_eq!(m.line_phase_count(), 129);
}

#[test]
fn one_group_per_switchable_line() {
    let m = feeder();
    let p = assemble(
        &m,
        &NetInjectionBounds::forecast(&m),
        &CostSpec::weighted(1.0, 1.0),
        200.0,
    )
    .unwrap();
    let groups = &p.program.groups;
    assert_eq!(groups.len(), 17);
    for (g, l) in groups.iter().zip(m.switchable_lines()) {
        assert_eq!(g.indices.len(), 6);
        assert_eq!(g.weight, 200.0 * m.lines()[l].weight);
    }
}

#[test]
fn three_area_partition() {
    let m = feeder();
    let part = PartitionDoc::parse(&load("partition3.toml"))
        .unwrap()
        .to_partition(&m)
        .unwrap();
    assert_eq!(part.lac_count(), 3);
    let ties: Vec<String> = part
        .ties
        .iter()
        .map(|t| m.lines()[t.line].label())
        .collect();
    for want in [(8, 14), (8, 11), (15, 16)] {
        let label = m.lines()[m.line_position(want.0, want.1).unwrap()].label();
        assert!(ties.contains(&label), "{label} not in {ties:?}");
    }
}
