//! Random small feeders for oracle comparisons.

use microgrid_reconfig::grid::{DgSpec, FeederModel, LineSpec, NodeId, NodeSpec, Phase};
use microgrid_reconfig::reconfig::CostSpec;
use microgrid_reconfig::scenario::{
    sample_bounds, CorrelationModel, ForecastErrorSpec, NetInjectionBounds,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub model: FeederModel,
    pub bounds: NetInjectionBounds,
    pub cost: CostSpec,
    pub lambda: f64,
}

/// A connected feeder on 3..=6 nodes with at most `max_switch` switchable lines.
pub fn random_feeder(rng: &mut ChaCha8Rng, max_switch: usize) -> FeederModel {
    let phases: Vec<Phase> = if rng.random_bool(0.5) {
        vec![Phase::A]
    } else {
        Phase::ALL.to_vec()
    };
    let n = rng.random_range(3..=6u32);
    let mut nodes = vec![NodeSpec::new(1, &phases)];
    for id in 2..=n {
        let mut node = NodeSpec::new(id, &phases);
        for &ph in &phases {
            if rng.random_bool(0.6) {
                node = node.with_load(ph, rng.random_range(5e3..40e3), rng.random_range(0.0..10e3));
            }
        }
        if rng.random_bool(0.25) {
            let unity_pf = rng.random_bool(0.5);
            let q = if unity_pf { 0.0 } else { 5e3 };
            node = node.with_dg(DgSpec {
                p_min: 0.0,
                p_max: rng.random_range(5e3..30e3),
                q_min: -q,
                q_max: q,
                cost_coeff: rng.random_range(0.2..1.5),
                unity_pf,
            });
        }
        nodes.push(node);
    }
    if nodes
        .iter()
        .skip(1)
        .all(|nd| nd.load.iter().all(|s| s.norm() == 0.0))
    {
        nodes[1] = nodes[1].clone().with_load(phases[0], 10e3, 2e3);
    }
    let mut lines = Vec::new();
    let mut edges = Vec::new();
    for id in 2..=n {
        let parent = rng.random_range(1..id);
        edges.push((parent, id));
    }
    let extra = rng.random_range(1..=3);
    for _ in 0..extra {
        let a = rng.random_range(1..=n);
        let b = rng.random_range(1..=n);
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a.min(b), a.max(b)));
        }
    }
    let k = edges.len();
    let mut switchable: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        switchable.swap(i, j);
    }
    let n_sw = rng.random_range(1..=max_switch.min(k));
    switchable.truncate(n_sw);
    for (i, &(a, b)) in edges.iter().enumerate() {
        let r = rng.random_range(0.1..0.8);
        let x = rng.random_range(0.05..0.5);
        let mut line = LineSpec::uniform(a, b, &phases, r, x, rng.random_range(60.0..200.0));
        if switchable.contains(&i) {
            line = line.switchable(rng.random_range(0.5..2.0));
        }
        lines.push(line);
    }
    FeederModel::new(nodes, lines, 2400.0, NodeId(1), rng.random_range(0.5..1.5))
        .expect("generated feeder is valid")
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_switch: usize) -> Instance {
    let model = random_feeder(rng, max_switch);
    let spec = ForecastErrorSpec::from_fractions(&model, 0.1, 0.2, rng.random_range(0.0..0.1));
    let bounds = sample_bounds(
        &model,
        &spec,
        &CorrelationModel::Independent,
        50,
        rng.random(),
    )
    .unwrap();
    let cost = match rng.random_range(0..3) {
        0 => CostSpec::loss(),
        1 => CostSpec::weighted(1.0, 0.01),
        _ => CostSpec::weighted(1.0, 0.1),
    };
    let lambda = [0.0, 1.0, 10.0, 50.0, 200.0][rng.random_range(0..5)];
    Instance {
        model,
        bounds,
        cost,
        lambda,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
