mod common;

use common::{fedavg_degeneracy_gaps, ladder_pool, World};
use hetfed::algorithms::{build_strategy, sample_clients, AlgorithmParams, Arm, Level, StrategyId};

#[test]
fn full_capacity_width_methods_reduce_to_fedavg() {
    for (strategy, gap) in fedavg_degeneracy_gaps() {
        assert!(gap <= 1e-9, "{strategy}: gap {gap:e}");
    }
}

#[test]
fn shallow_depthfl_clients_leave_deeper_layers_alone() {
    let w = World::new(4);
    let p = ladder_pool(StrategyId::Depthfl, Level::Depth, w.base, 8);
    let shallowest = vec![p.entries.len() - 1; 4];
    let f = w.fed(&p, &shallowest, AlgorithmParams::default(), false);
    let mut s = build_strategy(Arm::new(StrategyId::Depthfl, Level::Depth), &f).unwrap();
    let before = s.global_model().unwrap().clone();
    s.run_round(&f, &[0, 1, 2, 3], 0).unwrap();
    let after = s.global_model().unwrap();
    let shape = before.shape().clone();
    let mut reached = vec![0];
    reached.extend(shape.block_layers(0));
    let (n0, h0) = shape.exit_layers(0);
    reached.extend([n0, h0]);
    for l in 0..before.layers().len() {
        let same = before.layers()[l] == after.layers()[l];
        assert_eq!(same, !reached.contains(&l), "layer {l}");
    }
}

#[test]
fn uploads_match_pool_payloads() {
    let w = World::new(6);
    for strategy in StrategyId::ALL {
        let level = strategy.level().unwrap_or(Level::Width);
        let p = ladder_pool(strategy, level, w.base, 8);
        let assignment: Vec<usize> = (0..6).map(|k| k % p.entries.len()).collect();
        let f = w.fed(&p, &assignment, AlgorithmParams::default(), true);
        let mut s = build_strategy(Arm::new(strategy, level), &f).unwrap();
        for t in 0..2 {
            let out = s.run_round(&f, &[0, 1, 2, 3, 4, 5], t).unwrap();
            for u in &out.uploads {
                let want = f.variant(u.client).comm_payload_bytes;
                assert_eq!(u.exchanged_numbers as f64 * 8.0, want, "{strategy} client {}", u.client);
            }
        }
        let eval = s.evaluate(&f).unwrap();
        assert_eq!(eval.per_client.len(), 6);
        assert!((0.0..=1.0).contains(&eval.global_accuracy));
    }
}

#[test]
fn parallel_and_sequential_rounds_agree_bitwise() {
    let w = World::new(6);
    for strategy in [StrategyId::Fjord, StrategyId::Depthfl, StrategyId::Fedet] {
        let level = strategy.level().unwrap();
        let p = ladder_pool(strategy, level, w.base, 8);
        let assignment: Vec<usize> = (0..6).map(|k| k % p.entries.len()).collect();
        let run = |parallel: bool| {
            let f = w.fed(&p, &assignment, AlgorithmParams::default(), parallel);
            let mut s = build_strategy(Arm::new(strategy, level), &f).unwrap();
            for t in 0..3 {
                s.run_round(&f, &sample_clients(6, 0.5, f.seed, t), t).unwrap();
            }
            (s.global_model().map(|m| m.flat_params()), s.evaluate(&f).unwrap().per_client)
        };
        assert_eq!(run(true), run(false), "{strategy}");
    }
}
