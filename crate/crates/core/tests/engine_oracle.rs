mod common;

use nalgebra::DVector;
use common::*;
use zonoverify_core::engine::{expand, BranchItem};
use zonoverify_core::network::{Activation, Layer, Network};
use zonoverify_core::oracle::{exhaustive_reach_tiny, grid_falsify, Reachability};
use zonoverify_core::setlib::{FactorBox, HPolytope, Interval};
use zonoverify_core::{verify, EngineConfig, Heuristic, Outcome, VerificationTask};

#[test]
fn radius_heuristic_agrees_with_oracle() {
    let cfg = EngineConfig { heuristic: Heuristic::LocalRadius, max_subproblems: 20_000, ..EngineConfig::default() };
    for seed in 300..340 {
        let inst = fuzz_instance(seed);
        let verdict = verify(&inst.net, &inst.task, &cfg).unwrap();
        let truth = exhaustive_reach_tiny(&inst.net, &inst.task.input_box, &inst.task.unsafe_sets[0]).unwrap();
        match (&verdict.outcome, &truth) {
            (Outcome::Verified, Reachability::UnsafeWitness(_)) => panic!("seed {seed}: verified a reachable set"),
            (Outcome::Falsified { .. }, Reachability::Safe) => panic!("seed {seed}: witness for a safe set"),
            _ => {}
        }
    }
}

#[test]
fn sampling_never_beats_a_proof() {
    for seed in 400..440 {
        let inst = fuzz_instance(seed);
        let verdict = verify(&inst.net, &inst.task, &EngineConfig::default()).unwrap();
        if verdict.outcome == Outcome::Verified {
            let hit = grid_falsify(&inst.net, &inst.task.input_box, &inst.task.unsafe_sets[0], 2_000, seed).unwrap();
            assert!(hit.is_none(), "seed {seed}");
        }
    }
}

#[test]
fn disjunctive_tasks_check_every_polytope() {
    let mut rng = rng(9);
    for _ in 0..20 {
        let net = random_relu_net(&mut rng);
        let bx = random_box(&mut rng, net.input_dim());
        let sets: Vec<HPolytope> = (0..2).map(|_| halfspace_near_image(&mut rng, &net, &bx, -0.2)).collect();
        let task = VerificationTask::new(bx.clone(), sets.clone()).unwrap();
        let verdict = verify(&net, &task, &EngineConfig { max_subproblems: 20_000, ..EngineConfig::default() }).unwrap();
        let reachable: Vec<bool> = sets
            .iter()
            .map(|u| matches!(exhaustive_reach_tiny(&net, &bx, u).unwrap(), Reachability::UnsafeWitness(_)))
            .collect();
        match verdict.outcome {
            Outcome::Verified => assert!(reachable.iter().all(|r| !r)),
            Outcome::Falsified { unsafe_index, ref output, .. } => {
                assert!(reachable[unsafe_index]);
                assert!(sets[unsafe_index].contains(output, 1e-6));
            }
            Outcome::Unknown(_) => {}
        }
    }
}

#[test]
fn smooth_networks_are_sound() {
    let mut rng = rng(10);
    use rand::Rng;
    for k in 0..20 {
        let func = if k % 2 == 0 { Activation::Tanh } else { Activation::Sigmoid };
        let w = rng.random_range(2..6);
        let net = Network::new(vec![
            Layer::Linear {
                weights: nalgebra::DMatrix::from_fn(w, 2, |_, _| rng.random_range(-1.0..1.0)),
                bias: DVector::from_fn(w, |_, _| rng.random_range(-0.5..0.5)),
            },
            Layer::Activation { func, width: w },
            Layer::Linear {
                weights: nalgebra::DMatrix::from_fn(1, w, |_, _| rng.random_range(-1.0..1.0)),
                bias: DVector::zeros(1),
            },
        ])
        .unwrap();
        let bx = Interval::new(DVector::from_element(2, -1.0), DVector::from_element(2, 1.0)).unwrap();
        let unsafe_set = halfspace_near_image(&mut rng, &net, &bx, -0.05);
        let task = VerificationTask::new(bx.clone(), vec![unsafe_set.clone()]).unwrap();
        let cfg = EngineConfig { max_subproblems: 5_000, ..EngineConfig::default() };
        match verify(&net, &task, &cfg).unwrap().outcome {
            Outcome::Verified => {
                assert!(grid_falsify(&net, &bx, &unsafe_set, 5_000, k).unwrap().is_none(), "instance {k}");
            }
            Outcome::Falsified { input, .. } => {
                assert!(unsafe_set.contains(&net.forward(&input).unwrap(), 1e-6));
            }
            Outcome::Unknown(_) => {}
        }
    }
}

#[test]
fn expanded_children_cover_unsafe_vertices() {
    // Falsifying vertices of the exact oracle must stay inside some refined child.
    for seed in 0..40 {
        let inst = fuzz_instance(seed);
        let u = &inst.task.unsafe_sets[0];
        let Reachability::UnsafeWitness(x) = exhaustive_reach_tiny(&inst.net, &inst.task.input_box, u).unwrap() else {
            continue;
        };
        let root = BranchItem { factor_box: FactorBox::unit(inst.net.input_dim()), unsafe_index: 0, depth: 0 };
        let children = expand(&inst.net, &inst.task, &root, &EngineConfig::default()).unwrap().unwrap_or_default();
        let bx = &inst.task.input_box;
        let beta = (&x - bx.midpoint()).component_div(&bx.radius());
        assert!(children.iter().any(|c| c.factor_box.contains(&beta, 1e-7)), "seed {seed}");
    }
}
