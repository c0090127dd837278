mod common;

use std::collections::BTreeSet;

use common::{oracle, random_instance, Instance, SMALL};
use merge_core::discovery::candidates;
use merge_core::realization::path::HOP_LIMIT;
use merge_core::realization::{
    compose_loss, realize_complete, realize_greedy, validate_realization, Budget, EngineOptions,
    Outcome, Realization, Substrate, ValidateError, Violation,
};
use merge_core::xir::ResourceUuid;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn instance(seed: u64) -> Instance {
    random_instance(&mut StdRng::seed_from_u64(seed), &format!("p{seed}"), SMALL)
}

fn substrate(inst: &Instance) -> Substrate {
    Substrate::from_networks([&inst.res]).expect("generated substrate")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn discovery_is_the_brute_force_filter(seed in any::<u64>()) {
        let inst = instance(seed);
        let got = candidates(&inst.x, &substrate(&inst));
        for n in &inst.x.nodes {
            let want: BTreeSet<ResourceUuid> = inst
                .res
                .nodes
                .iter()
                .filter(|r| oracle::fits(&n.props, &r.props))
                .map(|r| r.uuid.unwrap())
                .collect();
            prop_assert_eq!(&got.entries[&n.id], &want, "node {}", n.id);
        }
    }

    #[test]
    fn complete_agrees_with_exhaustive_search_at_every_hop_cap(seed in any::<u64>(), hops in 1usize..=3) {
        let inst = instance(seed);
        let sub = substrate(&inst);
        let opts = EngineOptions { max_hops: hops, seed: 0 };
        let truth = oracle::feasible(&inst.x, &inst.res, hops);
        match realize_complete(&inst.x, &sub, &opts, Budget::default()) {
            Outcome::Realized(e) => {
                prop_assert!(truth, "complete found an embedding the oracle says cannot exist");
                prop_assert!(e.links.values().all(|p| p.len() <= hops));
                let m = Realization::from_embedding("x", &sub, &e);
                prop_assert!(oracle::check(&inst.x, &inst.res, hops, &m.node_map, &m.link_map).is_ok());
            }
            Outcome::ProvenUnrealizable(_) => prop_assert!(!truth, "complete missed a feasible embedding"),
            Outcome::BudgetExhausted { expanded } => prop_assert!(false, "budget exhausted after {}", expanded),
        }
    }

    #[test]
    fn greedy_is_sound_and_reproducible(seed in any::<u64>(), tie in 0u64..4) {
        let inst = instance(seed);
        let sub = substrate(&inst);
        let opts = EngineOptions { seed: tie, ..EngineOptions::default() };
        let first = realize_greedy(&inst.x, &sub, &opts);
        prop_assert_eq!(&first, &realize_greedy(&inst.x, &sub, &opts));
        if let Ok(e) = first {
            let m = Realization::from_embedding("x", &sub, &e);
            prop_assert!(validate_realization(&inst.x, &sub, &m).is_ok());
            prop_assert!(oracle::check(&inst.x, &inst.res, opts.max_hops, &m.node_map, &m.link_map).is_ok());
            prop_assert!(oracle::feasible(&inst.x, &inst.res, opts.max_hops));
        }
    }

    #[test]
    fn validator_catches_tampering(seed in any::<u64>(), pick in any::<usize>()) {
        let inst = instance(seed);
        let sub = substrate(&inst);
        let Outcome::Realized(e) = realize_complete(&inst.x, &sub, &EngineOptions::default(), Budget::default()) else {
            return Ok(());
        };
        let good = Realization::from_embedding("x", &sub, &e);
        prop_assert!(validate_realization(&inst.x, &sub, &good).is_ok());

        // Move one node onto a resource that does not fit it.
        let node = &inst.x.nodes[pick % inst.x.nodes.len()];
        let misfit = inst.res.nodes.iter().find(|r| !oracle::fits(&node.props, &r.props));
        if let Some(r) = misfit {
            let mut bad = good.clone();
            bad.node_map.insert(node.id.clone(), r.uuid.unwrap());
            match validate_realization(&inst.x, &sub, &bad) {
                Err(ValidateError::Violations(v)) => prop_assert!(
                    v.iter().any(|v| matches!(v, Violation::NodeMismatch { node: n, .. } if *n == node.id)),
                    "{:?}", v
                ),
                other => prop_assert!(false, "tampered node accepted: {:?}", other),
            }
        }
        // Forget a link, or invent one.
        if let Some(l) = inst.x.links.first() {
            let mut bad = good.clone();
            bad.link_map.remove(&l.id);
            let unmapped = Violation::UnmappedLink { link: l.id.clone() };
            let caught = matches!(validate_realization(&inst.x, &sub, &bad), Err(ValidateError::Violations(v)) if v.contains(&unmapped));
            prop_assert!(caught, "dropped link {} not reported", l.id);
        }
        let mut bad = good.clone();
        bad.node_map.insert("ghost".into(), inst.res.nodes[0].uuid.unwrap());
        let dangling = matches!(validate_realization(&inst.x, &sub, &bad), Err(ValidateError::Dangling(_)));
        prop_assert!(dangling);
    }

    #[test]
    fn loss_composition_matches_exact_arithmetic(losses in prop::collection::vec(0i64..=1_000_000, 0..=HOP_LIMIT)) {
        prop_assert_eq!(compose_loss(&losses), oracle::chain_loss(&losses));
        let got = compose_loss(&losses);
        prop_assert!((0..=1_000_000).contains(&got));
        prop_assert!(losses.iter().all(|&l| got >= l));
    }
}
