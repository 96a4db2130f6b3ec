use cycleflow::analysis::{
    decompose_zero_flow, directional_derivative, exact_sampling, expected_sampling_time_bound,
    extract_cycles, flow_matching_residual, is_acyclic_flow, tv_distance,
};
use cycleflow::flows::{forward_policy, path_rng, EdgeFlow};
use cycleflow::graphs::ExplicitGraph;
use cycleflow::losses::{db_stable, fm_log2, fm_stable, regularizer_l1, StableParams};
use cycleflow::synthetic::{random_cyclic_graph, random_edgeflow, random_flow, terminal_reward};
use proptest::prelude::*;

fn instance(seed: u64, n: usize, extra: usize) -> (ExplicitGraph, EdgeFlow) {
    let mut rng = path_rng(seed, 0);
    let g = random_cyclic_graph(&mut rng, n, extra);
    let f = random_flow(&mut rng, &g, 3, 3);
    (g, f)
}

fn interior_ones(g: &ExplicitGraph) -> Vec<f64> {
    (0..g.num_states())
        .map(|s| if g.is_interior(s) { 1.0 } else { 0.0 })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_reconstructs_the_flow(seed in any::<u64>(), n in 2usize..=8, extra in 0usize..=6) {
        let (g, f) = instance(seed, n, extra);
        let d = decompose_zero_flow(&g, &f).unwrap();
        for e in 0..g.num_edges() {
            prop_assert!((d.zero_part.get(e) + d.minimal.get(e) - f.get(e)).abs() < 1e-9);
        }
        prop_assert!(flow_matching_residual(&g, &d.zero_part) < 1e-9);
        prop_assert!(flow_matching_residual(&g, &d.minimal) < 1e-9);
        prop_assert!(is_acyclic_flow(&g, &d.minimal));
        let mut summed = vec![0.0; g.num_edges()];
        for c in &d.cycles {
            prop_assert!(c.weight > 0.0);
            let first = g.edge(c.edges[0]).from;
            let last = g.edge(*c.edges.last().unwrap()).to;
            prop_assert_eq!(first, last);
            for (&e, &s) in c.edges.iter().zip(&c.states) {
                prop_assert_eq!(g.edge(e).from, s);
                summed[e] += c.weight;
            }
        }
        for e in 0..g.num_edges() {
            prop_assert!((summed[e] - d.zero_part.get(e)).abs() < 1e-9);
        }
    }

    #[test]
    fn policy_rows_are_distributions(seed in any::<u64>(), n in 2usize..=8, mass in 0.0f64..1.0) {
        let mut rng = path_rng(seed, 1);
        let g = random_cyclic_graph(&mut rng, n, 3);
        let f = random_edgeflow(&mut rng, &g);
        let policy = forward_policy(&g, &f, mass).unwrap();
        for s in 0..g.num_states() {
            if policy.is_live(s) {
                let total: f64 = policy.row(&g, s).unwrap().iter().map(|(_, p)| p).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>(), n in 2usize..=8) {
        let mut rng = path_rng(seed, 2);
        let g = random_cyclic_graph(&mut rng, n, 3);
        let f = random_edgeflow(&mut rng, &g);
        let b = random_edgeflow(&mut rng, &g);
        let nu = interior_ones(&g);
        let w = vec![1.0; g.num_edges()];
        prop_assert!(fm_log2(&g, &f, &nu).unwrap().value >= 0.0);
        for params in [StableParams::default(), StableParams::simplified()] {
            prop_assert!(fm_stable(&g, &f, &params, &nu).unwrap().value >= 0.0);
            prop_assert!(db_stable(&g, &f, &b, &params, &w).unwrap().value >= 0.0);
        }
        prop_assert!(regularizer_l1(&g, &f).value >= 0.0);
    }

    #[test]
    fn stable_loss_grows_along_cycles(seed in any::<u64>(), n in 2usize..=8, t in 0.01f64..5.0) {
        let mut rng = path_rng(seed, 3);
        let g = random_cyclic_graph(&mut rng, n, 3);
        let f = random_edgeflow(&mut rng, &g);
        let nu = interior_ones(&g);
        let full = EdgeFlow::constant(g.num_edges(), 1.0);
        for params in [StableParams::default(), StableParams::simplified()] {
            let loss = |fam: &[EdgeFlow]| Ok(fm_stable(&g, &fam[0], &params, &nu)?.value);
            for cycle in extract_cycles(&g, &full).cycles {
                let mut dir = cycle.as_flow(g.num_edges());
                dir = EdgeFlow::new(dir.values().iter().map(|x| x / cycle.weight).collect()).unwrap();
                let d = directional_derivative(&g, loss, std::slice::from_ref(&f), &dir, 1e-6).unwrap();
                prop_assert!(d >= -1e-6, "derivative {d}");
                let base = loss(std::slice::from_ref(&f)).unwrap();
                let moved = loss(&[f.axpy(t, &dir).unwrap()]).unwrap();
                prop_assert!(moved >= base - 1e-9 * base.abs().max(1.0));
            }
        }
    }

    #[test]
    fn exact_flows_sample_the_reward(seed in any::<u64>(), n in 2usize..=8, extra in 0usize..=6) {
        let (g, f) = instance(seed, n, extra);
        let r = terminal_reward(&g, &f);
        let exact = exact_sampling(&g, &f).unwrap();
        let target = r.normalized(&g).unwrap();
        prop_assert!(tv_distance(&g, &exact.distribution, &target) < 1e-9);
        let bound = expected_sampling_time_bound(&g, &f, &r).unwrap();
        prop_assert!(exact.expected_tau <= bound * (1.0 + 1e-9));
    }
}
