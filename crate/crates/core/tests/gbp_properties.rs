mod common;

use common::{random_loopy, random_tree};
use gbpstack::gaussian::CanonicalGaussian;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trees_are_exact_after_diameter_rounds(seed in any::<u64>(), n in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = random_tree(&mut rng, n, 4);
        let (mut g, ids) = problem.build();
        g.iterate(problem.diameter()).unwrap();
        let got = g.stacked_mean(&ids);
        let want = problem.dense_mean();
        for (a, b) in got.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn loopy_means_converge(seed in any::<u64>(), n in 3usize..=12, dim in 1usize..=3, extra in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = random_loopy(&mut rng, n, dim, extra);
        let (mut g, ids) = problem.build();
        g.iterate(300).unwrap();
        let got = g.stacked_mean(&ids);
        let want = problem.dense_mean();
        prop_assert!((got - &want).amax() < 1e-6);
    }

    #[test]
    fn converged_energy_matches_optimum(seed in any::<u64>(), n in 3usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = random_loopy(&mut rng, n, 2, 3);
        let (mut g, ids) = problem.build();
        g.iterate(300).unwrap();
        let optimum = problem.energy(&problem.dense_mean());
        prop_assert!((g.energy() - optimum).abs() < 1e-6);
        prop_assert!((problem.energy(&g.stacked_mean(&ids)) - optimum).abs() < 1e-6);
    }

    #[test]
    fn beliefs_equal_inbox_products(seed in any::<u64>(), rounds in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = random_loopy(&mut rng, 6, 2, 4);
        let (mut g, _) = problem.build();
        g.iterate(rounds).unwrap();
        for v in g.variables() {
            let mut product = CanonicalGaussian::zeros(v.dim());
            for (_, msg) in v.inbox() {
                product.accumulate(msg).unwrap();
            }
            prop_assert_eq!(&product, v.belief());
        }
    }
}

