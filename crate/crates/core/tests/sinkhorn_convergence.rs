use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otlid::ot::{exact_plan_uniform, ot_objective, sinkhorn_plan, CostKind, CostMatrix, SinkhornConfig};

#[test]
fn gap_to_exact_shrinks_as_epsilon_decreases() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Array2::from_shape_simple_fn((32, 32), || rng.random_range(0.0..5.0));
        let cost = CostMatrix::new(c, CostKind::Feature).unwrap();
        let exact = ot_objective(&cost, &exact_plan_uniform(&cost).unwrap()).unwrap();
        let gaps: Vec<f64> = [1.0, 0.1, 0.01]
            .iter()
            .map(|&epsilon| {
                let cfg = SinkhornConfig { epsilon, ..SinkhornConfig::default() };
                let plan = sinkhorn_plan(&cost, &cfg).unwrap();
                assert!(plan.marginal_violation < 1e-6);
                ot_objective(&cost, &plan).unwrap() - exact
            })
            .collect();
        for w in gaps.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "seed {seed}: gaps {gaps:?}");
        }
        assert!(gaps[2] >= -1e-9);
    }
}
