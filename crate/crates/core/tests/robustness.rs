//! Cross-module robustness invariants that need whole-pipeline runs.

use gains_core::math::Vector;
use gains_core::model::{random_model, OutputRole, RandomModelShape};
use gains_core::verifier::{
    verify, witness_search, Method, PropertyKind, RobustnessSpec, Status,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A verified verdict must survive a thousand-sample counterexample hunt.
#[test]
fn verified_implies_empirically_robust() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b57);
    let mut verified_pairs = 0usize;
    for seed in 0..50u64 {
        let shape = RandomModelShape {
            state_dim: 2 + (seed as usize) % 4,
            hidden_dim: 3,
            out_dim: 2,
            with_encoder: false,
            output: OutputRole::Classification,
        };
        let model = random_model(&shape, seed);
        let x = Vector(
            (0..shape.state_dim)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
        );
        let y = model.forward(&x).unwrap();
        let target = y
            .0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        let spec = RobustnessSpec {
            kind: PropertyKind::Classification { target },
            epsilon: 0.02,
            clamp: None,
        };
        let verdict = verify(&model, &x, None, &spec, Method::Gains).unwrap();
        if verdict.status == Status::Verified {
            verified_pairs += 1;
            let witness = witness_search(&model, &x, None, &spec, 1000, seed).unwrap();
            assert!(
                witness.is_none(),
                "seed {seed}: verified input has a concrete counterexample"
            );
        }
    }
    // the random pool must actually exercise the verified branch
    assert!(verified_pairs >= 10, "only {verified_pairs} verified pairs");
    println!("verified_implies_empirically_robust: {verified_pairs}/50 verified, none falsified");
}
