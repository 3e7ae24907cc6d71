use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saicl_core::tensor::{contract, Tape, Tensor};
use saicl_core::verify::{finite_difference_check, naive_contract};

#[test]
fn attention_score_contraction_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut rng);
    let k = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut rng);
    let fast = contract("bhtd,bhrd->bhtr", &q, &k).unwrap();
    assert_eq!(fast.shape(), &[2, 2, 3, 3]);
    // hand-written loops, independent of the generic reference
    for b in 0..2 {
        for h in 0..2 {
            for t in 0..3 {
                for r in 0..3 {
                    let mut s = 0.0;
                    for d in 0..4 {
                        s += q.get(&[b, h, t, d]) * k.get(&[b, h, r, d]);
                    }
                    assert!((fast.get(&[b, h, t, r]) - s).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_of_one_two_three() {
    let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let s = x.softmax_last().unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in [1f64, 2.0, 3.0].iter().enumerate() {
        assert!((s.data()[i] - v.exp() / z).abs() <= 1e-12);
    }
    let u = Tensor::zeros(&[3]).softmax_last().unwrap();
    assert!(u.data().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn three_layer_composition_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        Tensor::randn(&[3, 4], 1.0, &mut rng),
        Tensor::randn(&[4, 5], 1.0, &mut rng),
        Tensor::randn(&[5, 2], 1.0, &mut rng),
        Tensor::randn(&[2], 1.0, &mut rng),
    ];
    let worst = finite_difference_check(
        &inputs,
        |t, v| {
            let h = t.softmax_last(t.contract("ij,jk->ik", v[0], v[1])?)?;
            let o = t.add(t.contract("ik,kl->il", h, v[2])?, v[3])?;
            let o = t.softmax_last(o)?;
            let w = t.constant(Tensor::from_fn(&[3, 2], |i| (i[0] * 2 + i[1]) as f64 * 0.7 - 1.0));
            Ok(t.sum(t.mul(o, w)?))
        },
        usize::MAX,
        0,
    )
    .unwrap();
    assert!(worst <= 1e-4, "relative error {worst}");
}

#[test]
fn half_square_and_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let loss = tape.scale(tape.sum(tape.mul(v, v).unwrap()), 0.5);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(v).unwrap().max_abs_diff(&x) < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn contraction_agrees_with_reference(b in 1usize..3, t in 1usize..5, r in 1usize..5, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[b, t, d], 1.0, &mut rng);
        let c = Tensor::randn(&[b, d, r], 1.0, &mut rng);
        for spec in ["btd,bdr->btr", "btd,bdr->brt", "btd,bdr->tr"] {
            let fast = contract(spec, &a, &c).unwrap();
            let slow = naive_contract(spec, &a, &c).unwrap();
            prop_assert!(fast.max_abs_diff(&slow) <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], 10.0, &mut rng);
        let s = x.softmax_last().unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
