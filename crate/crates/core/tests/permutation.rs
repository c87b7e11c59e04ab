use permbasin::net::{build_mlp, build_shallow_cnn, forward, Network, Shape3};
use permbasin::perm::{apply, compose, identity_perm, invert, random_perm, transposition_move, Permutation};
use proptest::prelude::*;
use rand::Rng;

fn inputs(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = permbasin::seed::rng(seed);
    (0..n * dim).map(|_| rng.random_range(-2.0f32..2.0)).collect()
}

fn with_random_biases(mut net: Network, seed: u64) -> Network {
    let mut rng = permbasin::seed::rng(seed);
    for l in &mut net.layers {
        if let Some(b) = &mut l.bias {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.5f32..0.5));
        }
    }
    net
}

fn mlp(depth: usize, width: usize, seed: u64) -> Network {
    with_random_biases(build_mlp(depth, width, 7, 3, seed).unwrap(), seed ^ 1)
}

fn cnn(depth: usize, seed: u64) -> Network {
    with_random_biases(build_shallow_cnn(depth, 4, Shape3::new(1, 8, 8), 3, seed).unwrap(), seed ^ 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn mlp_outputs_are_unchanged_bit_for_bit(depth in 1usize..5, width in 1usize..12, seed in any::<u64>()) {
        let net = mlp(depth, width, seed);
        let p = random_perm(&net, seed.wrapping_add(17));
        let x = inputs(16, 7, seed);
        prop_assert_eq!(forward(&net, &x).unwrap(), forward(&apply(&net, &p).unwrap(), &x).unwrap());
    }

    #[test]
    fn cnn_outputs_are_unchanged_bit_for_bit(depth in 1usize..3, seed in any::<u64>()) {
        let net = cnn(depth, seed);
        let p = random_perm(&net, seed.wrapping_add(3));
        let x = inputs(4, 64, seed);
        prop_assert_eq!(forward(&net, &x).unwrap(), forward(&apply(&net, &p).unwrap(), &x).unwrap());
    }

    #[test]
    fn apply_then_invert_restores_parameters(depth in 1usize..4, width in 1usize..10, seed in any::<u64>()) {
        let net = mlp(depth, width, seed);
        let p = random_perm(&net, seed.wrapping_mul(3));
        let back = apply(&apply(&net, &p).unwrap(), &invert(&p)).unwrap();
        prop_assert_eq!(back.layers, net.layers);
    }

    #[test]
    fn composition_matches_sequential_application(depth in 1usize..4, width in 1usize..9, s1 in any::<u64>(), s2 in any::<u64>()) {
        let net = mlp(depth, width, s1 ^ s2);
        let p1 = random_perm(&net, s1);
        let p2 = random_perm(&net, s2);
        let seq = apply(&apply(&net, &p2).unwrap(), &p1).unwrap();
        let once = apply(&net, &compose(&p1, &p2).unwrap()).unwrap();
        prop_assert_eq!(seq.layers, once.layers);
    }

    #[test]
    fn group_laws(depth in 1usize..4, width in 1usize..9, s1 in any::<u64>(), s2 in any::<u64>(), s3 in any::<u64>()) {
        let net = mlp(depth, width, 5);
        let (a, b, c) = (random_perm(&net, s1), random_perm(&net, s2), random_perm(&net, s3));
        let id = identity_perm(&net);
        prop_assert_eq!(compose(&a, &id).unwrap(), a.clone());
        prop_assert_eq!(compose(&id, &a).unwrap(), a.clone());
        prop_assert!(compose(&a, &invert(&a)).unwrap().is_identity());
        prop_assert!(compose(&invert(&a), &a).unwrap().is_identity());
        let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn transposition_moves_stay_valid(width in 2usize..10, swaps in 1usize..4, seed in any::<u64>()) {
        let net = mlp(2, width, seed);
        let p = random_perm(&net, seed);
        let q = transposition_move(&p, swaps, seed ^ 9).unwrap();
        prop_assert!(q.validate().is_ok());
        for (a, b) in p.per_layer.iter().zip(&q.per_layer) {
            let moved = a.iter().zip(b).filter(|(x, y)| x != y).count();
            prop_assert!(moved <= 2 * swaps);
        }
    }
}

#[test]
fn fifty_random_pairs_across_architectures() {
    let mut k = 0u64;
    for round in 0..10u64 {
        let nets = [mlp(1, 9, round), mlp(2, 6, round), mlp(4, 5, round), cnn(1, round), cnn(2, round)];
        for net in nets {
            k += 1;
            let p = random_perm(&net, 1000 + k);
            let x = inputs(8, net.input_numel(), k);
            let moved = apply(&net, &p).unwrap();
            assert_eq!(forward(&net, &x).unwrap(), forward(&moved, &x).unwrap());
            assert_eq!(apply(&moved, &invert(&p)).unwrap().layers, net.layers);
        }
    }
    assert_eq!(k, 50);
}

#[test]
fn malformed_permutations_are_rejected() {
    assert!(Permutation::new(vec![vec![0, 0, 1]]).is_err());
    assert!(Permutation::new(vec![vec![0, 3, 1]]).is_err());
    let net = mlp(1, 4, 0);
    let wrong = Permutation::new(vec![vec![0, 1, 2]]).unwrap();
    assert!(apply(&net, &wrong).is_err());
}
