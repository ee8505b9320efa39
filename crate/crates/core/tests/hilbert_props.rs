use pathwig::hilbert::{
    adjoint, apply, compose, embed_operator, inner, tensor_operator, tensor_state, OperatorMatrix, SpaceLayout,
    StateVector, C64,
};
use pathwig::random::{random_state, random_unitary, rng};
use proptest::prelude::*;

/// Entry-by-entry embedding: `out[r][c] = local[r_t][c_t]` when every
/// non-target digit of `r` and `c` agrees, else 0.
fn embed_oracle(local: &OperatorMatrix, targets: &[&str], layout: &SpaceLayout) -> Vec<Vec<C64>> {
    let d = layout.total_dim();
    let pos: Vec<usize> = targets.iter().map(|t| layout.position(t).unwrap()).collect();
    let dims: Vec<usize> = layout.subsystems().iter().map(|s| s.dim).collect();
    let digits = |mut i: usize| {
        let mut out = vec![0; dims.len()];
        for k in (0..dims.len()).rev() {
            out[k] = i % dims[k];
            i /= dims[k];
        }
        out
    };
    let local_index = |dg: &[usize]| pos.iter().fold(0, |acc, &p| acc * dims[p] + dg[p]);
    let mut out = vec![vec![C64::new(0.0, 0.0); d]; d];
    for (r, row) in out.iter_mut().enumerate() {
        let dr = digits(r);
        for (c, cell) in row.iter_mut().enumerate() {
            let dc = digits(c);
            let spectators_agree = (0..dims.len()).filter(|k| !pos.contains(k)).all(|k| dr[k] == dc[k]);
            if spectators_agree {
                *cell = local.get(local_index(&dr), local_index(&dc));
            }
        }
    }
    out
}

fn layout3() -> SpaceLayout {
    SpaceLayout::new([("a", 2), ("b", 3), ("c", 2)]).unwrap()
}

#[test]
fn embedding_matches_oracle_for_every_target_choice() {
    let layout = layout3();
    let mut r = rng(1);
    let choices: &[&[&str]] = &[&["a"], &["b"], &["c"], &["a", "c"], &["c", "a"], &["b", "a"], &["c", "b", "a"]];
    for targets in choices {
        let local = random_unitary(&layout.sub_layout(targets).unwrap(), &mut r);
        let got = embed_operator(&local, targets, &layout).unwrap();
        let want = embed_oracle(&local, targets, &layout);
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((got.get(i, j) - w).norm() < 1e-15, "targets {targets:?} at ({i},{j})");
            }
        }
    }
}

#[test]
fn tensor_state_hand_example() {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let plus = StateVector::real("x", &[h, h]).unwrap();
    let minus = StateVector::real("y", &[h, -h]).unwrap();
    let t = tensor_state(&[plus, minus]).unwrap();
    let want = [0.5, -0.5, 0.5, -0.5];
    for (a, w) in t.entries().iter().zip(want) {
        assert!((a.re - w).abs() < 1e-15 && a.im == 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unitaries_preserve_inner_products(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = layout3();
        let u = random_unitary(&l, &mut r);
        let a = random_state(&l, &mut r);
        let b = random_state(&l, &mut r);
        let before = inner(&a, &b).unwrap();
        let after = inner(&apply(&u, &a).unwrap(), &apply(&u, &b).unwrap()).unwrap();
        prop_assert!((before - after).norm() <= 1e-10);
    }

    #[test]
    fn adjacent_embeddings_compose_to_tensor(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = layout3();
        let a = random_unitary(&l.sub_layout(&["a"]).unwrap(), &mut r);
        let b = random_unitary(&l.sub_layout(&["b"]).unwrap(), &mut r);
        let lhs = compose(
            &embed_operator(&a, &["a"], &l).unwrap(),
            &embed_operator(&b, &["b"], &l).unwrap(),
        ).unwrap();
        let rhs = embed_operator(&tensor_operator(&a, &b).unwrap(), &["a", "b"], &l).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn double_adjoint_is_exact(seed in any::<u64>()) {
        let mut r = rng(seed);
        let u = random_unitary(&layout3(), &mut r);
        prop_assert_eq!(adjoint(&adjoint(&u)), u);
    }

    #[test]
    fn tensor_norm_is_product_of_norms(seed in any::<u64>(), sa in 0.1f64..3.0, sb in 0.1f64..3.0) {
        let mut r = rng(seed);
        let a = random_state(&SpaceLayout::new([("a", 2)]).unwrap(), &mut r).scaled(C64::new(sa, 0.0));
        let b = random_state(&SpaceLayout::new([("b", 3)]).unwrap(), &mut r).scaled(C64::new(sb, 0.0));
        let t = pathwig::hilbert::kron_states(&a, &b).unwrap();
        prop_assert!((t.norm() - a.norm() * b.norm()).abs() <= 1e-12);
    }

    #[test]
    fn permutation_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = layout3();
        let s = random_state(&l, &mut r);
        let p = l.permuted(&["c", "a", "b"]).unwrap();
        let back = s.permuted_to(&p).unwrap().permuted_to(&l).unwrap();
        prop_assert!(back.max_abs_diff(&s) == 0.0);
    }
}
