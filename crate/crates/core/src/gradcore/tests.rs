use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> DArray {
    let n = shape.iter().product();
    DArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check<F>(f: F, inputs: &[DArray])
where
    F: Fn(&mut Graph, &[Var]) -> crate::Result<Var>,
{
    let report = grad_check(f, inputs, DEFAULT_STEP, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}

/// (rows, cols) pairs used for the per-op sweeps.
fn shapes(rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..10)
        .map(|_| (rng.gen_range(1..5), rng.gen_range(1..6)))
        .collect()
}

#[test]
fn matmul_identity_and_arithmetic() {
    let mut g = Graph::new();
    let eye = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = g.constant(vec![2, 2], vec![3.0, -1.0, 2.5, 7.0]).unwrap();
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p), g.value(m));

    let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = g.constant(vec![2, 1], vec![5.0, 6.0]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.constant(vec![2], vec![1f64.ln(), 3f64.ln()]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y)[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y)[1] - 0.75).abs() < 1e-15);

    let x = g.constant(vec![2], vec![1e8, 1e8]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut g = Graph::new();
    let x = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(vec![3], vec![1.0; 3]).unwrap();
    let bias = g.constant(vec![3], vec![0.0; 3]).unwrap();
    let x = g.constant(vec![1, 3], vec![4.0; 3]).unwrap();
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let gain = g.constant(vec![2], vec![1.0; 2]).unwrap();
    let bias = g.constant(vec![2], vec![0.0; 2]).unwrap();
    let x = g.constant(vec![1, 2], vec![1.0, 3.0]).unwrap();
    let y = g.layer_norm(x, gain, bias).unwrap();
    // variance 1, so the eps perturbation is 1/sqrt(1 + 1e-5)
    let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((g.value(y)[0] + expect).abs() < 1e-12);
    assert!((g.value(y)[1] - expect).abs() < 1e-12);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(&DArray::row_vector(&[1.0, 2.0, -3.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(&DArray::row_vector(&[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn shared_subexpression_accumulates() {
    // y = 3x feeds two consumers; loss = sum(y) + sum(y) so dL/dx = 6.
    let mut g = Graph::new();
    let x = g.param(&DArray::row_vector(&[0.5, -1.0]));
    let y = g.scale(x, 3.0);
    let a = g.sum(y);
    let b = g.sum(y);
    let l = g.add(a, b).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0, 6.0]);
    assert_eq!(g.grad(y).unwrap(), &[2.0, 2.0]);
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph::new();
    let x = g.param(&DArray::row_vector(&[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

#[test]
fn grad_check_rejects_non_scalar() {
    let r = grad_check(|_, v| Ok(v[0]), &[DArray::row_vector(&[1.0, 2.0])], 1e-4, 1e-4);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn grad_check_linear_is_exact() {
    let a = DArray::row_vector(&[0.3, -0.7, 1.1]);
    let w = DArray::row_vector(&[2.0, 0.5, -1.5]);
    let report = grad_check(
        |g, v| {
            let p = g.mul(v[0], v[1])?;
            Ok(g.sum(p))
        },
        &[a, w],
        DEFAULT_STEP,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
}

#[test]
fn grad_sweep_elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, n) in shapes(&mut rng) {
        let a = random(&mut rng, &[m, n]);
        let b = random(&mut rng, &[m, n]);
        let w = random(&mut rng, &[m, n]);
        // Each op is composed with a random weighting so the scalar
        // output has non-trivial gradients.
        let weigh = |g: &mut Graph, x: Var, w: Var| -> crate::Result<Var> {
            let p = g.mul(x, w)?;
            Ok(g.sum(p))
        };
        check(|g, v| { let x = g.add(v[0], v[1])?; weigh(g, x, v[2]) }, &[a.clone(), b.clone(), w.clone()]);
        check(|g, v| { let x = g.sub(v[0], v[1])?; weigh(g, x, v[2]) }, &[a.clone(), b.clone(), w.clone()]);
        check(|g, v| { let x = g.mul(v[0], v[1])?; weigh(g, x, v[2]) }, &[a.clone(), b.clone(), w.clone()]);
        check(|g, v| { let x = g.scale(v[0], -1.7); weigh(g, x, v[1]) }, &[a.clone(), w.clone()]);
        check(|g, v| { let x = g.gelu(v[0]); weigh(g, x, v[1]) }, &[a.clone(), w.clone()]);
        check(|g, v| { let x = g.transpose(v[0]); let x = g.transpose(x); weigh(g, x, v[1]) }, &[a.clone(), w.clone()]);
        check(|g, v| { let x = g.mean_rows(v[0]); let y = g.mul(x, x)?; Ok(g.sum(y)) }, std::slice::from_ref(&a));
        check(|g, v| { let x = g.mul(v[0], v[0])?; Ok(g.mean(x)) }, std::slice::from_ref(&a));
        check(|g, v| { let x = g.l2_normalize_rows(v[0]); weigh(g, x, v[1]) }, &[a.clone(), w.clone()]);
        check(|g, v| { let x = g.reshape(v[0], vec![m * n])?; let y = g.reshape(v[1], vec![m * n])?; weigh(g, x, y) }, &[a.clone(), w.clone()]);

        // relu away from the kink
        let shifted = DArray::new(
            vec![m, n],
            a.data().iter().map(|v| if v.abs() < 0.05 { v + 0.2 } else { *v }).collect(),
        )
        .unwrap();
        check(|g, v| { let x = g.relu(v[0]); weigh(g, x, v[1]) }, &[shifted, w.clone()]);

        let pos = DArray::new(vec![m, n], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        check(|g, v| { let x = g.log(v[0]); weigh(g, x, v[1]) }, &[pos, w.clone()]);
    }
}

#[test]
fn grad_sweep_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (m, n) in shapes(&mut rng) {
        let k = rng.gen_range(1..5);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let w = random(&mut rng, &[m, n]);
        let weigh = |g: &mut Graph, x: Var, w: Var| -> crate::Result<Var> {
            let p = g.mul(x, w)?;
            Ok(g.sum(p))
        };
        check(|g, v| { let x = g.matmul(v[0], v[1])?; weigh(g, x, v[2]) }, &[a.clone(), b.clone(), w.clone()]);
        check(|g, v| { let x = g.matmul(v[0], v[1])?; Ok(g.sum(x)) }, &[a.clone(), b.clone()]);

        let row = random(&mut rng, &[n]);
        let c = random(&mut rng, &[m, n]);
        check(|g, v| { let x = g.add_row(v[0], v[1])?; weigh(g, x, v[2]) }, &[c.clone(), row, w.clone()]);

        let top = random(&mut rng, &[2, n]);
        let w2 = random(&mut rng, &[m + 2, n]);
        check(|g, v| { let x = g.concat_rows(&[v[0], v[1]])?; weigh(g, x, v[2]) }, &[c.clone(), top, w2]);

        let left = random(&mut rng, &[m, 2]);
        let w3 = random(&mut rng, &[m, n + 2]);
        check(|g, v| { let x = g.concat_cols(&[v[0], v[1]])?; weigh(g, x, v[2]) }, &[c.clone(), left, w3]);

        let wr = random(&mut rng, &[1, n]);
        let r0 = rng.gen_range(0..m);
        check(move |g, v| { let x = g.slice_rows(v[0], r0, r0 + 1)?; weigh(g, x, v[1]) }, &[c.clone(), wr]);
        let wc = random(&mut rng, &[m, 1]);
        let c0 = rng.gen_range(0..n);
        check(move |g, v| { let x = g.slice_cols(v[0], c0, c0 + 1)?; weigh(g, x, v[1]) }, &[c.clone(), wc]);

        let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..m)).collect();
        let wg = random(&mut rng, &[4, n]);
        check(|g, v| { let x = g.gather_rows(v[0], &idx)?; weigh(g, x, v[1]) }, &[c.clone(), wg]);
    }
}

#[test]
fn grad_sweep_normalizers() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, n) in shapes(&mut rng) {
        let n = n + 1;
        let x = random(&mut rng, &[m, n]);
        let w = random(&mut rng, &[m, n]);
        let gain = random(&mut rng, &[n]);
        let bias = random(&mut rng, &[n]);
        let weigh = |g: &mut Graph, x: Var, w: Var| -> crate::Result<Var> {
            let p = g.mul(x, w)?;
            Ok(g.sum(p))
        };
        check(|g, v| { let y = g.softmax(v[0], 1)?; weigh(g, y, v[1]) }, &[x.clone(), w.clone()]);
        check(|g, v| { let y = g.softmax(v[0], 0)?; weigh(g, y, v[1]) }, &[x.clone(), w.clone()]);
        check(|g, v| { let y = g.log_softmax_rows(v[0], None)?; weigh(g, y, v[1]) }, &[x.clone(), w.clone()]);
        let excluded: Vec<bool> = (0..m * n).map(|i| i % n == 0 && n > 1).collect();
        check(|g, v| { let y = g.masked_softmax_rows(v[0], excluded.clone())?; weigh(g, y, v[1]) }, &[x.clone(), w.clone()]);
        check(|g, v| { let y = g.log_softmax_rows(v[0], Some(excluded.clone()))?; weigh(g, y, v[1]) }, &[x.clone(), w.clone()]);
        check(|g, v| { let y = g.layer_norm(v[0], v[1], v[2])?; weigh(g, y, v[3]) }, &[x.clone(), gain, bias, w.clone()]);
    }
}

#[test]
fn softmax_cross_entropy_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&mut rng, &[5, 3]);
    let onehot = DArray::new(
        vec![5, 3],
        (0..15).map(|i| if i % 3 == (i / 3) % 3 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    check(
        |g, v| {
            let p = g.softmax(v[0], 1)?;
            let lp = g.log(p);
            let picked = g.mul(lp, v[1])?;
            let s = g.mean(picked);
            Ok(g.scale(s, -1.0))
        },
        &[logits, onehot],
    );
}

fn attention_inputs(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<DArray> {
    vec![
        random(rng, &[len, dim]),
        random(rng, &[len, dim]),
        random(rng, &[len, dim]),
        random(rng, &[dim, dim]),
        random(rng, &[dim]),
    ]
}

#[test]
fn attention_single_key_passes_value_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inp = attention_inputs(&mut rng, 1, 4);
    let mut g = Graph::new();
    let v: Vec<Var> = inp.iter().map(|a| g.leaf(a)).collect();
    let out = attention(&mut g, v[0], v[1], v[2], v[3], None, 2, None).unwrap();
    let direct = g.matmul(v[2], v[3]).unwrap();
    for (a, b) in g.value(out).iter().zip(g.value(direct)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_masked_keys_get_zero_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inp = attention_inputs(&mut rng, 4, 4);
    let mut g = Graph::new();
    let v: Vec<Var> = inp.iter().map(|a| g.leaf(a)).collect();
    let mask = [true, true, false, true];
    let (out, weights) =
        attention_with_weights(&mut g, v[0], v[1], v[2], v[3], None, 2, Some(&mask)).unwrap();
    for &w in &weights {
        for (i, &wv) in g.value(w).iter().enumerate() {
            if mask[i % 4] {
                assert!(wv.abs() <= 1e-12);
            } else {
                assert!((wv - 1.0).abs() < 1e-12);
            }
        }
    }
    // every query reads the value row of key 2 only
    let row2 = g.slice_rows(v[2], 2, 3).unwrap();
    let expect = g.matmul(row2, v[3]).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            assert!((g.value(out)[r * 4 + c] - g.value(expect)[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_brute_force_two_positions() {
    // one head, dim 2, hand-set values
    let q = [[1.0, 0.0], [0.0, 2.0]];
    let k = [[0.5, 1.0], [-1.0, 0.25]];
    let v = [[1.0, 2.0], [3.0, -1.0]];
    let wo = [[1.0, 0.5], [-0.5, 2.0]];
    let mut expect = [[0.0; 2]; 2];
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
            .collect();
        let z = s[0].exp() + s[1].exp();
        let w = [s[0].exp() / z, s[1].exp() / z];
        let head = [w[0] * v[0][0] + w[1] * v[1][0], w[0] * v[0][1] + w[1] * v[1][1]];
        for c in 0..2 {
            expect[i][c] = head[0] * wo[0][c] + head[1] * wo[1][c];
        }
    }
    let mut g = Graph::new();
    let arr = |g: &mut Graph, m: [[f64; 2]; 2]| g.leaf(&DArray::from_rows(&m).unwrap());
    let (qv, kv, vv, wv) = (arr(&mut g, q), arr(&mut g, k), arr(&mut g, v), arr(&mut g, wo));
    let out = attention(&mut g, qv, kv, vv, wv, None, 1, None).unwrap();
    for i in 0..2 {
        for c in 0..2 {
            assert!((g.value(out)[i * 2 + c] - expect[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_head_split_must_divide() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inp = attention_inputs(&mut rng, 2, 6);
    let mut g = Graph::new();
    let v: Vec<Var> = inp.iter().map(|a| g.leaf(a)).collect();
    assert!(matches!(
        attention(&mut g, v[0], v[1], v[2], v[3], None, 4, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for len in 1..4 {
        let inp = attention_inputs(&mut rng, len, 4);
        let w = random(&mut rng, &[len, 4]);
        let mut all = inp.clone();
        all.push(w);
        let mask: Vec<bool> = (0..len).map(|i| i == 0 && len > 1).collect();
        check(
            |g, v| {
                let o = attention(g, v[0], v[1], v[2], v[3], Some(v[4]), 2, Some(&mask))?;
                let p = g.mul(o, v[5])?;
                Ok(g.sum(p))
            },
            &all,
        );
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(vals in prop::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..6) {
        let n = vals.len() / cols * cols;
        prop_assume!(n > 0);
        let mut g = Graph::new();
        let x = g.constant(vec![n / cols, cols], vals[..n].to_vec()).unwrap();
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_attention_weights_vanish(seed in 0u64..1000, len in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = attention_inputs(&mut rng, len, 4);
        let mut mask: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
        mask[rng.gen_range(0..len)] = false;
        let mut g = Graph::new();
        let v: Vec<Var> = inp.iter().map(|a| g.leaf(a)).collect();
        let (_, weights) = attention_with_weights(&mut g, v[0], v[1], v[2], v[3], None, 2, Some(&mask)).unwrap();
        for &w in &weights {
            for (i, &wv) in g.value(w).iter().enumerate() {
                if mask[i % len] {
                    prop_assert!(wv.abs() <= 1e-12);
                }
            }
        }
    }
}
