use lamol_core::autodiff::{Graph, Var};
use lamol_core::gradcheck::{finite_difference_check, Probe};
use lamol_core::model::LAYER_NORM_EPS;
use lamol_core::{Result, Tensor};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 100,
        rng_seed: RngSeed::Fixed(7),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

/// `sum(w ⊙ y)` with fixed random weights, so every output entry matters.
fn weighted(g: &mut Graph<'_>, y: Var, w: &[f64]) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let wt = g.leaf(Tensor::new(shape, w[..n].to_vec())?);
    let p = g.mul(y, wt)?;
    g.sum(p)
}

fn check<F>(f: F, point: &[Tensor]) -> f64
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    finite_difference_check(f, point, 1e-5, Probe::All)
        .unwrap()
        .max_discrepancy
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), data[..n].to_vec()).unwrap()
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(config())]

    #[test]
    fn elementwise_ops(r in 1..4usize, c in 1..4usize, a in values(16), b in values(16), w in values(16), k in -3.0..3.0f64) {
        let p = [t(&[r, c], &a), t(&[r, c], &b)];
        prop_assert!(check(|g, v| { let y = g.add(v[0], v[1])?; weighted(g, y, &w) }, &p) < TOL, "gradient mismatch");
        prop_assert!(check(|g, v| { let y = g.mul(v[0], v[1])?; weighted(g, y, &w) }, &p) < TOL, "gradient mismatch");
        prop_assert!(check(|g, v| { let y = g.scale(v[0], k)?; weighted(g, y, &w) }, &p[..1]) < TOL, "gradient mismatch");
        prop_assert!(check(|g, v| { let y = g.gelu(v[0])?; weighted(g, y, &w) }, &p[..1]) < TOL, "gradient mismatch");
        prop_assert!(check(|g, v| { let y = g.reshape(v[0], &[r * c])?; weighted(g, y, &w) }, &p[..1]) < TOL, "gradient mismatch");
        prop_assert!(check(|g, v| { let y = g.softmax(v[0])?; weighted(g, y, &w) }, &p[..1]) < TOL, "gradient mismatch");
        let bias = [t(&[r, c], &a), t(&[c], &b)];
        prop_assert!(check(|g, v| { let y = g.add_bias(v[0], v[1])?; weighted(g, y, &w) }, &bias) < TOL, "gradient mismatch");
    }

    #[test]
    fn matrix_products(m in 1..4usize, k in 1..4usize, n in 1..4usize, bs in 1..3usize,
                       a in values(36), b in values(36), w in values(36)) {
        let p = [t(&[m, k], &a), t(&[k, n], &b)];
        prop_assert!(check(|g, v| { let y = g.matmul(v[0], v[1], false)?; weighted(g, y, &w) }, &p) < TOL, "gradient mismatch");
        let p = [t(&[m, k], &a), t(&[n, k], &b)];
        prop_assert!(check(|g, v| { let y = g.matmul(v[0], v[1], true)?; weighted(g, y, &w) }, &p) < TOL, "gradient mismatch");
        let p = [t(&[bs, m, k], &a), t(&[bs, k, n], &b)];
        prop_assert!(check(|g, v| { let y = g.batch_matmul(v[0], v[1], false)?; weighted(g, y, &w) }, &p) < TOL, "gradient mismatch");
        let p = [t(&[bs, m, k], &a), t(&[bs, n, k], &b)];
        prop_assert!(check(|g, v| { let y = g.batch_matmul(v[0], v[1], true)?; weighted(g, y, &w) }, &p) < TOL, "gradient mismatch");
    }

    #[test]
    fn normalization_and_lookup(r in 1..4usize, c in 3..6usize, x in values(24), gain in values(6),
                                shift in values(6), w in values(24), ids in prop::collection::vec(0..4usize, 1..5)) {
        let p = [t(&[r, c], &x), t(&[c], &gain), t(&[c], &shift)];
        prop_assert!(check(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted(g, y, &w) }, &p) < TOL, "gradient mismatch");
        let table = [t(&[4, 3], &x)];
        prop_assert!(check(|g, v| { let y = g.gather(v[0], &ids)?; weighted(g, y, &w) }, &table) < TOL, "gradient mismatch");
    }

    #[test]
    fn attention_plumbing(batch in 1..3usize, seq in 1..4usize, heads in 1..3usize, dh in 1..3usize,
                          x in values(36), w in values(36)) {
        let width = heads * dh;
        let p = [t(&[batch * seq, width], &x)];
        prop_assert!(check(|g, v| {
            let h = g.split_heads(v[0], batch, seq, heads)?;
            let s = g.batch_matmul(h, h, true)?;
            let s = g.causal_mask(s)?;
            let s = g.softmax(s)?;
            let o = g.batch_matmul(s, h, false)?;
            let y = g.merge_heads(o, batch, seq, heads)?;
            weighted(g, y, &w)
        }, &p) < TOL, "gradient mismatch");
    }

    #[test]
    fn cross_entropy_gradient(r in 1..4usize, v in 2..5usize, x in values(16), targets in prop::collection::vec(0..4usize, 4)) {
        let picks: Vec<(usize, usize)> = (0..r).map(|i| (i, targets[i] % v)).collect();
        let p = [t(&[r, v], &x)];
        prop_assert!(check(|g, vars| g.cross_entropy(vars[0], &picks), &p) < TOL, "gradient mismatch");
    }

    #[test]
    fn softmax_and_layer_norm_statistics(r in 1..5usize, c in 2..8usize, x in prop::collection::vec(-30.0..30.0f64, 40)) {
        let mut g = Graph::new();
        let xv = g.leaf(t(&[r, c], &x));
        let s = g.softmax(xv).unwrap();
        for row in g.value(s).data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let gain = g.leaf(Tensor::filled(&[c], 1.0));
        let shift = g.leaf(Tensor::zeros(&[c]));
        let y = g.layer_norm(xv, gain, shift, LAYER_NORM_EPS).unwrap();
        for (row, input) in g.value(y).data().chunks(c).zip(x.chunks(c)) {
            let spread = input.iter().cloned().fold(f64::MIN, f64::max) - input.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 0.5);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ops_are_deterministic(r in 1..4usize, c in 1..4usize, a in values(16), b in values(16)) {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(t(&[r, c], &a).with_grad(true));
            let y = g.leaf(t(&[c, r], &b).with_grad(true));
            let z = g.matmul(x, y, false).unwrap();
            let z = g.softmax(z).unwrap();
            let z = g.gelu(z).unwrap();
            let loss = g.sum(z).unwrap();
            let value = g.value(loss).item();
            let mut grads = g.backward(loss).unwrap();
            (value, grads.take(x), grads.take(y))
        };
        let (v1, gx1, gy1) = run();
        let (v2, gx2, gy2) = run();
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        prop_assert_eq!(gx1, gx2);
        prop_assert_eq!(gy1, gy2);
    }
}
