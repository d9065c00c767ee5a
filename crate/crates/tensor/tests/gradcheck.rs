//! Central finite-difference checks for every differentiable op.

use std::rc::Rc;

use gazesr_tensor::{layout, resample_weights, Conv2dSpec, Graph, Init, ParamStore, ResampleMethod, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&Graph<'_, f64>, &[Var]) -> Var;

/// Compares analytic gradients of `mean(f(inputs) * r)` against central differences.
fn check(shapes: &[Vec<usize>], f: &Build, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> =
        shapes.iter().map(|s| (0..s.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let store = ParamStore::<f64>::new();

    let eval = |vals: &[Vec<f64>], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let g = Graph::new(&store);
        let vars: Vec<Var> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| if want_grad { g.input_with_grad(v.clone(), s) } else { g.input(v.clone(), s) })
            .collect();
        let out = f(&g, &vars);
        let n = g.value(out).len();
        let mut wr = ChaCha8Rng::seed_from_u64(999);
        let r: Vec<f64> = (0..n).map(|_| wr.random_range(-1.0..1.0)).collect();
        let rv = g.input(r, &g.shape(out));
        let loss = g.mean(g.mul(out, rv));
        let value = g.scalar(loss);
        if !want_grad {
            return (value, Vec::new());
        }
        let grads = g.backward(loss);
        (value, vars.iter().map(|v| grads.input(*v).map(|s| s.to_vec()).unwrap_or_default()).collect())
    };

    let (_, analytic) = eval(&inputs, true);
    let h = 1e-6;
    for (k, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = inputs.clone();
            plus[k][j] += h;
            let mut minus = inputs.clone();
            minus[k][j] -= h;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let an = analytic[k].get(j).copied().unwrap_or(0.0);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            assert!(err < 1e-4, "input {k} element {j}: analytic {an} vs numeric {fd}");
        }
    }
}

#[test]
fn elementwise_ops() {
    check(&[vec![2, 5], vec![2, 5]], &|g, v| g.add(g.mul(v[0], v[1]), g.scale(v[0], 0.3)), 1);
    check(&[vec![3, 4], vec![4]], &|g, v| g.add_tiled(v[0], v[1]), 2);
    check(&[vec![10]], &|g, v| g.gelu(v[0]), 3);
    check(&[vec![10]], &|g, v| g.leaky_relu(v[0], 0.2), 4);
    check(&[vec![10]], &|g, v| g.relu(v[0]), 5);
}

#[test]
fn conv2d_strided_and_padded() {
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 2, 3), (2, 2, 0)] {
        check(
            &[vec![2, 3, 7, 6], vec![4, 3, k, k], vec![4]],
            &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: s, pad: p }),
            10 + k as u64,
        );
    }
}

#[test]
fn linear_and_bmm() {
    check(&[vec![2, 3, 5], vec![4, 5], vec![4]], &|g, v| g.linear(v[0], v[1], Some(v[2])), 20);
    check(&[vec![3, 2, 4], vec![3, 4, 5]], &|g, v| g.bmm(v[0], v[1], false), 21);
    check(&[vec![3, 2, 4], vec![3, 5, 4]], &|g, v| g.bmm(v[0], v[1], true), 22);
}

#[test]
fn normalisation() {
    check(&[vec![3, 6]], &|g, v| g.softmax(v[0]), 30);
    check(&[vec![4, 6], vec![6], vec![6]], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), 31);
    check(&[vec![2, 4, 3, 3], vec![4], vec![4]], &|g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5), 32);
}

#[test]
fn layout_and_pooling() {
    check(&[vec![2, 3, 4]], &|g, v| g.permute(v[0], &[2, 0, 1]), 40);
    check(
        &[vec![1, 4, 4, 2]],
        &|g, v| {
            let (roll, s) = layout::roll_nhwc(&[1, 4, 4, 2], 1, 1);
            let (part, ps) = layout::window_partition(&s, 2);
            g.gather(v[0], Rc::from(layout::compose(&part, &roll)), &ps)
        },
        41,
    );
    check(&[vec![1, 8, 2, 3]], &|g, v| {
        let (idx, s) = layout::pixel_shuffle(&[1, 8, 2, 3], 2);
        g.gather(v[0], idx.into(), &s)
    }, 42);
    check(&[vec![2, 2, 3], vec![2, 1, 3]], &|g, v| g.concat_channels(&[v[0], v[1]]), 43);
    check(&[vec![1, 2, 6, 5]], &|g, v| g.max_pool2d(v[0], 3, 2, 1), 44);
    check(&[vec![2, 3, 2, 2]], &|g, v| g.mean_spatial(v[0]), 45);
    check(&[vec![2, 6]], &|g, v| g.reshape(v[0], &[3, 4]), 46);
}

#[test]
fn resample_all_methods() {
    for m in ResampleMethod::ALL {
        check(
            &[vec![1, 2, 6, 5]],
            &move |g, v| g.resample(v[0], resample_weights(6, 4, m), resample_weights(5, 9, m), (4, 9)),
            50,
        );
    }
}

#[test]
fn l1_loss_gradient_is_signed_mean() {
    let store = ParamStore::<f64>::new();
    let g = Graph::new(&store);
    let pred = g.input_with_grad(vec![0.5, -0.2, 1.0, 0.0], &[2, 2]);
    let loss = g.l1_loss(pred, vec![0.4, 0.1, 1.5, -1.0]);
    assert!((g.scalar(loss) - (0.1 + 0.3 + 0.5 + 1.0) / 4.0).abs() < 1e-12);
    let grads = g.backward(loss);
    assert_eq!(grads.input(pred).unwrap(), &[0.25, -0.25, -0.25, 0.25]);
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", &[3, 2], Init::Normal { std: 1.0 }, &mut rng);
    let b = store.add("b", &[3, 2], Init::Normal { std: 1.0 }, &mut rng);
    store.get_mut(a).trainable = false;
    let g = Graph::new(&store);
    let x = g.input(vec![1.0, 2.0], &[1, 2]);
    let y = g.add(g.linear(x, g.param(a), None), g.linear(x, g.param(b), None));
    let grads = g.backward(g.mean(y));
    assert!(grads.param(a).is_none());
    assert!(grads.param(b).is_some());
}
