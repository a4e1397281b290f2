//! Central-difference checks of every differentiable primitive.

use kgpl_tensor::{Array, Graph, Var};

fn pseudo(shape: &[usize], seed: u64) -> Array {
    let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let n: usize = shape.iter().product();
    Array::from_vec(
        shape,
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect(),
    )
}

/// Compares the analytic gradient of `f(inputs) · w` (for a fixed random `w`)
/// against central differences with step `h`.
fn check(inputs: &[Array], f: impl for<'g> Fn(&[Var<'g>]) -> Var<'g>) {
    let h = 1e-5;
    let weight = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.constant(a.clone())).collect();
        let shape = f(&vars).shape();
        pseudo(&shape, 77)
    };
    let objective = |vals: &[Array]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|a| g.constant(a.clone())).collect();
        let out = f(&vars).value();
        out.data().iter().zip(weight.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|a| g.input(a.clone())).collect();
    let out = f(&vars);
    let grads = g.backward_with(out, weight.clone());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).expect("input gradient");
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = analytic.data()[j];
            let tol = 1e-6 * (1.0 + fd.abs().max(an.abs()));
            assert!((fd - an).abs() <= tol, "input {} elem {}: fd {} vs analytic {}", i, j, fd, an);
        }
    }
}

#[test]
fn grad_broadcast_arith() {
    check(&[pseudo(&[2, 3, 4], 1), pseudo(&[3, 1], 2)], |v| v[0].mul(v[1]).add(v[1]).sub(v[0].scale(0.3)));
}

#[test]
fn grad_activations() {
    check(&[pseudo(&[3, 5], 3)], |v| v[0].gelu().add(v[0].leaky_relu(0.1)).add(v[0].tanh()));
}

#[test]
fn grad_matmul_batched_and_shared() {
    check(&[pseudo(&[2, 3, 4], 4), pseudo(&[2, 4, 2], 5)], |v| v[0].matmul(v[1]));
    check(&[pseudo(&[2, 3, 4], 6), pseudo(&[4, 2], 7)], |v| v[0].matmul(v[1]));
}

#[test]
fn grad_linear() {
    check(&[pseudo(&[2, 3, 4], 8), pseudo(&[5, 4], 9), pseudo(&[5], 10)], |v| v[0].linear(v[1], Some(v[2])));
}

#[test]
fn grad_conv3d() {
    check(&[pseudo(&[2, 2, 3, 4, 3], 11), pseudo(&[3, 2, 3, 3, 3], 12), pseudo(&[3], 13)], |v| {
        v[0].conv3d(v[1], Some(v[2]), 1)
    });
}

#[test]
fn grad_patch_convs() {
    check(&[pseudo(&[1, 2, 4, 2, 2], 14), pseudo(&[3, 16], 15), pseudo(&[3], 16)], |v| {
        v[0].patch_conv3d(v[1], Some(v[2]), 2)
    });
    check(&[pseudo(&[1, 3, 2, 1, 1], 17), pseudo(&[16, 3], 18), pseudo(&[2], 19)], |v| {
        v[0].patch_conv_transpose3d(v[1], Some(v[2]), 2)
    });
}

#[test]
fn grad_norms() {
    check(&[pseudo(&[2, 3, 5], 20), pseudo(&[3], 21), pseudo(&[3], 22)], |v| {
        v[0].standardize(5, 1e-5).channel_affine(v[1], v[2])
    });
}

#[test]
fn grad_shape_ops() {
    check(&[pseudo(&[2, 3, 4], 23), pseudo(&[2, 2, 4], 24)], |v| {
        Var::concat(&[v[0], v[1]], 1).narrow(1, 1, 3).permute(&[2, 0, 1]).roll(0, 1).reshape(&[4, 6])
    });
}

#[test]
fn grad_reductions_and_softmax() {
    check(&[pseudo(&[2, 3, 4], 25)], |v| v[0].softmax(1).mul(v[0]).mean_axis(2).sum_axis(0));
    check(&[pseudo(&[3, 4], 26)], |v| v[0].softmax(1).mean());
}

#[test]
fn frozen_param_gets_no_gradient() {
    use kgpl_tensor::ParamStore;
    let mut store = ParamStore::new();
    let frozen = store.add("frozen", pseudo(&[3], 1));
    let live = store.add("live", pseudo(&[3], 2));
    store.set_trainable(frozen, false);
    let g = Graph::new();
    let y = g.param(&store, frozen).mul(g.param(&store, live)).sum();
    let grads = g.backward(y);
    assert!(grads.param(frozen).is_none());
    assert_eq!(grads.param(live).unwrap(), store.get(frozen));
}
