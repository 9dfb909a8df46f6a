//! Tape gradients against central differences for every primitive and for
//! each model stage, over many random draws.

mod oracles;

use std::sync::Arc;

use oracles::{rng, uniform};
use rand::Rng;
use spx_core::autodiff::{bilinear_map, concat_cols, grad_check, Tape, Tensor, Var};
use spx_core::Result;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_tensor(seed: u64, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(&mut rng(seed), n, lo, hi)).unwrap()
}

/// `sum(y * w)` with fixed random weights so every output coordinate matters.
fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = rand_tensor(seed ^ 0xabcd, y.shape(), -1.0, 1.0);
    y.mul(tape.constant(w))?.sum_all()
}

fn check<F>(name: &str, x: &Tensor<f64>, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let r = grad_check(f, x, EPS, TOL).unwrap();
    assert!(r.passed, "{name}: max rel err {:.3e} at {}", r.max_rel_err, r.worst_index);
}

#[test]
fn elementwise_ops() {
    for s in 0..SEEDS {
        let x = rand_tensor(s, vec![3, 4], -2.0, 2.0);
        let other = rand_tensor(s + 100, vec![3, 4], 0.5, 2.0);
        let o = other.clone();
        check("add", &x, |t, v| project(t, v.add(t.constant(o.clone()))?, s));
        let o = other.clone();
        check("sub", &x, |t, v| project(t, t.constant(o.clone()).sub(v)?, s));
        let o = other.clone();
        check("mul", &x, |t, v| project(t, v.mul(v)?.mul(t.constant(o.clone()))?, s));
        let o = other.clone();
        check("div numerator", &x, |t, v| project(t, v.div(t.constant(o.clone()))?, s));
        check("div denominator", &other, |t, v| project(t, t.constant(x.clone()).div(v)?, s));
        check("scale", &x, |t, v| project(t, v.scale(-0.7)?, s));
        let k: Vec<f64> = other.data().to_vec();
        check("add_const", &x, |t, v| project(t, v.add_const(&k)?.mul(v)?, s));
        check("mul_const", &x, |t, v| project(t, v.mul_const(&k)?, s));
        check("exp", &x, |t, v| project(t, v.exp()?, s));
        check("gelu", &x, |t, v| project(t, v.gelu()?, s));
        check("reshape", &x, |t, v| project(t, v.reshape(vec![2, 6])?.mul(v.reshape(vec![2, 6])?)?, s));
        check("sum_all", &x, |_, v| v.mul(v)?.sum_all());
        check("mean_all", &x, |_, v| v.exp()?.mean_all());
        check("sum_last", &x, |t, v| project(t, v.mul(v)?.sum_last()?, s));
    }
}

#[test]
fn clamp_min_away_from_kink() {
    for s in 0..SEEDS {
        let mut x = rand_tensor(s, vec![12], -1.0, 1.0);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        check("clamp_min", &x, |t, v| project(t, v.clamp_min(0.0)?, s));
    }
}

#[test]
fn linear_algebra_ops() {
    for s in 0..SEEDS {
        let a = rand_tensor(s, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(s + 50, vec![4, 5], -1.0, 1.0);
        let bb = b.clone();
        check("matmul lhs", &a, |t, v| project(t, v.matmul(t.constant(bb.clone()))?, s));
        let aa = a.clone();
        check("matmul rhs", &b, |t, v| project(t, t.constant(aa.clone()).matmul(v)?, s));
        check("transpose", &a, |t, v| project(t, v.transpose()?.matmul(v)?, s));
        let bias = rand_tensor(s + 7, vec![4], -1.0, 1.0);
        let aa = a.clone();
        check("add_bias bias", &bias, |t, v| project(t, t.constant(aa.clone()).add_bias(v)?.exp()?, s));
        check("add_bias input", &a, |t, v| project(t, v.add_bias(t.constant(bias.clone()))?.exp()?, s));
        check("slice_cols", &a, |t, v| project(t, v.slice_cols(1, 2)?.exp()?, s));
        check("concat_cols", &a, |t, v| {
            let parts = [v.slice_cols(2, 2)?, v, v.slice_cols(0, 1)?];
            project(t, concat_cols(&parts)?.exp()?, s)
        });
    }
}

#[test]
fn softmax_with_and_without_mask() {
    for s in 0..SEEDS {
        let x = rand_tensor(s, vec![4, 5], -2.0, 2.0);
        let mut r = rng(s + 3);
        let mut mask: Vec<bool> = (0..20).map(|_| r.random_bool(0.7)).collect();
        for row in mask.chunks_mut(5) {
            row[r.random_range(0..5)] = true;
        }
        check("softmax rows", &x, |t, v| project(t, v.softmax(1, None)?, s));
        check("softmax masked", &x, |t, v| project(t, v.softmax(1, Some(&mask))?, s));
        let x3 = rand_tensor(s, vec![2, 3, 4], -2.0, 2.0);
        check("softmax axis 1", &x3, |t, v| project(t, v.softmax(1, None)?, s));
        check("softmax axis 0", &x3, |t, v| project(t, v.softmax(0, None)?, s));
    }
}

#[test]
fn gather_scatter_and_slot_ops() {
    for s in 0..SEEDS {
        let mut r = rng(s + 11);
        let x = rand_tensor(s, vec![5, 3], -1.0, 1.0);
        let idx: Arc<[u32]> = (0..8).map(|_| r.random_range(0..5u32)).collect();
        check("gather_rows", &x, |t, v| project(t, v.gather_rows(idx.clone())?, s));
        check("scatter_add_rows", &x, |t, v| project(t, v.scatter_add_rows(idx[..5].into(), 5)?, s));

        let (n, l, c) = (3, 4, 2);
        let a = rand_tensor(s, vec![n, c], -1.0, 1.0);
        let b = rand_tensor(s + 1, vec![n * l, c], -1.0, 1.0);
        let bb = b.clone();
        check("slot_dot lhs", &a, |t, v| project(t, v.slot_dot(t.constant(bb.clone()), l)?, s));
        let aa = a.clone();
        check("slot_dot rhs", &b, |t, v| project(t, t.constant(aa.clone()).slot_dot(v, l)?, s));
        let w = rand_tensor(s + 2, vec![n, l], -1.0, 1.0);
        let bb = b.clone();
        check("slot_combine weights", &w, |t, v| project(t, v.slot_combine(t.constant(bb.clone()))?, s));
        check("slot_combine values", &b, |t, v| project(t, t.constant(w.clone()).slot_combine(v)?, s));
    }
}

#[test]
fn cross_entropy_and_layer_norm() {
    for s in 0..SEEDS {
        let mut r = rng(s + 21);
        let x = rand_tensor(s, vec![6, 4], -2.0, 2.0);
        let labels: Arc<[u32]> = (0..6).map(|i| if i == 2 { 255 } else { r.random_range(0..4u32) }).collect();
        check("cross_entropy_rows", &x, |t, v| project(t, v.cross_entropy_rows(labels.clone())?, s));

        let g = rand_tensor(s + 1, vec![4], 0.5, 1.5);
        let b = rand_tensor(s + 2, vec![4], -0.5, 0.5);
        let (gg, bb) = (g.clone(), b.clone());
        check("layer_norm input", &x, |t, v| {
            project(t, v.layer_norm(t.constant(gg.clone()), t.constant(bb.clone()), 1e-5)?, s)
        });
        let (xx, bb) = (x.clone(), b.clone());
        check("layer_norm gamma", &g, |t, v| {
            project(t, t.constant(xx.clone()).layer_norm(v, t.constant(bb.clone()), 1e-5)?, s)
        });
        let xx = x.clone();
        check("layer_norm beta", &b, |t, v| {
            project(t, t.constant(xx.clone()).layer_norm(t.constant(g.clone()), v, 1e-5)?, s)
        });
    }
}

#[test]
fn conv_and_resampling() {
    for s in 0..SEEDS {
        let x = rand_tensor(s, vec![5, 6, 2], -1.0, 1.0);
        let k = rand_tensor(s + 1, vec![3, 3, 2, 3], -0.5, 0.5);
        let stride = 1 + (s as usize % 2);
        let kk = k.clone();
        check("conv2d input", &x, |t, v| project(t, v.conv2d(t.constant(kk.clone()), stride, 1)?, s));
        let xx = x.clone();
        check("conv2d kernel", &k, |t, v| project(t, t.constant(xx.clone()).conv2d(v, stride, 1)?, s));
        check("bilinear up", &x, |t, v| project(t, v.bilinear_resize(7, 11)?, s));
        check("bilinear down", &x, |t, v| project(t, v.bilinear_resize(2, 3)?, s));
        let map = Arc::new(bilinear_map(5, 6, 3, 4));
        check("resample", &x, |t, v| project(t, v.resample(map.clone(), vec![3, 4, 2])?, s));
    }
}
