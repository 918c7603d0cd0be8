use neural_search::rng::rng;
use neural_search::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::Rng as _;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], r: &mut neural_search::rng::Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.5, 1.5, r)
}

/// Reduce any output to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn weigh<'g>(g: &'g Graph<f64>, out: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let mut r = rng(seed ^ 0x5eed);
    let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    out.mul(&g.constant(&shape, w)).sum()
}

fn check(name: &str, seed: u64, report: GradCheckReport) {
    assert!(report.passed(), "{name} seed {seed}: {report:?}");
    assert!(report.coordinates > 0);
}

macro_rules! unary_case {
    ($name:ident, $op:expr, $lo:expr) => {
        fn $name(seed: u64) {
            let mut r = rng(seed);
            let (n, d) = (r.random_range(1..5), r.random_range(1..6));
            let mut x = rand_t(&[n, d], &mut r);
            // keep inputs away from non-differentiable points
            x.data_mut().iter_mut().for_each(|v| {
                if v.abs() < $lo {
                    *v += 2.0 * $lo;
                }
            });
            fn body<'g>(g: &'g Graph<f64>, v: &[Var<'g, f64>], seed: u64) -> Var<'g, f64> {
                let op: fn(Var<'g, f64>) -> Var<'g, f64> = $op;
                weigh(g, op(v[0]), seed)
            }
            check(
                stringify!($name),
                seed,
                grad_check(move |g, v| body(g, v, seed), &[x], EPS, TOL),
            );
        }
    };
}

unary_case!(sigmoid, |x| x.sigmoid(), 0.0);
unary_case!(tanh, |x| x.tanh(), 0.0);
unary_case!(relu, |x| x.relu(), 0.05);
unary_case!(gelu, |x| x.gelu(), 0.0);
unary_case!(softmax, |x| x.softmax(), 0.0);
unary_case!(log_softmax, |x| x.log_softmax(), 0.0);
unary_case!(affine, |x| x.affine(-0.7, 0.3), 0.0);
unary_case!(scale, |x| x.scale(2.5), 0.0);
unary_case!(one_minus, |x| x.one_minus(), 0.0);
unary_case!(mean, |x| x.mean(), 0.0);
unary_case!(sum, |x| x.sum(), 0.0);
unary_case!(dropout, |x| x.dropout(0.3, 42), 0.0);

fn matmul(seed: u64) {
    let mut r = rng(seed);
    let (m, k, n) = (
        r.random_range(1..5),
        r.random_range(1..5),
        r.random_range(1..5),
    );
    let inputs = [rand_t(&[m, k], &mut r), rand_t(&[k, n], &mut r)];
    check(
        "matmul",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].matmul(&v[1]), seed),
            &inputs,
            EPS,
            TOL,
        ),
    );
}

fn bmm(seed: u64) {
    let mut r = rng(seed);
    let (b, m, k, n) = (
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
    );
    let plain = [rand_t(&[b, m, k], &mut r), rand_t(&[b, k, n], &mut r)];
    check(
        "bmm",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].bmm(&v[1], false), seed),
            &plain,
            EPS,
            TOL,
        ),
    );
    let trans = [rand_t(&[b, m, k], &mut r), rand_t(&[b, n, k], &mut r)];
    check(
        "bmm^T",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].bmm(&v[1], true), seed),
            &trans,
            EPS,
            TOL,
        ),
    );
}

fn binary(seed: u64) {
    let mut r = rng(seed);
    let shape = [r.random_range(1..4), r.random_range(1..5)];
    let inputs = [rand_t(&shape, &mut r), rand_t(&shape, &mut r)];
    check(
        "add",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].add(&v[1]), seed),
            &inputs,
            EPS,
            TOL,
        ),
    );
    check(
        "sub",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].sub(&v[1]), seed),
            &inputs,
            EPS,
            TOL,
        ),
    );
    check(
        "mul",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].mul(&v[1]), seed),
            &inputs,
            EPS,
            TOL,
        ),
    );
    check(
        "cosine",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].cosine_similarity(&v[1]), seed),
            &inputs,
            EPS,
            TOL,
        ),
    );
    let bias = rand_t(&[1, shape[1]], &mut r);
    let with_bias = [inputs[0].clone(), bias];
    check(
        "add_row",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].add_row(&v[1]), seed),
            &with_bias,
            EPS,
            TOL,
        ),
    );
}

fn concat(seed: u64) {
    let mut r = rng(seed);
    let (n, a, b) = (
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
    );
    let cols = [rand_t(&[n, a], &mut r), rand_t(&[n, b], &mut r)];
    check(
        "concat1",
        seed,
        grad_check(
            move |g, v| weigh(g, g.concat(&[v[0], v[1]], 1), seed),
            &cols,
            EPS,
            TOL,
        ),
    );
    let rows = [rand_t(&[a, n], &mut r), rand_t(&[b, n], &mut r)];
    check(
        "concat0",
        seed,
        grad_check(
            move |g, v| weigh(g, g.concat(&[v[0], v[1]], 0), seed),
            &rows,
            EPS,
            TOL,
        ),
    );
}

fn indexing(seed: u64) {
    let mut r = rng(seed);
    let (v, d) = (r.random_range(2..6), r.random_range(1..4));
    let ids: Vec<usize> = (0..r.random_range(1..8))
        .map(|_| r.random_range(0..v))
        .collect();
    let table = [rand_t(&[v, d], &mut r)];
    let ids2 = ids.clone();
    check(
        "embedding",
        seed,
        grad_check(
            move |g, x| weigh(g, x[0].embedding(&ids2), seed),
            &table,
            EPS,
            TOL,
        ),
    );
    let start = r.random_range(0..v);
    let len = r.random_range(1..=v - start);
    check(
        "narrow_rows",
        seed,
        grad_check(
            move |g, x| weigh(g, x[0].narrow_rows(start, len), seed),
            &table,
            EPS,
            TOL,
        ),
    );
    let targets: Vec<usize> = (0..v).map(|_| r.random_range(0..d)).collect();
    check(
        "pick",
        seed,
        grad_check(
            move |g, x| weigh(g, x[0].pick(&targets), seed),
            &table,
            EPS,
            TOL,
        ),
    );
}

fn reshaping(seed: u64) {
    let mut r = rng(seed);
    let shape = [
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
    ];
    let x = [rand_t(&shape, &mut r)];
    let flat = [shape[0] * shape[1], shape[2]];
    check(
        "reshape",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].reshape(&flat), seed),
            &x,
            EPS,
            TOL,
        ),
    );
    check(
        "permute",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].permute(&[2, 0, 1]), seed),
            &x,
            EPS,
            TOL,
        ),
    );
    let mut mask: Vec<f64> = (0..shape[0] * shape[1])
        .map(|_| f64::from(r.random_bool(0.7) as u8))
        .collect();
    mask[0] = 1.0;
    check(
        "mean_pool",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].mean_pool(&mask), seed),
            &x,
            EPS,
            TOL,
        ),
    );
}

fn layer_norm(seed: u64) {
    let mut r = rng(seed);
    let (n, d) = (r.random_range(1..4), r.random_range(2..6));
    let inputs = [
        rand_t(&[n, d], &mut r),
        rand_t(&[1, d], &mut r),
        rand_t(&[1, d], &mut r),
    ];
    check(
        "layer_norm",
        seed,
        grad_check(
            move |g, v| weigh(g, v[0].layer_norm(&v[1], &v[2], 1e-5), seed),
            &inputs,
            EPS,
            TOL,
        ),
    );
}

fn softmax_cross_entropy(seed: u64) {
    let mut r = rng(seed);
    let (n, v) = (r.random_range(1..5), r.random_range(2..7));
    let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..v)).collect();
    let logits = [rand_t(&[n, v], &mut r)];
    check(
        "xent",
        seed,
        grad_check(
            move |_, x| x[0].log_softmax().pick(&targets).mean().scale(-1.0),
            &logits,
            EPS,
            TOL,
        ),
    );
}

type Primitive = (&'static str, fn(u64));

const PRIMITIVES: &[Primitive] = &[
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("relu", relu),
    ("gelu", gelu),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("affine", affine),
    ("scale", scale),
    ("one_minus", one_minus),
    ("mean", mean),
    ("sum", sum),
    ("dropout", dropout),
    ("matmul", matmul),
    ("bmm", bmm),
    ("binary", binary),
    ("concat", concat),
    ("indexing", indexing),
    ("reshaping", reshaping),
    ("layer_norm", layer_norm),
    ("softmax_cross_entropy", softmax_cross_entropy),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for (_, case) in PRIMITIVES {
            case(seed);
        }
    }
}

#[test]
fn matmul_3x4_by_4x2_at_coarse_step() {
    let mut r = rng(7);
    let inputs = [rand_t(&[3, 4], &mut r), rand_t(&[4, 2], &mut r)];
    let report = grad_check(|g, v| weigh(g, v[0].matmul(&v[1]), 7), &inputs, 1e-3, 1e-4);
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.coordinates, 20);
}

#[test]
fn f32_gradients_agree_with_f64() {
    let mut r = rng(3);
    let x = rand_t(&[3, 4], &mut r);
    let w = rand_t(&[4, 2], &mut r);
    let grads = |xs: [Tensor<f32>; 2]| {
        let g = Graph::<f32>::new();
        let a = g.leaf(&xs[0].clone().with_requires_grad(true));
        let b = g.leaf(&xs[1].clone().with_requires_grad(true));
        g.backward(a.matmul(&b).tanh().sum()).unwrap();
        g.grad(a).unwrap().data().to_vec()
    };
    let g32 = grads([x.cast(), w.cast()]);
    let g = Graph::<f64>::new();
    let a = g.leaf(&x.clone().with_requires_grad(true));
    let b = g.leaf(&w);
    g.backward(a.matmul(&b).tanh().sum()).unwrap();
    for (lo, hi) in g32.iter().zip(g.grad(a).unwrap().data()) {
        assert!((f64::from(*lo) - hi).abs() < 1e-5);
    }
}
