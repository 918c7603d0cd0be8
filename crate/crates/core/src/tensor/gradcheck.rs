use super::{Graph, ParamStore, Tensor, Var};
use crate::rng::{rng, Rng};
use crate::scalar::Scalar;
use rand::Rng as _;

/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences over every coordinate of every input.
///
/// `f` must be deterministic (no dropout). The error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64, tol: f64) -> GradCheckReport
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Var<'g, T>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&g, &vars);
    g.backward(loss)
        .expect("grad_check: loss must be a connected scalar");
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .map(|v| {
            g.grad(*v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![T::zero(); v.value().len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = perturbed.iter().map(|t| g.leaf(t)).collect();
        f(&g, &vars).item().as_f64()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        tol,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for (j, &orig) in input.data().iter().enumerate() {
            work[i].data_mut()[j] = orig + T::lit(eps);
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - T::lit(eps);
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j].as_f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    report
}

/// Something that owns a parameter store.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
}

impl<T: Scalar> Parameterized<T> for ParamStore<T> {
    fn params(&self) -> &ParamStore<T> {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        self
    }
}

/// [`grad_check`] over every coordinate of every parameter of `model`.
/// `worst` indexes parameters in store order. The model is restored
/// before returning.
#[allow(clippy::needless_range_loop)]
pub fn grad_check_params<T, M, F>(model: &mut M, f: F, eps: f64, tol: f64) -> GradCheckReport
where
    T: Scalar,
    M: Parameterized<T>,
    F: for<'g> Fn(&'g Graph<T>, &M) -> Var<'g, T>,
{
    let g = Graph::new();
    let loss = f(&g, model);
    g.backward(loss)
        .expect("grad_check_params: loss must depend on a parameter");
    let mut analytic: Vec<Vec<T>> = model
        .params()
        .iter()
        .map(|(_, t)| vec![T::zero(); t.len()])
        .collect();
    for (id, grad) in g.param_grads() {
        analytic[id.index()] = grad;
    }
    drop(g);

    let eval = |m: &M| f(&Graph::new(), m).item().as_f64();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        tol,
    };
    let ids: Vec<_> = model.params().ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        for j in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + T::lit(eps);
            let plus = eval(model);
            model.params_mut().get_mut(id).data_mut()[j] = orig - T::lit(eps);
            let minus = eval(model);
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j].as_f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    report
}

/// Finite-difference step and tolerance used by [`primitive_suite`].
pub const SUITE_EPS: f64 = 1e-6;
pub const SUITE_TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.5, 1.5, r)
}

/// Contract any output to a scalar with fixed random weights so each
/// output coordinate gets a distinct upstream gradient.
fn weigh<'g>(g: &'g Graph<f64>, out: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let mut r = rng(seed ^ 0x5eed);
    let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    out.mul(&g.constant(&shape, w)).sum()
}

type Unary = for<'g> fn(Var<'g, f64>) -> Var<'g, f64>;

type SuiteFn<'a> = dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64> + 'a;

/// Gradient check of every differentiable primitive on shapes drawn from
/// `seed`, in f64 at [`SUITE_EPS`] / [`SUITE_TOL`].
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: &[Tensor<f64>], f: &SuiteFn<'_>| {
        out.push((
            name,
            grad_check(|g, v| f(g, v), inputs, SUITE_EPS, SUITE_TOL),
        ));
    };

    let unary: [(&'static str, Unary, f64); 12] = [
        ("sigmoid", |x| x.sigmoid(), 0.0),
        ("tanh", |x| x.tanh(), 0.0),
        ("relu", |x| x.relu(), 0.05),
        ("gelu", |x| x.gelu(), 0.0),
        ("softmax", |x| x.softmax(), 0.0),
        ("log_softmax", |x| x.log_softmax(), 0.0),
        ("affine", |x| x.affine(-0.7, 0.3), 0.0),
        ("scale", |x| x.scale(2.5), 0.0),
        ("one_minus", |x| x.one_minus(), 0.0),
        ("mean", |x| x.mean(), 0.0),
        ("sum", |x| x.sum(), 0.0),
        ("dropout", |x| x.dropout(0.3, 42), 0.0),
    ];
    for (name, op, gap) in unary {
        let (n, d) = (r.random_range(1..5), r.random_range(1..6));
        let mut x = rand_t(&[n, d], &mut r);
        // Keep inputs away from kinks.
        x.data_mut()
            .iter_mut()
            .filter(|v| v.abs() < gap)
            .for_each(|v| *v += 2.0 * gap);
        run(name, &[x], &|g, v| weigh(g, op(v[0]), seed));
    }

    let (m, k, n) = (
        r.random_range(1..5),
        r.random_range(1..5),
        r.random_range(1..5),
    );
    run(
        "matmul",
        &[rand_t(&[m, k], &mut r), rand_t(&[k, n], &mut r)],
        &|g, v| weigh(g, v[0].matmul(&v[1]), seed),
    );
    let b = r.random_range(1..4);
    run(
        "bmm",
        &[rand_t(&[b, m, k], &mut r), rand_t(&[b, k, n], &mut r)],
        &|g, v| weigh(g, v[0].bmm(&v[1], false), seed),
    );
    run(
        "bmm_transposed",
        &[rand_t(&[b, m, k], &mut r), rand_t(&[b, n, k], &mut r)],
        &|g, v| weigh(g, v[0].bmm(&v[1], true), seed),
    );

    let shape = [r.random_range(1..4), r.random_range(1..5)];
    let pair = [rand_t(&shape, &mut r), rand_t(&shape, &mut r)];
    run("add", &pair, &|g, v| weigh(g, v[0].add(&v[1]), seed));
    run("sub", &pair, &|g, v| weigh(g, v[0].sub(&v[1]), seed));
    run("mul", &pair, &|g, v| weigh(g, v[0].mul(&v[1]), seed));
    run("cosine_similarity", &pair, &|g, v| {
        weigh(g, v[0].cosine_similarity(&v[1]), seed)
    });
    run(
        "add_row",
        &[pair[0].clone(), rand_t(&[1, shape[1]], &mut r)],
        &|g, v| weigh(g, v[0].add_row(&v[1]), seed),
    );

    let (c, a, w) = (
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
    );
    run(
        "concat_cols",
        &[rand_t(&[c, a], &mut r), rand_t(&[c, w], &mut r)],
        &|g, v| weigh(g, g.concat(&[v[0], v[1]], 1), seed),
    );
    run(
        "concat_rows",
        &[rand_t(&[a, c], &mut r), rand_t(&[w, c], &mut r)],
        &|g, v| weigh(g, g.concat(&[v[0], v[1]], 0), seed),
    );

    let (rows, d) = (r.random_range(2..6), r.random_range(1..4));
    let table = [rand_t(&[rows, d], &mut r)];
    let ids: Vec<usize> = (0..r.random_range(1..8))
        .map(|_| r.random_range(0..rows))
        .collect();
    run("embedding", &table, &|g, v| {
        weigh(g, v[0].embedding(&ids), seed)
    });
    let start = r.random_range(0..rows);
    let len = r.random_range(1..=rows - start);
    run("narrow_rows", &table, &|g, v| {
        weigh(g, v[0].narrow_rows(start, len), seed)
    });
    let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..d)).collect();
    run("pick", &table, &|g, v| weigh(g, v[0].pick(&targets), seed));

    let s3 = [
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
    ];
    let x3 = [rand_t(&s3, &mut r)];
    let flat = [s3[0] * s3[1], s3[2]];
    run("reshape", &x3, &|g, v| weigh(g, v[0].reshape(&flat), seed));
    run("permute", &x3, &|g, v| {
        weigh(g, v[0].permute(&[2, 0, 1]), seed)
    });
    let mut mask: Vec<f64> = (0..s3[0] * s3[1])
        .map(|_| f64::from(u8::from(r.random_bool(0.7))))
        .collect();
    mask[0] = 1.0;
    run("mean_pool", &x3, &|g, v| {
        weigh(g, v[0].mean_pool(&mask), seed)
    });

    let (n, d) = (r.random_range(1..4), r.random_range(2..6));
    run(
        "layer_norm",
        &[
            rand_t(&[n, d], &mut r),
            rand_t(&[1, d], &mut r),
            rand_t(&[1, d], &mut r),
        ],
        &|g, v| weigh(g, v[0].layer_norm(&v[1], &v[2], 1e-5), seed),
    );

    let (n, classes) = (r.random_range(1..5), r.random_range(2..7));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    run(
        "softmax_cross_entropy",
        &[rand_t(&[n, classes], &mut r)],
        &|_, v| v[0].log_softmax().pick(&labels).mean().scale(-1.0),
    );
    out
}
