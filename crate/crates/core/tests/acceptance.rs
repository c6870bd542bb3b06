//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! and then asserts. Criteria run one at a time so timings are not shared.

mod common;

use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{inverse_square_formula, ram_formula, reference_score, report, sharpen_formula, softmax_formula, task_oracle};
use lie_mem::autodiff::{grad_check, AutodiffError, Graph, Mode, Tensor, Var, DEFAULT_EPSILON};
use lie_mem::checkpoint;
use lie_mem::config::{Overrides, RunConfig};
use lie_mem::evaluation::{evaluate, score};
use lie_mem::lie_groups::{
    apply, compose_shifts, distance, interpolate_actions_var, interpolate_keys_var, inverse, normalize_var, apply_var, ActionVar, Key, LieAction,
    Manifold,
};
use lie_mem::memory::{self, append_write, MemoryStore};
use lie_mem::models::{Decode, Model, ModelConfig, ModelKind, Weighting};
use lie_mem::params::{BoundParams, InitScheme};
use lie_mem::tasks::{generate, Regime, Task, TaskSpec};
use lie_mem::trace::{HeadKind, Phase};
use lie_mem::training::{eval_set, nll_loss, run_training, RunRecord, TrainConfig};
use lie_mem::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn criterion(id: usize, name: &str, body: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|p| p.into_inner());
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(msg.unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => report(&format!("criterion {id:>2} PASS {name} ({detail}; {secs:.1}s)")),
        Err(detail) => report(&format!("criterion {id:>2} FAIL {name} ({detail}; {secs:.1}s)")),
    }
    if let Err(detail) = outcome {
        panic!("criterion {id} failed: {detail}");
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("{what} took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn lift(e: Error) -> AutodiffError {
    match e {
        Error::Autodiff(e) => e,
        other => panic!("unexpected error: {other}"),
    }
}

/// Reduces any node to a scalar through fixed random weights.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = rand_tensor(&mut rng, &g.shape(y).to_vec(), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = (&'static str, Vec<(Vec<usize>, f64, f64)>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>>);

fn op_cases() -> Vec<Case> {
    let v = |n: usize, lo: f64, hi: f64| (vec![n], lo, hi);
    let m = |r: usize, c: usize| (vec![r, c], -1.0, 1.0);
    vec![
        ("add", vec![v(4, -2.0, 2.0), v(4, -2.0, 2.0)], Box::new(|g, x| g.add(x[0], x[1]))),
        ("add broadcast", vec![m(3, 4), v(4, -2.0, 2.0)], Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub", vec![v(4, -2.0, 2.0), v(1, -2.0, 2.0)], Box::new(|g, x| g.sub(x[0], x[1]))),
        ("mul", vec![v(5, -2.0, 2.0), v(5, -2.0, 2.0)], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("div", vec![v(5, -2.0, 2.0), v(5, 0.5, 2.0)], Box::new(|g, x| g.div(x[0], x[1]))),
        ("broadcast_scale", vec![v(1, -1.0, 1.0), m(2, 3)], Box::new(|g, x| g.broadcast_scale(x[0], x[1]))),
        ("neg", vec![v(3, -1.0, 1.0)], Box::new(|g, x| g.neg(x[0]))),
        ("exp", vec![v(4, -2.0, 2.0)], Box::new(|g, x| g.exp(x[0]))),
        ("log", vec![v(4, 0.2, 3.0)], Box::new(|g, x| g.log(x[0]))),
        ("tanh", vec![v(4, -2.0, 2.0)], Box::new(|g, x| g.tanh(x[0]))),
        ("sigmoid", vec![v(4, -3.0, 3.0)], Box::new(|g, x| g.sigmoid(x[0]))),
        ("softplus", vec![v(4, -3.0, 3.0)], Box::new(|g, x| g.softplus(x[0]))),
        ("sin", vec![v(4, -3.0, 3.0)], Box::new(|g, x| g.sin(x[0]))),
        ("cos", vec![v(4, -3.0, 3.0)], Box::new(|g, x| g.cos(x[0]))),
        ("powf", vec![v(4, 0.3, 2.0)], Box::new(|g, x| g.powf(x[0], 2.5))),
        ("pow", vec![v(4, 0.3, 2.0), v(1, 1.0, 3.0)], Box::new(|g, x| g.pow(x[0], x[1]))),
        ("add_const", vec![v(3, -1.0, 1.0)], Box::new(|g, x| g.add_const(x[0], 0.7))),
        ("scale", vec![v(3, -1.0, 1.0)], Box::new(|g, x| g.scale(x[0], -1.3))),
        ("one_minus", vec![v(3, 0.0, 1.0)], Box::new(|g, x| g.one_minus(x[0]))),
        ("matmul", vec![m(3, 4), m(4, 2)], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("matvec", vec![m(3, 4), v(4, -1.0, 1.0)], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("dot", vec![v(5, -1.0, 1.0), v(5, -1.0, 1.0)], Box::new(|g, x| g.dot(x[0], x[1]))),
        ("l2_norm", vec![v(4, 0.2, 1.0)], Box::new(|g, x| g.l2_norm(x[0]))),
        ("cross", vec![v(3, -1.0, 1.0), v(3, -1.0, 1.0)], Box::new(|g, x| g.cross(x[0], x[1]))),
        ("concat", vec![v(2, -1.0, 1.0), v(3, -1.0, 1.0)], Box::new(|g, x| g.concat(&[x[0], x[1]]))),
        ("stack", vec![v(3, -1.0, 1.0), v(3, -1.0, 1.0)], Box::new(|g, x| g.stack(&[x[0], x[1]]))),
        ("slice", vec![v(6, -1.0, 1.0)], Box::new(|g, x| g.slice(x[0], 1, 3))),
        ("slice_rows", vec![m(4, 3)], Box::new(|g, x| g.slice_rows(x[0], 1, 2))),
        ("reshape", vec![m(2, 3)], Box::new(|g, x| g.reshape(x[0], vec![3, 2]))),
        ("sum", vec![m(2, 3)], Box::new(|g, x| g.sum(x[0]))),
        ("mean", vec![v(5, -1.0, 1.0)], Box::new(|g, x| g.mean(x[0]))),
        ("sum_last", vec![m(3, 4)], Box::new(|g, x| g.sum_last(x[0]))),
        ("softmax", vec![v(5, -2.0, 2.0)], Box::new(|g, x| g.softmax(x[0]))),
    ]
}

fn store_from(g: &mut Graph<f64>, keys: Var, values: Var, strengths: Var, n: usize, dim: usize, width: usize) -> lie_mem::Result<MemoryStore> {
    let mut store = MemoryStore::new(dim, width);
    for i in 0..n {
        let k = g.slice(keys, i * dim, dim)?;
        let v = g.slice(values, i * width, width)?;
        let s = g.slice(strengths, i, 1)?;
        store = append_write(g, &store, k, v, s)?;
    }
    Ok(store)
}

fn weighting_cases() -> Vec<Case> {
    let n = 4;
    let shapes = |dim: usize| vec![(vec![dim], -1.0, 1.0), (vec![n * dim], -1.0, 1.0), (vec![n * 3], -1.0, 1.0), (vec![n], 0.2, 1.0)];
    let mut with_t = shapes(2);
    with_t.push((vec![1], 0.3, 2.0));
    vec![
        (
            "inverse-square read",
            shapes(2),
            Box::new(move |g, x| {
                let st = store_from(g, x[1], x[2], x[3], n, 2, 3).map_err(lift)?;
                let w = memory::read_inverse_square(g, x[0], &st).map_err(lift)?;
                memory::smooth(g, Some(w), &st).map_err(lift)
            }),
        ),
        (
            "softmax read",
            with_t,
            Box::new(move |g, x| {
                let st = store_from(g, x[1], x[2], x[3], n, 2, 3).map_err(lift)?;
                let w = memory::read_softmax(g, x[0], &st, x[4]).map_err(lift)?;
                memory::smooth(g, Some(w), &st).map_err(lift)
            }),
        ),
        (
            "ram read",
            shapes(3),
            Box::new(move |g, x| {
                let st = store_from(g, x[1], x[2], x[3], n, 3, 3).map_err(lift)?;
                let w = memory::read_ram(g, x[0], &st).map_err(lift)?;
                memory::smooth(g, Some(w), &st).map_err(lift)
            }),
        ),
        (
            "sharpen",
            vec![(vec![5], 0.1, 1.0), (vec![1], 1.0, 3.0)],
            Box::new(|g, x| {
                let w = g.softmax(x[0])?;
                memory::sharpen(g, w, x[1]).map_err(lift)
            }),
        ),
        (
            "tape shift",
            vec![(vec![5], -1.0, 1.0), (vec![3], -1.0, 1.0)],
            Box::new(|g, x| {
                let q = g.softmax(x[0])?;
                let k = g.softmax(x[1])?;
                memory::tape_shift(g, q, k).map_err(lift)
            }),
        ),
        (
            "neighbor keys",
            vec![(vec![n], -1.0, 1.0), (vec![n * 3], -1.0, 1.0), (vec![n * 2], -1.0, 1.0), (vec![n], 0.2, 1.0)],
            Box::new(move |g, x| {
                let st = store_from(g, x[1], x[2], x[3], n, 3, 2).map_err(lift)?;
                let w = g.softmax(x[0])?;
                let (l, r) = memory::neighbor_keys(g, w, &st).map_err(lift)?;
                g.concat(&[l, r])
            }),
        ),
    ]
}

fn geometry_cases() -> Vec<Case> {
    vec![
        (
            "rodrigues",
            vec![(vec![3], -1.0, 1.0), (vec![1], -3.0, 3.0), (vec![3], -1.0, 1.0)],
            Box::new(|g, x| {
                let axis = normalize_var(g, x[0]).map_err(lift)?;
                let key = normalize_var(g, x[2]).map_err(lift)?;
                apply_var(g, &ActionVar::Rotation { axis, angle: x[1] }, key).map_err(lift)
            }),
        ),
        (
            "shift",
            vec![(vec![2], -1.0, 1.0), (vec![2], -1.0, 1.0)],
            Box::new(|g, x| apply_var(g, &ActionVar::Shift(x[0]), x[1]).map_err(lift)),
        ),
        (
            "plane key interpolation",
            vec![(vec![1], 0.0, 1.0), (vec![2], -1.0, 1.0), (vec![2], -1.0, 1.0)],
            Box::new(|g, x| interpolate_keys_var(g, Manifold::Plane, x[0], x[1], x[2]).map_err(lift)),
        ),
        (
            "sphere key interpolation",
            vec![(vec![1], 0.0, 1.0), (vec![3], 0.2, 1.0), (vec![3], 0.2, 1.0)],
            Box::new(|g, x| {
                let q = normalize_var(g, x[1]).map_err(lift)?;
                let qt = normalize_var(g, x[2]).map_err(lift)?;
                interpolate_keys_var(g, Manifold::Sphere, x[0], q, qt).map_err(lift)
            }),
        ),
        (
            "shift action interpolation",
            vec![(vec![1], 0.0, 1.0), (vec![2], -1.0, 1.0), (vec![2], -1.0, 1.0), (vec![2], -1.0, 1.0)],
            Box::new(|g, x| match interpolate_actions_var(g, x[0], &ActionVar::Shift(x[1]), &ActionVar::Shift(x[2])).map_err(lift)? {
                ActionVar::Shift(a) => apply_var(g, &ActionVar::Shift(a), x[3]).map_err(lift),
                _ => unreachable!(),
            }),
        ),
        (
            "rotation action interpolation",
            vec![(vec![1], 0.0, 1.0), (vec![3], 0.2, 1.0), (vec![1], -2.0, 2.0), (vec![3], 0.2, 1.0), (vec![1], -2.0, 2.0), (vec![3], -1.0, 1.0)],
            Box::new(|g, x| {
                let cand = ActionVar::Rotation { axis: normalize_var(g, x[1]).map_err(lift)?, angle: x[2] };
                let prev = ActionVar::Rotation { axis: normalize_var(g, x[3]).map_err(lift)?, angle: x[4] };
                let a = interpolate_actions_var(g, x[0], &cand, &prev).map_err(lift)?;
                let key = normalize_var(g, x[5]).map_err(lift)?;
                apply_var(g, &a, key).map_err(lift)
            }),
        ),
    ]
}

fn check_case(case: &Case, seeds: u64, tol: f64) -> Result<f64, String> {
    let (name, shapes, f) = case;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let point: Vec<Tensor<f64>> = shapes.iter().map(|(s, lo, hi)| rand_tensor(&mut rng, s, *lo, *hi)).collect();
        let err = grad_check(
            |g: &mut Graph<f64>, x: &[Var]| {
                let y = f(g, x)?;
                project(g, y, seed)
            },
            &point,
            DEFAULT_EPSILON,
        )
        .map_err(|e| format!("{name} seed {seed}: {e}"))?;
        ensure(err < tol, || format!("{name} seed {seed}: relative error {err:.2e}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn small_model_config(kind: ModelKind) -> ModelConfig {
    let mut c = ModelConfig::preset(kind, 3);
    c.cells = 6;
    c.embed = 4;
    c.memory_width = 3;
    c
}

fn end_to_end_error(config: &ModelConfig, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let model = Model::<f64>::new(config.clone(), InitScheme::FanIn, seed + 100).map_err(|e| e.to_string())?;
    let input: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
    let mut targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
    targets.push(model.vocab().end());
    grad_check(
        |g: &mut Graph<f64>, vars: &[Var]| {
            let bound = BoundParams::from_vars(vars.to_vec());
            let fwd = model.encode_decode(g, &bound, &input, Decode::Steps(targets.len()), false).map_err(lift)?;
            nll_loss(g, &fwd.logits, &targets).map_err(lift)
        },
        model.params().tensors(),
        DEFAULT_EPSILON,
    )
    .map_err(|e| e.to_string())
}

#[test]
fn criterion_01_gradient_correctness() {
    criterion(1, "gradient correctness", || {
        let start = Instant::now();
        let mut worst_op: f64 = 0.0;
        let cases: Vec<Case> = op_cases().into_iter().chain(weighting_cases()).chain(geometry_cases()).collect();
        for case in &cases {
            worst_op = worst_op.max(check_case(case, 10, 1e-5)?);
        }
        let mut configs: Vec<ModelConfig> =
            [ModelKind::Lantm, ModelKind::Slantm, ModelKind::Ram, ModelKind::RamTape, ModelKind::Lstm].into_iter().map(small_model_config).collect();
        let mut soft = small_model_config(ModelKind::Lantm);
        soft.weighting = Weighting::Softmax;
        configs.push(soft);
        let mut worst_model: f64 = 0.0;
        for config in &configs {
            for seed in 0..10 {
                let err = end_to_end_error(config, seed)?;
                ensure(err < 1e-4, || format!("{:?} end-to-end seed {seed}: relative error {err:.2e}", config.kind))?;
                worst_model = worst_model.max(err);
            }
        }
        within(start, Duration::from_secs(120), "gradient checks")?;
        Ok(format!("{} op cases worst {worst_op:.1e}, {} models worst {worst_model:.1e}", cases.len(), configs.len()))
    });
}

fn random_plane(rng: &mut ChaCha8Rng) -> Key<f64> {
    Key::plane(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0))
}

fn random_sphere(rng: &mut ChaCha8Rng) -> Key<f64> {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-4 {
            return Key::sphere(v).unwrap();
        }
    }
}

fn random_shift(rng: &mut ChaCha8Rng) -> LieAction<f64> {
    LieAction::Shift { alpha: rng.gen_range(-5.0..5.0), beta: rng.gen_range(-5.0..5.0) }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> LieAction<f64> {
    let axis = random_sphere(rng);
    let c = axis.coords();
    LieAction::rotation([c[0], c[1], c[2]], rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)).unwrap()
}

fn max_diff(a: &Key<f64>, b: &Key<f64>) -> f64 {
    a.coords().iter().zip(b.coords()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_02_group_geometry() {
    criterion(2, "group and geometry suite", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let (x, y) = (random_plane(&mut rng), random_plane(&mut rng));
            let (a, b, c) = (random_shift(&mut rng), random_shift(&mut rng), random_shift(&mut rng));
            worst = worst.max(max_diff(&apply(&LieAction::identity(Manifold::Plane), &x).unwrap(), &x));
            worst = worst.max(max_diff(&apply(&inverse(&a), &apply(&a, &x).unwrap()).unwrap(), &x));
            let left = compose_shifts(&compose_shifts(&a, &b).unwrap(), &c).unwrap();
            let right = compose_shifts(&a, &compose_shifts(&b, &c).unwrap()).unwrap();
            worst = worst.max(max_diff(&apply(&left, &x).unwrap(), &apply(&right, &x).unwrap()));
            worst = worst.max(max_diff(&apply(&compose_shifts(&a, &b).unwrap(), &x).unwrap(), &apply(&a, &apply(&b, &x).unwrap()).unwrap()));
            let d0 = distance(&x, &y).unwrap();
            let d1 = distance(&apply(&a, &x).unwrap(), &apply(&a, &y).unwrap()).unwrap();
            worst = worst.max((d0 - d1).abs());

            let (p, q) = (random_sphere(&mut rng), random_sphere(&mut rng));
            let r = random_rotation(&mut rng);
            worst = worst.max(max_diff(&apply(&LieAction::identity(Manifold::Sphere), &p).unwrap(), &p));
            let rp = apply(&r, &p).unwrap();
            worst = worst.max(max_diff(&apply(&inverse(&r), &rp).unwrap(), &p));
            let norm = rp.coords().iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max((norm - 1.0).abs());
            let d0 = distance(&p, &q).unwrap();
            let d1 = distance(&rp, &apply(&r, &q).unwrap()).unwrap();
            worst = worst.max((d0 - d1).abs());
        }
        ensure(worst < 1e-9, || format!("max deviation {worst:.2e}"))?;
        within(start, Duration::from_secs(30), "geometry suite")?;
        Ok(format!("10000 samples, max deviation {worst:.1e}"))
    });
}

fn weights_of(g: &Graph<f64>, w: Var) -> Vec<f64> {
    g.data(w).to_vec()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_03_softmax_ram_equivalence() {
    criterion(3, "sphere softmax equals scaled RAM", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n = rng.gen_range(1..=32);
            let keys: Vec<Vec<f64>> = (0..n).map(|_| random_sphere(&mut rng).coords().to_vec()).collect();
            let values: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
            let strengths: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let q = random_sphere(&mut rng).coords().to_vec();
            let t = rng.gen_range(0.1..5.0);
            let mut g = Graph::<f64>::with_mode(Mode::Exact);
            let store = MemoryStore::from_entries(&mut g, &keys, &values, &strengths).unwrap();
            let qv = g.vector(q.clone());
            let tv = g.scalar(t);
            let soft = memory::read_softmax(&mut g, qv, &store, tv).unwrap();
            let pointer = g.vector(q.iter().map(|x| 2.0 / t * x).collect());
            let ram = memory::read_ram(&mut g, pointer, &store).unwrap();
            worst = worst.max(max_abs(&weights_of(&g, soft), &weights_of(&g, ram)));
        }
        ensure(worst < 1e-9, || format!("max weight difference {worst:.2e}"))?;
        Ok(format!("1000 stores, max difference {worst:.1e}"))
    });
}

#[test]
fn criterion_04_weighting_oracles() {
    criterion(4, "weighting oracles", || {
        let lattice: Vec<Vec<f64>> = [-1.0, 0.0, 1.0].iter().flat_map(|&x| [-1.0, 0.0, 1.0].map(|y| vec![x, y])).collect();
        let strength_levels = [0.0, 0.5, 1.0];
        let mut worst: f64 = 0.0;
        let mut cases = 0usize;
        let mut check = |keys: &[Vec<f64>], s: &[f64], q: &[f64], t: f64, gamma: f64| {
            let mut g = Graph::<f64>::with_mode(Mode::Exact);
            let values: Vec<Vec<f64>> = keys.iter().map(|_| vec![0.0]).collect();
            let store = MemoryStore::from_entries(&mut g, keys, &values, s).unwrap();
            let qv = g.vector(q.to_vec());
            let tv = g.scalar(t);
            let inv = memory::read_inverse_square(&mut g, qv, &store).unwrap();
            let soft = memory::read_softmax(&mut g, qv, &store, tv).unwrap();
            let ram = memory::read_ram(&mut g, qv, &store).unwrap();
            let gv = g.scalar(gamma);
            let sharp = memory::sharpen(&mut g, soft, gv).unwrap();
            let soft_expected = softmax_formula(q, keys, s, t);
            let diffs = [
                max_abs(&weights_of(&g, inv), &inverse_square_formula(q, keys, s)),
                max_abs(&weights_of(&g, soft), &soft_expected),
                max_abs(&weights_of(&g, ram), &ram_formula(q, keys, s)),
                max_abs(&weights_of(&g, sharp), &sharpen_formula(&soft_expected, gamma)),
            ];
            for d in diffs {
                worst = worst.max(d);
            }
            cases += 1;
        };
        for n in 1..=2 {
            let combos = 9usize.pow(n as u32);
            for code in 0..combos {
                let keys: Vec<Vec<f64>> = (0..n).map(|i| lattice[(code / 9usize.pow(i as u32)) % 9].clone()).collect();
                for s_code in 0..3usize.pow(n as u32) {
                    let s: Vec<f64> = (0..n).map(|i| strength_levels[(s_code / 3usize.pow(i as u32)) % 3]).collect();
                    for q in &lattice {
                        check(&keys, &s, q, 0.7, 2.0);
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20_000 {
            let n = rng.gen_range(1..=5);
            let keys: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
            let s: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
            let q = if rng.gen_bool(0.2) { keys[rng.gen_range(0..n)].clone() } else { vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)] };
            check(&keys, &s, &q, rng.gen_range(0.1..3.0), rng.gen_range(1.0..4.0));
        }
        ensure(worst < 1e-9, || format!("max weight difference {worst:.2e}"))?;
        Ok(format!("{cases} stores, max difference {worst:.1e}"))
    });
}

#[test]
fn criterion_05_task_generators() {
    criterion(5, "task generators", || {
        for task in Task::ALL {
            let spec = TaskSpec::new(task, 5);
            let at = spec.vocab().at();
            for regime in [Regime::InSample, Regime::Double] {
                let (lo, hi) = spec.range(regime);
                if regime == Regime::Double {
                    ensure(lo == spec.max + 1 && hi == 2 * spec.max, || format!("{task:?} 2x range {lo}..{hi}"))?;
                }
                for inst in generate(&spec, 10_000, regime).map_err(|e| e.to_string())? {
                    ensure(inst.size >= lo && inst.size <= hi, || format!("{task:?} size {} outside {lo}..{hi}", inst.size))?;
                    ensure(inst.target == task_oracle(task, &inst.input, at), || format!("{task:?} target mismatch on {:?}", inst.input))?;
                }
            }
        }
        Ok("8 tasks x 2 regimes x 10000 instances".into())
    });
}

/// Shipped desk-scale config with the seed replaced.
fn desk(name: &str, seed: u64) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk").join(name);
    RunConfig::load(&path, &Overrides { seed: Some(seed), ..Overrides::default() }).unwrap()
}

fn desk_run(cfg: &RunConfig) -> RunRecord {
    run_training(&cfg.model, &cfg.train, &cfg.task).unwrap().0
}

/// Trains seeds 1 to 3 in order until one reaches `goal`.
fn best_of_three(name: &str, goal: f64) -> (bool, Vec<(u64, f64, f64)>) {
    let mut seen = Vec::new();
    for seed in 1..=3 {
        let record = desk_run(&desk(name, seed));
        seen.push((seed, record.fine, record.coarse));
        if record.failed.is_none() && record.coarse >= goal {
            return (true, seen);
        }
    }
    (false, seen)
}

fn describe(seen: &[(u64, f64, f64)]) -> String {
    seen.iter().map(|(s, f, c)| format!("seed {s} fine {f:.3} coarse {c:.3}")).collect::<Vec<_>>().join(", ")
}

fn same_budget(a: &RunConfig, b: &RunConfig) -> bool {
    (a.train.samples, a.train.passes, a.train.batch_size, &a.task) == (b.train.samples, b.train.passes, b.train.batch_size, &b.task)
}

#[test]
fn criterion_06_desk_scale_copy() {
    criterion(6, "desk-scale LANTM copy vs LSTM", || {
        let start = Instant::now();
        let lantm_cfg = desk("lantm-copy.cfg", 1);
        let lstm_cfg = desk("lstm-copy.cfg", 1);
        ensure(lantm_cfg.task.min == 2 && lantm_cfg.task.max == 8 && lantm_cfg.task.vocab == 16, || "wrong task range".into())?;
        ensure(lantm_cfg.train.samples == 8000 && lantm_cfg.train.batch_size == 32, || "wrong budget".into())?;
        ensure(lantm_cfg.model.weighting == Weighting::InverseSquare, || "wrong weighting".into())?;
        ensure(same_budget(&lantm_cfg, &lstm_cfg), || "LSTM budget differs".into())?;
        let (solved, seen) = best_of_three("lantm-copy.cfg", 0.9);
        let lstm = desk_run(&lstm_cfg);
        let detail = format!("LANTM {}; LSTM fine {:.3} coarse {:.3}", describe(&seen), lstm.fine, lstm.coarse);
        ensure(solved, || format!("no LANTM seed reached coarse 0.90: {detail}"))?;
        ensure(lstm.coarse < 0.1, || format!("LSTM baseline too strong: {detail}"))?;
        within(start, Duration::from_secs(3600), "desk-scale copy")?;
        Ok(detail)
    });
}

#[test]
fn criterion_07_desk_scale_slantm_reverse() {
    criterion(7, "desk-scale SLANTM reverse", || {
        let start = Instant::now();
        let cfg = desk("slantm-reverse.cfg", 1);
        ensure(cfg.task.task == Task::Reverse && cfg.task.min == 2 && cfg.task.max == 8 && cfg.task.vocab == 16, || "wrong task".into())?;
        ensure(cfg.train.samples == 8000 && cfg.train.batch_size == 32, || "wrong budget".into())?;
        let (solved, seen) = best_of_three("slantm-reverse.cfg", 0.8);
        let detail = describe(&seen);
        ensure(solved, || format!("no seed reached coarse 0.80: {detail}"))?;
        within(start, Duration::from_secs(3600), "desk-scale reverse")?;
        Ok(detail)
    });
}

#[test]
fn criterion_08_scoring_protocol() {
    criterion(8, "scoring protocol", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let end = 6;
        for _ in 0..10_000 {
            let target: Vec<usize> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..end)).collect();
            let mut pred: Vec<usize> = target.iter().copied().chain([end]).collect();
            match rng.gen_range(0..4) {
                0 => {}
                1 => pred.truncate(rng.gen_range(0..=pred.len())),
                2 => {
                    let i = rng.gen_range(0..pred.len());
                    pred[i] = rng.gen_range(0..=end);
                }
                _ => pred = (0..rng.gen_range(0..10)).map(|_| rng.gen_range(0..=end)).collect(),
            }
            let got = score(&pred, &target, end);
            ensure(got == reference_score(&pred, &target, end), || format!("{pred:?} vs {target:?}: {got:?}"))?;
            ensure(got.1 <= got.0, || format!("coarse above fine on {pred:?}"))?;
        }
        Ok("10000 pairs".into())
    });
}

#[test]
fn criterion_09_determinism_and_persistence() {
    criterion(9, "determinism and persistence", || {
        let spec = TaskSpec::new(Task::Reverse, 3).with_range(2, 5).with_vocab(8);
        let train = TrainConfig { samples: 96, passes: 2, eval_count: 200, seed: 11, ..TrainConfig::default() };
        let mut kinds = Vec::new();
        for kind in [ModelKind::Lantm, ModelKind::Slantm, ModelKind::Ram, ModelKind::RamTape, ModelKind::Lstm] {
            let mut config = ModelConfig::preset(kind, 8);
            if kind == ModelKind::Lstm {
                config.cells = 32;
                config.embed = 16;
            }
            let (a, model) = run_training(&config, &train, &spec).map_err(|e| e.to_string())?;
            let (b, _) = run_training(&config, &train, &spec).map_err(|e| e.to_string())?;
            ensure(a.same_outcome(&b), || format!("{kind:?} records differ"))?;
            ensure(a.to_json_line().unwrap() != "", || "empty record".into())?;
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let path = dir.path().join("model.ckpt");
            checkpoint::save(&path, &model).map_err(|e| e.to_string())?;
            let loaded = checkpoint::load::<f32>(&path).map_err(|e| e.to_string())?;
            let held = eval_set(&spec, &train).map_err(|e| e.to_string())?;
            let report = evaluate(&loaded, Some(Task::Reverse), &held).map_err(|e| e.to_string())?;
            ensure((report.fine, report.coarse) == (a.fine, a.coarse), || format!("{kind:?} reload scored {:?} vs {:?}", (report.fine, report.coarse), (a.fine, a.coarse)))?;
            kinds.push(kind.name());
        }
        Ok(format!("identical records and reloaded scores for {}", kinds.join(", ")))
    });
}

#[test]
fn criterion_10_trace_integrity() {
    criterion(10, "trace integrity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut checked = 0;
        for kind in [ModelKind::Lantm, ModelKind::Slantm, ModelKind::Ram, ModelKind::RamTape] {
            for seed in 0..5 {
                let model = Model::<f32>::new(ModelConfig::preset(kind, 16), InitScheme::Uniform1, seed).map_err(|e| e.to_string())?;
                let len = rng.gen_range(1..=16);
                let input: Vec<usize> = (0..len).map(|_| rng.gen_range(0..16)).collect();
                let mut g = Graph::<f32>::new();
                let b = model.params().bind(&mut g);
                let f = model.encode_decode(&mut g, &b, &input, Decode::Greedy { max_steps: 2 * len + 10 }, true).map_err(|e| e.to_string())?;
                let mut buf = Vec::new();
                lie_mem::trace::write_jsonl(&mut buf, &f.trace).map_err(|e| e.to_string())?;
                let events = lie_mem::trace::read_jsonl(&buf[..]).map_err(|e| e.to_string())?;
                let steps = len + 2;
                for step in 0..steps {
                    let writes = events.iter().filter(|e| e.phase == Phase::Encode && e.step == step && e.head == HeadKind::Write).count();
                    ensure(writes == 1, || format!("{kind:?} encoder step {step} has {writes} writes"))?;
                }
                ensure(f.memory_len == steps, || format!("{kind:?} memory {} after {steps} steps", f.memory_len))?;
                let decode_writes = events.iter().filter(|e| e.phase == Phase::Decode && e.head == HeadKind::Write).count();
                ensure(decode_writes == 0, || format!("{kind:?} decoder wrote {decode_writes} times"))?;
                ensure(f.decoder_memory_lens.iter().all(|&n| n == steps), || format!("{kind:?} memory changed while decoding"))?;
                checked += 1;
            }
        }
        Ok(format!("{checked} traced runs"))
    });
}
