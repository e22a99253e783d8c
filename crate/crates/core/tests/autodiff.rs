use hestia::autodiff::numeric::{numeric_gradient, rel_err};
use hestia::autodiff::{cross_entropy_loss, grad, hvp, mse_loss, no_grad, Tensor};
use hestia::models::data::{generate_task, SyntheticTask};
use hestia::models::{MlpSpec, Model, ModelSpec, Nonlinearity, TinyTransformerSpec};
use hestia::sensitivity::hvp_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-3;
const POINTS: usize = 100;

type Op<'a> = dyn Fn(&[Tensor]) -> Tensor + 'a;

/// Projects a tensor output onto fixed pseudo-random weights so every
/// output coordinate contributes to the scalar.
fn project(y: &Tensor) -> Tensor {
    let c: Vec<f64> = (0..y.numel()).map(|i| ((i as f64 + 1.0) * 0.731).sin() + 0.3).collect();
    y.mul(&Tensor::new(y.shape(), c).unwrap()).unwrap().sum()
}

fn split(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut at = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(flat[at..at + n].to_vec());
        at += n;
    }
    out
}

/// Max relative error between reverse-mode and central-difference
/// gradients over `POINTS` random inputs drawn by `sample`.
fn gradcheck(
    name: &str,
    shapes: &[Vec<usize>],
    sample: &dyn Fn(&mut ChaCha8Rng, usize) -> f64,
    f: &Op<'_>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        let x: Vec<f64> = (0..total).map(|i| sample(&mut rng, i)).collect();
        let params: Vec<Tensor> = split(&x, shapes)
            .into_iter()
            .zip(shapes)
            .map(|(d, s)| Tensor::param(s, d).unwrap())
            .collect();
        let loss = project(&f(&params));
        let refs: Vec<&Tensor> = params.iter().collect();
        let analytic: Vec<f64> = grad(&loss, &refs).unwrap().iter().flat_map(|g| g.to_vec()).collect();
        let numeric = numeric_gradient(
            |z| {
                no_grad(|| {
                    let ts: Vec<Tensor> = split(z, shapes)
                        .into_iter()
                        .zip(shapes)
                        .map(|(d, s)| Tensor::new(s, d).unwrap())
                        .collect();
                    project(&f(&ts)).item().unwrap()
                })
            },
            &x,
            H,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n, FLOOR));
        }
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
    worst
}

fn normal(r: &mut ChaCha8Rng, _: usize) -> f64 {
    r.random_range(-2.0..2.0)
}

fn positive(r: &mut ChaCha8Rng, _: usize) -> f64 {
    r.random_range(0.3..3.0)
}

/// Keeps clear of the kink at zero.
fn off_kink(r: &mut ChaCha8Rng, _: usize) -> f64 {
    let m = r.random_range(0.05..2.0);
    if r.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn s(d: &[usize]) -> Vec<usize> {
    d.to_vec()
}

#[test]
fn elementwise_binary() {
    let shapes = [s(&[3, 4]), s(&[3, 4])];
    gradcheck("add", &shapes, &normal, &|t| t[0].add(&t[1]).unwrap());
    gradcheck("sub", &shapes, &normal, &|t| t[0].sub(&t[1]).unwrap());
    gradcheck("mul", &shapes, &normal, &|t| t[0].mul(&t[1]).unwrap());
    gradcheck("div", &shapes, &|r, i| if i < 12 { normal(r, i) } else { positive(r, i) }, &|t| {
        t[0].div(&t[1]).unwrap()
    });
    // interleave so the two operands never tie
    gradcheck(
        "maximum",
        &shapes,
        &|r, i| {
            let base = (i % 12) as f64 * 0.37 - 2.0;
            base + if i < 12 { 0.0 } else { 0.1 } + r.random_range(-0.04..0.04)
        },
        &|t| t[0].maximum(&t[1]).unwrap(),
    );
}

#[test]
fn scalar_broadcast() {
    let shapes = [s(&[2, 3]), s(&[])];
    gradcheck("add_bcast", &shapes, &normal, &|t| t[0].add(&t[1]).unwrap());
    gradcheck("mul_bcast", &shapes, &normal, &|t| t[0].mul(&t[1]).unwrap());
    gradcheck("sub_bcast_left", &shapes, &normal, &|t| t[1].sub(&t[0]).unwrap());
    gradcheck("div_bcast", &shapes, &|r, i| if i < 6 { normal(r, i) } else { positive(r, i) }, &|t| {
        t[0].div(&t[1]).unwrap()
    });
}

#[test]
fn elementwise_unary() {
    let sh = [s(&[4, 3])];
    gradcheck("neg", &sh, &normal, &|t| t[0].neg());
    gradcheck("scale", &sh, &normal, &|t| t[0].scale(-1.7));
    gradcheck("add_scalar", &sh, &normal, &|t| t[0].add_scalar(0.4));
    gradcheck("exp", &sh, &normal, &|t| t[0].exp());
    gradcheck("ln", &sh, &positive, &|t| t[0].ln());
    gradcheck("square", &sh, &normal, &|t| t[0].square());
    gradcheck("abs", &sh, &off_kink, &|t| t[0].abs());
    gradcheck("relu", &sh, &off_kink, &|t| t[0].relu());
    gradcheck("tanh", &sh, &normal, &|t| t[0].tanh());
    gradcheck("gelu", &sh, &normal, &|t| t[0].gelu().unwrap());
}

#[test]
fn structural_ops() {
    gradcheck("matmul", &[s(&[3, 4]), s(&[4, 2])], &normal, &|t| t[0].matmul(&t[1]).unwrap());
    gradcheck("transpose", &[s(&[3, 5])], &normal, &|t| t[0].transpose().unwrap());
    gradcheck("sum", &[s(&[3, 5])], &normal, &|t| t[0].sum());
    gradcheck("mean", &[s(&[3, 5])], &normal, &|t| t[0].mean());
    gradcheck("sum_rows", &[s(&[3, 5])], &normal, &|t| t[0].sum_rows().unwrap());
    gradcheck("expand_cols", &[s(&[3, 1])], &normal, &|t| t[0].expand_cols(4).unwrap());
    gradcheck("reshape", &[s(&[3, 4])], &normal, &|t| t[0].reshape(&[2, 6]).unwrap());
    gradcheck("slice_rows", &[s(&[5, 2])], &normal, &|t| t[0].slice_rows(1, 3).unwrap());
    gradcheck("pad_rows", &[s(&[2, 3])], &normal, &|t| t[0].pad_rows(1, 5).unwrap());
    gradcheck("concat_rows", &[s(&[2, 3]), s(&[1, 3])], &normal, &|t| {
        Tensor::concat_rows(&[t[0].clone(), t[1].clone()]).unwrap()
    });
}

#[test]
fn softmax_and_losses() {
    gradcheck("softmax_rows", &[s(&[3, 4])], &normal, &|t| t[0].softmax_rows().unwrap());
    gradcheck("log_softmax_rows", &[s(&[3, 4])], &normal, &|t| t[0].log_softmax_rows().unwrap());
    gradcheck("mse_loss", &[s(&[4, 2])], &normal, &|t| {
        let target = Tensor::new(&[4, 2], vec![0.5, -1.0, 0.2, 0.0, 1.5, -0.3, 0.9, 0.1]).unwrap();
        mse_loss(&t[0], &target).unwrap()
    });
    gradcheck("cross_entropy", &[s(&[4, 3])], &normal, &|t| {
        cross_entropy_loss(&t[0], &[0, 2, 1, 2], None).unwrap()
    });
    gradcheck("cross_entropy_weighted", &[s(&[4, 3])], &normal, &|t| {
        cross_entropy_loss(&t[0], &[0, 2, 1, 2], Some(&[1.0, 0.0, 0.5, 1.0])).unwrap()
    });
}

#[test]
fn composed_two_layer_mlp() {
    let x: Vec<f64> = (0..5 * 3).map(|i| ((i as f64) * 1.3).cos()).collect();
    let y: Vec<f64> = (0..5).map(|i| (i as f64 * 0.7).sin()).collect();
    gradcheck("mlp", &[s(&[3, 6]), s(&[6, 1])], &|r, _| r.random_range(-1.0..1.0), &|t| {
        let x = Tensor::new(&[5, 3], x.clone()).unwrap();
        let h = x.matmul(&t[0]).unwrap().tanh();
        let out = h.matmul(&t[1]).unwrap();
        mse_loss(&out, &Tensor::new(&[5, 1], y.clone()).unwrap()).unwrap()
    });
}

fn small_mlp(nl: Nonlinearity, seed: u64) -> (Model, hestia::models::data::Batch) {
    let spec = ModelSpec::Mlp(MlpSpec {
        input_dim: 4,
        hidden: vec![5],
        output_dim: 2,
        nonlinearity: nl,
        seed,
        random_bias: true,
    });
    let model = Model::build(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = hestia::models::data::Batch {
        inputs: hestia::models::data::Inputs::Dense {
            values: (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            dim: 4,
        },
        targets: hestia::models::data::Targets::Regression {
            values: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            dim: 2,
        },
    };
    (model, batch)
}

fn model_gradcheck(model: &Model, batch: &hestia::models::data::Batch) -> f64 {
    let leaves = model.leaves(true);
    let loss = model.loss(&leaves, batch).unwrap();
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let analytic: Vec<f64> = grad(&loss, &refs).unwrap().iter().flat_map(|g| g.to_vec()).collect();
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape.clone()).collect();
    let x: Vec<f64> = model.params().iter().flat_map(|p| p.values.clone()).collect();
    let numeric = numeric_gradient(
        |z| {
            no_grad(|| {
                let ts: Vec<Tensor> = split(z, &shapes)
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Tensor::new(s, d).unwrap())
                    .collect();
                model.loss(&ts, batch).unwrap().item().unwrap()
            })
        },
        &x,
        H,
    );
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n, FLOOR))
        .fold(0.0, f64::max)
}

#[test]
fn model_losses_match_finite_differences() {
    for seed in 0..10 {
        for nl in [Nonlinearity::Tanh, Nonlinearity::Gelu] {
            let (model, batch) = small_mlp(nl, seed);
            let e = model_gradcheck(&model, &batch);
            assert!(e < TOL, "seed {seed} {nl:?}: {e:e}");
        }
    }
}

#[test]
fn transformer_loss_matches_finite_differences() {
    let spec = TinyTransformerSpec::new(6, 4, 4, 3);
    let model = Model::build(&ModelSpec::Transformer(spec)).unwrap();
    let mut task = SyntheticTask::sequence_copy(3);
    task.vocab = 6;
    task.seq_len = 4;
    task.train_size = 2;
    task.heldout_size = 2;
    let data = generate_task(&task).unwrap();
    let e = model_gradcheck(&model, &data.train);
    assert!(e < TOL, "{e:e}");
}

#[test]
fn primitive_examples() {
    let a = Tensor::ones(&[2, 3]);
    let b = Tensor::ones(&[3, 1]);
    assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![3.0, 3.0]);
    assert!(a.matmul(&a).is_err());
    assert!(a.add(&Tensor::ones(&[3, 2])).is_err());

    let x = Tensor::param(&[], vec![3.0]).unwrap();
    assert_eq!(grad(&x.square(), &[&x]).unwrap()[0].to_vec(), vec![6.0]);

    let w = Tensor::param(&[2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
    assert_eq!(grad(&w.sum(), &[&w]).unwrap()[0].to_vec(), vec![1.0; 4]);
    let w = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let g = grad(&w.square().sum().scale(0.5), &[&w]).unwrap();
    assert_eq!(g[0].to_vec(), vec![1.0, 2.0, 3.0]);

    // unrelated params get zeros; non-scalar losses are rejected
    let other = Tensor::param(&[2], vec![1.0, 1.0]).unwrap();
    assert_eq!(grad(&w.sum(), &[&other]).unwrap()[0].to_vec(), vec![0.0, 0.0]);
    assert!(grad(&w.square(), &[&w]).is_err());
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let w = Tensor::param(&[3], vec![0.2, -0.9, 1.4]).unwrap();
    let st = w.straight_through(vec![0.0, -1.0, 1.0]).unwrap();
    assert_eq!(st.to_vec(), vec![0.0, -1.0, 1.0]);
    let g = grad(&st.mul(&Tensor::new(&[3], vec![2.0, 3.0, 5.0]).unwrap()).unwrap().sum(), &[&w]).unwrap();
    assert_eq!(g[0].to_vec(), vec![2.0, 3.0, 5.0]);
    assert!(w.straight_through(vec![0.0]).is_err());
}

#[test]
fn backward_accumulates_into_leaves() {
    let w = Tensor::param(&[2], vec![1.0, -3.0]).unwrap();
    let loss = w.square().sum();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![4.0, -12.0]);
    w.zero_grad();
    assert_eq!(w.grad().unwrap_or_default().iter().sum::<f64>(), 0.0);
}

#[test]
fn hvp_quadratic_form() {
    let a = [4.0, 1.0, -0.5, 1.0, 3.0, 0.2, -0.5, 0.2, 2.0];
    let x = Tensor::param(&[3, 1], vec![0.3, -1.2, 0.8]).unwrap();
    let at = Tensor::new(&[3, 3], a.to_vec()).unwrap();
    let loss = x.transpose().unwrap().matmul(&at.matmul(&x).unwrap()).unwrap().sum().scale(0.5);
    let v = [1.0, -2.0, 0.5];
    let hv = hvp(&loss, &x, &v).unwrap().to_vec();
    for i in 0..3 {
        let expect: f64 = (0..3).map(|j| a[i * 3 + j] * v[j]).sum();
        assert!((hv[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn hvp_of_linear_loss_is_zero() {
    let x = Tensor::param(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let hv = hvp(&x.sum(), &x, &[1.0, -1.0, 2.0, 0.5]).unwrap();
    assert_eq!(hv.to_vec(), vec![0.0; 4]);
    assert!(hvp(&x.sum(), &x, &[1.0]).is_err());
}

#[test]
fn hvp_symmetry_on_random_mlps() {
    for seed in 0..10 {
        let (model, batch) = small_mlp(Nonlinearity::Tanh, seed);
        let batches = vec![batch];
        for idx in model.quantized_indices() {
            let mut oracle = hvp_oracle(&model, &batches, idx).unwrap();
            let n = model.params()[idx].numel();
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + idx as u64);
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hu = oracle(&u).unwrap();
            let hv = oracle(&v).unwrap();
            let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a * b).sum();
            let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
            let e = (vhu - uhv).abs() / (vhu.abs() + 1e-12);
            assert!(e < 1e-8, "seed {seed} tensor {idx}: {e:e}");
        }
    }
}

/// Dense Hessian by central differences of the reverse-mode gradient,
/// compared column by column with the HVP against basis vectors.
#[test]
fn hvp_matches_dense_hessian_oracle() {
    let (model, batch) = small_mlp(Nonlinearity::Gelu, 7);
    let batches = vec![batch.clone()];
    for idx in model.quantized_indices() {
        let n = model.params()[idx].numel();
        let base = model.leaves(false);
        let grad_at = |w: &[f64]| -> Vec<f64> {
            let mut leaves = base.clone();
            leaves[idx] = Tensor::param(&model.params()[idx].shape, w.to_vec()).unwrap();
            let loss = model.loss(&leaves, &batch).unwrap();
            grad(&loss, &[&leaves[idx]]).unwrap()[0].to_vec()
        };
        let w0 = model.params()[idx].values.clone();
        let mut oracle = hvp_oracle(&model, &batches, idx).unwrap();
        let mut worst = 0.0f64;
        for j in 0..n {
            let mut wp = w0.clone();
            wp[j] += H;
            let mut wm = w0.clone();
            wm[j] -= H;
            let (gp, gm) = (grad_at(&wp), grad_at(&wm));
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = oracle(&e).unwrap();
            for i in 0..n {
                let fd = (gp[i] - gm[i]) / (2.0 * H);
                worst = worst.max(rel_err(col[i], fd, FLOOR));
            }
        }
        assert!(worst < 1e-6, "tensor {idx}: {worst:e}");
    }
}

#[test]
fn identical_inputs_give_identical_gradients() {
    let run = || {
        let (model, batch) = small_mlp(Nonlinearity::Relu, 11);
        let leaves = model.leaves(true);
        let loss = model.loss(&leaves, &batch).unwrap();
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let g: Vec<u64> = grad(&loss, &refs)
            .unwrap()
            .iter()
            .flat_map(|g| g.to_vec())
            .map(f64::to_bits)
            .collect();
        (loss.item().unwrap().to_bits(), g)
    };
    assert_eq!(run(), run());
}
