//! Central finite-difference checks of every differentiable operation, 20
//! seeds each. Each function panics with the failing case.

use blankskip::ctc::{ctc_loss_node, factorized_log_probs, kl_frame_loss_node, FactorizedVars};
use blankskip::data::TaskGenerator;
use blankskip::encoder::{conformer_block, Encoder};
use blankskip::numerics::{grad_check, Graph, Rng, Tensor, Var};
use blankskip::train::{total_loss, LossOptions};
use blankskip::Result;

use super::{project, random_labels, tiny_model};

pub const TOL: f64 = 1e-4;
pub const EPS: f64 = 1e-4;
pub const SEEDS: u64 = 20;

thread_local! {
    static WORST: std::cell::Cell<(f64, usize)> = const { std::cell::Cell::new((0.0, 0)) };
}

/// Largest relative error seen on this thread and the number of checks run.
pub fn worst_so_far() -> (f64, usize) {
    WORST.get()
}

fn assert_grad(name: &str, seed: u64, point: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let err = grad_check(f, point, EPS).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
    WORST.set((WORST.get().0.max(err), WORST.get().1 + 1));
    assert!(err <= TOL, "{name} seed {seed}: relative error {err:e}");
}

type Unary = fn(&mut Graph, Var) -> Result<Var>;

pub fn unary_primitives() {
    let ops: [(&str, Unary); 13] = [
        ("scale", |g, x| Ok(g.scale(x, -1.7))),
        ("layer_norm", |g, x| Ok(g.layer_norm(x))),
        ("softmax", |g, x| Ok(g.softmax(x))),
        ("log_softmax", |g, x| Ok(g.log_softmax(x))),
        ("sigmoid", |g, x| Ok(g.sigmoid(x))),
        ("log_sigmoid", |g, x| Ok(g.log_sigmoid(x))),
        ("gelu", |g, x| Ok(g.gelu(x))),
        ("tanh", |g, x| Ok(g.tanh(x))),
        ("exp", |g, x| Ok(g.exp(x))),
        ("row_sum", |g, x| Ok(g.row_sum(x))),
        ("slice_cols", |g, x| g.slice_cols(x, 1, 2)),
        ("slice_rows", |g, x| g.slice_rows(x, 1, 2)),
        ("gather_rows", |g, x| g.gather_rows(x, &[2, 0, 2])),
    ];
    for (name, op) in ops {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let point = rng.normal_tensor(&[3, 4], 1.0);
            let proj_seed = rng.fork(7);
            assert_grad(name, seed, &point, |g, x| {
                let y = op(g, x)?;
                project(g, y, &mut proj_seed.clone())
            });
        }
    }
}

pub fn reductions() {
    for seed in 0..SEEDS {
        let point = Rng::new(seed).normal_tensor(&[3, 5], 1.0);
        assert_grad("sum", seed, &point, |g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        });
        assert_grad("mean", seed, &point, |g, x| {
            let y = g.exp(x);
            Ok(g.mean(y))
        });
    }
}

type Binary = fn(&mut Graph, Var, Var) -> Result<Var>;

/// Checks `op(a, b)` with respect to each argument while holding the other fixed.
fn check_binary(name: &str, a_shape: &[usize], b_shape: &[usize], op: Binary) {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let a = rng.normal_tensor(a_shape, 1.0);
        let b = rng.normal_tensor(b_shape, 1.0);
        let proj = rng.fork(3);
        assert_grad(&format!("{name}/lhs"), seed, &a, |g, x| {
            let other = g.constant(b.clone());
            let y = op(g, x, other)?;
            project(g, y, &mut proj.clone())
        });
        assert_grad(&format!("{name}/rhs"), seed, &b, |g, x| {
            let other = g.constant(a.clone());
            let y = op(g, other, x)?;
            project(g, y, &mut proj.clone())
        });
    }
}

pub fn binary_primitives() {
    check_binary("matmul", &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b));
    check_binary("matmul_nt", &[3, 4], &[5, 4], |g, a, b| g.matmul_nt(a, b));
    check_binary("add", &[3, 4], &[3, 4], |g, a, b| g.add(a, b));
    check_binary("sub", &[3, 4], &[3, 4], |g, a, b| g.sub(a, b));
    check_binary("mul", &[3, 4], &[3, 4], |g, a, b| g.mul(a, b));
    check_binary("add_row", &[3, 4], &[4], |g, a, b| g.add_row(a, b));
    check_binary("mul_row", &[3, 4], &[4], |g, a, b| g.mul_row(a, b));
    check_binary("concat_cols", &[3, 2], &[3, 3], |g, a, b| g.concat_cols(&[a, b]));
    check_binary("concat_rows", &[2, 3], &[1, 3], |g, a, b| g.concat_rows(&[a, b]));
    check_binary("scatter_rows", &[5, 3], &[2, 3], |g, a, b| g.scatter_rows(a, b, &[3, 1]));
    check_binary("depthwise_conv", &[6, 3], &[3, 3], |g, a, b| g.depthwise_conv(a, b));
}

pub fn conformer_block_gradients() {
    for conv in [true, false] {
        let cfg = tiny_model(conv, false);
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let enc = Encoder::new(cfg.clone(), &mut rng.fork(1)).unwrap();
            let x0 = rng.normal_tensor(&[5, cfg.model_dim], 1.0);
            let proj = rng.fork(2);
            let run = |g: &mut Graph, x: Var, swap: Option<&str>| {
                let mut b = enc.params().bind(g, false);
                let input = match swap {
                    Some(name) => {
                        b.set(name, x);
                        g.constant(x0.clone())
                    }
                    None => x,
                };
                let y = conformer_block(g, &b, "layers.0", input, &cfg)?;
                project(g, y, &mut proj.clone())
            };
            assert_grad("conformer_block/input", seed, &x0, |g, x| run(g, x, None));
            // A perturbed copy of each weight, so gradients are not taken at special values.
            for (name, w) in enc.params().iter().filter(|(n, _)| n.starts_with("layers.0.")) {
                let mut w = w.clone();
                for v in w.data_mut() {
                    *v += 0.1 * rng.normal();
                }
                assert_grad(&format!("conformer_block/{name}"), seed, &w, |g, x| run(g, x, Some(name)));
            }
        }
    }
}

pub fn full_pipeline_gradients() {
    for factorized in [false, true] {
        let cfg = tiny_model(true, factorized);
        let task = blankskip::data::TaskConfig {
            vocab_size: cfg.vocab_size,
            input_dim: cfg.input_dim,
            ..Default::default()
        };
        let generator = TaskGenerator::new(task).unwrap();
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let enc = Encoder::new(cfg.clone(), &mut rng.fork(1)).unwrap();
            let mut utt = generator.gen_utterance(&mut rng.fork(2), "u");
            utt.features = rng.normal_tensor(&[4, cfg.input_dim], 1.0);
            utt.labels = random_labels(&mut rng, 2, cfg.vocab_size);
            let opts = |use_kl| LossOptions {
                lambda_kl: 0.5,
                use_kl,
                use_mtl: true,
                kl_frame_weights: None,
            };
            for (name, w) in enc.params().iter() {
                // The distillation target is detached; only the intermediate head
                // leaves it unchanged under perturbation.
                for use_kl in [false, true] {
                    if use_kl && !name.starts_with("head_in") {
                        continue;
                    }
                    assert_grad(&format!("pipeline/{name}/kl={use_kl}"), seed, w, |g, x| {
                        let mut b = enc.params().bind(g, false);
                        b.set(name, x);
                        let f = enc.forward(g, &b, &utt.features, None)?;
                        let out = project(g, f.log_p, &mut Rng::new(seed + 100))?;
                        let loss = total_loss(g, &enc, &b, &[&utt], &opts(use_kl))?;
                        g.add(out, loss.total)
                    });
                }
            }
        }
    }
}

pub fn ctc_loss_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let t = rng.int_in(2, 7);
        let labels = loop {
            let l = random_labels(&mut rng, 3, 3);
            if l.min_frames() <= t {
                break l;
            }
        };
        let logits = rng.normal_tensor(&[t, 4], 1.0);
        assert_grad("ctc/normalized", seed, &logits, |g, x| {
            let lp = g.log_softmax(x);
            ctc_loss_node(g, lp, &labels)
        });
        let raw = rng.normal_tensor(&[t, 4], 0.5);
        assert_grad("ctc/raw", seed, &raw, |g, x| ctc_loss_node(g, x, &labels));
    }
}

pub fn kl_loss_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let logits = rng.normal_tensor(&[5, 4], 1.0);
        let mut gt = Graph::new();
        let t = gt.constant(rng.normal_tensor(&[5, 4], 1.0));
        let t = gt.log_softmax(t);
        let target = gt.value(t).clone();
        let weights: Vec<f64> = (0..5).map(|_| rng.uniform_in(0.1, 2.0)).collect();
        for w in [None, Some(weights.as_slice())] {
            assert_grad("kl", seed, &logits, |g, x| {
                let lp = g.log_softmax(x);
                kl_frame_loss_node(g, lp, &target, w)
            });
        }
    }
}

pub fn factorized_head_gradients() {
    let (d, v) = (4, 3);
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let tensors = [
            rng.normal_tensor(&[5, d], 1.0),
            rng.normal_tensor(&[1, d], 1.0),
            rng.normal_tensor(&[1], 1.0),
            rng.normal_tensor(&[v, d], 1.0),
            rng.normal_tensor(&[v], 1.0),
        ];
        let proj = rng.fork(5);
        for (which, name) in ["h", "gate", "gate_bias", "token", "token_bias"].iter().enumerate() {
            assert_grad(&format!("factorized/{name}"), seed, &tensors[which], |g, x| {
                let vars: Vec<Var> = tensors
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { g.constant(t.clone()) })
                    .collect();
                let head = FactorizedVars {
                    gate: vars[1],
                    gate_bias: vars[2],
                    token: vars[3],
                    token_bias: vars[4],
                };
                let y = factorized_log_probs(g, vars[0], head)?;
                project(g, y, &mut proj.clone())
            });
        }
    }
}
