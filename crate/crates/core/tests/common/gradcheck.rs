//! Finite-difference gradient suites shared by the test targets.

use s5cl::autodiff::{NormMode, ParamId, SeedStream, Tape, Tensor, Var};
use s5cl::losses::{
    cross_entropy_loss, pseudo_labeled_loss, self_supervised_loss, supcon_loss, total_loss,
    LossConfig, LossTerms,
};
use s5cl::model::{ModelConfig, NamedTensor, S5CLModel};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 50;
const TEMPERATURES: [f64; 3] = [0.1, 0.2, 0.7];

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Relative error with the denominator floored at 1e-4, so gradients that
/// are exactly zero are not judged against rounding noise of order 1e-10.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Compares tape gradients of a scalar-valued `build` with central
/// differences in every input element; returns the worst relative error.
fn check(inputs: &[Tensor], build: &Build) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(ParamId(i), t.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &vars);
        (tape, out)
    };
    let (mut tape, out) = eval(inputs);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(x.shape());
        let g = grads.get(ParamId(i)).unwrap_or(&zero);
        for k in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[i] = nudge(x, k, STEP);
            let mut minus = inputs.to_vec();
            minus[i] = nudge(x, k, -STEP);
            let (tp, op) = eval(&plus);
            let (tm, om) = eval(&minus);
            let numeric = (tp.value(op).item() - tm.value(om).item()) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[k], numeric));
        }
    }
    worst
}

fn nudge(t: &Tensor, k: usize, by: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[k] += by;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn random(rng: &mut SeedStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Values bounded away from zero, so kinks are not straddled.
fn away_from_zero(rng: &mut SeedStream, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| {
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}

/// Sums the elementwise product with a fixed random weight so every output
/// element reaches the scalar.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = random(&mut SeedStream::new(seed), &shape);
    let w = tape.constant(w).unwrap();
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

/// Instances checked and the worst relative error among them.
#[derive(Clone, Copy, Debug, Default)]
pub struct Outcome {
    pub instances: u64,
    pub worst: f64,
}

impl Outcome {
    fn merge(self, other: Outcome) -> Outcome {
        Outcome {
            instances: self.instances + other.instances,
            worst: self.worst.max(other.worst),
        }
    }

    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst < TOL
    }
}

fn run_instances(
    name: &str,
    mut make: impl FnMut(&mut SeedStream) -> (Vec<Tensor>, Box<Build>),
) -> Outcome {
    let root = SeedStream::new(0x5eed).derive(name.len() as u64);
    let mut out = Outcome::default();
    for i in 0..INSTANCES {
        let mut rng = root.derive(i);
        let (inputs, build) = make(&mut rng);
        out = out.merge(Outcome {
            instances: 1,
            worst: check(&inputs, &*build),
        });
    }
    out
}

pub fn matmul_add_sub_mul() -> Outcome {
    run_instances("matmul", |rng| {
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let seed = rng.below(1000) as u64;
        let inputs = vec![
            random(rng, &[m, k]),
            random(rng, &[k, n]),
            random(rng, &[m, n]),
        ];
        let build: Box<Build> = Box::new(move |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            let a = t.add(p, v[2]).unwrap();
            let s = t.sub(a, v[2]).unwrap();
            let q = t.mul(s, v[2]).unwrap();
            project(t, q, seed)
        });
        (inputs, build)
    })
}

pub fn broadcast_row_add() -> Outcome {
    run_instances("bias", |rng| {
        let (m, n) = (1 + rng.below(5), 1 + rng.below(5));
        let seed = rng.below(1000) as u64;
        let inputs = vec![random(rng, &[m, n]), random(rng, &[n])];
        let build: Box<Build> = Box::new(move |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            project(t, a, seed)
        });
        (inputs, build)
    })
}

pub fn unary_ops() -> Outcome {
    run_instances("unary", |rng| {
        let (m, n) = (1 + rng.below(4), 1 + rng.below(4));
        let seed = rng.below(1000) as u64;
        let inputs = vec![away_from_zero(rng, &[m, n])];
        let build: Box<Build> = Box::new(move |t, v| {
            let r = t.relu(v[0]).unwrap();
            let e = t.exp(v[0]).unwrap();
            let l = t.log(e).unwrap();
            let sq = t.mul(v[0], v[0]).unwrap();
            let one = t.constant(Tensor::full(&[m, n], 1.0)).unwrap();
            let pos = t.add(sq, one).unwrap();
            let lg = t.log(pos).unwrap();
            let s = t.scalar_mul(lg, -0.5).unwrap();
            let a = t.add(r, l).unwrap();
            let b = t.add(a, s).unwrap();
            let pr = project(t, b, seed);
            let mean = t.mean(e).unwrap();
            t.add(pr, mean).unwrap()
        });
        (inputs, build)
    })
}

pub fn shape_ops() -> Outcome {
    run_instances("shape", |rng| {
        let (m1, m2, n) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(4));
        let seed = rng.below(1000) as u64;
        let inputs = vec![random(rng, &[m1, n]), random(rng, &[m2, n])];
        let build: Box<Build> = Box::new(move |t, v| {
            let c = t.concat_rows(&[v[0], v[1], v[0]]).unwrap();
            let s = t.slice_rows(c, 1, m1 + m2 + 1).unwrap();
            let tr = t.transpose(s).unwrap();
            project(t, tr, seed)
        });
        (inputs, build)
    })
}

pub fn normalizing_ops() -> Outcome {
    run_instances("normalize", |rng| {
        let (m, n) = (2 + rng.below(4), 1 + rng.below(4));
        let seed = rng.below(1000) as u64;
        let inputs = vec![random(rng, &[m, n])];
        let build: Box<Build> = Box::new(move |t, v| {
            let z = t.l2_normalize_rows(v[0]).unwrap();
            let ls = t.log_softmax_rows(v[0]).unwrap();
            let (bn, _) = t.batch_stats_normalize(v[0], &NormMode::Batch).unwrap();
            let (rn, _) = t
                .batch_stats_normalize(
                    v[0],
                    &NormMode::Running {
                        mean: vec![0.3; n],
                        var: vec![1.7; n],
                    },
                )
                .unwrap();
            let a = t.add(z, ls).unwrap();
            let b = t.add(a, bn).unwrap();
            let c = t.add(b, rn).unwrap();
            project(t, c, seed)
        });
        (inputs, build)
    })
}

pub fn supcon_at_each_temperature() -> Outcome {
    let mut out = Outcome::default();
    for tau in TEMPERATURES {
        out = out.merge(run_instances("supcon", |rng| {
            let (b, d) = (2 + rng.below(6), 2 + rng.below(4));
            let labels: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
            let inputs = vec![random(rng, &[b, d])];
            let build: Box<Build> =
                Box::new(move |t, v| supcon_loss(t, v[0], &labels, tau).unwrap().0);
            (inputs, build)
        }));
    }
    out
}

pub fn view_pair_losses_at_each_temperature() -> Outcome {
    let mut out = Outcome::default();
    for tau in TEMPERATURES {
        out = out.merge(run_instances("pairs", |rng| {
            let (b, d) = (1 + rng.below(5), 2 + rng.below(4));
            let pseudo: Vec<usize> = (0..b).map(|_| rng.below(4)).collect();
            let inputs = vec![random(rng, &[b, d]), random(rng, &[b, d])];
            let build: Box<Build> = Box::new(move |t, v| {
                let u = self_supervised_loss(t, v[0], v[1], tau).unwrap();
                let p = pseudo_labeled_loss(t, v[0], v[1], &pseudo, 4, tau).unwrap();
                t.add(u, p).unwrap()
            });
            (inputs, build)
        }));
    }
    out
}

pub fn cross_entropy() -> Outcome {
    run_instances("ce", |rng| {
        let (b, c) = (1 + rng.below(5), 2 + rng.below(5));
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let inputs = vec![random(rng, &[b, c]).map(|v| 3.0 * v)];
        let build: Box<Build> = Box::new(move |t, v| cross_entropy_loss(t, v[0], &labels).unwrap());
        (inputs, build)
    })
}

/// Weighted combination of all four terms under both schedule phases.
pub fn combined_loss() -> Outcome {
    run_instances("total", |rng| {
        let (b, d, c) = (2 + rng.below(4), 3, 3);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let pseudo: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let epoch = rng.below(2);
        let config = LossConfig {
            weight_unlabeled: rng.uniform(0.1, 2.0),
            weight_pseudo: rng.uniform(0.1, 2.0),
            weight_labeled: rng.uniform(0.1, 2.0),
            weight_cross_entropy: rng.uniform(0.1, 2.0),
            temperature_labeled: TEMPERATURES[rng.below(3)],
            ..LossConfig::default()
        };
        let inputs = vec![
            random(rng, &[2 * b, d]),
            random(rng, &[b, d]),
            random(rng, &[b, d]),
            random(rng, &[d, c]),
        ];
        let build: Box<Build> = Box::new(move |t, v| {
            let both: Vec<usize> = labels.iter().chain(&labels).copied().collect();
            let labeled = supcon_loss(t, v[0], &both, config.temperature_labeled)
                .unwrap()
                .0;
            let unlabeled =
                self_supervised_loss(t, v[1], v[2], config.temperature_unlabeled).unwrap();
            let pseudo =
                pseudo_labeled_loss(t, v[1], v[2], &pseudo, c, config.pseudo_temperature())
                    .unwrap();
            let logits = t.matmul(v[0], v[3]).unwrap();
            let ce = cross_entropy_loss(t, logits, &both).unwrap();
            let terms = LossTerms {
                labeled: Some(labeled),
                unlabeled: Some(unlabeled),
                pseudo: Some(pseudo),
                cross_entropy: Some(ce),
            };
            total_loss(t, &terms, &config, epoch).unwrap().0
        });
        (inputs, build)
    })
}

/// The whole network under a combined loss, differentiated in its weights.
pub fn model_parameters_through_all_losses() -> Outcome {
    let config = ModelConfig {
        input_dim: 6,
        encoder_hidden: vec![5],
        encoder_out_dim: 4,
        embedding_dim: 3,
        num_classes: 3,
        batchnorm_momentum: 0.1,
    };
    let mut out = Outcome::default();
    for i in 0..INSTANCES {
        let mut rng = SeedStream::new(i);
        let model = S5CLModel::init_parameters(&config, &mut rng.derive(0)).unwrap();
        let b = 4;
        let images = random(&mut rng, &[2 * b, config.input_dim]);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
        let tau = TEMPERATURES[i as usize % 3];
        let loss = |params: Vec<NamedTensor>| {
            let mut m = S5CLModel::from_named(&config, params).unwrap();
            let mut t = Tape::new();
            let bound = m.bind(&mut t).unwrap();
            let x = t.constant(images.clone()).unwrap();
            let e = m.embed(&mut t, &bound, x).unwrap();
            let logits = m.classify(&mut t, &bound, e).unwrap();
            let head = t.slice_rows(logits, 0, b).unwrap();
            let ce = cross_entropy_loss(&mut t, head, &labels).unwrap();
            let v1 = t.slice_rows(e, 0, b).unwrap();
            let v2 = t.slice_rows(e, b, 2 * b).unwrap();
            let u = self_supervised_loss(&mut t, v1, v2, tau).unwrap();
            let both: Vec<usize> = labels.iter().chain(&labels).copied().collect();
            let (l, _) = supcon_loss(&mut t, e, &both, tau).unwrap();
            let a = t.add(ce, u).unwrap();
            let total = t.add(a, l).unwrap();
            (t, total)
        };
        // Zero biases put dead rows exactly on the relu kink, and a layer
        // dead for the whole batch leaves the normalizer with zero variance.
        // Positive encoder biases keep the check away from both.
        let mut base = model.to_named();
        for p in base.iter_mut().filter(|p| p.name.ends_with("bias")) {
            let offset = if p.name.starts_with("encoder") {
                0.5
            } else {
                0.0
            };
            p.value = random(&mut rng, p.value.shape()).map(|v| v.abs() + offset);
        }
        let (mut t, total) = loss(base.clone());
        let grads = t.backward(total).unwrap();
        let mut worst: f64 = 0.0;
        for (p, named) in base.iter().enumerate() {
            let zero = Tensor::zeros(named.value.shape());
            let g = grads.get(ParamId(p)).unwrap_or(&zero);
            for k in 0..named.value.numel() {
                let at = |by| {
                    let mut ps = base.clone();
                    ps[p].value = nudge(&named.value, k, by);
                    let (t, v) = loss(ps);
                    t.value(v).item()
                };
                let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
                worst = worst.max(rel_err(g.data()[k], numeric));
            }
        }
        out = out.merge(Outcome {
            instances: 1,
            worst,
        });
    }
    out
}

pub type Suite = (&'static str, fn() -> Outcome);

/// Every suite by name.
pub fn all() -> Vec<Suite> {
    vec![
        ("matmul, add, sub, mul", matmul_add_sub_mul),
        ("broadcast add", broadcast_row_add),
        ("relu, exp, log, mean", unary_ops),
        ("concat, slice, transpose", shape_ops),
        ("l2 norm, log-softmax, batch norm", normalizing_ops),
        ("supcon at 0.1, 0.2, 0.7", supcon_at_each_temperature),
        (
            "self-supervised and pseudo-labeled",
            view_pair_losses_at_each_temperature,
        ),
        ("cross-entropy", cross_entropy),
        ("weighted total", combined_loss),
        ("full model", model_parameters_through_all_losses),
    ]
}
