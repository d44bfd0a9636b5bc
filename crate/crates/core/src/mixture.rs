//! Expert combination: the three gating/loss regimes and the decomposition
//! of predictive variance into aleatoric and epistemic parts.
//!
//! Uncertainty-based gating weights each expert by its normalized precision,
//! `w_i = sigma_i^-2 / sum_j sigma_j^-2`, computed independently per
//! (horizon step, variable) cell. Input-based gating runs a learned softmax
//! module over the window and shares one weight vector across all cells.
//! Either way the combined forecast is the weighted sum of expert means, and
//!
//! ```text
//! total = sum_i w_i * var_i            (aleatoric)
//!       + sum_i w_i * (yhat - mean_i)^2 (epistemic)
//! ```
//!
//! Under uncertainty gating the aleatoric term reduces to the harmonic mean
//! of the expert variances, `k / sum_j sigma_j^-2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::WindowSample;
use crate::experts::{expert_forward, init_expert_params, ExpertError, ExpertSpec};
use crate::numgrad::{
    init_linear_bias, init_linear_weight, Graph, GraphError, NodeId, ParamBinding, ParamError,
    ParamSet, Tensor,
};

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("mixture needs at least one expert, got {0}")]
    NoExperts(usize),
    #[error("stability floor epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("uncertainty-based gating requires variance heads; loss variant {0:?} trains mean-only experts")]
    GatingNeedsVariance(LossVariant),
    #[error("expert {index}: {source}")]
    Expert { index: usize, source: ExpertError },
    #[error("checkpoint does not match model spec: {0}")]
    CheckpointMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("target shape {got:?} does not match [{horizon}, {num_variables}]")]
    TargetShape {
        got: Vec<usize>,
        horizon: usize,
        num_variables: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    /// Learned softmax module over the input window.
    InputBased,
    /// Normalized inverse variances of the experts.
    UncertaintyBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Weighted squared error over mean-only experts.
    Moe,
    /// Weighted per-expert Gaussian negative log likelihood.
    MogWeightedNll,
    /// Negative log likelihood of the full Gaussian mixture, in log-space.
    MogLogsumexp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateGrad {
    /// Gradients flow through the gating weights.
    Flow,
    /// Weights are treated as constants in the backward pass.
    Detach,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub k: usize,
    pub gating: Gating,
    pub loss: LossVariant,
    pub gate_grad: GateGrad,
    pub epsilon: f64,
}

impl MixtureSpec {
    pub fn mogu(k: usize) -> Self {
        MixtureSpec {
            k,
            gating: Gating::UncertaintyBased,
            loss: LossVariant::MogWeightedNll,
            gate_grad: GateGrad::Flow,
            epsilon: 1e-6,
        }
    }

    pub fn mog_learned(k: usize) -> Self {
        MixtureSpec {
            gating: Gating::InputBased,
            ..MixtureSpec::mogu(k)
        }
    }

    pub fn moe(k: usize) -> Self {
        MixtureSpec {
            gating: Gating::InputBased,
            loss: LossVariant::Moe,
            ..MixtureSpec::mogu(k)
        }
    }
}

/// Declarative description of the full model: expert architecture plus
/// mixture configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub expert: ExpertSpec,
    pub mixture: MixtureSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), MixtureError> {
        if self.mixture.k == 0 {
            return Err(MixtureError::NoExperts(0));
        }
        if !(self.mixture.epsilon > 0.0) {
            return Err(MixtureError::BadEpsilon(self.mixture.epsilon));
        }
        if self.mixture.gating == Gating::UncertaintyBased
            && self.mixture.loss == LossVariant::Moe
        {
            return Err(MixtureError::GatingNeedsVariance(self.mixture.loss));
        }
        self.expert
            .validate()
            .map_err(|source| MixtureError::Expert { index: 0, source })
    }

    /// Mean-only experts train under the squared-error loss; every other
    /// variant needs the variance heads.
    pub fn has_variance_heads(&self) -> bool {
        self.mixture.loss != LossVariant::Moe
    }

    pub fn has_gate_network(&self) -> bool {
        self.mixture.gating == Gating::InputBased
    }
}

/// Per-expert means/variances/weights plus the combined forecast and its
/// variance decomposition. All per-expert tensors are `k x h x V`; variances
/// are floored at the mixture epsilon so the exported values reproduce the
/// gating weights exactly.
#[derive(Debug, Clone)]
pub struct MixtureOutput {
    pub expert_means: Tensor,
    pub expert_variances: Tensor,
    pub weights: Tensor,
    pub combined_mean: Tensor,
    pub aleatoric: Tensor,
    pub epistemic: Tensor,
    pub total_variance: Tensor,
}

// ---------------------------------------------------------------------------
// Numeric mixture math (inference path and oracles)
// ---------------------------------------------------------------------------

/// Inverse-variance weights per cell: `w_i = v_i^-1 / sum_j v_j^-1` with the
/// variances floored at `epsilon` first. Each `k`-slice is a simplex.
pub fn uncertainty_gating_weights(variances: &Tensor, epsilon: f64) -> Tensor {
    let k = variances.shape()[0];
    let cell = variances.len() / k;
    let mut out = vec![0.0; variances.len()];
    for c in 0..cell {
        let mut denom = 0.0;
        for i in 0..k {
            denom += 1.0 / variances.data()[i * cell + c].max(epsilon);
        }
        for i in 0..k {
            let prec = 1.0 / variances.data()[i * cell + c].max(epsilon);
            out[i * cell + c] = prec / denom;
        }
    }
    Tensor::new(variances.shape().to_vec(), out).expect("same shape")
}

/// Weighted sum of expert means, elementwise over cells.
pub fn combine_mean(weights: &Tensor, expert_means: &Tensor) -> Tensor {
    let k = weights.shape()[0];
    let cell = weights.len() / k;
    let mut out = vec![0.0; cell];
    for i in 0..k {
        for c in 0..cell {
            out[c] += weights.data()[i * cell + c] * expert_means.data()[i * cell + c];
        }
    }
    Tensor::new(weights.shape()[1..].to_vec(), out).expect("cell shape")
}

/// Splits predictive variance into the weighted mean of expert variances
/// (aleatoric) and the weighted spread of expert means around the combined
/// forecast (epistemic). Returns `(aleatoric, epistemic, total)`.
pub fn variance_decomposition(
    weights: &Tensor,
    expert_means: &Tensor,
    expert_variances: &Tensor,
    combined: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let k = weights.shape()[0];
    let cell = weights.len() / k;
    let mut aleatoric = vec![0.0; cell];
    let mut epistemic = vec![0.0; cell];
    for i in 0..k {
        for c in 0..cell {
            let w = weights.data()[i * cell + c];
            aleatoric[c] += w * expert_variances.data()[i * cell + c];
            let d = combined.data()[c] - expert_means.data()[i * cell + c];
            epistemic[c] += w * d * d;
        }
    }
    let total: Vec<f64> = aleatoric
        .iter()
        .zip(&epistemic)
        .map(|(a, e)| a + e)
        .collect();
    let shape = combined.shape().to_vec();
    (
        Tensor::new(shape.clone(), aleatoric).expect("cell shape"),
        Tensor::new(shape.clone(), epistemic).expect("cell shape"),
        Tensor::new(shape, total).expect("cell shape"),
    )
}

/// Per-element Gaussian negative log likelihood with a stability floor:
/// `0.5 * (ln(max(v, eps)) + (mean - y)^2 / max(v, eps))`, natural log.
pub fn gaussian_nll(y: f64, mean: f64, variance: f64, epsilon: f64) -> f64 {
    let v = variance.max(epsilon);
    0.5 * (v.ln() + (mean - y) * (mean - y) / v)
}

/// Stacks `k` equally shaped tensors into one `k x ...` tensor.
pub fn stack(tensors: &[Tensor]) -> Tensor {
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(tensors[0].shape());
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].len());
    for t in tensors {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data).expect("uniform shapes")
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A mixture of forecasting experts with its parameters.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

fn expert_prefix(i: usize) -> String {
    format!("expert{i}")
}

impl MixtureModel {
    /// Fresh model with seeded initialization.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, MixtureError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for i in 0..spec.mixture.k {
            init_expert_params(
                &spec.expert,
                &expert_prefix(i),
                spec.has_variance_heads(),
                &mut rng,
                &mut params,
            )
            .map_err(|source| MixtureError::Expert { index: i, source })?;
        }
        if spec.has_gate_network() {
            let flat = spec.expert.lookback * spec.expert.num_variables;
            let k = spec.mixture.k;
            params.insert("gate.hidden.weight", init_linear_weight(&mut rng, flat, flat))?;
            params.insert("gate.hidden.bias", init_linear_bias(&mut rng, flat, flat))?;
            params.insert("gate.out.weight", init_linear_weight(&mut rng, k, flat))?;
            params.insert("gate.out.bias", init_linear_bias(&mut rng, k, flat))?;
        }
        Ok(MixtureModel { spec, params })
    }

    /// Attaches checkpointed parameters, verifying names and shapes against
    /// the spec.
    pub fn from_params(spec: ModelSpec, params: ParamSet) -> Result<Self, MixtureError> {
        let reference = MixtureModel::init(spec.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(MixtureError::CheckpointMismatch(format!(
                "expected {} parameters, checkpoint has {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, want) in reference.params.iter() {
            let got = params.get(name).map_err(|_| {
                MixtureError::CheckpointMismatch(format!("missing parameter {name:?}"))
            })?;
            if got.shape() != want.shape() {
                return Err(MixtureError::CheckpointMismatch(format!(
                    "parameter {name:?} has shape {:?}, spec expects {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(MixtureModel { spec, params })
    }

    /// Learned gating weights for one window: flatten, linear hidden layer of
    /// the same width, linear map to `k` logits, softmax. Returns a `k x 1`
    /// simplex node.
    pub fn input_gating_weights(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        window: &Tensor,
    ) -> Result<NodeId, MixtureError> {
        let x = g.input(window.clone())?;
        let flat_dim = self.spec.expert.lookback * self.spec.expert.num_variables;
        let flat = g.reshape(x, vec![flat_dim, 1])?;
        let hw = binding.node("gate.hidden.weight")?;
        let hb = binding.node("gate.hidden.bias")?;
        let hidden = g.affine(hw, flat, Some(hb))?;
        let ow = binding.node("gate.out.weight")?;
        let ob = binding.node("gate.out.bias")?;
        let logits = g.affine(ow, hidden, Some(ob))?;
        Ok(g.softmax(logits, 0)?)
    }

    /// Builds the configured training loss over a batch: the arithmetic mean
    /// over all loss elements (samples, horizon steps, variables). Returns
    /// the loss node and the parameter binding for gradient lookup.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[WindowSample],
    ) -> Result<(NodeId, ParamBinding), MixtureError> {
        if batch.is_empty() {
            return Err(MixtureError::EmptyBatch);
        }
        let binding = ParamBinding::bind(g, &self.params)?;
        let mut sample_losses = Vec::with_capacity(batch.len());
        for sample in batch {
            sample_losses.push(self.sample_loss(g, &binding, sample)?);
        }
        let loss = g.mean_of(&sample_losses)?;
        Ok((loss, binding))
    }

    fn check_target(&self, target: &Tensor) -> Result<(), MixtureError> {
        let (h, v) = (self.spec.expert.horizon, self.spec.expert.num_variables);
        if target.shape() != [h, v] {
            return Err(MixtureError::TargetShape {
                got: target.shape().to_vec(),
                horizon: h,
                num_variables: v,
            });
        }
        Ok(())
    }

    fn sample_loss(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        sample: &WindowSample,
    ) -> Result<NodeId, MixtureError> {
        self.check_target(&sample.target)?;
        let spec = &self.spec;
        let (h, v) = (spec.expert.horizon, spec.expert.num_variables);
        let eps = spec.mixture.epsilon;
        let with_var = spec.has_variance_heads();
        let target = g.input(sample.target.clone())?;

        // Expert forwards; variances broadcast to h x V and floored at eps.
        let mut means = Vec::with_capacity(spec.mixture.k);
        let mut vars = Vec::with_capacity(spec.mixture.k);
        for i in 0..spec.mixture.k {
            let nodes = expert_forward(
                g,
                &spec.expert,
                binding,
                &expert_prefix(i),
                &sample.input,
                with_var,
            )
            .map_err(|source| MixtureError::Expert { index: i, source })?;
            means.push(nodes.mean);
            if let Some(var) = nodes.variance {
                let full = if g.shape(var)?[0] == h {
                    var
                } else {
                    g.broadcast(var, &[h, v])?
                };
                vars.push(g.clamp_min(full, eps)?);
            }
        }

        let weights = self.gating_weight_nodes(g, binding, sample, &vars)?;

        let loss = match spec.mixture.loss {
            LossVariant::Moe => {
                let mut terms = Vec::with_capacity(spec.mixture.k);
                for (i, &mean) in means.iter().enumerate() {
                    let err = g.sub(mean, target)?;
                    let sq = g.square(err)?;
                    terms.push(g.mul(weights[i], sq)?);
                }
                let total = sum_nodes(g, &terms)?;
                g.mean(total)?
            }
            LossVariant::MogWeightedNll => {
                let mut terms = Vec::with_capacity(spec.mixture.k);
                for (i, &mean) in means.iter().enumerate() {
                    let nll = gaussian_nll_node(g, target, mean, vars[i])
                        .map_err(|source| MixtureError::Expert { index: i, source: source.into() })?;
                    terms.push(g.mul(weights[i], nll)?);
                }
                let total = sum_nodes(g, &terms)?;
                g.mean(total)?
            }
            LossVariant::MogLogsumexp => {
                let half_ln_tau = 0.5 * (2.0 * std::f64::consts::PI).ln();
                let mut args = Vec::with_capacity(spec.mixture.k);
                for (i, &mean) in means.iter().enumerate() {
                    let log_w = g.log(weights[i])?;
                    let nll = gaussian_nll_node(g, target, mean, vars[i])
                        .map_err(|source| MixtureError::Expert { index: i, source: source.into() })?;
                    // log N = -nll - 0.5 ln(2 pi)
                    let neg_nll = g.neg(nll)?;
                    let log_density = g.add_scalar(neg_nll, -half_ln_tau)?;
                    args.push(g.add(log_w, log_density)?);
                }
                let lse = g.logsumexp(&args)?;
                let neg = g.neg(lse)?;
                g.mean(neg)?
            }
        };
        Ok(loss)
    }

    /// Per-expert weight nodes of shape h x V for one sample.
    fn gating_weight_nodes(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        sample: &WindowSample,
        vars: &[NodeId],
    ) -> Result<Vec<NodeId>, MixtureError> {
        let spec = &self.spec;
        let (h, v) = (spec.expert.horizon, spec.expert.num_variables);
        match spec.mixture.gating {
            Gating::UncertaintyBased => {
                if vars.len() != spec.mixture.k {
                    return Err(MixtureError::GatingNeedsVariance(spec.mixture.loss));
                }
                match spec.mixture.gate_grad {
                    GateGrad::Flow => {
                        let mut precisions = Vec::with_capacity(vars.len());
                        for &var in vars {
                            precisions.push(g.recip(var)?);
                        }
                        let denom = sum_nodes(g, &precisions)?;
                        let inv_denom = g.recip(denom)?;
                        precisions
                            .iter()
                            .map(|&p| g.mul(p, inv_denom).map_err(Into::into))
                            .collect()
                    }
                    GateGrad::Detach => {
                        // Weights computed from the cached forward values and
                        // re-inserted as constants.
                        let stacked = stack(
                            &vars
                                .iter()
                                .map(|&id| Ok(g.evaluate(id)?.clone()))
                                .collect::<Result<Vec<_>, GraphError>>()?,
                        );
                        let weights = uncertainty_gating_weights(&stacked, spec.mixture.epsilon);
                        let cell = h * v;
                        (0..vars.len())
                            .map(|i| {
                                let slice = Tensor::new(
                                    vec![h, v],
                                    weights.data()[i * cell..(i + 1) * cell].to_vec(),
                                )
                                .expect("cell shape");
                                g.constant(slice).map_err(Into::into)
                            })
                            .collect()
                    }
                }
            }
            Gating::InputBased => {
                let simplex = self.input_gating_weights(g, binding, &sample.input)?;
                (0..spec.mixture.k)
                    .map(|i| {
                        let wi = g.slice(simplex, 0, i, i + 1)?;
                        g.broadcast(wi, &[h, v]).map_err(Into::into)
                    })
                    .collect()
            }
        }
    }

    /// Runs all experts on one window and fills every mixture output field.
    /// Deterministic given the parameters.
    pub fn predict(&self, window: &Tensor) -> Result<MixtureOutput, MixtureError> {
        let spec = &self.spec;
        let (h, v) = (spec.expert.horizon, spec.expert.num_variables);
        let eps = spec.mixture.epsilon;
        let with_var = spec.has_variance_heads();
        let mut g = Graph::new();
        let binding = ParamBinding::bind(&mut g, &self.params)?;

        let mut means = Vec::with_capacity(spec.mixture.k);
        let mut vars = Vec::with_capacity(spec.mixture.k);
        for i in 0..spec.mixture.k {
            let nodes = expert_forward(
                &mut g,
                &spec.expert,
                &binding,
                &expert_prefix(i),
                window,
                with_var,
            )
            .map_err(|source| MixtureError::Expert { index: i, source })?;
            means.push(g.evaluate(nodes.mean)?.clone());
            match nodes.variance {
                Some(var) => {
                    let t = g.evaluate(var)?.clone();
                    let full = if t.shape()[0] == h {
                        t
                    } else {
                        t.broadcast_to(&[h, v]).map_err(GraphError::from)?
                    };
                    vars.push(full.map(|x| x.max(eps)));
                }
                None => vars.push(Tensor::zeros(&[h, v])),
            }
        }
        let expert_means = stack(&means);
        let expert_variances = stack(&vars);

        let weights = match spec.mixture.gating {
            Gating::UncertaintyBased => uncertainty_gating_weights(&expert_variances, eps),
            Gating::InputBased => {
                let simplex = self.input_gating_weights(&mut g, &binding, window)?;
                let wv = g.evaluate(simplex)?;
                let per_expert: Vec<Tensor> = (0..spec.mixture.k)
                    .map(|i| Tensor::full(&[h, v], wv.data()[i]))
                    .collect();
                stack(&per_expert)
            }
        };

        let combined_mean = combine_mean(&weights, &expert_means);
        let (aleatoric, epistemic, total_variance) =
            variance_decomposition(&weights, &expert_means, &expert_variances, &combined_mean);
        Ok(MixtureOutput {
            expert_means,
            expert_variances,
            weights,
            combined_mean,
            aleatoric,
            epistemic,
            total_variance,
        })
    }
}

/// Gaussian NLL as graph nodes over already-clamped variances:
/// `0.5 * (ln v + (mean - y)^2 / v)`.
pub fn gaussian_nll_node(
    g: &mut Graph,
    target: NodeId,
    mean: NodeId,
    clamped_variance: NodeId,
) -> Result<NodeId, GraphError> {
    let ln_v = g.log(clamped_variance)?;
    let err = g.sub(mean, target)?;
    let sq = g.square(err)?;
    let inv = g.recip(clamped_variance)?;
    let quad = g.mul(sq, inv)?;
    let total = g.add(ln_v, quad)?;
    g.scale(total, 0.5)
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId, GraphError> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}
