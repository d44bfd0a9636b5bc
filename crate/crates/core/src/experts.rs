//! Forecasting experts: an encoder, a mean head that regresses the future
//! values, and a variance head whose softplus output is the expert's
//! predictive variance.
//!
//! Two expert families are provided. `dlinear` decomposes the window into
//! trend and seasonal parts (centered moving average with edge replication)
//! and applies one lookback-to-horizon linear map per part, weights shared
//! across variables. `mlp` flattens the window through a single tanh hidden
//! layer. The variance head attaches to the richest representation each
//! family has: the raw window (trend + seasonal) for dlinear, the hidden
//! vector for mlp.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numgrad::{
    init_linear_bias, init_linear_weight, Graph, GraphError, NodeId, ParamBinding, ParamError,
    ParamSet, SoftplusBase, Tensor,
};

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("decomposition kernel must be odd, got {0}")]
    EvenKernel(usize),
    #[error("decomposition kernel {kernel} exceeds lookback {lookback}")]
    KernelTooLong { kernel: usize, lookback: usize },
    #[error("expert input shape {got:?}, spec expects [{lookback}, {num_variables}]")]
    InputShape {
        got: Vec<usize>,
        lookback: usize,
        num_variables: usize,
    },
    #[error("invalid expert spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertKind {
    DLinear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadType {
    /// Single linear map.
    Fc,
    /// One hidden layer of the same width as its input, then a linear map.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyResolution {
    /// One variance per (horizon step, variable) cell.
    TimeVarying,
    /// One variance per variable, broadcast over the horizon.
    TimeFixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec {
    pub kind: ExpertKind,
    pub lookback: usize,
    pub horizon: usize,
    pub num_variables: usize,
    /// Hidden width of the mlp expert; unused by dlinear.
    pub hidden_dim: usize,
    /// Moving-average kernel of the dlinear expert; unused by mlp.
    pub decomposition_kernel: usize,
    pub head_type: HeadType,
    pub uncertainty_resolution: UncertaintyResolution,
    pub softplus_base: SoftplusBase,
}

impl ExpertSpec {
    pub fn dlinear(lookback: usize, horizon: usize, num_variables: usize) -> Self {
        ExpertSpec {
            kind: ExpertKind::DLinear,
            lookback,
            horizon,
            num_variables,
            hidden_dim: 128,
            decomposition_kernel: 25,
            head_type: HeadType::Mlp,
            uncertainty_resolution: UncertaintyResolution::TimeVarying,
            softplus_base: SoftplusBase::Two,
        }
    }

    pub fn mlp(lookback: usize, horizon: usize, num_variables: usize) -> Self {
        ExpertSpec {
            kind: ExpertKind::Mlp,
            ..ExpertSpec::dlinear(lookback, horizon, num_variables)
        }
    }

    pub fn validate(&self) -> Result<(), ExpertError> {
        if self.lookback == 0 || self.horizon == 0 || self.num_variables == 0 {
            return Err(ExpertError::BadSpec(format!(
                "lookback {}, horizon {} and num_variables {} must all be positive",
                self.lookback, self.horizon, self.num_variables
            )));
        }
        match self.kind {
            ExpertKind::DLinear => {
                if self.decomposition_kernel % 2 == 0 {
                    return Err(ExpertError::EvenKernel(self.decomposition_kernel));
                }
                if self.decomposition_kernel > self.lookback {
                    return Err(ExpertError::KernelTooLong {
                        kernel: self.decomposition_kernel,
                        lookback: self.lookback,
                    });
                }
            }
            ExpertKind::Mlp => {
                if self.hidden_dim == 0 {
                    return Err(ExpertError::BadSpec("hidden_dim must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Rows of the variance head output: horizon for time-varying, 1 for
    /// time-fixed.
    pub fn variance_rows(&self) -> usize {
        match self.uncertainty_resolution {
            UncertaintyResolution::TimeVarying => self.horizon,
            UncertaintyResolution::TimeFixed => 1,
        }
    }
}

/// Centered moving average with edge-replication padding; the seasonal part
/// is the residual, so `trend + seasonal == x` exactly.
pub fn series_decompose(x: &Tensor, kernel: usize) -> Result<(Tensor, Tensor), ExpertError> {
    if x.rank() != 2 {
        return Err(ExpertError::InputShape {
            got: x.shape().to_vec(),
            lookback: 0,
            num_variables: 0,
        });
    }
    let (t_len, v) = (x.shape()[0], x.shape()[1]);
    if kernel % 2 == 0 {
        return Err(ExpertError::EvenKernel(kernel));
    }
    if kernel > t_len {
        return Err(ExpertError::KernelTooLong {
            kernel,
            lookback: t_len,
        });
    }
    let half = (kernel / 2) as isize;
    let mut trend = vec![0.0; t_len * v];
    for j in 0..v {
        for t in 0..t_len as isize {
            let mut acc = 0.0;
            for d in -half..=half {
                let idx = (t + d).clamp(0, t_len as isize - 1) as usize;
                acc += x.data()[idx * v + j];
            }
            trend[t as usize * v + j] = acc / kernel as f64;
        }
    }
    let trend = Tensor::new(vec![t_len, v], trend).expect("sized above");
    let seasonal = x.sub(&trend).expect("same shape");
    Ok((trend, seasonal))
}

/// Graph nodes holding an expert's encoded input.
#[derive(Debug)]
pub enum Latent {
    DLinear {
        trend: NodeId,
        seasonal: NodeId,
        /// The raw window (trend + seasonal); the variance head consumes this.
        window: NodeId,
    },
    Mlp {
        hidden: NodeId,
    },
}

/// Mean and (optional) variance nodes of one expert forward pass.
#[derive(Debug)]
pub struct ExpertNodes {
    /// Forecast, `horizon x num_variables`.
    pub mean: NodeId,
    /// Predictive variance before epsilon clamping: `horizon x V` for
    /// time-varying resolution, `1 x V` for time-fixed. Absent for
    /// mean-only experts.
    pub variance: Option<NodeId>,
}

/// Creates this expert's parameters under `prefix`, seeded layer by layer.
pub fn init_expert_params(
    spec: &ExpertSpec,
    prefix: &str,
    with_variance_head: bool,
    rng: &mut ChaCha8Rng,
    params: &mut ParamSet,
) -> Result<(), ExpertError> {
    spec.validate()?;
    let (t_len, h, v) = (spec.lookback, spec.horizon, spec.num_variables);
    match spec.kind {
        ExpertKind::DLinear => {
            for part in ["trend", "seasonal"] {
                params.insert(
                    format!("{prefix}.{part}.weight"),
                    init_linear_weight(rng, h, t_len),
                )?;
                params.insert(
                    format!("{prefix}.{part}.bias"),
                    init_linear_bias(rng, h, t_len),
                )?;
            }
            if with_variance_head {
                init_head_params(spec, prefix, t_len, spec.variance_rows(), rng, params)?;
            }
        }
        ExpertKind::Mlp => {
            let flat = t_len * v;
            let hidden = spec.hidden_dim;
            params.insert(
                format!("{prefix}.encoder.weight"),
                init_linear_weight(rng, hidden, flat),
            )?;
            params.insert(
                format!("{prefix}.encoder.bias"),
                init_linear_bias(rng, hidden, flat),
            )?;
            params.insert(
                format!("{prefix}.mean.weight"),
                init_linear_weight(rng, h * v, hidden),
            )?;
            params.insert(
                format!("{prefix}.mean.bias"),
                init_linear_bias(rng, h * v, hidden),
            )?;
            if with_variance_head {
                let out = spec.variance_rows() * v;
                init_head_params(spec, prefix, hidden, out, rng, params)?;
            }
        }
    }
    Ok(())
}

fn init_head_params(
    spec: &ExpertSpec,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
    params: &mut ParamSet,
) -> Result<(), ExpertError> {
    if spec.head_type == HeadType::Mlp {
        params.insert(
            format!("{prefix}.var.hidden.weight"),
            init_linear_weight(rng, in_dim, in_dim),
        )?;
        params.insert(
            format!("{prefix}.var.hidden.bias"),
            init_linear_bias(rng, in_dim, in_dim),
        )?;
    }
    params.insert(
        format!("{prefix}.var.out.weight"),
        init_linear_weight(rng, out_dim, in_dim),
    )?;
    params.insert(
        format!("{prefix}.var.out.bias"),
        init_linear_bias(rng, out_dim, in_dim),
    )?;
    Ok(())
}

/// Encodes one standardized window into the expert's latent representation.
pub fn encode(
    g: &mut Graph,
    spec: &ExpertSpec,
    binding: &ParamBinding,
    prefix: &str,
    window: &Tensor,
) -> Result<Latent, ExpertError> {
    if window.shape() != [spec.lookback, spec.num_variables] {
        return Err(ExpertError::InputShape {
            got: window.shape().to_vec(),
            lookback: spec.lookback,
            num_variables: spec.num_variables,
        });
    }
    match spec.kind {
        ExpertKind::DLinear => {
            // No gradient flows into the input, so the decomposition runs
            // numerically and enters the graph as leaves.
            let (trend, seasonal) = series_decompose(window, spec.decomposition_kernel)?;
            Ok(Latent::DLinear {
                trend: g.input(trend)?,
                seasonal: g.input(seasonal)?,
                window: g.input(window.clone())?,
            })
        }
        ExpertKind::Mlp => {
            let x = g.input(window.clone())?;
            let flat = g.reshape(x, vec![spec.lookback * spec.num_variables, 1])?;
            let w = binding.node(&format!("{prefix}.encoder.weight"))?;
            let b = binding.node(&format!("{prefix}.encoder.bias"))?;
            let pre = g.affine(w, flat, Some(b))?;
            Ok(Latent::Mlp {
                hidden: g.tanh(pre)?,
            })
        }
    }
}

/// Forecast of the future values, `horizon x num_variables`.
pub fn mean_head(
    g: &mut Graph,
    spec: &ExpertSpec,
    binding: &ParamBinding,
    prefix: &str,
    latent: &Latent,
) -> Result<NodeId, ExpertError> {
    match latent {
        Latent::DLinear { trend, seasonal, .. } => {
            let tw = binding.node(&format!("{prefix}.trend.weight"))?;
            let tb = binding.node(&format!("{prefix}.trend.bias"))?;
            let sw = binding.node(&format!("{prefix}.seasonal.weight"))?;
            let sb = binding.node(&format!("{prefix}.seasonal.bias"))?;
            let t_part = g.affine(tw, *trend, Some(tb))?;
            let s_part = g.affine(sw, *seasonal, Some(sb))?;
            Ok(g.add(t_part, s_part)?)
        }
        Latent::Mlp { hidden } => {
            let w = binding.node(&format!("{prefix}.mean.weight"))?;
            let b = binding.node(&format!("{prefix}.mean.bias"))?;
            let out = g.affine(w, *hidden, Some(b))?;
            Ok(g.reshape(out, vec![spec.horizon, spec.num_variables])?)
        }
    }
}

/// Predictive variance via softplus of the head output; strictly positive
/// for all finite pre-activations.
pub fn variance_head(
    g: &mut Graph,
    spec: &ExpertSpec,
    binding: &ParamBinding,
    prefix: &str,
    latent: &Latent,
) -> Result<NodeId, ExpertError> {
    let input = match latent {
        Latent::DLinear { window, .. } => *window,
        Latent::Mlp { hidden } => *hidden,
    };
    let mut z = input;
    if spec.head_type == HeadType::Mlp {
        let w = binding.node(&format!("{prefix}.var.hidden.weight"))?;
        let b = binding.node(&format!("{prefix}.var.hidden.bias"))?;
        let pre = g.affine(w, z, Some(b))?;
        z = g.tanh(pre)?;
    }
    let w = binding.node(&format!("{prefix}.var.out.weight"))?;
    let b = binding.node(&format!("{prefix}.var.out.bias"))?;
    let pre = g.affine(w, z, Some(b))?;
    let pre = match spec.kind {
        // dlinear heads map T -> rows across shared variables: already rows x V.
        ExpertKind::DLinear => pre,
        // mlp heads emit a flat column: reshape to rows x V.
        ExpertKind::Mlp => g.reshape(pre, vec![spec.variance_rows(), spec.num_variables])?,
    };
    Ok(g.softplus(pre, spec.softplus_base)?)
}

/// Full expert forward: encode, then the mean head and (optionally) the
/// variance head.
pub fn expert_forward(
    g: &mut Graph,
    spec: &ExpertSpec,
    binding: &ParamBinding,
    prefix: &str,
    window: &Tensor,
    with_variance: bool,
) -> Result<ExpertNodes, ExpertError> {
    let latent = encode(g, spec, binding, prefix, window)?;
    let mean = mean_head(g, spec, binding, prefix, &latent)?;
    let variance = if with_variance {
        Some(variance_head(g, spec, binding, prefix, &latent)?)
    } else {
        None
    };
    Ok(ExpertNodes { mean, variance })
}
