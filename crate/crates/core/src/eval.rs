//! Forecast metrics and the uncertainty-error correlation protocol.
//!
//! For each variable, the reported uncertainty values (aleatoric, epistemic,
//! total) are correlated with the absolute prediction error pooled over all
//! (window, horizon) points; coefficients are then averaged across variables.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mixture::MixtureOutput;
use crate::numgrad::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("correlation needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("correlation is undefined for a constant input")]
    ConstantInput,
    #[error("no samples to evaluate")]
    Empty,
    #[error("permutation test needs at least 100 permutations, got {0}")]
    TooFewPermutations(usize),
}

/// Elementwise MAE and MSE over stacked prediction/truth pairs.
pub fn mae_mse(preds: &[Tensor], truths: &[Tensor]) -> Result<(f64, f64), EvalError> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(EvalError::Empty);
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        if p.shape() != t.shape() {
            return Err(EvalError::ShapeMismatch {
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        for (a, b) in p.data().iter().zip(t.data()) {
            let d = a - b;
            abs += d.abs();
            sq += d * d;
            n += 1;
        }
    }
    Ok((abs / n as f64, sq / n as f64))
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::ShapeMismatch {
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(EvalError::TooShort(a.len()));
    }
    let n = a.len() as f64;
    let mean_a: f64 = a.iter().sum::<f64>() / n;
    let mean_b: f64 = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Average ranks (1-based); ties receive the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).expect("finite metric values"));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // Positions i..=j share the same value; mean 1-based rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average-ranked values.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::ShapeMismatch {
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Two-sided permutation p-value for the Pearson coefficient, with the
/// plus-one estimator `(1 + hits) / (n_perm + 1)`.
pub fn permutation_pvalue(
    a: &[f64],
    b: &[f64],
    n_perm: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if n_perm < 100 {
        return Err(EvalError::TooFewPermutations(n_perm));
    }
    let observed = pearson(a, b)?.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = b.to_vec();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        // A permutation of a non-constant vector stays non-constant.
        let r = pearson(a, &shuffled)?.abs();
        if r >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (n_perm + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Aleatoric,
    Epistemic,
    Total,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Aleatoric, Channel::Epistemic, Channel::Total];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Aleatoric => "aleatoric",
            Channel::Epistemic => "epistemic",
            Channel::Total => "total",
        }
    }
}

/// Correlation coefficients of one uncertainty channel for one variable.
/// `None` marks a degenerate (constant) input excluded from averaging.
#[derive(Debug, Clone, Default)]
pub struct VarCorrelation {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ChannelReport {
    pub per_var: Vec<VarCorrelation>,
    /// Arithmetic mean of the defined per-variable Pearson coefficients.
    pub mean_pearson: Option<f64>,
    pub mean_spearman: Option<f64>,
    /// Number of variables excluded as degenerate.
    pub excluded: usize,
}

/// MAE/MSE plus per-variable and averaged uncertainty-error correlations.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub num_variables: usize,
    /// Pooled (window, horizon) points per variable.
    pub points_per_variable: usize,
    pub aleatoric: ChannelReport,
    pub epistemic: ChannelReport,
    pub total: ChannelReport,
}

impl EvalReport {
    pub fn channel(&self, c: Channel) -> &ChannelReport {
        match c {
            Channel::Aleatoric => &self.aleatoric,
            Channel::Epistemic => &self.epistemic,
            Channel::Total => &self.total,
        }
    }

    /// Flat key-value rendering, stable across runs.
    pub fn to_text(&self, variable_names: &[String]) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "mae = {:.12}", self.mae);
        let _ = writeln!(out, "mse = {:.12}", self.mse);
        let _ = writeln!(out, "variables = {}", self.num_variables);
        let _ = writeln!(out, "points_per_variable = {}", self.points_per_variable);
        for c in Channel::ALL {
            let ch = self.channel(c);
            let name = c.name();
            let _ = writeln!(
                out,
                "corr.{name}.pearson.mean = {}",
                fmt_opt(ch.mean_pearson)
            );
            let _ = writeln!(
                out,
                "corr.{name}.spearman.mean = {}",
                fmt_opt(ch.mean_spearman)
            );
            let _ = writeln!(out, "corr.{name}.excluded = {}", ch.excluded);
            for (j, vc) in ch.per_var.iter().enumerate() {
                let var = variable_names
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("var{j}"));
                let _ = writeln!(
                    out,
                    "corr.{name}.pearson.{var} = {}",
                    fmt_opt(vc.pearson)
                );
                let _ = writeln!(
                    out,
                    "corr.{name}.spearman.{var} = {}",
                    fmt_opt(vc.spearman)
                );
                if let Some(p) = vc.p_value {
                    let _ = writeln!(out, "corr.{name}.pvalue.{var} = {p:.6}");
                }
            }
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.12}"),
        None => "undefined".to_string(),
    }
}

/// Options for the correlation protocol.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationOptions {
    /// When set, adds a seeded permutation p-value per variable and channel.
    pub permutations: Option<usize>,
    pub seed: u64,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        CorrelationOptions {
            permutations: None,
            seed: 0,
        }
    }
}

/// Builds the full report from per-window mixture outputs and targets.
pub fn uncertainty_error_correlation(
    outputs: &[MixtureOutput],
    truths: &[Tensor],
    options: &CorrelationOptions,
) -> Result<EvalReport, EvalError> {
    if outputs.is_empty() || outputs.len() != truths.len() {
        return Err(EvalError::Empty);
    }
    let shape = outputs[0].combined_mean.shape().to_vec();
    let v = shape[1];
    let preds: Vec<Tensor> = outputs.iter().map(|o| o.combined_mean.clone()).collect();
    let (mae, mse) = mae_mse(&preds, truths)?;

    // Pool |error| and each channel per variable across windows and horizon.
    let points = outputs.len() * shape[0];
    let mut errors = vec![Vec::with_capacity(points); v];
    let mut channels: [Vec<Vec<f64>>; 3] = [
        vec![Vec::with_capacity(points); v],
        vec![Vec::with_capacity(points); v],
        vec![Vec::with_capacity(points); v],
    ];
    for (o, t) in outputs.iter().zip(truths) {
        if o.combined_mean.shape() != t.shape() {
            return Err(EvalError::ShapeMismatch {
                lhs: o.combined_mean.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        for (idx, (&p, &y)) in o.combined_mean.data().iter().zip(t.data()).enumerate() {
            let var = idx % v;
            errors[var].push((p - y).abs());
            channels[0][var].push(o.aleatoric.data()[idx]);
            channels[1][var].push(o.epistemic.data()[idx]);
            channels[2][var].push(o.total_variance.data()[idx]);
        }
    }

    let mut reports = Vec::with_capacity(3);
    for chan in &channels {
        let mut per_var = Vec::with_capacity(v);
        let mut pearsons = Vec::new();
        let mut spearmans = Vec::new();
        let mut excluded = 0usize;
        for j in 0..v {
            let mut vc = VarCorrelation::default();
            match pearson(&chan[j], &errors[j]) {
                Ok(r) => {
                    vc.pearson = Some(r);
                    pearsons.push(r);
                }
                Err(EvalError::ConstantInput) => {}
                Err(e) => return Err(e),
            }
            match spearman(&chan[j], &errors[j]) {
                Ok(r) => {
                    vc.spearman = Some(r);
                    spearmans.push(r);
                }
                Err(EvalError::ConstantInput) => {}
                Err(e) => return Err(e),
            }
            if vc.pearson.is_none() && vc.spearman.is_none() {
                excluded += 1;
            } else if let Some(n_perm) = options.permutations {
                vc.p_value = permutation_pvalue(&chan[j], &errors[j], n_perm, options.seed)
                    .ok();
            }
            per_var.push(vc);
        }
        reports.push(ChannelReport {
            per_var,
            mean_pearson: mean_of(&pearsons),
            mean_spearman: mean_of(&spearmans),
            excluded,
        });
    }
    let total = reports.pop().expect("three channels");
    let epistemic = reports.pop().expect("three channels");
    let aleatoric = reports.pop().expect("three channels");
    Ok(EvalReport {
        mae,
        mse,
        num_variables: v,
        points_per_variable: points,
        aleatoric,
        epistemic,
        total,
    })
}

fn mean_of(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}
