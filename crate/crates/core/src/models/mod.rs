//! Parameterizations of the responsibility allocation `γ` and their
//! parameter gradients.
//!
//! Every model maps a context vector to a point on the simplex:
//!
//! * [`ModelSpec::Constant`]: `γ = softmax(γ̃)`, context ignored.
//! * [`ModelSpec::Mlp`]: `γ = softmax(h_θ(c))` for an unconstrained network.
//! * [`ModelSpec::Symmetric`]: labelling-invariant allocation over a joint
//!   state. With `φ(x) = Σ_{σ fixing agent 0} φ̃(σ(x))`, agent `i` receives
//!   `softmax_i(φ(τᵢ(x)))` where `τᵢ` swaps agents `0` and `i`.
//! * [`ModelSpec::RelativeSymmetric`]: two agents in relative coordinates,
//!   `γ₁(r) = ½(1 + tanh(φ(r) − φ(−r)))`, `γ₂ = 1 − γ₁`.

mod checkpoint;
mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use mlp::{Mlp, MlpTrace};

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest agent count accepted by the permutation construction.
pub const MAX_SYMMETRIC_AGENTS: usize = 6;
pub const DEFAULT_HIDDEN: [usize; 3] = [16, 16, 16];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("permutation-symmetric model supports at most {cap} agents, got {n}")]
    TooManyAgents { n: usize, cap: usize },
    #[error("model needs at least {min} agents, got {n}")]
    TooFewAgents { n: usize, min: usize },
    #[error("context has length {got}, expected {expected}")]
    ContextLength { expected: usize, got: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("input scale has length {got}, expected {expected}, or contains a non-positive entry")]
    InputScale { expected: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid model specification: {0}")]
    Spec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How a model's context vector is built from a stacked joint state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContextKind {
    /// The joint state as is.
    Joint { n_agents: usize, agent_dim: usize },
    /// Agent 2's block minus agent 1's block (two agents only).
    Relative { agent_dim: usize },
}

impl ContextKind {
    pub fn dim(&self) -> usize {
        match *self {
            ContextKind::Joint {
                n_agents,
                agent_dim,
            } => n_agents * agent_dim,
            ContextKind::Relative { agent_dim } => agent_dim,
        }
    }

    /// Length of the joint state this context is extracted from.
    pub fn state_len(&self) -> usize {
        match *self {
            ContextKind::Joint {
                n_agents,
                agent_dim,
            } => n_agents * agent_dim,
            ContextKind::Relative { agent_dim } => 2 * agent_dim,
        }
    }

    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.state_len() {
            return Err(ModelError::ContextLength {
                expected: self.state_len(),
                got: x.len(),
            });
        }
        Ok(match *self {
            ContextKind::Joint { .. } => x.to_vec(),
            ContextKind::Relative { agent_dim } => (0..agent_dim)
                .map(|k| x[agent_dim + k] - x[k])
                .collect(),
        })
    }
}

/// Architecture and dimensions of a responsibility model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Constant {
        n_agents: usize,
    },
    Mlp {
        n_agents: usize,
        context: ContextKind,
        hidden: Vec<usize>,
    },
    Symmetric {
        n_agents: usize,
        agent_dim: usize,
        hidden: Vec<usize>,
    },
    RelativeSymmetric {
        agent_dim: usize,
        hidden: Vec<usize>,
    },
}

impl ModelSpec {
    pub fn n_agents(&self) -> usize {
        match self {
            ModelSpec::Constant { n_agents }
            | ModelSpec::Mlp { n_agents, .. }
            | ModelSpec::Symmetric { n_agents, .. } => *n_agents,
            ModelSpec::RelativeSymmetric { .. } => 2,
        }
    }

    /// Context the model consumes; `None` for constant allocations.
    pub fn context(&self) -> Option<ContextKind> {
        match self {
            ModelSpec::Constant { .. } => None,
            ModelSpec::Mlp { context, .. } => Some(*context),
            ModelSpec::Symmetric {
                n_agents,
                agent_dim,
                ..
            } => Some(ContextKind::Joint {
                n_agents: *n_agents,
                agent_dim: *agent_dim,
            }),
            ModelSpec::RelativeSymmetric { agent_dim, .. } => Some(ContextKind::Relative {
                agent_dim: *agent_dim,
            }),
        }
    }

    pub fn context_dim(&self) -> usize {
        self.context().map_or(0, |c| c.dim())
    }

    fn validate(&self) -> Result<(), ModelError> {
        let n = self.n_agents();
        if n == 0 {
            return Err(ModelError::TooFewAgents { n, min: 1 });
        }
        if let ModelSpec::Symmetric { .. } = self {
            if n > MAX_SYMMETRIC_AGENTS {
                return Err(ModelError::TooManyAgents {
                    n,
                    cap: MAX_SYMMETRIC_AGENTS,
                });
            }
        }
        if let Some(ctx) = self.context() {
            if ctx.dim() == 0 {
                return Err(ModelError::Spec("context dimension is zero".into()));
            }
            if matches!(ctx, ContextKind::Relative { .. }) && n != 2 {
                return Err(ModelError::Spec(
                    "relative context requires exactly two agents".into(),
                ));
            }
        }
        if let ModelSpec::Mlp { hidden, .. }
        | ModelSpec::Symmetric { hidden, .. }
        | ModelSpec::RelativeSymmetric { hidden, .. } = self
        {
            if hidden.contains(&0) {
                return Err(ModelError::Spec("hidden layer of width zero".into()));
            }
        }
        Ok(())
    }

    fn network(&self) -> Option<Mlp> {
        match self {
            ModelSpec::Constant { .. } => None,
            ModelSpec::Mlp {
                n_agents,
                context,
                hidden,
            } => Some(Mlp::new(context.dim(), hidden, *n_agents)),
            ModelSpec::Symmetric {
                n_agents,
                agent_dim,
                hidden,
            } => Some(Mlp::new(n_agents * agent_dim, hidden, 1)),
            ModelSpec::RelativeSymmetric { agent_dim, hidden } => {
                Some(Mlp::new(*agent_dim, hidden, 1))
            }
        }
    }
}

/// Block-source tables for the symmetric construction: entry `[i][p]` lists,
/// for each output block `k`, the input block placed there when evaluating
/// agent `i`'s logit under the `p`-th permutation fixing block 0.
type PermTable = Vec<Vec<Vec<usize>>>;

fn permutation_table(n: usize) -> &'static PermTable {
    static TABLES: [OnceLock<PermTable>; MAX_SYMMETRIC_AGENTS + 1] =
        [const { OnceLock::new() }; MAX_SYMMETRIC_AGENTS + 1];
    TABLES[n].get_or_init(|| {
        let fixing_zero: Vec<Vec<usize>> = if n <= 1 {
            vec![vec![0; n]]
        } else {
            itertools::Itertools::permutations(1..n, n - 1)
                .map(|rest| std::iter::once(0).chain(rest).collect())
                .collect()
        };
        (0..n)
            .map(|i| {
                let swap = |b: usize| {
                    if b == 0 {
                        i
                    } else if b == i {
                        0
                    } else {
                        b
                    }
                };
                fixing_zero
                    .iter()
                    .map(|perm| perm.iter().map(|&b| swap(b)).collect())
                    .collect()
            })
            .collect()
    })
}

/// A responsibility model with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityModel {
    spec: ModelSpec,
    params: Vec<f64>,
    seed: u64,
    net: Option<Mlp>,
}

/// Seeded initialization: constant logits start at zero (uniform `γ`), network
/// weights are uniform in `±1/√fan_in`.
pub fn init_model(spec: ModelSpec, seed: u64) -> Result<ResponsibilityModel, ModelError> {
    ResponsibilityModel::init(spec, seed)
}

impl ResponsibilityModel {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let net = spec.network();
        let params = match &net {
            None => vec![0.0; spec.n_agents()],
            Some(net) => net.init(&mut ChaCha8Rng::seed_from_u64(seed)),
        };
        Ok(Self {
            spec,
            params,
            seed,
            net,
        })
    }

    pub fn from_parts(
        spec: ModelSpec,
        params: Vec<f64>,
        seed: u64,
        input_scale: Option<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        let mut model = Self::init(spec, seed)?;
        model.set_params(&params)?;
        model.set_input_scale(input_scale)?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_agents(&self) -> usize {
        self.spec.n_agents()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::ParamLength {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("parameters"));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn network(&self) -> Option<&Mlp> {
        self.net.as_ref()
    }

    pub fn input_scale(&self) -> Option<&[f64]> {
        self.net.as_ref().and_then(|n| n.input_scale())
    }

    pub fn set_input_scale(&mut self, scale: Option<Vec<f64>>) -> Result<(), ModelError> {
        let Some(net) = self.net.as_mut() else {
            return match scale {
                None => Ok(()),
                Some(s) => Err(ModelError::InputScale {
                    expected: 0,
                    got: s.len(),
                }),
            };
        };
        if let Some(s) = &scale {
            if s.len() != net.input_dim() || s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(ModelError::InputScale {
                    expected: net.input_dim(),
                    got: s.len(),
                });
            }
        }
        net.set_input_scale(scale);
        Ok(())
    }

    /// Sets the input scale to per-feature standard deviations of `contexts`.
    /// Symmetric models pool each feature across agent blocks so that the
    /// scaling commutes with relabelling.
    pub fn fit_input_scale(&mut self, contexts: &[Vec<f64>]) -> Result<(), ModelError> {
        if self.net.is_none() || contexts.is_empty() {
            return Ok(());
        }
        let dim = self.spec.context_dim();
        let block = match self.spec {
            ModelSpec::Symmetric { agent_dim, .. } => agent_dim,
            _ => dim,
        };
        let mut sum = vec![0.0; block];
        let mut sq = vec![0.0; block];
        let mut count = 0.0;
        for c in contexts {
            if c.len() != dim {
                return Err(ModelError::ContextLength {
                    expected: dim,
                    got: c.len(),
                });
            }
            for chunk in c.chunks(block) {
                for (k, v) in chunk.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                count += 1.0;
            }
        }
        let std: Vec<f64> = (0..block)
            .map(|k| {
                let mean = sum[k] / count;
                let var = (sq[k] / count - mean * mean).max(0.0);
                let s = var.sqrt();
                if s > 1e-9 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let scale = (0..dim).map(|k| std[k % block]).collect();
        self.set_input_scale(Some(scale))
    }

    /// Context vector for a stacked joint state.
    pub fn context_from_state(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        match self.spec.context() {
            None => Ok(Vec::new()),
            Some(kind) => kind.extract(x),
        }
    }

    fn check_context(&self, context: &[f64]) -> Result<(), ModelError> {
        let expected = self.spec.context_dim();
        if self.net.is_some() && context.len() != expected {
            return Err(ModelError::ContextLength {
                expected,
                got: context.len(),
            });
        }
        if context.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("context"));
        }
        Ok(())
    }

    /// Allocation `γ(context)`.
    pub fn eval(&self, context: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_context(context)?;
        Ok(self.forward(context))
    }

    fn forward(&self, context: &[f64]) -> Vec<f64> {
        match &self.spec {
            ModelSpec::Constant { .. } => softmax(&self.params),
            ModelSpec::Mlp { .. } => softmax(&self.net().forward(&self.params, context)),
            ModelSpec::Symmetric {
                n_agents,
                agent_dim,
                ..
            } => softmax(&self.symmetric_logits(context, *n_agents, *agent_dim)),
            ModelSpec::RelativeSymmetric { .. } => {
                let t = self.relative_gap(context).tanh();
                relative_pair(t)
            }
        }
    }

    fn net(&self) -> &Mlp {
        self.net.as_ref().expect("network-backed model")
    }

    fn permuted_input(context: &[f64], agent_dim: usize, sources: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(context.len());
        for &b in sources {
            out.extend_from_slice(&context[b * agent_dim..(b + 1) * agent_dim]);
        }
        out
    }

    fn symmetric_logits(&self, context: &[f64], n: usize, agent_dim: usize) -> Vec<f64> {
        let table = permutation_table(n);
        let net = self.net();
        table
            .iter()
            .map(|perms| {
                let mut terms: Vec<f64> = perms
                    .iter()
                    .map(|src| net.forward(&self.params, &Self::permuted_input(context, agent_dim, src))[0])
                    .collect();
                // Summing in sorted order makes relabelled inputs give
                // bit-identical logits.
                terms.sort_by(f64::total_cmp);
                terms.iter().sum()
            })
            .collect()
    }

    fn relative_gap(&self, r: &[f64]) -> f64 {
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let net = self.net();
        net.forward(&self.params, r)[0] - net.forward(&self.params, &neg)[0]
    }

    /// Returns `γ(context)` and the vector-Jacobian product
    /// `(∂γ/∂θ)ᵀ · dl_dgamma`.
    pub fn vjp(
        &self,
        context: &[f64],
        dl_dgamma: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        self.check_context(context)?;
        let n = self.n_agents();
        if dl_dgamma.len() != n {
            return Err(ModelError::ContextLength {
                expected: n,
                got: dl_dgamma.len(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let gamma = match &self.spec {
            ModelSpec::Constant { .. } => {
                let gamma = softmax(&self.params);
                grad = softmax_vjp(&gamma, dl_dgamma);
                gamma
            }
            ModelSpec::Mlp { .. } => {
                let net = self.net();
                let trace = net.trace(&self.params, context);
                let gamma = softmax(trace.output());
                let dz = softmax_vjp(&gamma, dl_dgamma);
                net.backward(&self.params, &trace, &dz, &mut grad);
                gamma
            }
            ModelSpec::Symmetric {
                n_agents,
                agent_dim,
                ..
            } => {
                let gamma = softmax(&self.symmetric_logits(context, *n_agents, *agent_dim));
                let dz = softmax_vjp(&gamma, dl_dgamma);
                let net = self.net();
                for (perms, &d) in permutation_table(*n_agents).iter().zip(&dz) {
                    if d == 0.0 {
                        continue;
                    }
                    for src in perms {
                        let input = Self::permuted_input(context, *agent_dim, src);
                        let trace = net.trace(&self.params, &input);
                        net.backward(&self.params, &trace, &[d], &mut grad);
                    }
                }
                gamma
            }
            ModelSpec::RelativeSymmetric { .. } => {
                let net = self.net();
                let neg: Vec<f64> = context.iter().map(|v| -v).collect();
                let pos_trace = net.trace(&self.params, context);
                let neg_trace = net.trace(&self.params, &neg);
                let t = (pos_trace.output()[0] - neg_trace.output()[0]).tanh();
                let d_gap = 0.5 * (1.0 - t * t) * (dl_dgamma[0] - dl_dgamma[1]);
                net.backward(&self.params, &pos_trace, &[d_gap], &mut grad);
                net.backward(&self.params, &neg_trace, &[-d_gap], &mut grad);
                relative_pair(t)
            }
        };
        Ok((gamma, grad))
    }

    /// Full Jacobian `∂γ/∂θ` (`n_agents × n_params`), one reverse pass per row.
    pub fn jacobian(&self, context: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        let n = self.n_agents();
        let mut jac = DMatrix::zeros(n, self.params.len());
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let (_, row) = self.vjp(context, &e)?;
            for (k, v) in row.into_iter().enumerate() {
                jac[(i, k)] = v;
            }
        }
        Ok(jac)
    }
}

fn relative_pair(t: f64) -> Vec<f64> {
    let g1 = 0.5 * (1.0 + t);
    vec![g1, 1.0 - g1]
}

/// Numerically stable softmax; the normaliser is summed in sorted order so a
/// permutation of the logits permutes the output exactly.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let mut sorted = e.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// `(∂softmax/∂z)ᵀ · g` given the softmax output `p`.
pub fn softmax_vjp(p: &[f64], g: &[f64]) -> Vec<f64> {
    let mean: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pk, gk)| pk * (gk - mean)).collect()
}
