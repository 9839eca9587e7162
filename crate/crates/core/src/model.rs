//! Layer stack, pooling and classification head.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{mna_forward, reborrow, GraphContext, KernelPlan, MnaConfig, MnaParams};
use crate::autodiff::{GeluKind, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphBatch, NormalizationKind};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!("unknown pooling `{other}` (expected mean or sum)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub num_classes: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub mna: MnaConfig,
    pub kernels: KernelPlan,
    pub pooling: Pooling,
    pub norm: NormalizationKind,
    pub gelu: GeluKind,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    /// The reference configuration: `d = 128`, four layers, `c = 3`, three
    /// heads of width 8 per kernel, `d_ff = 2d`.
    fn default() -> Self {
        Self {
            in_dim: 1,
            num_classes: 2,
            layers: 4,
            ffn_dim: 256,
            mna: MnaConfig::default(),
            kernels: KernelPlan::MultiNeighborhood,
            pooling: Pooling::Mean,
            norm: NormalizationKind::Symmetric,
            gelu: GeluKind::Tanh,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mna.validate()?;
        self.kernels.validate()?;
        if self.in_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("in_dim and ffn_dim must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("{} classes; need at least 2", self.num_classes)));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub mna: MnaParams,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelParams {
    pub input: Linear,
    pub layers: Vec<LayerParams>,
    pub head1: Linear,
    pub head2: Linear,
}

impl ModelParams {
    /// Allocate and initialize every parameter of `cfg` in a fresh store.
    pub fn init<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let d = cfg.mna.dim;
        let mut store = ParamStore::new();
        let input = Linear::init(&mut store, "input", cfg.in_dim, d, true, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("layer{l}");
                let kernels = cfg.kernels.layer_kernels(l, cfg.mna.max_hop);
                LayerParams {
                    ln1_gamma: store.add_ones(format!("{name}.ln1.gamma"), &[1, d]),
                    ln1_beta: store.add_zeros(format!("{name}.ln1.beta"), &[1, d]),
                    mna: MnaParams::init(&mut store, &format!("{name}.mna"), &cfg.mna, kernels, rng),
                    ln2_gamma: store.add_ones(format!("{name}.ln2.gamma"), &[1, d]),
                    ln2_beta: store.add_zeros(format!("{name}.ln2.beta"), &[1, d]),
                    ffn1: Linear::init(&mut store, &format!("{name}.ffn1"), d, cfg.ffn_dim, true, rng),
                    ffn2: Linear::init(&mut store, &format!("{name}.ffn2"), cfg.ffn_dim, d, true, rng),
                }
            })
            .collect();
        let head1 = Linear::init(&mut store, "head1", d, d, true, rng);
        let head2 = Linear::init(&mut store, "head2", d, cfg.num_classes, true, rng);
        Ok((Self { input, layers, head1, head2 }, store))
    }
}

/// Exact number of scalar learnable parameters.
pub fn parameter_count<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.scalar_count()
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Per layer, the `n x K` kernel weights of the adaptive aggregator.
    pub alphas: Vec<Option<Var>>,
}

/// `Z' = MNA(LN(x)) + Â x`, then `FFN(LN(Z')) + Z'`. Returns the layer
/// output and the aggregation weights, if any.
pub fn layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    x: Var,
    ctx: GraphContext<'_, T>,
    cfg: &ModelConfig,
    lp: &LayerParams,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Var, Option<Var>)> {
    let h = tape.layer_norm(x, bound.var(lp.ln1_gamma), bound.var(lp.ln1_beta), cfg.ln_eps)?;
    let mna = mna_forward(tape, bound, h, ctx, &cfg.mna, &lp.mna, reborrow(&mut rng))?;
    let z = match rng {
        Some(r) if cfg.mna.dropout > 0.0 => tape.dropout(mna.z, cfg.mna.dropout, true, r)?,
        _ => mna.z,
    };
    let residual = tape.propagate_once(ctx.a_hat, x)?;
    let z_prime = tape.add(z, residual)?;
    let h2 = tape.layer_norm(z_prime, bound.var(lp.ln2_gamma), bound.var(lp.ln2_beta), cfg.ln_eps)?;
    let hidden = lp.ffn1.forward(tape, bound, h2)?;
    let hidden = tape.gelu(hidden, cfg.gelu);
    let ffn = lp.ffn2.forward(tape, bound, hidden)?;
    Ok((tape.add(ffn, z_prime)?, mna.alpha))
}

/// Logits `B x C` for a batch. Dropout is active exactly when `rng` is given.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &GraphBatch<T>,
    cfg: &ModelConfig,
    params: &ModelParams,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<ForwardOutput> {
    if batch.features.cols() != cfg.in_dim {
        return Err(Error::shape("model_forward", batch.features.shape(), &[cfg.in_dim]));
    }
    let ctx = GraphContext { a_hat: &batch.a_hat, blocks: &batch.offsets };
    let feats = tape.constant(batch.features.clone());
    let mut x = params.input.forward(tape, bound, feats)?;
    let mut alphas = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (next, alpha) = layer_forward(tape, bound, x, ctx, cfg, lp, reborrow(&mut rng))?;
        x = next;
        alphas.push(alpha);
    }
    let pooled = tape.segment_pool(x, &batch.offsets, cfg.pooling == Pooling::Mean)?;
    let hidden = params.head1.forward(tape, bound, pooled)?;
    let hidden = tape.gelu(hidden, cfg.gelu);
    let logits = params.head2.forward(tape, bound, hidden)?;
    Ok(ForwardOutput { logits, alphas })
}

/// Eval-mode logits without gradient tracking.
pub fn predict<T: Scalar>(
    store: &ParamStore<T>,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &GraphBatch<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let out = model_forward(&mut tape, &bound, batch, cfg, params, None)?;
    Ok(tape.value(out.logits).clone())
}
