//! Parameter layout and the forward graph.
//!
//! Encoder: `L` same-padded conv+ReLU layers on the `[1, T]` response, a
//! sigmoid 1×1-conv gate per level summed into `F_att`, multi-head attention
//! over the `T` tokens of width `C`, then a two-layer MLP to `z`. Decoder: a
//! linear expansion to `[C, T]`, two conv+ReLU layers and a final conv to one
//! channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CaaeConfig, CaaeError, Result};
use crate::autodiff::layers::{linear, multi_head_attention_t, MhaVars};
use crate::autodiff::{AdamState, Tape, Tensor, Var};

/// Number of conv+ReLU layers in the decoder before the output conv.
pub const DECODER_HIDDEN_CONVS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

/// Every parameter in the order the forward graph consumes them.
pub fn param_layout(cfg: &CaaeConfig) -> Vec<ParamSpec> {
    let (c, k, t) = (cfg.channels, cfg.kernel_size, cfg.n_t);
    let mut out = Vec::new();
    let mut specs: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for l in 0..cfg.conv_layers {
        let c_in = if l == 0 { 1 } else { c };
        specs.push((format!("encoder.conv{l}"), vec![c, c_in, k], c_in * k, c));
    }
    for m in 0..cfg.conv_layers {
        specs.push((format!("encoder.gate{m}"), vec![c, c, 1], c, c));
    }
    for h in 0..cfg.heads {
        for p in ["q", "k", "v"] {
            specs.push((format!("attention.head{h}.{p}"), vec![c, cfg.d_k], c, 0));
        }
    }
    specs.push(("attention.out".into(), vec![cfg.heads * cfg.d_k, c], cfg.heads * cfg.d_k, c));
    specs.push(("mlp.hidden".into(), vec![t * c, cfg.mlp_hidden], t * c, cfg.mlp_hidden));
    specs.push(("mlp.latent".into(), vec![cfg.mlp_hidden, cfg.latent_dim], cfg.mlp_hidden, cfg.latent_dim));
    specs.push(("decoder.expand".into(), vec![cfg.latent_dim, c * t], cfg.latent_dim, c * t));
    for l in 0..DECODER_HIDDEN_CONVS {
        specs.push((format!("decoder.conv{l}"), vec![c, c, k], c * k, c));
    }
    specs.push(("decoder.out".into(), vec![1, c, k], c * k, 1));
    for (name, shape, fan_in, bias_len) in specs {
        out.push(ParamSpec {
            name: format!("{name}.weight"),
            shape,
            fan_in,
            is_bias: false,
        });
        if bias_len > 0 {
            out.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![bias_len],
                fan_in,
                is_bias: true,
            });
        }
    }
    out
}

/// Learnable parameters, optimizer moments and the input scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: CaaeConfig,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
    /// Responses are divided by this before entering the network and
    /// reconstructions multiplied by it on the way out.
    pub input_scale: f64,
}

impl ModelState {
    /// Kaiming-uniform weights, zero biases.
    pub fn init(config: CaaeConfig, input_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if !(input_scale > 0.0 && input_scale.is_finite()) {
            return Err(CaaeError::Config(format!("input scale {input_scale} must be positive")));
        }
        let params: Vec<Tensor> = param_layout(&config)
            .into_iter()
            .map(|p| {
                if p.is_bias {
                    Tensor::zeros(p.shape)
                } else {
                    Tensor::kaiming_uniform(p.shape, p.fan_in, rng)
                }
            })
            .collect();
        let adam = AdamState::for_params(&params, config.lr);
        Ok(Self {
            config,
            params,
            adam,
            input_scale,
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> Vec<String> {
        param_layout(&self.config).into_iter().map(|p| p.name).collect()
    }

    /// Network output for one response already in network units (divided by
    /// `input_scale`): `(z, S̃)`.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let out = build_forward(&mut tape, &self.config, &self.params, input)?;
        Ok((tape.value(out.z).to_vec(), tape.value(out.reconstruction).to_vec()))
    }

    /// Same as [`forward`](Self::forward) for a response in data units; the
    /// reconstruction is returned in data units too.
    pub fn forward_scaled(&self, response: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x: Vec<f64> = response.iter().map(|v| v / self.input_scale).collect();
        let (z, mut rec) = self.forward(&x)?;
        rec.iter_mut().for_each(|v| *v *= self.input_scale);
        Ok((z, rec))
    }
}

pub struct ForwardVars {
    pub z: Var,
    pub reconstruction: Var,
    /// Per-head `[T, T]` attention weights.
    pub attention: Vec<Var>,
}

/// Records the network on `tape`. Parameters become trainable leaves in
/// layout order, so slot `i` holds the gradient of `params[i]`.
pub fn build_forward<'a>(
    tape: &mut Tape<'a>,
    cfg: &CaaeConfig,
    params: &'a [Tensor],
    input: &[f64],
) -> Result<ForwardVars> {
    let t = cfg.n_t;
    if input.len() != t {
        return Err(CaaeError::Shape(format!("input of length {} for n_t = {t}", input.len())));
    }
    let layout_len = param_layout(cfg).len();
    if params.len() != layout_len {
        return Err(CaaeError::Shape(format!("{} parameter tensors, layout has {layout_len}", params.len())));
    }
    let first = tape.n_slots();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    debug_assert_eq!(tape.n_slots() - first, vars.len());
    let mut next = vars.into_iter();
    let mut take = || next.next().expect("layout covers every parameter");

    let x = tape.constant(Tensor::new(vec![1, t], input.to_vec())?);

    let mut features = Vec::with_capacity(cfg.conv_layers);
    let mut h = x;
    for _ in 0..cfg.conv_layers {
        let (w, b) = (take(), take());
        let y = tape.conv1d(h, w, b)?;
        h = tape.relu(y);
        features.push(h);
    }

    let mut f_att: Option<Var> = None;
    for &f in &features {
        let (w, b) = (take(), take());
        let g = tape.conv1d(f, w, b)?;
        let alpha = tape.sigmoid(g);
        let weighted = tape.mul(alpha, f)?;
        f_att = Some(match f_att {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let f_att = f_att.expect("at least one conv layer");

    let mut mha = MhaVars {
        w_q: Vec::with_capacity(cfg.heads),
        w_k: Vec::with_capacity(cfg.heads),
        w_v: Vec::with_capacity(cfg.heads),
        w_o: x,
        b_o: x,
    };
    for _ in 0..cfg.heads {
        mha.w_q.push(take());
        mha.w_k.push(take());
        mha.w_v.push(take());
    }
    mha.w_o = take();
    mha.b_o = take();
    // F_att is already the transposed token matrix [C, T]
    let attended = multi_head_attention_t(tape, f_att, &mha)?;

    let flat = tape.reshape(attended.output, vec![1, t * cfg.channels])?;
    let (w, b) = (take(), take());
    let hidden = linear(tape, flat, w, b)?;
    let hidden = tape.relu(hidden);
    let (w, b) = (take(), take());
    let z = linear(tape, hidden, w, b)?;

    let (w, b) = (take(), take());
    let expanded = linear(tape, z, w, b)?;
    let mut d = tape.reshape(expanded, vec![cfg.channels, t])?;
    for _ in 0..DECODER_HIDDEN_CONVS {
        let (w, b) = (take(), take());
        let y = tape.conv1d(d, w, b)?;
        d = tape.relu(y);
    }
    let (w, b) = (take(), take());
    let out = tape.conv1d(d, w, b)?;
    let reconstruction = tape.reshape(out, vec![t])?;
    let z = tape.reshape(z, vec![cfg.latent_dim])?;
    Ok(ForwardVars {
        z,
        reconstruction,
        attention: attended.weights,
    })
}
