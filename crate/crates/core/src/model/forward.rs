use super::{Masks, ModelConfig, TransformerWeights};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Extra inputs to a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Width-growth masks; `None` runs the plain architecture.
    pub masks: Option<&'a Masks>,
    /// Added to the token embeddings, `[seq × model_dim]`.
    pub embed_noise: Option<&'a Tensor>,
    /// Record the residual stream after every block.
    pub keep_hidden: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[seq × vocab]`.
    pub logits: Tensor,
    /// Residual stream after each block, when requested.
    pub hidden: Option<Vec<Tensor>>,
}

/// Graph handles for every parameter, mirroring [`TransformerWeights`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub token_embedding: Var,
    pub layers: Vec<[Var; 9]>,
    pub final_norm_gain: Var,
    pub output_head: Var,
}

impl ParamVars {
    /// Handles in [`TransformerWeights::named`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.final_norm_gain);
        out.push(self.output_head);
        out
    }
}

/// Records every weight on `g`, as trainable parameters or as constants.
pub fn bind<T: Element>(g: &mut Graph<T>, weights: &TransformerWeights, trainable: bool) -> ParamVars {
    let mut put = |t: &Tensor| {
        let t = t.cast::<T>();
        if trainable {
            g.param(t)
        } else {
            g.constant(t)
        }
    };
    ParamVars {
        token_embedding: put(&weights.token_embedding),
        layers: weights.layers.iter().map(|l| l.tensors().map(&mut put)).collect(),
        final_norm_gain: put(&weights.final_norm_gain),
        output_head: put(&weights.output_head),
    }
}

/// Validates a token sequence against `config`.
pub fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq {
        return Err(Error::Contract(format!(
            "sequence of {} tokens exceeds max_seq {}",
            tokens.len(),
            config.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            bound: config.vocab_size,
        });
    }
    Ok(())
}

/// Records the decoder on `g` and returns the logits handle plus the
/// residual stream after each block.
pub fn build<T: Element>(
    g: &mut Graph<T>,
    p: &ParamVars,
    config: &ModelConfig,
    tokens: &[usize],
    opts: ForwardOptions<'_>,
) -> Result<(Var, Vec<Var>)> {
    check_tokens(config, tokens)?;
    if let Some(m) = opts.masks {
        m.validate(config)?;
    }
    let d = config.model_dim;
    let hd = config.head_dim;
    let eps = config.rms_eps;
    let hidden_mask = |g: &mut Graph<T>, m: f32| -> Option<Var> {
        opts.masks.map(|mk| {
            let v = mk.layout.hidden::<T>(d, m);
            g.constant(Tensor::from_parts(vec![d], v))
        })
    };
    let norm_weights = |m: f32| opts.masks.map(|mk| mk.layout.hidden::<T>(d, m));

    let mut x = g.embedding(p.token_embedding, tokens)?;
    if let Some(noise) = opts.embed_noise {
        if noise.shape() != [tokens.len(), d] {
            return Err(Error::dim("embedding noise", noise.shape(), &[tokens.len(), d]));
        }
        let n = g.constant(noise.cast());
        x = g.add(x, n)?;
    }
    if let Some(mv) = hidden_mask(g, opts.masks.map_or(1.0, |m| m.embed)) {
        x = g.mul_row(x, mv)?;
    }

    let mut hidden = Vec::with_capacity(config.layers);
    for (l, w) in p.layers.iter().enumerate() {
        let [attn_gain, wq, wk, wv, wo, ffn_gain, wg, wu, wd] = *w;
        let m = opts.masks.map_or(1.0, |mk| mk.layers[l]);

        let h = g.rms_norm(x, attn_gain, norm_weights(m), eps)?;
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let q = g.rope(q, hd, config.rope_base, 0)?;
        let k = g.rope(k, hd, config.rope_base, 0)?;
        let mut a = g.causal_attention(q, k, v, config.attn_heads, config.kv_heads)?;
        if let Some(mk) = opts.masks {
            let hm = g.constant(Tensor::from_parts(
                vec![config.attn_heads * hd],
                mk.layout.heads::<T>(hd, m),
            ));
            a = g.mul_row(a, hm)?;
        }
        let mut o = g.matmul(a, wo)?;
        if let Some(mv) = hidden_mask(g, m) {
            o = g.mul_row(o, mv)?;
        }
        x = g.add(x, o)?;

        let h = g.rms_norm(x, ffn_gain, norm_weights(m), eps)?;
        let mut u = g.swiglu_hidden(h, wg, wu)?;
        if let Some(mk) = opts.masks {
            let fm = g.constant(Tensor::from_parts(
                vec![config.ffn_dim],
                mk.layout.ffn::<T>(config.ffn_dim, m),
            ));
            u = g.mul_row(u, fm)?;
        }
        let mut f = g.matmul(u, wd)?;
        if let Some(mv) = hidden_mask(g, m) {
            f = g.mul_row(f, mv)?;
        }
        x = g.add(x, f)?;
        hidden.push(x);
    }

    let m = opts.masks.map_or(1.0, |mk| mk.final_norm);
    let h = g.rms_norm(x, p.final_norm_gain, norm_weights(m), eps)?;
    let logits = g.matmul(h, p.output_head)?;
    Ok((logits, hidden))
}

/// Runs the decoder over `tokens`.
pub fn forward(weights: &TransformerWeights, config: &ModelConfig, tokens: &[usize]) -> Result<ForwardOutput> {
    forward_with(weights, config, tokens, ForwardOptions::default())
}

pub fn forward_with(
    weights: &TransformerWeights,
    config: &ModelConfig,
    tokens: &[usize],
    opts: ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    if weights.layers.len() != config.layers {
        weights.validate(config)?;
    }
    let mut g = Graph::new();
    let p = bind(&mut g, weights, false);
    let (logits, hidden) = build(&mut g, &p, config, tokens, opts)?;
    let hidden = opts
        .keep_hidden
        .then(|| hidden.iter().map(|&h| g.value(h).clone()).collect());
    let logits = g.take_value(logits);
    if !logits.is_finite() {
        return Err(Error::Contract("forward produced non-finite logits".into()));
    }
    Ok(ForwardOutput { logits, hidden })
}

/// Records the mean next-token cross-entropy of `tokens` on `g`.
pub fn build_loss<T: Element>(
    g: &mut Graph<T>,
    p: &ParamVars,
    config: &ModelConfig,
    tokens: &[usize],
    opts: ForwardOptions<'_>,
) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::Contract(format!(
            "next-token loss needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let n = tokens.len();
    let (logits, _) = build(g, p, config, &tokens[..n - 1], opts)?;
    g.cross_entropy(logits, &tokens[1..])
}

/// Mean cross-entropy of `logits[0..n−1]` against `tokens[1..n]`.
pub fn loss_next_token(weights: &TransformerWeights, config: &ModelConfig, tokens: &[usize]) -> Result<f32> {
    let mut g = Graph::new();
    let p = bind(&mut g, weights, false);
    let loss = build_loss(&mut g, &p, config, tokens, ForwardOptions::default())?;
    g.value(loss).item()
}

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    fn max_seq(&self) -> usize;

    /// `[seq × vocab]` logits for `tokens`.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor>;
}

/// A configuration and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: TransformerWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: TransformerWeights) -> Result<Self> {
        weights.validate(&config)?;
        Ok(Model { config, weights })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = super::init_model(&config, seed)?;
        Ok(Model { config, weights })
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutput> {
        forward(&self.weights, &self.config, tokens)
    }

    pub fn loss_next_token(&self, tokens: &[usize]) -> Result<f32> {
        loss_next_token(&self.weights, &self.config, tokens)
    }

    pub fn count_params(&self) -> u64 {
        self.config.count_params()
    }
}

impl LanguageModel for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq(&self) -> usize {
        self.config.max_seq
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.forward(tokens)?.logits)
    }
}

/// A model run with fixed width-growth masks.
#[derive(Clone, Copy, Debug)]
pub struct MaskedModel<'a> {
    pub model: &'a Model,
    pub masks: Option<&'a Masks>,
}

impl LanguageModel for MaskedModel<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn max_seq(&self) -> usize {
        self.model.config.max_seq
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let opts = ForwardOptions {
            masks: self.masks,
            ..Default::default()
        };
        Ok(forward_with(&self.model.weights, &self.model.config, tokens, opts)?.logits)
    }
}
