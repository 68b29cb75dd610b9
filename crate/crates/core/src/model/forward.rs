use super::params::LAYER_TENSORS;
use super::{ModelConfig, ModelError, Parameters};
use crate::encoding::{CountdownPlan, EncodingError, EncodingMatrix, EncodingMode};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Graph handles for every parameter, in [`Parameters::tensors`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    n_layers: usize,
}

impl ParamVars {
    /// Registers parameters as trainable leaves.
    pub fn trainable<T: Scalar>(graph: &mut Graph<T>, params: &Parameters<T>) -> Self {
        Self::register(graph, params, true)
    }

    /// Registers parameters as constants (no gradients).
    pub fn frozen<T: Scalar>(graph: &mut Graph<T>, params: &Parameters<T>) -> Self {
        Self::register(graph, params, false)
    }

    fn register<T: Scalar>(graph: &mut Graph<T>, params: &Parameters<T>, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.input(t.clone())
                }
            })
            .collect();
        Self {
            vars,
            n_layers: params.layers.len(),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn embedding(&self) -> Var {
        self.vars[0]
    }

    fn layer(&self, l: usize) -> &[Var] {
        &self.vars[1 + l * LAYER_TENSORS..1 + (l + 1) * LAYER_TENSORS]
    }

    fn tail(&self) -> (Var, Var, Var) {
        let base = 1 + self.n_layers * LAYER_TENSORS;
        (self.vars[base], self.vars[base + 1], self.vars[base + 2])
    }

    /// Gradients of every parameter after `graph.backward`, zero-filled
    /// where a parameter did not influence the loss.
    pub fn gradients<T: Scalar>(&self, graph: &mut Graph<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| {
                graph
                    .take_grad(v)
                    .unwrap_or_else(|| vec![T::zero(); graph.value(v).numel()])
            })
            .collect()
    }
}

/// Adds `tokens`' forward pass to `graph` and returns the `[L, vocab]`
/// logits node. The countdown encoding is scaled to the Frobenius norm
/// of this sequence's token embeddings.
pub fn build_logits<T: Scalar>(
    graph: &mut Graph<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    tokens: &[u32],
    plan: &CountdownPlan,
) -> Result<Var, ModelError> {
    build_logits_scaled(graph, vars, config, tokens, plan, None)
}

/// Like [`build_logits`], but `fixed_scale` (when given) replaces the
/// per-sequence norm ratio with a constant factor.
pub fn build_logits_scaled<T: Scalar>(
    graph: &mut Graph<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    tokens: &[u32],
    plan: &CountdownPlan,
    fixed_scale: Option<T>,
) -> Result<Var, ModelError> {
    config.check_tokens(tokens)?;
    let len = tokens.len();
    if plan.total_len() != len {
        return Err(ModelError::PlanMismatch {
            plan: plan.total_len(),
            tokens: len,
        });
    }
    let d = config.d_model;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = graph.embedding(vars.embedding(), &ids)?;

    if plan.mode() != EncodingMode::None {
        let enc = EncodingMatrix::<T>::from_plan(plan, d)?;
        let enc_norm = enc.frobenius_norm();
        if enc_norm.is_zero() {
            return Err(EncodingError::DegenerateEncoding.into());
        }
        let r = graph.input(Tensor::new(vec![len, d], enc.into_data())?);
        let scaled = match fixed_scale {
            Some(f) => graph.scale(r, f),
            None => {
                let emb_norm = graph.frobenius_norm(x);
                if graph.value(emb_norm).item().is_zero() {
                    return Err(EncodingError::DegenerateEmbedding.into());
                }
                let factor = graph.scale(emb_norm, T::one() / enc_norm);
                graph.mul_scalar(r, factor)?
            }
        };
        x = graph.add(x, scaled)?;
    }

    let positions: Vec<usize> = (0..len).collect();
    let head_dim = config.head_dim();
    let attn_scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    for l in 0..config.n_layers {
        let w = vars.layer(l);
        let h = graph.layer_norm(x, w[0], w[1])?;
        let q = graph.matmul(h, w[2])?;
        let k = graph.matmul(h, w[3])?;
        let v = graph.matmul(h, w[4])?;
        let q = graph.rope(q, &positions, head_dim, config.rope_base)?;
        let k = graph.rope(k, &positions, head_dim, config.rope_base)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let start = head * head_dim;
            let qh = graph.slice_cols(q, start, head_dim)?;
            let kh = graph.slice_cols(k, start, head_dim)?;
            let vh = graph.slice_cols(v, start, head_dim)?;
            let scores = graph.matmul_t(qh, kh)?;
            let scores = graph.scale(scores, attn_scale);
            let probs = graph.softmax(scores, true)?;
            heads.push(graph.matmul(probs, vh)?);
        }
        let attn = graph.concat_cols(&heads)?;
        let attn = graph.matmul(attn, w[5])?;
        x = graph.add(x, attn)?;

        let h = graph.layer_norm(x, w[6], w[7])?;
        let f = graph.matmul(h, w[8])?;
        let f = graph.add_bias(f, w[9])?;
        let f = graph.gelu(f);
        let f = graph.matmul(f, w[10])?;
        let f = graph.add_bias(f, w[11])?;
        x = graph.add(x, f)?;
    }
    let (gain, bias, out) = vars.tail();
    let x = graph.layer_norm(x, gain, bias)?;
    Ok(graph.matmul(x, out)?)
}

/// Next-token logits `[L, vocab]` at every position.
pub fn forward<T: Scalar>(params: &Parameters<T>, tokens: &[u32], plan: &CountdownPlan) -> Result<Tensor<T>, ModelError> {
    forward_scaled(params, tokens, plan, None)
}

/// [`forward`] with an optional fixed encoding scale factor.
pub fn forward_scaled<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
    plan: &CountdownPlan,
    fixed_scale: Option<T>,
) -> Result<Tensor<T>, ModelError> {
    let mut graph = Graph::new();
    let vars = ParamVars::frozen(&mut graph, params);
    let logits = build_logits_scaled(&mut graph, &vars, params.config(), tokens, plan, fixed_scale)?;
    Ok(graph.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 40,
            rope_base: 10_000.0,
        }
    }

    fn plan(mode: EncodingMode, n: usize, len: usize) -> CountdownPlan {
        CountdownPlan::exact(mode, n, len).unwrap()
    }

    #[test]
    fn single_token_logits_are_finite() {
        let p = Parameters::<f32>::init(cfg(), 1).unwrap();
        let logits = forward(&p, &[3], &plan(EncodingMode::Ldpe, 0, 1)).unwrap();
        assert_eq!(logits.shape(), &[1, 30]);
        assert!(logits.is_finite());
    }

    #[test]
    fn encoding_changes_logits() {
        let p = Parameters::<f32>::init(cfg(), 1).unwrap();
        let toks = [1, 4, 9, 2, 7];
        let a = forward(&p, &toks, &plan(EncodingMode::None, 2, 5)).unwrap();
        let b = forward(&p, &toks, &plan(EncodingMode::Ldpe, 2, 5)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn vocabulary_and_length_errors() {
        let p = Parameters::<f32>::init(cfg(), 1).unwrap();
        assert!(matches!(
            forward(&p, &[1, 30], &plan(EncodingMode::None, 1, 2)),
            Err(ModelError::Vocabulary { id: 30, .. })
        ));
        let long = vec![1u32; 41];
        assert!(matches!(
            forward(&p, &long, &plan(EncodingMode::None, 1, 41)),
            Err(ModelError::Length { len: 41, max: 40 })
        ));
        assert!(matches!(
            forward(&p, &[1, 2], &plan(EncodingMode::None, 1, 3)),
            Err(ModelError::PlanMismatch { .. })
        ));
    }

    #[test]
    fn later_tokens_do_not_change_earlier_logits() {
        let p = Parameters::<f64>::init(cfg(), 5).unwrap();
        for (mode, scale) in [(EncodingMode::None, None), (EncodingMode::Ldpe, Some(0.7))] {
            let mut toks = vec![1, 5, 6, 7, 8, 9, 2];
            let pl = plan(mode, 2, toks.len());
            let before = forward_scaled(&p, &toks, &pl, scale).unwrap();
            toks[4] = 20;
            let after = forward_scaled(&p, &toks, &pl, scale).unwrap();
            for r in 0..4 {
                assert_eq!(before.row(r), after.row(r));
            }
            assert_ne!(before.row(4), after.row(4));
        }
    }
}
