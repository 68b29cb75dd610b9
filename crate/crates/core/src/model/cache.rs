use super::{ModelError, Parameters};
use crate::tensor::kernels::{gelu, layer_norm_rows, rope_rows, softmax_in_place};
use crate::tensor::{Scalar, Tensor};

/// Rotated keys and values of every layer for the positions seen so far.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn matmul<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>) -> Vec<T> {
    let (k, n) = w.dims2();
    let mut out = vec![T::zero(); rows * n];
    T::gemm(rows, k, n, x, false, w.data(), false, T::zero(), &mut out);
    out
}

impl<T: Scalar> Parameters<T> {
    /// Runs already-embedded input rows (`[m, d_model]`, encoding already
    /// added) at the next `m` positions, appending their keys and values to
    /// `cache`. Returns next-token logits `[m, vocab]`.
    pub fn forward_cached(&self, cache: &mut KvCache<T>, inputs: &[T]) -> Result<Tensor<T>, ModelError> {
        let cfg = self.config();
        let d = cfg.d_model;
        if inputs.is_empty() || inputs.len() % d != 0 {
            return Err(ModelError::Empty);
        }
        let m = inputs.len() / d;
        let start = cache.len;
        if start + m > cfg.max_seq {
            return Err(ModelError::Length {
                len: start + m,
                max: cfg.max_seq,
            });
        }
        let positions: Vec<usize> = (start..start + m).collect();
        let head_dim = cfg.head_dim();
        let attn_scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
        let mut x = inputs.to_vec();
        let mut h = vec![T::zero(); m * d];
        for (l, layer) in self.layers.iter().enumerate() {
            layer_norm_rows(&x, d, layer.attn_norm_gain.data(), layer.attn_norm_bias.data(), &mut h);
            let mut q = matmul(&h, m, &layer.wq);
            let mut k = matmul(&h, m, &layer.wk);
            let v = matmul(&h, m, &layer.wv);
            rope_rows(&mut q, d, &positions, head_dim, cfg.rope_base, false);
            rope_rows(&mut k, d, &positions, head_dim, cfg.rope_base, false);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let keys = &cache.keys[l];
            let vals = &cache.values[l];

            let mut attn = vec![T::zero(); m * d];
            let mut scores = Vec::with_capacity(start + m);
            for r in 0..m {
                let visible = start + r + 1;
                for head in 0..cfg.n_heads {
                    let off = head * head_dim;
                    let qh = &q[r * d + off..r * d + off + head_dim];
                    scores.clear();
                    scores.extend((0..visible).map(|j| {
                        let kh = &keys[j * d + off..j * d + off + head_dim];
                        qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * attn_scale
                    }));
                    softmax_in_place(&mut scores);
                    let out = &mut attn[r * d + off..r * d + off + head_dim];
                    for (j, &p) in scores.iter().enumerate() {
                        let vh = &vals[j * d + off..j * d + off + head_dim];
                        out.iter_mut().zip(vh).for_each(|(o, &v)| *o += p * v);
                    }
                }
            }
            let proj = matmul(&attn, m, &layer.wo);
            x.iter_mut().zip(&proj).for_each(|(x, &p)| *x += p);

            layer_norm_rows(&x, d, layer.ff_norm_gain.data(), layer.ff_norm_bias.data(), &mut h);
            let mut f = matmul(&h, m, &layer.ff_in);
            let ff = cfg.d_ff;
            for row in f.chunks_exact_mut(ff) {
                for (v, &b) in row.iter_mut().zip(layer.ff_in_bias.data()) {
                    *v = gelu(*v + b);
                }
            }
            let f = matmul(&f, m, &layer.ff_out);
            for (xrow, frow) in x.chunks_exact_mut(d).zip(f.chunks_exact(d)) {
                for ((x, &f), &b) in xrow.iter_mut().zip(frow).zip(layer.ff_out_bias.data()) {
                    *x += f + b;
                }
            }
        }
        cache.len += m;
        layer_norm_rows(&x, d, self.final_norm_gain.data(), self.final_norm_bias.data(), &mut h);
        let logits = matmul(&h, m, &self.output);
        Ok(Tensor::new(vec![m, cfg.vocab_size], logits)?)
    }

    /// Token embedding rows for `tokens` (`[len, d_model]`, row-major).
    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<T>, ModelError> {
        let cfg = self.config();
        let d = cfg.d_model;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let t = t as usize;
            if t >= cfg.vocab_size {
                return Err(ModelError::Vocabulary {
                    id: t,
                    vocab: cfg.vocab_size,
                });
            }
            out.extend_from_slice(&self.token_embedding.data()[t * d..(t + 1) * d]);
        }
        Ok(out)
    }
}
