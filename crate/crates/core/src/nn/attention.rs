//! Fused axial attention over NCHW feature grids: single-head attention
//! along rows, then along columns, each with a residual connection.

use rand::Rng;

use super::param::module_fields;
use super::Conv2d;
use crate::tensor::{Tape, Tensor, Var};

/// One attention pass along a single spatial axis.
#[derive(Clone, Debug)]
pub struct AxisAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub out: Conv2d,
    /// `true` attends along rows (width axis), `false` along columns.
    pub along_rows: bool,
}
module_fields!(AxisAttention { query, key, value, out });

impl AxisAttention {
    pub fn new<R: Rng + ?Sized>(channels: usize, along_rows: bool, rng: &mut R) -> Self {
        let unit = (1.0f64 / 2.0).sqrt();
        Self {
            query: Conv2d::new(channels, channels, 1, 1, rng).scaled(unit),
            key: Conv2d::new(channels, channels, 1, 1, rng).scaled(unit),
            value: Conv2d::new(channels, channels, 1, 1, rng).scaled(unit),
            out: Conv2d::new(channels, channels, 1, 1, rng).scaled(0.1),
            along_rows,
        }
    }

    /// `[n, c, h, w]` -> `[n * lines, len, c]` token sequences along the attended axis.
    fn to_tokens<'t>(&self, x: Var<'t>) -> Var<'t> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if self.along_rows {
            x.permute([0, 2, 3, 1]).reshape(&[n * h, w, c])
        } else {
            x.permute([0, 3, 2, 1]).reshape(&[n * w, h, c])
        }
    }

    fn from_tokens<'t>(&self, t: Var<'t>, shape: &[usize]) -> Var<'t> {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.along_rows {
            t.reshape(&[n, h, w, c]).permute([0, 3, 1, 2])
        } else {
            t.reshape(&[n, w, h, c]).permute([0, 3, 2, 1])
        }
    }

    /// Row-stochastic attention matrices `[n * lines, len, len]`.
    pub fn weights<'t>(&self, tape: &'t Tape, query_src: Var<'t>, kv_src: Var<'t>) -> Var<'t> {
        let c = kv_src.shape()[1];
        let q = self.to_tokens(self.query.forward(tape, query_src));
        let k = self.to_tokens(self.key.forward(tape, kv_src));
        q.bmm(k, false, true).mul_scalar(1.0 / (c as f64).sqrt()).softmax_last()
    }

    /// `kv_src + out(attention(query_src -> kv_src))`.
    pub fn forward<'t>(&self, tape: &'t Tape, query_src: Var<'t>, kv_src: Var<'t>) -> Var<'t> {
        let shape = kv_src.shape();
        let attn = self.weights(tape, query_src, kv_src);
        let v = self.to_tokens(self.value.forward(tape, kv_src));
        let mixed = self.from_tokens(attn.bmm(v, false, false), &shape);
        kv_src.add(self.out.forward(tape, mixed))
    }
}

/// Row attention followed by column attention.
#[derive(Clone, Debug)]
pub struct FusedAxialAttention {
    pub rows: AxisAttention,
    pub cols: AxisAttention,
}
module_fields!(FusedAxialAttention { rows, cols });

impl FusedAxialAttention {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self { rows: AxisAttention::new(channels, true, rng), cols: AxisAttention::new(channels, false, rng) }
    }

    /// Self-attention: queries, keys and values all come from `x`.
    pub fn forward_self<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let h = self.rows.forward(tape, x, x);
        self.cols.forward(tape, h, h)
    }

    /// Cross-attention: queries from `prompt`, keys and values (and the
    /// residual stream) from `content`.
    pub fn forward_cross<'t>(&self, tape: &'t Tape, prompt: Var<'t>, content: Var<'t>) -> Var<'t> {
        let h = self.rows.forward(tape, prompt, content);
        self.cols.forward(tape, prompt, h)
    }

    /// Attention matrices of both passes for a cross-attention forward.
    pub fn cross_weights(&self, prompt: &Tensor, content: &Tensor) -> (Tensor, Tensor) {
        let tape = Tape::new();
        let (p, c) = (tape.constant(prompt.clone()), tape.constant(content.clone()));
        let row_w = self.rows.weights(&tape, p, c);
        let h = self.rows.forward(&tape, p, c);
        let col_w = self.cols.weights(&tape, p, h);
        ((*row_w.value()).clone(), (*col_w.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let att = FusedAxialAttention::new(4, &mut rng);
        let p = Tensor::randn(vec![2, 4, 5, 6], 2.0, &mut rng);
        let c = Tensor::randn(vec![2, 4, 5, 6], 2.0, &mut rng);
        let (rw, cw) = att.cross_weights(&p, &c);
        assert_eq!(rw.shape(), &[10, 6, 6]);
        assert_eq!(cw.shape(), &[12, 5, 5]);
        for w in [&rw, &cw] {
            let len = w.shape()[2];
            for row in w.data().chunks(len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn zero_output_projection_passes_content_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut att = FusedAxialAttention::new(3, &mut rng);
        att.rows.out.zero();
        att.cols.out.zero();
        let tape = Tape::new();
        let c0 = Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut rng);
        let p = tape.constant(Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut rng));
        let y = att.forward_cross(&tape, p, tape.constant(c0.clone())).value();
        assert_eq!(*y, c0);
    }
}
