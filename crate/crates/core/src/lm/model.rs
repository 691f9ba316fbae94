use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::layers::{
    causal_attention, causal_attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward,
    linear, linear_backward, LnCache,
};
use crate::numerics::{Rng, ValueGrid};

/// Shape and initialization of one decoder-only language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    /// Embedding and hidden width.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum number of input positions.
    pub context: usize,
    pub seed: u64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// When set, the exposed embedding sequence includes the positional
    /// embedding; by default it is the bare token-embedding lookup.
    #[serde(default)]
    pub embeddings_include_positions: bool,
}

fn default_init_std() -> f64 {
    0.02
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("width", self.width),
            ("layers", self.layers),
            ("heads", self.heads),
            ("context", self.context),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("LmConfig.{name} must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} is not divisible by head count {}",
                self.width, self.heads
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::InvalidArgument("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: ValueGrid,
    pub ln1_bias: ValueGrid,
    pub w_qkv: ValueGrid,
    pub b_qkv: ValueGrid,
    pub w_out: ValueGrid,
    pub b_out: ValueGrid,
    pub ln2_gain: ValueGrid,
    pub ln2_bias: ValueGrid,
    pub w_fc: ValueGrid,
    pub b_fc: ValueGrid,
    pub w_proj: ValueGrid,
    pub b_proj: ValueGrid,
}

/// All trainable tensors of a model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub tok_emb: ValueGrid,
    pub pos_emb: ValueGrid,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: ValueGrid,
    pub lnf_bias: ValueGrid,
    /// Output head, `width × vocab`.
    pub head: ValueGrid,
}

impl LmParams {
    fn init(cfg: &LmConfig, rng: &mut Rng) -> Self {
        let d = cfg.width;
        let std = cfg.init_std;
        let proj_std = std / (2.0 * cfg.layers as f64).sqrt();
        let tok_emb = rng.normal_grid(cfg.vocab_size, d, std);
        let pos_emb = rng.normal_grid(cfg.context, d, std);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                ln1_gain: ValueGrid::filled(1, d, 1.0),
                ln1_bias: ValueGrid::zeros(1, d),
                w_qkv: rng.normal_grid(d, 3 * d, std),
                b_qkv: ValueGrid::zeros(1, 3 * d),
                w_out: rng.normal_grid(d, d, proj_std),
                b_out: ValueGrid::zeros(1, d),
                ln2_gain: ValueGrid::filled(1, d, 1.0),
                ln2_bias: ValueGrid::zeros(1, d),
                w_fc: rng.normal_grid(d, 4 * d, std),
                b_fc: ValueGrid::zeros(1, 4 * d),
                w_proj: rng.normal_grid(4 * d, d, proj_std),
                b_proj: ValueGrid::zeros(1, d),
            })
            .collect();
        let head = rng.normal_grid(d, cfg.vocab_size, std);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: ValueGrid::filled(1, d, 1.0),
            lnf_bias: ValueGrid::zeros(1, d),
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Tensors in a fixed canonical order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &ValueGrid)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let fields: [(&str, &ValueGrid); 12] = [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("w_qkv", &b.w_qkv),
                ("b_qkv", &b.b_qkv),
                ("w_out", &b.w_out),
                ("b_out", &b.b_out),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("w_fc", &b.w_fc),
                ("b_fc", &b.b_fc),
                ("w_proj", &b.w_proj),
                ("b_proj", &b.b_proj),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("block{l}.{n}"), t)));
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("head".into(), &self.head));
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut ValueGrid> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.w_qkv,
                &mut b.b_qkv,
                &mut b.w_out,
                &mut b.b_out,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w_fc,
                &mut b.b_fc,
                &mut b.w_proj,
                &mut b.b_proj,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.head]);
        out
    }

    pub fn add_assign(&mut self, other: &LmParams) {
        let src = other.named_tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s).expect("identically shaped parameter sets");
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn num_values(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    ln1: LnCache,
    a: ValueGrid,
    qkv: ValueGrid,
    att: Vec<ValueGrid>,
    heads_out: ValueGrid,
    ln2: LnCache,
    m: ValueGrid,
    f: ValueGrid,
    g: ValueGrid,
}

/// Everything a forward pass exposes to the losses, plus the activations
/// the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub ids: Vec<usize>,
    /// Embedding sequence E (`len × width`).
    pub embeddings: ValueGrid,
    /// Final hidden states H after the final norm (`len × width`).
    pub hidden: ValueGrid,
    /// Next-token logits (`len × vocab`).
    pub logits: ValueGrid,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Pre-norm decoder-only transformer with learned absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm {
    config: LmConfig,
    pub params: LmParams,
}

impl TransformerLm {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let params = LmParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored tensors, checking every shape.
    pub fn from_params(config: LmConfig, params: LmParams) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        for ((name, want), (_, got)) in reference.params.named_tensors().into_iter().zip(params.named_tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::shape(name, format!("{:?}", want.shape()), format!("{:?}", got.shape())));
            }
        }
        if reference.params.blocks.len() != params.blocks.len() {
            return Err(Error::shape("blocks", reference.params.blocks.len(), params.blocks.len()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Looks up token embeddings for `ids` (no positions).
    pub fn token_embeddings(&self, ids: &[usize]) -> Result<ValueGrid> {
        let d = self.config.width;
        let mut out = ValueGrid::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} out of range for vocab of {}",
                    self.config.vocab_size
                )));
            }
            out.row_mut(r).copy_from_slice(self.params.tok_emb.row(id));
        }
        Ok(out)
    }

    /// Output head applied to arbitrary hidden rows.
    pub fn head_logits(&self, hidden: &ValueGrid) -> Result<ValueGrid> {
        if hidden.cols() != self.config.width {
            return Err(Error::shape("head input", self.config.width, hidden.cols()));
        }
        hidden.matmul(&self.params.head)
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ForwardTrace> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Empty("forward on an empty sequence".into()));
        }
        if n > self.config.context {
            return Err(Error::SequenceTooLong {
                len: n,
                context: self.config.context,
            });
        }
        let p = &self.params;
        let tok = self.token_embeddings(ids)?;
        let mut x = tok.clone();
        x.add_assign(&p.pos_emb.slice_rows(0, n))?;
        let embeddings = if self.config.embeddings_include_positions {
            x.clone()
        } else {
            tok
        };
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let x_in = x;
            let (a, ln1) = layer_norm(&x_in, &b.ln1_gain, &b.ln1_bias);
            let qkv = linear(&a, &b.w_qkv, &b.b_qkv);
            let (heads_out, att) = causal_attention(&qkv, self.config.heads);
            let mut x_mid = linear(&heads_out, &b.w_out, &b.b_out);
            x_mid.add_assign(&x_in)?;
            let (m, ln2) = layer_norm(&x_mid, &b.ln2_gain, &b.ln2_bias);
            let f = linear(&m, &b.w_fc, &b.b_fc);
            let g = f.map(gelu);
            let mut x_out = linear(&g, &b.w_proj, &b.b_proj);
            x_out.add_assign(&x_mid)?;
            blocks.push(BlockCache {
                ln1,
                a,
                qkv,
                att,
                heads_out,
                ln2,
                m,
                f,
                g,
            });
            x = x_out;
        }
        let (hidden, lnf) = layer_norm(&x, &p.lnf_gain, &p.lnf_bias);
        let logits = hidden.matmul(&p.head)?;
        Ok(ForwardTrace {
            ids: ids.to_vec(),
            embeddings,
            hidden,
            logits,
            blocks,
            lnf,
        })
    }

    /// Back-propagates upstream gradients injected at the logits, the final
    /// hidden states and the embedding sequence. Any of them may be absent.
    /// Returns parameter gradients and the total gradient at the embedding
    /// sequence E.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: Option<&ValueGrid>,
        d_hidden: Option<&ValueGrid>,
        d_embeddings: Option<&ValueGrid>,
    ) -> Result<(LmParams, ValueGrid)> {
        let n = trace.len();
        let d = self.config.width;
        let check = |name: &str, g: Option<&ValueGrid>, cols: usize| -> Result<()> {
            match g {
                Some(g) if g.shape() != (n, cols) => Err(Error::shape(
                    name,
                    format!("{:?}", (n, cols)),
                    format!("{:?}", g.shape()),
                )),
                _ => Ok(()),
            }
        };
        check("d_logits", d_logits, self.config.vocab_size)?;
        check("d_hidden", d_hidden, d)?;
        check("d_embeddings", d_embeddings, d)?;

        let p = &self.params;
        let mut grads = p.zeros_like();
        let mut dh = match d_hidden {
            Some(g) => g.clone(),
            None => ValueGrid::zeros(n, d),
        };
        if let Some(dl) = d_logits {
            grads.head.add_assign(&trace.hidden.t_matmul(dl)?)?;
            dh.add_assign(&dl.matmul_t(&p.head)?)?;
        }
        let mut dx = layer_norm_backward(&trace.lnf, &p.lnf_gain, &dh, &mut grads.lnf_gain, &mut grads.lnf_bias);
        for (l, (b, c)) in p.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[l];
            let dg = linear_backward(&c.g, &b.w_proj, &dx, &mut gb.w_proj, &mut gb.b_proj);
            let mut df = dg;
            for (v, &f) in df.as_mut_slice().iter_mut().zip(c.f.as_slice()) {
                *v *= gelu_grad(f);
            }
            let dm = linear_backward(&c.m, &b.w_fc, &df, &mut gb.w_fc, &mut gb.b_fc);
            let mut dx_mid = layer_norm_backward(&c.ln2, &b.ln2_gain, &dm, &mut gb.ln2_gain, &mut gb.ln2_bias);
            dx_mid.add_assign(&dx)?;
            let dheads = linear_backward(&c.heads_out, &b.w_out, &dx_mid, &mut gb.w_out, &mut gb.b_out);
            let dqkv = causal_attention_backward(&c.qkv, &c.att, &dheads);
            let da = linear_backward(&c.a, &b.w_qkv, &dqkv, &mut gb.w_qkv, &mut gb.b_qkv);
            let mut dx_in = layer_norm_backward(&c.ln1, &b.ln1_gain, &da, &mut gb.ln1_gain, &mut gb.ln1_bias);
            dx_in.add_assign(&dx_mid)?;
            dx = dx_in;
        }
        // x0 = tok_emb[ids] + pos_emb[..n]
        let mut d_emb_seq = dx.clone();
        for r in 0..n {
            for (acc, v) in grads.pos_emb.row_mut(r).iter_mut().zip(dx.row(r)) {
                *acc += v;
            }
        }
        if let Some(de) = d_embeddings {
            d_emb_seq.add_assign(de)?;
            if self.config.embeddings_include_positions {
                for r in 0..n {
                    for (acc, v) in grads.pos_emb.row_mut(r).iter_mut().zip(de.row(r)) {
                        *acc += v;
                    }
                }
            }
        }
        for (r, &id) in trace.ids.iter().enumerate() {
            for (acc, v) in grads.tok_emb.row_mut(id).iter_mut().zip(d_emb_seq.row(r)) {
                *acc += v;
            }
        }
        Ok((grads, d_emb_seq))
    }
}

/// Adds `d_rows[r]` into `grads.tok_emb[ids[r]]`, for gradients that reach
/// token embeddings outside the forward pass (e.g. target-token lookups).
pub fn accumulate_token_embedding_grad(grads: &mut LmParams, ids: &[usize], d_rows: &ValueGrid) -> Result<()> {
    if d_rows.rows() != ids.len() || d_rows.cols() != grads.tok_emb.cols() {
        return Err(Error::shape(
            "token embedding gradient",
            format!("({}, {})", ids.len(), grads.tok_emb.cols()),
            format!("{:?}", d_rows.shape()),
        ));
    }
    for (r, &id) in ids.iter().enumerate() {
        for (acc, v) in grads.tok_emb.row_mut(id).iter_mut().zip(d_rows.row(r)) {
            *acc += v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_difference, relative_error};

    fn tiny(seed: u64, include_pos: bool) -> TransformerLm {
        TransformerLm::new(LmConfig {
            vocab_size: 7,
            width: 6,
            layers: 2,
            heads: 2,
            context: 8,
            seed,
            init_std: 0.5,
            embeddings_include_positions: include_pos,
        })
        .unwrap()
    }

    /// Compares every parameter gradient against central differences of `loss`.
    fn check_all_params(
        model: &TransformerLm,
        ids: &[usize],
        loss: impl Fn(&ForwardTrace) -> f64,
        grads: &LmParams,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (k, name) in names.iter().enumerate() {
            let analytic = grads.named_tensors()[k].1.clone();
            for idx in 0..analytic.len() {
                let numeric = central_difference(
                    |delta| {
                        let mut m = model.clone();
                        m.params.tensors_mut()[k].as_mut_slice()[idx] += delta;
                        loss(&m.forward(ids).unwrap())
                    },
                    1e-5,
                );
                let err = relative_error(analytic.as_slice()[idx], numeric);
                assert!(err < 1e-4, "{name}[{idx}]: analytic {} numeric {numeric}", analytic.as_slice()[idx]);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn single_token_shapes() {
        let m = tiny(1, false);
        let t = m.forward(&[3]).unwrap();
        assert_eq!(t.logits.shape(), (1, 7));
        assert_eq!(t.hidden.shape(), (1, 6));
        assert_eq!(t.embeddings.shape(), (1, 6));
        let via_head = m.head_logits(&t.hidden).unwrap();
        assert_eq!(via_head, t.logits);
    }

    #[test]
    fn too_long_is_an_error() {
        let m = tiny(1, false);
        assert!(matches!(m.forward(&[1; 9]), Err(Error::SequenceTooLong { len: 9, context: 8 })));
    }

    #[test]
    fn causality() {
        let m = tiny(2, false);
        let a = m.forward(&[1, 4, 5, 6, 2]).unwrap();
        let b = m.forward(&[1, 4, 5, 0, 3]).unwrap();
        for r in 0..3 {
            assert_eq!(a.logits.row(r), b.logits.row(r));
            assert_eq!(a.hidden.row(r), b.hidden.row(r));
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = tiny(3, false);
        let t = m.forward(&[1, 2, 3]).unwrap();
        let (g, de) = m.backward(&t, None, None, None).unwrap();
        assert!(g.named_tensors().iter().all(|(_, t)| t.max_abs() == 0.0));
        assert_eq!(de.max_abs(), 0.0);
    }

    #[test]
    fn embedding_only_gradient_stays_in_token_table() {
        let m = tiny(4, false);
        let ids = [1, 5, 5];
        let t = m.forward(&ids).unwrap();
        let de = ValueGrid::filled(3, 6, 0.25);
        let (g, _) = m.backward(&t, None, None, Some(&de)).unwrap();
        for (name, tensor) in g.named_tensors() {
            if name == "tok_emb" {
                assert_eq!(tensor.row(1), &[0.25; 6]);
                assert_eq!(tensor.row(5), &[0.5; 6]);
                assert_eq!(tensor.row(0), &[0.0; 6]);
            } else {
                assert_eq!(tensor.max_abs(), 0.0, "{name}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_sum_of_logits() {
        let m = tiny(5, false);
        let ids = [1, 4, 2, 6];
        let t = m.forward(&ids).unwrap();
        let dl = ValueGrid::filled(4, 7, 1.0);
        let (g, _) = m.backward(&t, Some(&dl), None, None).unwrap();
        check_all_params(&m, &ids, |t| t.logits.sum(), &g);
    }

    #[test]
    fn backward_matches_finite_differences_composite() {
        for include_pos in [false, true] {
            let m = tiny(6, include_pos);
            let ids = [1, 3, 3, 5, 2];
            let t = m.forward(&ids).unwrap();
            // weighted sums keep the check sensitive to every coordinate
            let wl = Rng::new(1).normal_grid(5, 7, 1.0);
            let wh = Rng::new(2).normal_grid(5, 6, 1.0);
            let we = Rng::new(3).normal_grid(5, 6, 1.0);
            let loss = |t: &ForwardTrace| {
                let dotp = |a: &ValueGrid, b: &ValueGrid| -> f64 {
                    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
                };
                0.3 * dotp(&t.logits, &wl) + 0.7 * dotp(&t.hidden, &wh) + dotp(&t.embeddings, &we)
            };
            let (g, _) = m
                .backward(&t, Some(&wl.scaled(0.3)), Some(&wh.scaled(0.7)), Some(&we))
                .unwrap();
            check_all_params(&m, &ids, loss, &g);
        }
    }

    #[test]
    fn backward_rejects_bad_shapes() {
        let m = tiny(7, false);
        let t = m.forward(&[1, 2]).unwrap();
        let err = m.backward(&t, Some(&ValueGrid::zeros(2, 3)), None, None).unwrap_err();
        assert!(err.to_string().contains("d_logits"));
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(tiny(11, false), tiny(11, false));
        assert_ne!(tiny(11, false).params, tiny(12, false).params);
        let bad = LmConfig {
            width: 5,
            heads: 2,
            ..tiny(1, false).config().clone()
        };
        assert!(TransformerLm::new(bad).is_err());
    }
}
