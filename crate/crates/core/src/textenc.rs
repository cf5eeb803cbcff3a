//! Auxiliary-sentence construction and the transformer text encoder.
//!
//! Each (review, aspect) query is rendered as one token sequence
//! `<s> aspect </s></s> context </s></s> image-categories </s></s>
//! roi-categories </s>`, padded to a fixed length. The encoder is a
//! post-norm transformer over the real prefix of that sequence; padded
//! positions carry no signal by construction, so the encoder never reads
//! them, and the public API zero-fills their output rows.

use std::collections::BTreeSet;

use crate::datamodel::types::AspectCategory;
use crate::datamodel::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{projected_attention, AttnParams, DropoutCtx, ModelDims};
use crate::numerics::{BoundParams, Graph, NodeId, ParamSet, Tensor, LAYERNORM_EPS};

/// Tokens of the template that are not context or category content:
/// `<s>`, the aspect word, three `</s></s>` separator pairs, and the final
/// `</s>`.
pub const SEQ_OVERHEAD: usize = 9;

/// One encoder input: ids padded to a fixed length, with the real prefix
/// length recorded. Positions `real_len..` are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuxiliarySequence {
    pub ids: Vec<u32>,
    pub real_len: usize,
}

impl AuxiliarySequence {
    pub fn validate(&self) -> Result<()> {
        if self.real_len < SEQ_OVERHEAD || self.real_len > self.ids.len() {
            return Err(Error::data(format!(
                "sequence claims {} real tokens of {}",
                self.real_len,
                self.ids.len()
            )));
        }
        if self.ids[0] != BOS {
            return Err(Error::data("sequence does not start with <s>"));
        }
        Ok(())
    }

    /// Ids of the real (non-padding) prefix.
    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.real_len]
    }
}

/// Builds the auxiliary sequence for one aspect query. Category sets render
/// as aspect-name tokens in canonical order; only the context may be
/// truncated to fit, the other segments never are.
pub fn build_auxiliary_sequence(
    aspect: AspectCategory,
    context: &[String],
    image_categories: &BTreeSet<AspectCategory>,
    roi_categories: &BTreeSet<AspectCategory>,
    vocab: &Vocabulary,
    n_max: usize,
) -> Result<AuxiliarySequence> {
    let fixed = SEQ_OVERHEAD + image_categories.len() + roi_categories.len();
    let budget = n_max.checked_sub(fixed).ok_or_else(|| {
        Error::config(format!(
            "sequence length {n_max} cannot hold {fixed} non-context tokens"
        ))
    })?;
    let mut ids = Vec::with_capacity(n_max);
    ids.push(BOS);
    ids.push(Vocabulary::aspect_id(aspect));
    ids.extend([EOS, EOS]);
    ids.extend(context.iter().take(budget).map(|t| vocab.id_or_unk(t)));
    ids.extend([EOS, EOS]);
    ids.extend(image_categories.iter().map(|&a| Vocabulary::aspect_id(a)));
    ids.extend([EOS, EOS]);
    ids.extend(roi_categories.iter().map(|&a| Vocabulary::aspect_id(a)));
    ids.push(EOS);
    let real_len = ids.len();
    ids.resize(n_max, PAD);
    Ok(AuxiliarySequence { ids, real_len })
}

fn layernorm_affine(g: &mut Graph, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let normed = g.layernorm(x, LAYERNORM_EPS)?;
    let scaled = g.mul_row(normed, gamma)?;
    g.add_row(scaled, beta)
}

/// Builds the encoder over the real prefix of `seq` and returns the
/// `(real_len, d)` hidden-state node. Padded positions are excluded from
/// the computation entirely, which is exactly equivalent to masking them
/// out of every attention layer.
pub fn encoder_rows(
    g: &mut Graph,
    bound: &BoundParams,
    dims: &ModelDims,
    seq: &AuxiliarySequence,
    dropout: &mut DropoutCtx,
) -> Result<NodeId> {
    seq.validate()?;
    if seq.ids.len() > dims.n_max {
        return Err(Error::data(format!(
            "sequence length {} exceeds the model's {}",
            seq.ids.len(),
            dims.n_max
        )));
    }
    let ids: Vec<usize> = seq.real_ids().iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..seq.real_len).collect();
    let tok = g.embed(bound.id("emb.tok")?, &ids)?;
    let pos = g.embed(bound.id("emb.pos")?, &positions)?;
    let summed = g.add(tok, pos)?;
    let mut x = layernorm_affine(g, summed, bound.id("emb.ln.g")?, bound.id("emb.ln.b")?)?;
    for layer in 0..dims.layers {
        let attn = AttnParams::bind(bound, &format!("enc{layer}.attn"))?;
        let attended = projected_attention(g, &attn, x, x, None, dims.heads)?;
        let attended = dropout.apply(g, attended)?;
        let residual = g.add(x, attended)?;
        x = layernorm_affine(
            g,
            residual,
            bound.id(&format!("enc{layer}.ln1.g"))?,
            bound.id(&format!("enc{layer}.ln1.b"))?,
        )?;
        let h1 = g.linear(
            x,
            bound.id(&format!("enc{layer}.ffn.w1"))?,
            bound.id(&format!("enc{layer}.ffn.b1"))?,
        )?;
        let h1 = g.relu(h1)?;
        let h2 = g.linear(
            h1,
            bound.id(&format!("enc{layer}.ffn.w2"))?,
            bound.id(&format!("enc{layer}.ffn.b2"))?,
        )?;
        let h2 = dropout.apply(g, h2)?;
        let residual = g.add(x, h2)?;
        x = layernorm_affine(
            g,
            residual,
            bound.id(&format!("enc{layer}.ln2.g"))?,
            bound.id(&format!("enc{layer}.ln2.b"))?,
        )?;
    }
    Ok(x)
}

/// Encoder output in evaluation mode: full-length hidden states with padded
/// rows zeroed, plus the first-token summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    /// `(n_max, d)`; rows `real_len..` are zero.
    pub h_t: Tensor,
    /// `(1, d)`, the `<s>` row.
    pub h_s: Tensor,
    pub real_len: usize,
}

/// Runs the encoder in evaluation mode (no dropout).
pub fn encode_text(
    seq: &AuxiliarySequence,
    params: &ParamSet,
    dims: &ModelDims,
) -> Result<TextEncoding> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut off = DropoutCtx::disabled();
    let rows = encoder_rows(&mut g, &bound, dims, seq, &mut off)?;
    let real = g.value(rows);
    let mut data = real.data().to_vec();
    data.resize(dims.n_max * dims.d, 0.0);
    Ok(TextEncoding {
        h_s: Tensor::new(vec![1, dims.d], real.row(0).to_vec())?,
        h_t: Tensor::new(vec![dims.n_max, dims.d], data)?,
        real_len: seq.real_len,
    })
}
