//! Model configuration, the parameter schema, and shared graph helpers:
//! deterministic initialization, projected multi-head attention, and a
//! dropout context that names every mask stream.
//!
//! Parameters are described by an explicit `(name, shape, initializer)`
//! schema. Every weight draws from its own named random stream, so the full
//! set is a pure function of the master seed and does not depend on
//! initialization order. The same schema validates checkpoints on load.

use crate::datamodel::types::{AspectCategory, SentimentLabel, FEATURE_DIM, N_MAX};
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, NodeId, ParamSet, Tensor};
use crate::rng::{normal_vec, SeedTree};

/// Standard deviation for normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Initial value of the geometric gate bias; starting positive keeps the
/// gate open so appearance attention dominates early training.
pub const GEO_BIAS_INIT: f64 = 1.0;

/// Structural dimensions of the fusion model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    /// Hidden width shared by the encoder and fusion modules.
    pub d: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Encoder layers.
    pub layers: usize,
    /// Width of the sinusoidal geometric encoding; must be a multiple of 8.
    pub d_g: usize,
    /// Token vocabulary size, including reserved ids.
    pub vocab_size: usize,
    /// Fixed encoder sequence length.
    pub n_max: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
}

impl ModelDims {
    /// Default structure for the given vocabulary.
    pub fn new(vocab_size: usize) -> Self {
        ModelDims {
            d: 96,
            heads: 12,
            layers: 2,
            d_g: 64,
            vocab_size,
            n_max: N_MAX,
            ffn_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.layers == 0 || self.vocab_size == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d_g == 0 || self.d_g % 8 != 0 {
            return Err(Error::config(format!(
                "geometric width {} must be a positive multiple of 8",
                self.d_g
            )));
        }
        if self.n_max < 16 {
            return Err(Error::config(format!("sequence length {} is too short", self.n_max)));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("feed-forward multiplier must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d * self.ffn_mult
    }
}

/// How a parameter tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with mean 0 and [`INIT_STD`].
    Normal,
    Zeros,
    Ones,
    Const(f64),
}

/// One schema entry: parameter name, shape, initializer.
pub type SchemaEntry = (String, Vec<usize>, Init);

fn attention_entries(prefix: &str, d: usize, out: &mut Vec<SchemaEntry>) {
    for proj in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{proj}"), vec![d, d], Init::Normal));
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        out.push((format!("{prefix}.{bias}"), vec![1, d], Init::Zeros));
    }
}

/// Full parameter schema for the fusion model.
pub fn param_schema(dims: &ModelDims) -> Vec<SchemaEntry> {
    let d = dims.d;
    let mut s: Vec<SchemaEntry> = Vec::new();
    // Token embedding, learned positions, and the embedding layer norm.
    s.push(("emb.tok".into(), vec![dims.vocab_size, d], Init::Normal));
    s.push(("emb.pos".into(), vec![dims.n_max, d], Init::Normal));
    s.push(("emb.ln.g".into(), vec![1, d], Init::Ones));
    s.push(("emb.ln.b".into(), vec![1, d], Init::Zeros));
    // Encoder layers: self-attention + feed-forward, each with a post norm.
    for i in 0..dims.layers {
        attention_entries(&format!("enc{i}.attn"), d, &mut s);
        s.push((format!("enc{i}.ln1.g"), vec![1, d], Init::Ones));
        s.push((format!("enc{i}.ln1.b"), vec![1, d], Init::Zeros));
        s.push((format!("enc{i}.ffn.w1"), vec![dims.ffn_dim(), d], Init::Normal));
        s.push((format!("enc{i}.ffn.b1"), vec![1, dims.ffn_dim()], Init::Zeros));
        s.push((format!("enc{i}.ffn.w2"), vec![d, dims.ffn_dim()], Init::Normal));
        s.push((format!("enc{i}.ffn.b2"), vec![1, d], Init::Zeros));
        s.push((format!("enc{i}.ln2.g"), vec![1, d], Init::Ones));
        s.push((format!("enc{i}.ln2.b"), vec![1, d], Init::Zeros));
    }
    // Visual feature projections into the hidden space (grid cells and RoIs).
    s.push(("vis.wi".into(), vec![d, FEATURE_DIM], Init::Normal));
    s.push(("vis.wr".into(), vec![d, FEATURE_DIM], Init::Normal));
    // Cross-modal attention over grid cells.
    attention_entries("cm", d, &mut s);
    // Object relation attention with its geometric gate.
    for proj in ["wq", "wk", "wv", "wo"] {
        s.push((format!("rel.{proj}"), vec![d, d], Init::Normal));
    }
    s.push(("rel.bo".into(), vec![1, d], Init::Zeros));
    s.push(("rel.geo.w".into(), vec![dims.heads, dims.d_g], Init::Normal));
    s.push(("rel.geo.b".into(), vec![1, dims.heads], Init::Const(GEO_BIAS_INIT)));
    // Multimodal attention for the RoI-aware path and for final fusion.
    attention_entries("mmr", d, &mut s);
    attention_entries("mmf", d, &mut s);
    // Sentiment classifier over the fused first row.
    s.push(("cls.w".into(), vec![SentimentLabel::ALL.len(), d], Init::Normal));
    s.push(("cls.b".into(), vec![1, SentimentLabel::ALL.len()], Init::Zeros));
    s
}

/// Schema for the auxiliary category heads (trained separately from the
/// fusion model): a multi-label image head and a single-label RoI head over
/// raw visual features.
pub fn head_schema() -> Vec<SchemaEntry> {
    let aspects = AspectCategory::ALL.len();
    vec![
        ("head.img.w".into(), vec![aspects, FEATURE_DIM], Init::Normal),
        ("head.img.b".into(), vec![1, aspects], Init::Zeros),
        ("head.roi.w".into(), vec![aspects, FEATURE_DIM], Init::Normal),
        ("head.roi.b".into(), vec![1, aspects], Init::Zeros),
    ]
}

fn build_params(schema: &[SchemaEntry], tree: &SeedTree) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for (name, shape, init) in schema {
        let len: usize = shape.iter().product();
        let tensor = match init {
            Init::Normal => {
                let mut rng = tree.stream(&format!("init/{name}"));
                Tensor::new(shape.clone(), normal_vec(&mut rng, len, 0.0, INIT_STD))?
            }
            Init::Zeros => Tensor::zeros(shape.clone())?,
            Init::Ones => Tensor::full(shape.clone(), 1.0)?,
            Init::Const(v) => Tensor::full(shape.clone(), *v)?,
        };
        params.insert(name, tensor)?;
    }
    Ok(params)
}

/// Initializes the full fusion model parameter set.
pub fn init_params(dims: &ModelDims, tree: &SeedTree) -> Result<ParamSet> {
    dims.validate()?;
    build_params(&param_schema(dims), tree)
}

/// Initializes the auxiliary category head parameters.
pub fn init_head_params(tree: &SeedTree) -> Result<ParamSet> {
    build_params(&head_schema(), tree)
}

/// Checks that `params` contains exactly the schema's names with the
/// schema's shapes. Used when loading checkpoints.
pub fn validate_against_schema(params: &ParamSet, schema: &[SchemaEntry]) -> Result<()> {
    for (name, shape, _) in schema {
        let tensor = params
            .get(name)
            .map_err(|_| Error::data(format!("checkpoint is missing parameter {name}")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::data(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                tensor.shape(),
                shape
            )));
        }
    }
    if params.len() != schema.len() {
        let known: std::collections::BTreeSet<&str> =
            schema.iter().map(|(n, _, _)| n.as_str()).collect();
        let extra: Vec<&String> =
            params.names().filter(|n| !known.contains(n.as_str())).collect();
        return Err(Error::data(format!("checkpoint has unknown parameters {extra:?}")));
    }
    Ok(())
}

/// Node ids of one attention block's projections inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl AttnParams {
    /// Looks up the block under `prefix` (e.g. `cm` or `enc0.attn`).
    pub fn bind(bound: &BoundParams, prefix: &str) -> Result<AttnParams> {
        Ok(AttnParams {
            wq: bound.id(&format!("{prefix}.wq"))?,
            bq: bound.id(&format!("{prefix}.bq"))?,
            wk: bound.id(&format!("{prefix}.wk"))?,
            bk: bound.id(&format!("{prefix}.bk"))?,
            wv: bound.id(&format!("{prefix}.wv"))?,
            bv: bound.id(&format!("{prefix}.bv"))?,
            wo: bound.id(&format!("{prefix}.wo"))?,
            bo: bound.id(&format!("{prefix}.bo"))?,
        })
    }
}

/// Full projected multi-head attention: queries and key/value inputs pass
/// through learned linear maps, attend, and mix through the output
/// projection. Because every projection acts row-wise, slicing query rows
/// before this call gives exactly the same rows as slicing after it.
pub fn projected_attention(
    g: &mut Graph,
    p: &AttnParams,
    query_input: NodeId,
    kv_input: NodeId,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<NodeId> {
    let q = g.linear(query_input, p.wq, p.bq)?;
    let k = g.linear(kv_input, p.wk, p.bk)?;
    let v = g.linear(kv_input, p.wv, p.bv)?;
    let mixed = g.attention(q, k, v, key_mask, heads)?;
    g.linear(mixed, p.wo, p.bo)
}

/// Names every dropout mask after a scope (set once per forward pass) and a
/// site counter (incremented per call), so rebuilding the same scope
/// reproduces the same masks regardless of what other scopes ran before.
#[derive(Debug, Clone)]
pub struct DropoutCtx {
    tree: SeedTree,
    scope: String,
    rate: f64,
    site: usize,
}

impl DropoutCtx {
    pub fn new(tree: SeedTree, scope: impl Into<String>, rate: f64) -> Self {
        DropoutCtx { tree, scope: scope.into(), rate, site: 0 }
    }

    /// Evaluation mode: every apply is the identity.
    pub fn disabled() -> Self {
        DropoutCtx::new(SeedTree::new(0), "off", 0.0)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Applies dropout at the next site of this scope.
    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let name = format!("{}/site{}", self.scope, self.site);
        self.site += 1;
        g.dropout(x, self.rate, &mut self.tree.stream(&name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dims() -> ModelDims {
        ModelDims { d: 8, heads: 2, layers: 2, d_g: 16, vocab_size: 30, n_max: 24, ffn_mult: 4 }
    }

    #[test]
    fn schema_names_are_unique_and_init_matches_shapes() {
        let dims = toy_dims();
        let schema = param_schema(&dims);
        let names: std::collections::BTreeSet<&String> =
            schema.iter().map(|(n, _, _)| n).collect();
        assert_eq!(names.len(), schema.len());
        let params = init_params(&dims, &SeedTree::new(5)).unwrap();
        assert_eq!(params.len(), schema.len());
        for (name, shape, _) in &schema {
            assert_eq!(params.get(name).unwrap().shape(), shape.as_slice(), "{name}");
        }
    }

    #[test]
    fn structural_initializers_take_their_constant_values() {
        let params = init_params(&toy_dims(), &SeedTree::new(5)).unwrap();
        assert!(params.get("emb.ln.g").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(params.get("enc1.ln2.g").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(params.get("cls.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(params.get("cm.bq").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(params
            .get("rel.geo.b")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == GEO_BIAS_INIT));
    }

    #[test]
    fn initialization_is_reproducible_and_seed_sensitive() {
        let dims = toy_dims();
        let a = init_params(&dims, &SeedTree::new(11)).unwrap();
        let b = init_params(&dims, &SeedTree::new(11)).unwrap();
        let c = init_params(&dims, &SeedTree::new(12)).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(t, b.get(name).unwrap(), "{name}");
        }
        assert_ne!(a.get("emb.tok").unwrap(), c.get("emb.tok").unwrap());
    }

    #[test]
    fn weight_draws_use_the_configured_spread() {
        let params = init_params(&toy_dims(), &SeedTree::new(3)).unwrap();
        let w = params.get("emb.tok").unwrap();
        let mean = w.data().iter().sum::<f64>() / w.len() as f64;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - INIT_STD).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn schema_validation_rejects_missing_extra_and_misshaped() {
        let dims = toy_dims();
        let schema = param_schema(&dims);
        let good = init_params(&dims, &SeedTree::new(1)).unwrap();
        validate_against_schema(&good, &schema).unwrap();

        let mut extra = init_params(&dims, &SeedTree::new(1)).unwrap();
        extra.insert("rogue", Tensor::zeros(vec![1, 1]).unwrap()).unwrap();
        assert!(validate_against_schema(&extra, &schema).is_err());

        let mut wrong = ParamSet::new();
        for (name, t) in good.iter() {
            if name != "cls.w" {
                wrong.insert(name, t.clone()).unwrap();
            }
        }
        assert!(validate_against_schema(&wrong, &schema).is_err());
        wrong.insert("cls.w", Tensor::zeros(vec![2, 2]).unwrap()).unwrap();
        assert!(validate_against_schema(&wrong, &schema).is_err());
    }

    #[test]
    fn invalid_dimensions_are_rejected() {
        let mut dims = toy_dims();
        dims.heads = 3; // does not divide d = 8
        assert!(dims.validate().is_err());
        let mut dims = toy_dims();
        dims.d_g = 12; // not a multiple of 8
        assert!(dims.validate().is_err());
        assert!(ModelDims::new(100).validate().is_ok());
    }

    #[test]
    fn projected_attention_matches_manual_composition() {
        let dims = toy_dims();
        let params = init_params(&dims, &SeedTree::new(9)).unwrap();
        let tree = SeedTree::new(77);
        let query = Tensor::new(
            vec![3, dims.d],
            normal_vec(&mut tree.stream("q"), 3 * dims.d, 0.0, 1.0),
        )
        .unwrap();
        let keys = Tensor::new(
            vec![5, dims.d],
            normal_vec(&mut tree.stream("k"), 5 * dims.d, 0.0, 1.0),
        )
        .unwrap();
        let mask = [false, false, true, false, true];

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let qn = g.leaf(query.clone());
        let kn = g.leaf(keys.clone());
        let block = AttnParams::bind(&bound, "cm").unwrap();
        let helper = projected_attention(&mut g, &block, qn, kn, Some(&mask), dims.heads).unwrap();

        let q = g.linear(qn, block.wq, block.bq).unwrap();
        let k = g.linear(kn, block.wk, block.bk).unwrap();
        let v = g.linear(kn, block.wv, block.bv).unwrap();
        let attended = g.attention(q, k, v, Some(&mask), dims.heads).unwrap();
        let manual = g.linear(attended, block.wo, block.bo).unwrap();

        assert_eq!(g.value(helper), g.value(manual));
    }

    #[test]
    fn query_rows_can_be_sliced_before_or_after_attention() {
        let dims = toy_dims();
        let params = init_params(&dims, &SeedTree::new(9)).unwrap();
        let tree = SeedTree::new(78);
        let query = Tensor::new(
            vec![4, dims.d],
            normal_vec(&mut tree.stream("q"), 4 * dims.d, 0.0, 1.0),
        )
        .unwrap();
        let keys = Tensor::new(
            vec![6, dims.d],
            normal_vec(&mut tree.stream("k"), 6 * dims.d, 0.0, 1.0),
        )
        .unwrap();

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let block = AttnParams::bind(&bound, "mmf").unwrap();
        let qn = g.leaf(query);
        let kn = g.leaf(keys);
        let full = projected_attention(&mut g, &block, qn, kn, None, dims.heads).unwrap();
        let full_row0 = g.slice_rows(full, 0, 1).unwrap();
        let q0 = g.slice_rows(qn, 0, 1).unwrap();
        let row0 = projected_attention(&mut g, &block, q0, kn, None, dims.heads).unwrap();
        assert_eq!(g.value(full_row0), g.value(row0));
    }

    #[test]
    fn dropout_ctx_reproduces_masks_per_scope_and_site() {
        let tree = SeedTree::new(21);
        let x = Tensor::full(vec![4, 50], 1.0).unwrap();

        let run = |scope: &str| -> Vec<Tensor> {
            let mut g = Graph::new();
            let mut ctx = DropoutCtx::new(tree, scope, 0.5);
            let xn = g.leaf(x.clone());
            let a = ctx.apply(&mut g, xn).unwrap();
            let b = ctx.apply(&mut g, xn).unwrap();
            vec![g.value(a).clone(), g.value(b).clone()]
        };
        let first = run("e0/s0/r1/room");
        let again = run("e0/s0/r1/room");
        let other = run("e0/s1/r1/room");
        assert_eq!(first, again);
        assert_ne!(first[0], other[0]);
        assert_ne!(first[0], first[1]); // distinct sites draw distinct masks

        let mut g = Graph::new();
        let xn = g.leaf(x);
        let mut off = DropoutCtx::disabled();
        assert_eq!(off.apply(&mut g, xn).unwrap(), xn);
    }
}
