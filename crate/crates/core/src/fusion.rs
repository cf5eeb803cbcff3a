//! Cross-modal fusion: image-guided attention over grid cells, object
//! relation attention with geometric gating, RoI-aware multimodal
//! attention, and the fused sentiment classifier.
//!
//! Every operation exists in two forms: a graph builder used by training
//! (operating on dense, real-slot-only nodes) and an evaluation wrapper
//! honoring the padded/masked calling convention. Padded slots are
//! structurally excluded from attention, which is exactly equivalent to
//! masking them out.

use crate::error::{Error, Result};
use crate::model::{projected_attention, AttnParams, DropoutCtx, ModelDims};
use crate::numerics::{BoundParams, Graph, NodeId, ParamSet, Tensor};

/// Floor inside the geometric displacement logs.
pub const GEO_EPS: f64 = 1e-3;
/// Floor under the ReLU-gated geometric weight before its log.
pub const GATE_FLOOR: f64 = 1e-6;

/// Raw geometric relation between two boxes `(x, y, w, h)`: log-scaled
/// center displacements relative to the first box, and log size ratios.
/// Identical boxes give `(ln(ε/w), ln(ε/h), 0, 0)`.
pub fn pair_geometry(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let (cxa, cya) = (a[0] + a[2] / 2.0, a[1] + a[3] / 2.0);
    let (cxb, cyb) = (b[0] + b[2] / 2.0, b[1] + b[3] / 2.0);
    [
        ((cxa - cxb).abs().max(GEO_EPS) / a[2]).ln(),
        ((cya - cyb).abs().max(GEO_EPS) / a[3]).ln(),
        (b[2] / a[2]).ln(),
        (b[3] / a[3]).ln(),
    ]
}

/// Sinusoidal embedding of one geometric 4-vector into `d_g` dimensions:
/// each component gets `d_g / 8` sine/cosine pairs at wavelengths
/// `1000^(8k/d_g)`.
pub fn sinusoidal_encoding(raw: &[f64; 4], d_g: usize) -> Result<Vec<f64>> {
    if d_g == 0 || d_g % 8 != 0 {
        return Err(Error::config(format!(
            "geometric width {d_g} must be a positive multiple of 8"
        )));
    }
    let freqs = d_g / 8;
    let mut out = Vec::with_capacity(d_g);
    for &component in raw {
        for k in 0..freqs {
            let wave = 1000f64.powf(8.0 * k as f64 / d_g as f64);
            out.push((component / wave).sin());
            out.push((component / wave).cos());
        }
    }
    Ok(out)
}

/// Pairwise geometric encodings for a set of boxes, flattened to a
/// `(J*J, d_g)` tensor in row-major `(i, j)` order. Constant per image, so
/// callers may compute it once and reuse it across steps.
pub fn geometry_matrix(boxes: &[[f64; 4]], d_g: usize) -> Result<Tensor> {
    if boxes.is_empty() {
        return Err(Error::data("geometry of an empty box set"));
    }
    for b in boxes {
        if !(b[2] > 0.0 && b[3] > 0.0) {
            return Err(Error::data(format!("box {b:?} has nonpositive extent")));
        }
    }
    let j = boxes.len();
    let mut data = Vec::with_capacity(j * j * d_g);
    for a in boxes {
        for b in boxes {
            data.extend(sinusoidal_encoding(&pair_geometry(*a, *b), d_g)?);
        }
    }
    Tensor::new(vec![j * j, d_g], data)
}

/// Cross-modal attention of the text representation over one image's
/// projected grid cells, one output row per image. `query` holds the text
/// rows (training uses just the first row; projections are row-wise, so
/// the first output row is identical either way).
pub fn image_guided_rows(
    g: &mut Graph,
    cm: &AttnParams,
    query: NodeId,
    grid_projs: &[NodeId],
    heads: usize,
    dropout: &mut DropoutCtx,
) -> Result<Vec<NodeId>> {
    let mut rows = Vec::with_capacity(grid_projs.len());
    for &cells in grid_projs {
        let attended = projected_attention(g, cm, query, cells, None, heads)?;
        let first = g.slice_rows(attended, 0, 1)?;
        rows.push(dropout.apply(g, first)?);
    }
    Ok(rows)
}

/// Object relation attention over one image's projected RoIs: appearance
/// logits plus the log of the ReLU-gated geometric weight, softmax over all
/// RoIs (self included), value mixing, output projection, and a residual
/// back to the input rows.
///
/// Returns the `(J, d)` output and, for inspection, the per-head `(J, J)`
/// attention weight nodes.
pub fn object_relation_rows(
    g: &mut Graph,
    bound: &BoundParams,
    dims: &ModelDims,
    v_r: NodeId,
    geometry: &Tensor,
    dropout: &mut DropoutCtx,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (j, d) = g.value(v_r).expect_2d("object_relation")?;
    if d != dims.d {
        return Err(Error::shape(
            "object_relation",
            format!("RoI rows have width {d}, model uses {}", dims.d),
        ));
    }
    if geometry.shape() != [j * j, dims.d_g] {
        return Err(Error::shape(
            "object_relation",
            format!("geometry {:?} for {j} RoIs with d_g {}", geometry.shape(), dims.d_g),
        ));
    }
    let q = g.matmul(v_r, bound.id("rel.wq")?, false, true)?;
    let k = g.matmul(v_r, bound.id("rel.wk")?, false, true)?;
    let v = g.matmul(v_r, bound.id("rel.wv")?, false, true)?;
    let geo = g.leaf(geometry.clone());
    let gate_lin = g.matmul(geo, bound.id("rel.geo.w")?, false, true)?;
    let gate_lin = g.add_row(gate_lin, bound.id("rel.geo.b")?)?;
    let gate = g.relu(gate_lin)?;
    let gate_log = g.clamp_log(gate, GATE_FLOOR)?; // (J*J, heads)

    let dh = dims.d / dims.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(dims.heads);
    let mut weights = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, from, to)?;
        let kh = g.slice_cols(k, from, to)?;
        let vh = g.slice_cols(v, from, to)?;
        let appearance = g.matmul(qh, kh, false, true)?;
        let appearance = g.scalar_mul(appearance, scale)?;
        let geo_h = g.slice_cols(gate_log, h, h + 1)?;
        let geo_h = g.reshape(geo_h, vec![j, j])?;
        let logits = g.add(appearance, geo_h)?;
        let w = g.softmax(logits)?;
        weights.push(w);
        head_outs.push(g.matmul(w, vh, false, false)?);
    }
    let mixed = if dims.heads == 1 { head_outs[0] } else { g.concat_cols(&head_outs)? };
    let projected = g.linear(mixed, bound.id("rel.wo")?, bound.id("rel.bo")?)?;
    let projected = dropout.apply(g, projected)?;
    let out = g.add(v_r, projected)?;
    Ok((out, weights))
}

/// RoI-aware multimodal attention for one image: the first text row
/// queries the concatenation of text rows and relation-attended RoI rows
/// (or the text rows alone when the image has no RoIs), yielding one row.
pub fn roi_aware_row(
    g: &mut Graph,
    mmr: &AttnParams,
    h_s: NodeId,
    h_t: NodeId,
    h_o: Option<NodeId>,
    heads: usize,
    dropout: &mut DropoutCtx,
) -> Result<NodeId> {
    let keys = match h_o {
        Some(h_o) => g.concat_rows(&[h_t, h_o])?,
        None => h_t,
    };
    let row = projected_attention(g, mmr, h_s, keys, None, heads)?;
    dropout.apply(g, row)
}

/// Final fusion and classification: the first-token row queries the fused
/// sequence `H_s ⊕ H_I ⊕ H_R`, and the classifier maps the attended row to
/// four sentiment logits.
pub fn fused_logits(
    g: &mut Graph,
    bound: &BoundParams,
    mmf: &AttnParams,
    h_s: NodeId,
    h_i_rows: &[NodeId],
    h_r_rows: &[NodeId],
    heads: usize,
    dropout: &mut DropoutCtx,
) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(1 + h_i_rows.len() + h_r_rows.len());
    rows.push(h_s);
    rows.extend_from_slice(h_i_rows);
    rows.extend_from_slice(h_r_rows);
    let fused = if rows.len() == 1 { h_s } else { g.concat_rows(&rows)? };
    let attended = projected_attention(g, mmf, h_s, fused, None, heads)?;
    let attended = dropout.apply(g, attended)?;
    g.linear(attended, bound.id("cls.w")?, bound.id("cls.b")?)
}

fn real_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i).collect()
}

fn scatter_rows(real: &Tensor, mask: &[bool], d: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(vec![mask.len(), d])?;
    for (src, dst) in real_indices(mask).into_iter().enumerate() {
        let row = real.row(src).to_vec();
        out.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&row);
    }
    Ok(out)
}

/// Evaluation-mode image-guided attention over padded image slots.
/// `v_i[k]` is image `k`'s projected `(d, cells)` grid, `None` when the
/// slot is padding. Returns `(K, d)` rows (zero when padded) and the mask.
pub fn image_guided_attention(
    params: &ParamSet,
    dims: &ModelDims,
    h_t: &Tensor,
    v_i: &[Option<Tensor>],
) -> Result<(Tensor, Vec<bool>)> {
    let (_, d) = h_t.expect_2d("image_guided_attention")?;
    if d != dims.d {
        return Err(Error::shape(
            "image_guided_attention",
            format!("text rows have width {d}, model uses {}", dims.d),
        ));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let cm = AttnParams::bind(&bound, "cm")?;
    let mut off = DropoutCtx::disabled();
    let query = g.leaf(h_t.clone());
    let mut grid_nodes = Vec::new();
    for grid in v_i.iter().flatten() {
        let (gd, _) = grid.expect_2d("image_guided_attention")?;
        if gd != dims.d {
            return Err(Error::shape(
                "image_guided_attention",
                format!("projected grid {:?} does not match width {}", grid.shape(), dims.d),
            ));
        }
        let node = g.leaf(grid.transposed()?);
        grid_nodes.push(node);
    }
    let rows = image_guided_rows(&mut g, &cm, query, &grid_nodes, dims.heads, &mut off)?;
    let mask: Vec<bool> = v_i.iter().map(Option::is_none).collect();
    let real = if rows.is_empty() {
        Tensor::zeros(vec![0, dims.d])?
    } else {
        let stacked = g.concat_rows(&rows)?;
        g.value(stacked).clone()
    };
    Ok((scatter_rows(&real, &mask, dims.d)?, mask))
}

/// Evaluation-mode object relation over one image's padded RoI rows
/// (`true` masks a padded slot). Rows and boxes of padded slots are
/// ignored; padded output rows are zero. All-masked input yields all-zero
/// output.
pub fn object_relation(
    params: &ParamSet,
    dims: &ModelDims,
    v_r: &Tensor,
    boxes: &[[f64; 4]],
    mask: &[bool],
) -> Result<Tensor> {
    let (rows, d) = v_r.expect_2d("object_relation")?;
    if rows != mask.len() || boxes.len() != mask.len() {
        return Err(Error::shape(
            "object_relation",
            format!("{rows} rows, {} boxes, {} mask slots", boxes.len(), mask.len()),
        ));
    }
    let real = real_indices(mask);
    if real.is_empty() {
        return Tensor::zeros(vec![mask.len(), d]);
    }
    let mut data = Vec::with_capacity(real.len() * d);
    let mut real_boxes = Vec::with_capacity(real.len());
    for &i in &real {
        data.extend_from_slice(v_r.row(i));
        real_boxes.push(boxes[i]);
    }
    let dense = Tensor::new(vec![real.len(), d], data)?;
    let geometry = geometry_matrix(&real_boxes, dims.d_g)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut off = DropoutCtx::disabled();
    let input = g.leaf(dense);
    let (out, _) = object_relation_rows(&mut g, &bound, dims, input, &geometry, &mut off)?;
    scatter_rows(g.value(out), mask, d)
}

/// Per-head relation attention weights for the unmasked RoIs, for
/// inspection and tests. Each entry is `(J_real, J_real)`.
pub fn object_relation_weights(
    params: &ParamSet,
    dims: &ModelDims,
    v_r: &Tensor,
    boxes: &[[f64; 4]],
    mask: &[bool],
) -> Result<Vec<Tensor>> {
    let real = real_indices(mask);
    if real.is_empty() {
        return Err(Error::data("all RoI slots are masked"));
    }
    let (_, d) = v_r.expect_2d("object_relation")?;
    let mut data = Vec::with_capacity(real.len() * d);
    let mut real_boxes = Vec::with_capacity(real.len());
    for &i in &real {
        data.extend_from_slice(v_r.row(i));
        real_boxes.push(boxes[i]);
    }
    let dense = Tensor::new(vec![real.len(), d], data)?;
    let geometry = geometry_matrix(&real_boxes, dims.d_g)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut off = DropoutCtx::disabled();
    let input = g.leaf(dense);
    let (_, weights) = object_relation_rows(&mut g, &bound, dims, input, &geometry, &mut off)?;
    Ok(weights.into_iter().map(|w| g.value(w).clone()).collect())
}

/// Evaluation-mode RoI-aware attention row for one image.
pub fn geometric_roi_attention(
    params: &ParamSet,
    dims: &ModelDims,
    h_t: &Tensor,
    h_o: &Tensor,
    roi_mask: &[bool],
) -> Result<Tensor> {
    let (rows, _) = h_o.expect_2d("geometric_roi_attention")?;
    if rows != roi_mask.len() {
        return Err(Error::shape(
            "geometric_roi_attention",
            format!("{rows} RoI rows vs {} mask slots", roi_mask.len()),
        ));
    }
    let real = real_indices(roi_mask);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mmr = AttnParams::bind(&bound, "mmr")?;
    let mut off = DropoutCtx::disabled();
    let text = g.leaf(h_t.clone());
    let h_s = g.slice_rows(text, 0, 1)?;
    let h_o_node = if real.is_empty() {
        None
    } else {
        let mut data = Vec::with_capacity(real.len() * dims.d);
        for &i in &real {
            data.extend_from_slice(h_o.row(i));
        }
        Some(g.leaf(Tensor::new(vec![real.len(), dims.d], data)?))
    };
    let row = roi_aware_row(&mut g, &mmr, h_s, text, h_o_node, dims.heads, &mut off)?;
    Ok(g.value(row).clone())
}

/// Evaluation-mode fusion and classification: returns the 4-way sentiment
/// distribution for one aspect query. `h_r` is absent when the geometric
/// path is ablated.
pub fn fuse_and_classify(
    params: &ParamSet,
    dims: &ModelDims,
    h_s: &Tensor,
    h_i: &Tensor,
    h_r: Option<&Tensor>,
    image_mask: &[bool],
) -> Result<Vec<f64>> {
    if h_s.shape() != [1, dims.d] {
        return Err(Error::shape(
            "fuse_and_classify",
            format!("first-token row {:?}, expected [1, {}]", h_s.shape(), dims.d),
        ));
    }
    for t in [Some(h_i), h_r].into_iter().flatten() {
        let (rows, d) = t.expect_2d("fuse_and_classify")?;
        if rows != image_mask.len() || d != dims.d {
            return Err(Error::shape(
                "fuse_and_classify",
                format!("{:?} vs {} image slots of width {}", t.shape(), image_mask.len(), dims.d),
            ));
        }
    }
    let real = real_indices(image_mask);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mmf = AttnParams::bind(&bound, "mmf")?;
    let mut off = DropoutCtx::disabled();
    let h_s_node = g.leaf(h_s.clone());
    let mut gather = |t: &Tensor| -> Result<Vec<NodeId>> {
        real.iter()
            .map(|&k| Ok(g.leaf(Tensor::new(vec![1, dims.d], t.row(k).to_vec())?)))
            .collect()
    };
    let h_i_rows = gather(h_i)?;
    let h_r_rows = match h_r {
        Some(h_r) => gather(h_r)?,
        None => vec![],
    };
    let logits = fused_logits(
        &mut g,
        &bound,
        &mmf,
        h_s_node,
        &h_i_rows,
        &h_r_rows,
        dims.heads,
        &mut off,
    )?;
    let probs = g.softmax(logits)?;
    Ok(g.value(probs).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::gradcheck::{grad_check, GradCheckConfig};
    use crate::numerics::kernels;
    use crate::rng::{normal_vec, SeedTree};

    fn toy_dims(d: usize, heads: usize) -> ModelDims {
        ModelDims { d, heads, layers: 1, d_g: 16, vocab_size: 16, n_max: 16, ffn_mult: 4 }
    }

    fn rand(name: &str, shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        let mut rng = SeedTree::new(1234).stream(name);
        Tensor::new(shape, normal_vec(&mut rng, len, 0.0, 0.8)).unwrap()
    }

    fn set(params: &mut ParamSet, name: &str, t: Tensor) {
        *params.get_mut(name).unwrap() = t;
    }

    fn identity(d: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![d, d]).unwrap();
        for i in 0..d {
            t.set2(i, i, 1.0);
        }
        t
    }

    #[test]
    fn pair_geometry_of_identical_boxes_is_the_epsilon_form() {
        let b = [0.2, 0.3, 0.4, 0.25];
        let got = pair_geometry(b, b);
        assert_eq!(got[0], (GEO_EPS / 0.4).ln());
        assert_eq!(got[1], (GEO_EPS / 0.25).ln());
        assert_eq!(got[2], 0.0);
        assert_eq!(got[3], 0.0);
    }

    #[test]
    fn geometry_is_finite_and_size_ratios_are_antisymmetric() {
        let a = [0.05, 0.1, 0.3, 0.2];
        let b = [0.6, 0.55, 0.1, 0.4];
        let ab = pair_geometry(a, b);
        let ba = pair_geometry(b, a);
        assert!(ab.iter().chain(&ba).all(|v| v.is_finite()));
        assert!((ab[2] + ba[2]).abs() < 1e-12);
        assert!((ab[3] + ba[3]).abs() < 1e-12);
        let enc = sinusoidal_encoding(&ab, 32).unwrap();
        assert_eq!(enc.len(), 32);
        // Lowest frequency has wavelength 1: the first pair is sin/cos of
        // the raw component.
        assert!((enc[0] - ab[0].sin()).abs() < 1e-15);
        assert!((enc[1] - ab[0].cos()).abs() < 1e-15);
        assert!(sinusoidal_encoding(&ab, 12).is_err());
    }

    #[test]
    fn geometry_matrix_is_ordered_row_major() {
        let boxes = [[0.1, 0.1, 0.2, 0.2], [0.5, 0.5, 0.3, 0.3]];
        let m = geometry_matrix(&boxes, 16).unwrap();
        assert_eq!(m.shape(), [4, 16]);
        let expect_01 = sinusoidal_encoding(&pair_geometry(boxes[0], boxes[1]), 16).unwrap();
        assert_eq!(m.row(1), &expect_01[..]);
        assert!(geometry_matrix(&[], 16).is_err());
        assert!(geometry_matrix(&[[0.0, 0.0, 0.0, 0.1]], 16).is_err());
    }

    #[test]
    fn constant_cell_image_attends_to_that_value() {
        let dims = toy_dims(6, 2);
        let params = init_params(&dims, &SeedTree::new(5)).unwrap();
        let u = rand("u", vec![dims.d, 1]);
        let cells = 13;
        let mut grid = Vec::with_capacity(dims.d * cells);
        for i in 0..dims.d {
            for _ in 0..cells {
                grid.push(u.data()[i]);
            }
        }
        let v_i = Tensor::new(vec![dims.d, cells], grid).unwrap();
        let h_t = rand("ht", vec![3, dims.d]);
        let (h_i, mask) =
            image_guided_attention(&params, &dims, &h_t, &[Some(v_i)]).unwrap();
        assert_eq!(mask, [false]);
        // Attention over identical values returns that value regardless of
        // the weights, so the row is wo·(wv·u + bv) + bo.
        let u_row = Tensor::new(vec![1, dims.d], u.data().to_vec()).unwrap();
        let v = kernels::linear(&u_row, params.get("cm.wv").unwrap(), params.get("cm.bv").unwrap())
            .unwrap();
        let want =
            kernels::linear(&v, params.get("cm.wo").unwrap(), params.get("cm.bo").unwrap())
                .unwrap();
        for (got, want) in h_i.row(0).iter().zip(want.data()) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn padded_image_slots_produce_zero_rows_in_slot_order() {
        let dims = toy_dims(6, 2);
        let params = init_params(&dims, &SeedTree::new(5)).unwrap();
        let h_t = rand("ht2", vec![2, dims.d]);
        let grid = || Some(rand("g", vec![dims.d, 9]));
        let v_i = [grid(), grid(), grid(), None, None, None, None];
        let (h_i, mask) = image_guided_attention(&params, &dims, &h_t, &v_i).unwrap();
        assert_eq!(h_i.shape(), [7, dims.d]);
        assert_eq!(mask, [false, false, false, true, true, true, true]);
        for k in 3..7 {
            assert!(h_i.row(k).iter().all(|&v| v == 0.0));
        }
        for k in 0..3 {
            assert!(h_i.row(k).iter().any(|&v| v != 0.0));
        }
    }

    /// Naive single-head attention over explicit vectors.
    fn naive_attention(
        q: &[Vec<f64>],
        k: &[Vec<f64>],
        v: &[Vec<f64>],
        extra_logits: Option<&[Vec<f64>]>,
    ) -> Vec<Vec<f64>> {
        let d = q[0].len();
        let scale = 1.0 / (d as f64).sqrt();
        q.iter()
            .enumerate()
            .map(|(i, qi)| {
                let logits: Vec<f64> = k
                    .iter()
                    .enumerate()
                    .map(|(j, kj)| {
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        dot * scale + extra_logits.map_or(0.0, |e| e[i][j])
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut out = vec![0.0; v[0].len()];
                for (w, vj) in exps.iter().zip(v) {
                    for (o, val) in out.iter_mut().zip(vj) {
                        *o += w / z * val;
                    }
                }
                out
            })
            .collect()
    }

    fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    fn naive_linear(rows: &[Vec<f64>], w: &Tensor, b: Option<&Tensor>) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|x| {
                (0..w.rows())
                    .map(|o| {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for (j, &xv) in x.iter().enumerate() {
                            acc += w.at2(o, j) * xv;
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_head_image_attention_matches_the_naive_oracle() {
        let dims = toy_dims(4, 1);
        let params = init_params(&dims, &SeedTree::new(7)).unwrap();
        let h_t = rand("ht3", vec![3, 4]);
        let grid = rand("grid3", vec![4, 2]); // two cells
        let (h_i, _) = image_guided_attention(&params, &dims, &h_t, &[Some(grid.clone())]).unwrap();

        let p = |n: &str| params.get(n).unwrap();
        let cells = tensor_rows(&grid.transposed().unwrap());
        let q = naive_linear(&tensor_rows(&h_t), p("cm.wq"), Some(p("cm.bq")));
        let k = naive_linear(&cells, p("cm.wk"), Some(p("cm.bk")));
        let v = naive_linear(&cells, p("cm.wv"), Some(p("cm.bv")));
        let mixed = naive_attention(&q, &k, &v, None);
        let out = naive_linear(&mixed, p("cm.wo"), Some(p("cm.bo")));
        for (got, want) in h_i.row(0).iter().zip(&out[0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn single_roi_relation_is_value_projection_plus_residual() {
        let dims = toy_dims(6, 2);
        let mut params = init_params(&dims, &SeedTree::new(9)).unwrap();
        set(&mut params, "rel.wo", identity(6));
        set(&mut params, "rel.bo", Tensor::zeros(vec![1, 6]).unwrap());
        let v_r = rand("vr", vec![1, 6]);
        let boxes = [[0.4, 0.4, 0.2, 0.2]];
        let out = object_relation(&params, &dims, &v_r, &boxes, &[false]).unwrap();
        let value = kernels::matmul(&v_r, params.get("rel.wv").unwrap(), false, true).unwrap();
        for i in 0..6 {
            let want = v_r.data()[i] + value.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rois_split_attention_evenly_under_zero_appearance() {
        let dims = toy_dims(6, 2);
        let mut params = init_params(&dims, &SeedTree::new(11)).unwrap();
        set(&mut params, "rel.wq", Tensor::zeros(vec![6, 6]).unwrap()); // appearance logits 0
        let row = rand("roi_row", vec![1, 6]);
        let mut v_r = Tensor::zeros(vec![2, 6]).unwrap();
        v_r.data_mut()[..6].copy_from_slice(row.data());
        v_r.data_mut()[6..].copy_from_slice(row.data());
        let b = [0.3, 0.3, 0.25, 0.25];
        let weights =
            object_relation_weights(&params, &dims, &v_r, &[b, b], &[false, false]).unwrap();
        for w in weights {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((w.at2(i, j) - 0.5).abs() < 1e-12, "{w:?}");
                }
                let sum: f64 = w.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn relation_weights_match_a_scalar_recomputation() {
        let dims = toy_dims(4, 1);
        let mut params = init_params(&dims, &SeedTree::new(13)).unwrap();
        // Hand-set the geometric gate so the logits are fully predictable.
        set(&mut params, "rel.geo.w", rand("geow", vec![1, 16]));
        set(&mut params, "rel.geo.b", Tensor::new(vec![1, 1], vec![0.4]).unwrap());
        let v_r = rand("vr3", vec![3, 4]);
        let boxes = [
            [0.05, 0.05, 0.2, 0.3],
            [0.5, 0.1, 0.3, 0.3],
            [0.2, 0.6, 0.4, 0.2],
        ];
        let mask = [false, false, false];
        let weights = object_relation_weights(&params, &dims, &v_r, &boxes, &mask).unwrap();
        assert_eq!(weights.len(), 1);

        let p = |n: &str| params.get(n).unwrap();
        let q = naive_linear(&tensor_rows(&v_r), p("rel.wq"), None);
        let k = naive_linear(&tensor_rows(&v_r), p("rel.wk"), None);
        let geo_w = p("rel.geo.w");
        let bias = p("rel.geo.b").data()[0];
        let scale = 1.0 / 2.0; // sqrt(d_head) = 2
        for i in 0..3 {
            let mut logits = Vec::new();
            for j in 0..3 {
                let enc = sinusoidal_encoding(&pair_geometry(boxes[i], boxes[j]), 16).unwrap();
                let gate: f64 =
                    enc.iter().enumerate().map(|(c, &e)| geo_w.at2(0, c) * e).sum::<f64>() + bias;
                let gated = gate.max(0.0).max(GATE_FLOOR).ln();
                let dot: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum();
                logits.push(dot * scale + gated);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..3 {
                let want = exps[j] / z;
                assert!(
                    (weights[0].at2(i, j) - want).abs() < 1e-12,
                    "({i},{j}): {} vs {want}",
                    weights[0].at2(i, j)
                );
            }
            let sum: f64 = weights[0].row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn all_rois_masked_relation_is_all_zero() {
        let dims = toy_dims(6, 2);
        let params = init_params(&dims, &SeedTree::new(15)).unwrap();
        let v_r = Tensor::zeros(vec![4, 6]).unwrap();
        let out =
            object_relation(&params, &dims, &v_r, &[[0.0; 4]; 4], &[true, true, true, true])
                .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roi_aware_attention_without_rois_reduces_to_text_self_attention() {
        let dims = toy_dims(6, 2);
        let params = init_params(&dims, &SeedTree::new(17)).unwrap();
        let h_t = rand("ht4", vec![4, 6]);
        let empty = Tensor::zeros(vec![4, 6]).unwrap();
        let row =
            geometric_roi_attention(&params, &dims, &h_t, &empty, &[true; 4]).unwrap();
        assert_eq!(row.shape(), [1, 6]);
        assert!(row.data().iter().all(|v| v.is_finite()));
        // Oracle: projected self-attention over the text rows only, row 0.
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let mmr = AttnParams::bind(&bound, "mmr").unwrap();
        let text = g.leaf(h_t.clone());
        let want = projected_attention(&mut g, &mmr, text, text, None, dims.heads).unwrap();
        for (a, b) in row.data().iter().zip(g.value(want).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_aware_row_matches_a_naive_oracle_on_toy_sizes() {
        let dims = toy_dims(4, 1);
        let params = init_params(&dims, &SeedTree::new(19)).unwrap();
        let h_t = rand("ht5", vec![3, 4]);
        let h_o = rand("ho", vec![2, 4]);
        let row = geometric_roi_attention(&params, &dims, &h_t, &h_o, &[false, false]).unwrap();

        let p = |n: &str| params.get(n).unwrap();
        let mut seq = tensor_rows(&h_t);
        seq.extend(tensor_rows(&h_o));
        let q = naive_linear(&[h_t.row(0).to_vec()], p("mmr.wq"), Some(p("mmr.bq")));
        let k = naive_linear(&seq, p("mmr.wk"), Some(p("mmr.bk")));
        let v = naive_linear(&seq, p("mmr.wv"), Some(p("mmr.bv")));
        let mixed = naive_attention(&q, &k, &v, None);
        let want = naive_linear(&mixed, p("mmr.wo"), Some(p("mmr.bo")));
        for (a, b) in row.data().iter().zip(&want[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_distribution_is_normalized_and_text_only_when_all_masked() {
        let dims = toy_dims(6, 2);
        let params = init_params(&dims, &SeedTree::new(21)).unwrap();
        let h_s = rand("hs", vec![1, 6]);
        let zero = Tensor::zeros(vec![3, 6]).unwrap();
        let dist =
            fuse_and_classify(&params, &dims, &h_s, &zero, Some(&zero), &[true; 3]).unwrap();
        assert_eq!(dist.len(), 4);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(dist.iter().all(|&p| p > 0.0));
        // Text-only degeneracy: equals attention over the single H_s row.
        let h_i = rand("hi", vec![3, 6]);
        let with_rows =
            fuse_and_classify(&params, &dims, &h_s, &h_i, Some(&h_i), &[true; 3]).unwrap();
        assert_eq!(dist, with_rows, "masked rows' content must not matter");
    }

    #[test]
    fn fusion_composition_matches_an_end_to_end_naive_oracle() {
        let dims = toy_dims(4, 1);
        let params = init_params(&dims, &SeedTree::new(23)).unwrap();
        let h_t = rand("ht6", vec![3, 4]);
        let grid = rand("grid6", vec![4, 5]);
        let v_r = rand("vr6", vec![1, 4]);
        let boxes = [[0.3, 0.2, 0.3, 0.4]];

        // Composed pipeline under test.
        let (h_i, mask) =
            image_guided_attention(&params, &dims, &h_t, &[Some(grid.clone())]).unwrap();
        let h_o = object_relation(&params, &dims, &v_r, &boxes, &[false]).unwrap();
        let h_r_row =
            geometric_roi_attention(&params, &dims, &h_t, &h_o, &[false]).unwrap();
        let h_s = Tensor::new(vec![1, 4], h_t.row(0).to_vec()).unwrap();
        let dist = fuse_and_classify(&params, &dims, &h_s, &h_i, Some(&h_r_row), &mask).unwrap();

        // Naive recomputation of the whole chain.
        let p = |n: &str| params.get(n).unwrap();
        let text = tensor_rows(&h_t);
        let cells = tensor_rows(&grid.transposed().unwrap());
        let h_i_naive = {
            let q = naive_linear(&text, p("cm.wq"), Some(p("cm.bq")));
            let k = naive_linear(&cells, p("cm.wk"), Some(p("cm.bk")));
            let v = naive_linear(&cells, p("cm.wv"), Some(p("cm.bv")));
            naive_linear(&naive_attention(&q, &k, &v, None), p("cm.wo"), Some(p("cm.bo")))[0]
                .clone()
        };
        let h_o_naive = {
            let rows = tensor_rows(&v_r);
            let q = naive_linear(&rows, p("rel.wq"), None);
            let k = naive_linear(&rows, p("rel.wk"), None);
            let v = naive_linear(&rows, p("rel.wv"), None);
            let enc = sinusoidal_encoding(&pair_geometry(boxes[0], boxes[0]), dims.d_g).unwrap();
            let gate: f64 = enc
                .iter()
                .enumerate()
                .map(|(c, &e)| p("rel.geo.w").at2(0, c) * e)
                .sum::<f64>()
                + p("rel.geo.b").data()[0];
            let extra = vec![vec![gate.max(0.0).max(GATE_FLOOR).ln()]];
            let mixed = naive_attention(&q, &k, &v, Some(&extra));
            let projected = naive_linear(&mixed, p("rel.wo"), Some(p("rel.bo")));
            rows[0].iter().zip(&projected[0]).map(|(a, b)| a + b).collect::<Vec<f64>>()
        };
        let h_r_naive = {
            let mut seq = text.clone();
            seq.push(h_o_naive);
            let q = naive_linear(&[text[0].clone()], p("mmr.wq"), Some(p("mmr.bq")));
            let k = naive_linear(&seq, p("mmr.wk"), Some(p("mmr.bk")));
            let v = naive_linear(&seq, p("mmr.wv"), Some(p("mmr.bv")));
            naive_linear(&naive_attention(&q, &k, &v, None), p("mmr.wo"), Some(p("mmr.bo")))[0]
                .clone()
        };
        let dist_naive = {
            let fused = vec![text[0].clone(), h_i_naive, h_r_naive];
            let q = naive_linear(&[text[0].clone()], p("mmf.wq"), Some(p("mmf.bq")));
            let k = naive_linear(&fused, p("mmf.wk"), Some(p("mmf.bk")));
            let v = naive_linear(&fused, p("mmf.wv"), Some(p("mmf.bv")));
            let att =
                naive_linear(&naive_attention(&q, &k, &v, None), p("mmf.wo"), Some(p("mmf.bo")));
            let logits = naive_linear(&att, p("cls.w"), Some(p("cls.b")))[0].clone();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect::<Vec<f64>>()
        };
        for (got, want) in dist.iter().zip(&dist_naive) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn inserting_a_padded_slot_changes_nothing() {
        let dims = toy_dims(6, 2);
        let params = init_params(&dims, &SeedTree::new(25)).unwrap();
        let h_t = rand("ht7", vec![4, 6]);
        let g0 = rand("g0", vec![6, 8]);
        let g1 = rand("g1", vec![6, 8]);

        let (h_i_a, mask_a) = image_guided_attention(
            &params, &dims, &h_t, &[Some(g0.clone()), Some(g1.clone())],
        )
        .unwrap();
        let (h_i_b, mask_b) = image_guided_attention(
            &params, &dims, &h_t, &[Some(g0.clone()), None, Some(g1.clone())],
        )
        .unwrap();
        assert_eq!(h_i_a.row(0), h_i_b.row(0));
        assert_eq!(h_i_a.row(1), h_i_b.row(2));
        assert!(h_i_b.row(1).iter().all(|&v| v == 0.0));

        // Same fused distribution whether the pad sits in the middle or is
        // absent entirely.
        let h_s = Tensor::new(vec![1, 6], h_t.row(0).to_vec()).unwrap();
        let dist_a =
            fuse_and_classify(&params, &dims, &h_s, &h_i_a, Some(&h_i_a), &mask_a).unwrap();
        let dist_b =
            fuse_and_classify(&params, &dims, &h_s, &h_i_b, Some(&h_i_b), &mask_b).unwrap();
        for (a, b) in dist_a.iter().zip(&dist_b) {
            assert!((a - b).abs() <= 1e-12);
        }

        // RoI side: padded slot in the middle of the mask.
        let v_r = rand("vr7", vec![3, 6]);
        let boxes = [[0.1, 0.1, 0.2, 0.2], [0.0; 4], [0.6, 0.6, 0.2, 0.2]];
        let dense_rows = Tensor::new(
            vec![2, 6],
            [v_r.row(0), v_r.row(2)].concat(),
        )
        .unwrap();
        let spread =
            object_relation(&params, &dims, &v_r, &boxes, &[false, true, false]).unwrap();
        let dense = object_relation(
            &params,
            &dims,
            &dense_rows,
            &[boxes[0], boxes[2]],
            &[false, false],
        )
        .unwrap();
        assert_eq!(spread.row(0), dense.row(0));
        assert_eq!(spread.row(2), dense.row(1));
        assert!(spread.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_images_permutes_rows_and_preserves_the_distribution() {
        let dims = toy_dims(6, 3);
        let params = init_params(&dims, &SeedTree::new(27)).unwrap();
        let h_t = rand("ht8", vec![4, 6]);
        let h_s = Tensor::new(vec![1, 6], h_t.row(0).to_vec()).unwrap();
        let grids: Vec<Tensor> = (0..3).map(|i| rand(&format!("pg{i}"), vec![6, 7])).collect();

        let order_a = [Some(grids[0].clone()), Some(grids[1].clone()), Some(grids[2].clone())];
        let order_b = [Some(grids[2].clone()), Some(grids[0].clone()), Some(grids[1].clone())];
        let (h_i_a, mask) = image_guided_attention(&params, &dims, &h_t, &order_a).unwrap();
        let (h_i_b, _) = image_guided_attention(&params, &dims, &h_t, &order_b).unwrap();
        assert_eq!(h_i_a.row(0), h_i_b.row(1));
        assert_eq!(h_i_a.row(1), h_i_b.row(2));
        assert_eq!(h_i_a.row(2), h_i_b.row(0));

        let dist_a =
            fuse_and_classify(&params, &dims, &h_s, &h_i_a, Some(&h_i_a), &mask).unwrap();
        let dist_b =
            fuse_and_classify(&params, &dims, &h_s, &h_i_b, Some(&h_i_b), &mask).unwrap();
        for (a, b) in dist_a.iter().zip(&dist_b) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_gradient_check_passes_end_to_end() {
        let dims = toy_dims(8, 2);
        let full = init_params(&dims, &SeedTree::new(29)).unwrap();
        let mut params = ParamSet::new();
        for (name, t) in full.iter() {
            if ["cm.", "rel.", "mmr.", "mmf.", "cls."].iter().any(|p| name.starts_with(p)) {
                params.insert(name, t.clone()).unwrap();
            }
        }
        let h_t = rand("gc/ht", vec![6, 8]);
        let grids = [rand("gc/g0", vec![5, 8]), rand("gc/g1", vec![5, 8])];
        let rois = [rand("gc/r0", vec![2, 8]), rand("gc/r1", vec![2, 8])];
        let boxes = [
            [[0.1, 0.1, 0.3, 0.3], [0.5, 0.5, 0.3, 0.3]],
            [[0.2, 0.6, 0.25, 0.2], [0.6, 0.1, 0.2, 0.35]],
        ];
        let geo: Vec<Tensor> =
            boxes.iter().map(|b| geometry_matrix(b, dims.d_g).unwrap()).collect();

        let cfg = GradCheckConfig { coords: 320, ..Default::default() };
        let report = grad_check(&params, &cfg, |g, bound| {
            let mut off = DropoutCtx::disabled();
            let cm = AttnParams::bind(bound, "cm")?;
            let mmr = AttnParams::bind(bound, "mmr")?;
            let mmf = AttnParams::bind(bound, "mmf")?;
            let text = g.leaf(h_t.clone());
            let h_s = g.slice_rows(text, 0, 1)?;
            let grid_nodes: Vec<NodeId> = grids.iter().map(|t| g.leaf(t.clone())).collect();
            let h_i = image_guided_rows(g, &cm, h_s, &grid_nodes, dims.heads, &mut off)?;
            let mut h_r = Vec::new();
            for (k, roi) in rois.iter().enumerate() {
                let v_r = g.leaf(roi.clone());
                let (h_o, _) = object_relation_rows(g, bound, &dims, v_r, &geo[k], &mut off)?;
                h_r.push(roi_aware_row(g, &mmr, h_s, text, Some(h_o), dims.heads, &mut off)?);
            }
            let logits = fused_logits(g, bound, &mmf, h_s, &h_i, &h_r, dims.heads, &mut off)?;
            g.cross_entropy(logits, &[2])
        })
        .unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst);
    }
}
