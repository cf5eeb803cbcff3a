//! Finite-difference gradient checking.
//!
//! `grad_check` compares reverse-mode gradients against central differences
//! `(f(θ+ε) − f(θ−ε)) / 2ε` on a deterministic sample of parameter
//! coordinates. The error metric is `|analytic − numeric| / max(1, |numeric|)`
//! per coordinate; the check passes when the worst coordinate is within
//! tolerance.

use rand::seq::index::sample;

use super::graph::{Graph, NodeId};
use super::params::{BoundParams, ParamSet};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Number of parameter coordinates to sample (capped at the total).
    pub coords: usize,
    /// Central-difference step.
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            coords: 100,
            eps: 1e-5,
            tol: 1e-4,
            seed: 0,
        }
    }
}

/// The single worst coordinate found, for diagnostics.
#[derive(Debug, Clone)]
pub struct CoordinateReport {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub worst: Option<CoordinateReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Check the gradients of a scalar function of `params`.
///
/// `build` must construct the same computation every time it is called for
/// the same parameter values (any internal randomness must be derived from
/// fixed seeds) and return the scalar loss node. Dropout must be disabled.
pub fn grad_check<F>(params: &ParamSet, cfg: &GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::with_finite_checks();
        let bound = params.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        if g.value(loss).len() != 1 {
            return Err(Error::shape(
                "grad_check",
                format!("loss must be scalar, got {:?}", g.value(loss).shape()),
            ));
        }
        g.backward(loss, 1.0)?;
        g.param_grads()
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::with_finite_checks();
        let bound = p.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss).data()[0])
    };
    check_against(params, &analytic, cfg, eval)
}

/// Compare externally supplied `analytic` gradients against central
/// differences of `eval`. Exposed separately so a deliberately corrupted
/// gradient map can be shown to fail.
pub fn check_against<E>(
    params: &ParamSet,
    analytic: &std::collections::BTreeMap<String, super::tensor::Tensor>,
    cfg: &GradCheckConfig,
    eval: E,
) -> Result<GradCheckReport>
where
    E: Fn(&ParamSet) -> Result<f64>,
{
    let layout: Vec<(String, usize)> = params
        .iter()
        .map(|(name, t)| (name.clone(), t.len()))
        .collect();
    let total: usize = layout.iter().map(|(_, len)| len).sum();
    if total == 0 {
        return Err(Error::config("grad_check: no parameters to check"));
    }
    let take = cfg.coords.min(total);
    let mut rng = SeedTree::new(cfg.seed).stream("gradcheck/coords");
    let mut picked: Vec<usize> = sample(&mut rng, total, take).into_iter().collect();
    picked.sort_unstable();

    let mut work = params.clone();
    let mut max_rel_err = 0.0_f64;
    let mut worst: Option<CoordinateReport> = None;
    for flat in picked {
        // Map the flat coordinate back to (param, index).
        let mut offset = flat;
        let mut which = 0;
        while offset >= layout[which].1 {
            offset -= layout[which].1;
            which += 1;
        }
        let name = &layout[which].0;

        let orig = work.get(name)?.data()[offset];
        work.get_mut(name)?.data_mut()[offset] = orig + cfg.eps;
        let up = eval(&work)?;
        work.get_mut(name)?.data_mut()[offset] = orig - cfg.eps;
        let down = eval(&work)?;
        work.get_mut(name)?.data_mut()[offset] = orig;

        if !up.is_finite() || !down.is_finite() {
            return Err(Error::non_finite_at(
                "grad_check",
                format!("loss at perturbed `{name}`[{offset}]"),
            ));
        }
        let numeric = (up - down) / (2.0 * cfg.eps);
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::config(format!("no analytic gradient for `{name}`")))?
            .data()[offset];
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some(CoordinateReport {
                param: name.clone(),
                index: offset,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(GradCheckReport {
        checked: take,
        max_rel_err,
        tol: cfg.tol,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use crate::rng::{normal_vec, SeedTree};

    /// Random tensor with values pushed away from zero so kinked ops
    /// (relu, clamp_log) are not sampled within eps of their corner.
    fn rand_tensor(name: &str, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let mut vals = normal_vec(&mut SeedTree::new(11).stream(name), n, 0.0, 1.0);
        for v in vals.iter_mut() {
            *v += 0.35 * v.signum();
        }
        Tensor::new(shape, vals).unwrap()
    }

    /// Reduce any node to a scalar through a fixed random weighting, so the
    /// check is sensitive to every coordinate with a distinct coefficient.
    fn weighted_scalar(g: &mut Graph, id: NodeId) -> NodeId {
        let n = g.value(id).len();
        let w = normal_vec(&mut SeedTree::new(23).stream("gradcheck/mix"), n, 0.0, 1.0);
        let flat = g.reshape(id, vec![1, n]).unwrap();
        let wnode = g.leaf(Tensor::new(vec![n, 1], w).unwrap());
        g.matmul(flat, wnode, false, false).unwrap()
    }

    fn assert_grads_ok<F>(params: &ParamSet, build: F)
    where
        F: Fn(&mut Graph, &BoundParams) -> Result<NodeId>,
    {
        let cfg = GradCheckConfig {
            coords: 400,
            ..GradCheckConfig::default()
        };
        let report = grad_check(params, &cfg, build).expect("grad check runs");
        assert!(
            report.passed(),
            "max_rel_err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    fn one_param(shape: Vec<usize>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor("x", shape)).unwrap();
        p
    }

    fn two_params(sa: Vec<usize>, sb: Vec<usize>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", rand_tensor("a", sa)).unwrap();
        p.insert("b", rand_tensor("b", sb)).unwrap();
        p
    }

    #[test]
    fn grad_add() {
        let p = two_params(vec![3, 4], vec![3, 4]);
        assert_grads_ok(&p, |g, b| {
            let y = g.add(b.id("a")?, b.id("b")?)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_add_row_broadcast() {
        let p = two_params(vec![5, 3], vec![1, 3]);
        assert_grads_ok(&p, |g, b| {
            let y = g.add_row(b.id("a")?, b.id("b")?)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_mul_row_broadcast() {
        let p = two_params(vec![5, 3], vec![1, 3]);
        assert_grads_ok(&p, |g, b| {
            let y = g.mul_row(b.id("a")?, b.id("b")?)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_scalar_mul() {
        let p = one_param(vec![4, 2]);
        assert_grads_ok(&p, |g, b| {
            let y = g.scalar_mul(b.id("x")?, -2.5)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_matmul_all_transpose_combinations() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let sa = if ta { vec![5, 3] } else { vec![3, 5] };
            let sb = if tb { vec![4, 5] } else { vec![5, 4] };
            let p = two_params(sa, sb);
            assert_grads_ok(&p, move |g, b| {
                let y = g.matmul(b.id("a")?, b.id("b")?, ta, tb)?;
                Ok(weighted_scalar(g, y))
            });
        }
    }

    #[test]
    fn grad_relu() {
        let p = one_param(vec![6, 3]);
        assert_grads_ok(&p, |g, b| {
            let y = g.relu(b.id("x")?)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_softmax() {
        let p = one_param(vec![4, 5]);
        assert_grads_ok(&p, |g, b| {
            let y = g.softmax(b.id("x")?)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_layernorm() {
        let p = one_param(vec![4, 6]);
        assert_grads_ok(&p, |g, b| {
            let y = g.layernorm(b.id("x")?, crate::numerics::LAYERNORM_EPS)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_dropout_with_fixed_mask() {
        let p = one_param(vec![6, 4]);
        assert_grads_ok(&p, |g, b| {
            // Same stream name every rebuild -> identical mask, so the
            // function seen by finite differences is fixed.
            let mut rng = SeedTree::new(5).stream("gradcheck/dropout");
            let y = g.dropout(b.id("x")?, 0.4, &mut rng)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_concat_rows_and_cols() {
        let p = two_params(vec![2, 3], vec![4, 3]);
        assert_grads_ok(&p, |g, b| {
            let y = g.concat_rows(&[b.id("a")?, b.id("b")?])?;
            Ok(weighted_scalar(g, y))
        });
        let p = two_params(vec![3, 2], vec![3, 5]);
        assert_grads_ok(&p, |g, b| {
            let y = g.concat_cols(&[b.id("a")?, b.id("b")?])?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_slices() {
        let p = one_param(vec![6, 5]);
        assert_grads_ok(&p, |g, b| {
            let y = g.slice_rows(b.id("x")?, 1, 4)?;
            Ok(weighted_scalar(g, y))
        });
        assert_grads_ok(&p, |g, b| {
            let y = g.slice_cols(b.id("x")?, 2, 5)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_mean_pool() {
        let p = one_param(vec![7, 4]);
        assert_grads_ok(&p, |g, b| {
            let y = g.mean_pool_rows(b.id("x")?)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_embedding() {
        let p = one_param(vec![8, 3]);
        assert_grads_ok(&p, |g, b| {
            // Repeated ids exercise gradient accumulation into one row.
            let y = g.embed(b.id("x")?, &[1, 4, 1, 7, 0])?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_clamp_log() {
        // Positive values away from the clamp floor, plus some far enough
        // below it that perturbation by eps stays clamped (those coordinates
        // must have exactly zero gradient, matching finite differences).
        let mut p = ParamSet::new();
        let vals = vec![0.5, 1.5, 2.0, -0.5, 3.0, -0.002];
        p.insert("x", Tensor::new(vec![2, 3], vals).unwrap()).unwrap();
        assert_grads_ok(&p, |g, b| {
            let y = g.clamp_log(b.id("x")?, 1e-6)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn grad_cross_entropy() {
        let p = one_param(vec![5, 4]);
        assert_grads_ok(&p, |g, b| g.cross_entropy(b.id("x")?, &[0, 3, 1, 1, 2]));
    }

    #[test]
    fn grad_bce() {
        let p = one_param(vec![2, 6]);
        let targets = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        assert_grads_ok(&p, move |g, b| g.bce(b.id("x")?, &targets));
    }

    #[test]
    fn grad_attention_with_mask_and_heads() {
        let mut p = ParamSet::new();
        p.insert("q", rand_tensor("q", vec![3, 6])).unwrap();
        p.insert("k", rand_tensor("k", vec![5, 6])).unwrap();
        p.insert("v", rand_tensor("v", vec![5, 6])).unwrap();
        let mask = [false, true, false, false, true];
        assert_grads_ok(&p, move |g, b| {
            let y = g.attention(b.id("q")?, b.id("k")?, b.id("v")?, Some(&mask), 2)?;
            Ok(weighted_scalar(g, y))
        });
    }

    #[test]
    fn node_reused_twice_accumulates_gradient() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = b.id("x").unwrap();
        let y = g.add(x, x).unwrap();
        g.backward(y, 1.0).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        // Linearity: gradients of (l1 + l2) match the sum of separate runs.
        let p = two_params(vec![3, 3], vec![3, 3]);
        let build_l1 = |g: &mut Graph, b: &BoundParams| -> Result<NodeId> {
            let y = g.matmul(b.id("a")?, b.id("b")?, false, false)?;
            let l = g.cross_entropy(y, &[0, 2, 1])?;
            g.reshape(l, vec![1, 1])
        };
        let build_l2 = |g: &mut Graph, b: &BoundParams| -> Result<NodeId> {
            let y = g.matmul(b.id("a")?, b.id("b")?, false, true)?;
            let s = g.softmax(y)?;
            Ok(weighted_scalar(g, s))
        };

        let combined = {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let l1 = build_l1(&mut g, &b).unwrap();
            let l2 = build_l2(&mut g, &b).unwrap();
            let total = g.add(l1, l2).unwrap();
            g.backward(total, 1.0).unwrap();
            g.param_grads()
        };
        let separate = {
            let mut g1 = Graph::new();
            let b1 = p.bind(&mut g1);
            let l1 = build_l1(&mut g1, &b1).unwrap();
            g1.backward(l1, 1.0).unwrap();
            let ga = g1.param_grads();
            let mut g2 = Graph::new();
            let b2 = p.bind(&mut g2);
            let l2 = build_l2(&mut g2, &b2).unwrap();
            g2.backward(l2, 1.0).unwrap();
            let gb = g2.param_grads();
            (ga, gb)
        };
        for (name, grad) in &combined {
            let a = separate.0.get(name).unwrap();
            let b = separate.1.get(name).unwrap();
            for (i, &v) in grad.data().iter().enumerate() {
                let s = a.data()[i] + b.data()[i];
                assert!((v - s).abs() <= 1e-12 * s.abs().max(1.0), "{name}[{i}]: {v} vs {s}");
            }
        }
    }

    #[test]
    fn corrupted_backward_rule_fails_the_check() {
        let p = one_param(vec![3, 3]);
        let build = |g: &mut Graph, b: &BoundParams| -> Result<NodeId> {
            let y = g.softmax(b.id("x")?)?;
            Ok(weighted_scalar(g, y))
        };
        let mut analytic = {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let loss = build(&mut g, &b).unwrap();
            g.backward(loss, 1.0).unwrap();
            g.param_grads()
        };
        // Corrupt one coordinate by 10%.
        analytic.get_mut("x").unwrap().data_mut()[4] *= 1.1;
        let cfg = GradCheckConfig {
            coords: 9,
            ..GradCheckConfig::default()
        };
        let eval = |p: &ParamSet| -> Result<f64> {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let loss = build(&mut g, &b)?;
            Ok(g.value(loss).data()[0])
        };
        let report = check_against(&p, &analytic, &cfg, eval).unwrap();
        assert!(!report.passed(), "corruption must be detected");
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_4() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![3, 4]).unwrap());
        let l = g.cross_entropy(x, &[0, 1, 3]).unwrap();
        // Frozen reference: ln 4 computed independently at 30 digits.
        assert!((g.value(l).data()[0] - 1.3862943611198906188).abs() < 1e-15);
    }

    #[test]
    fn graph_attention_matches_kernel_attention() {
        let q = rand_tensor("aq", vec![4, 8]);
        let k = rand_tensor("ak", vec![6, 8]);
        let v = rand_tensor("av", vec![6, 8]);
        let mask = [false, false, true, false, true, false];
        let kernel = crate::numerics::kernels::scaled_dot_attention(
            &q, &k, &v, Some(&mask), 4,
        )
        .unwrap();
        let mut g = Graph::new();
        let (qn, kn, vn) = (g.leaf(q), g.leaf(k), g.leaf(v));
        let out = g.attention(qn, kn, vn, Some(&mask), 4).unwrap();
        assert!(g.value(out).max_abs_diff(&kernel).unwrap() < 1e-12);
    }
}
