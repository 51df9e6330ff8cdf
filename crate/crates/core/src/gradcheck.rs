//! Central-difference verification of analytic gradients.
//!
//! Parameters that feed a weight quantizer are checked against the
//! straight-through surrogate: during the numeric evaluations the quantizer
//! decision is frozen at the unperturbed parameter values, so the finite
//! difference measures the same derivative the estimator claims. Parameters
//! lying within `2h` of a rounding boundary are skipped and counted.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Elements sampled per parameter tensor.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-4, tol: 1e-4, samples_per_param: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_boundary: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn near_boundary(x: f64, scale: f64, qmax: i64, margin: f64) -> bool {
    (-qmax..qmax).any(|m| (x - (m as f64 + 0.5) * scale).abs() < margin)
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences. `build` receives one leaf per entry of `params`,
/// created in order.
pub fn check_gradients<F>(params: &[Tensor<f64>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut report = GradCheckReport { tol: opts.tol, ..Default::default() };
    if params.iter().all(|p| p.is_empty()) {
        return Ok(report);
    }

    let mut g = Graph::new().with_finite_check(true);
    let leaves: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = build(&mut g, &leaves)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = leaves.iter().map(|&l| g.grad(l).cloned()).collect();
    let quantized = g.quantized_leaves().to_vec();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new().with_finite_check(true);
        let ls: Vec<NodeId> = values.iter().map(|p| g.leaf(p.clone(), true)).collect();
        for q in &quantized {
            g.set_quant_reference(ls[q.leaf.index()], params[q.leaf.index()].clone());
        }
        let l = build(&mut g, &ls)?;
        Ok(g.value(l).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        if p.is_empty() {
            continue;
        }
        let k = opts.samples_per_param.min(p.len());
        let mut idx = sample(&mut rng, p.len(), k).into_vec();
        idx.sort_unstable();
        let quant = quantized.iter().find(|q| q.leaf == leaves[pi]);
        for i in idx {
            let x0 = p.data()[i];
            if let Some(q) = quant {
                if near_boundary(x0, q.scale, q.qmax, 2.0 * opts.h) {
                    report.skipped_boundary += 1;
                    continue;
                }
            }
            work[pi].data_mut()[i] = x0 + opts.h;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = x0 - opts.h;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * opts.h);
            let a = analytic[pi].as_ref().map_or(0.0, |t| t.data()[i]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| e > w.rel_err) {
                report.worst = Some(GradCheckEntry { param: pi, index: i, analytic: a, numeric, rel_err: e });
            }
            report.max_rel_err = report.max_rel_err.max(e);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_parameter_set_gives_empty_report() {
        let r = check_gradients(&[], |g, _| Ok(g.constant(Tensor::scalar(1.0))), &Default::default()).unwrap();
        assert_eq!(r.checked, 0);
        assert_eq!(r.skipped_boundary, 0);
        assert!(r.passed());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(w^2) checked through a deliberately broken custom rule.
        use crate::autodiff::CustomGrad;
        struct Wrong;
        impl CustomGrad<f64> for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn backward(&self, up: &Tensor<f64>, _: &[&Tensor<f64>]) -> Result<Vec<Option<Tensor<f64>>>> {
                Ok(vec![Some(up.map(|v| 3.0 * v))])
            }
        }
        let p = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_gradients(
            &[p],
            |g, l| {
                let v = g.value(l[0]).clone();
                let c = g.custom(&[l[0]], v, Box::new(Wrong))?;
                let s = g.square(c)?;
                g.sum(s)
            },
            &Default::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(!r.passed());
    }
}
