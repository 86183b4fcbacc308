//! Central finite differences, used as an independent oracle for `backward`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::seed::component_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    /// coordinates whose relative error is within `tight`
    pub within_tight: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn fraction_within_tight(&self) -> f64 {
        if self.coordinates == 0 {
            1.0
        } else {
            self.within_tight as f64 / self.coordinates as f64
        }
    }

    pub fn passes(&self, min_fraction: f64, loose: f64) -> bool {
        self.fraction_within_tight() >= min_fraction && self.max_rel_error <= loose
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose true
/// gradient is ~0 from producing huge ratios out of rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Central-difference derivative of `f` along every coordinate of `params`.
pub fn numeric_gradient<F>(f: &F, params: &[Tensor], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tight: f64, floor: f64) -> GradCheckReport {
    let mut rep = GradCheckReport {
        coordinates: 0,
        within_tight: 0,
        max_rel_error: 0.0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.iter().zip(n) {
            let e = relative_error(x, y, floor);
            rep.coordinates += 1;
            if e <= tight {
                rep.within_tight += 1;
            }
            if e > rep.max_rel_error {
                rep.max_rel_error = e;
            }
        }
    }
    rep
}

/// Builds the scalar expression twice: once on gradient-receiving leaves for
/// the analytic gradient, and once per perturbed coordinate on constants for
/// the central-difference oracle.
pub fn check_graph<F>(build: F, params: &[Tensor], h: f64, tight: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = build(&mut g, &vars).expect("expression built once already");
        g.value(out).item()
    };
    let numeric = numeric_gradient(&eval, params, h);
    Ok(compare(&analytic, &numeric, tight, floor))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], spread: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.gen_range(-spread..spread);
    }
    t
}

/// One seeded gradient check per differentiable op. Each op output is
/// reduced to a scalar with random fixed weights so every output coordinate
/// contributes.
pub fn op_cases(seed: u64, h: f64, tight: f64, floor: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = component_rng(seed, "gradcheck");
    let rng = &mut rng;
    let mut out = Vec::new();

    fn reduce(g: &mut Graph, v: Var, weights: &[f64]) -> Result<Var> {
        g.weighted_sum(v, weights)
    }
    let weights = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };

    let params = vec![random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[4, 5], 1.0)];
    let w = weights(rng, 15);
    out.push((
        "matmul",
        check_graph(|g, v| { let y = g.matmul(v[0], v[1])?; reduce(g, y, &w) }, &params, h, tight, floor)?,
    ));

    let params = vec![random_tensor(rng, &[2, 3, 4], 1.0), random_tensor(rng, &[2, 4, 2], 1.0)];
    let w = weights(rng, 12);
    out.push((
        "matmul_batched",
        check_graph(|g, v| { let y = g.matmul(v[0], v[1])?; reduce(g, y, &w) }, &params, h, tight, floor)?,
    ));

    let params = vec![random_tensor(rng, &[2, 3, 4], 1.0), random_tensor(rng, &[4, 2], 1.0)];
    let w = weights(rng, 12);
    out.push((
        "matmul_shared",
        check_graph(|g, v| { let y = g.matmul(v[0], v[1])?; reduce(g, y, &w) }, &params, h, tight, floor)?,
    ));

    let params = vec![random_tensor(rng, &[2, 3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0)];
    let w = weights(rng, 24);
    out.push((
        "add_broadcast",
        check_graph(|g, v| { let y = g.add(v[0], v[1])?; reduce(g, y, &w) }, &params, h, tight, floor)?,
    ));

    let params = vec![random_tensor(rng, &[5], 1.0), random_tensor(rng, &[5], 1.0)];
    let w = weights(rng, 5);
    out.push((
        "add_self",
        check_graph(
            |g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.add(y, v[0])?;
                reduce(g, y, &w)
            },
            &params,
            h,
            tight,
            floor,
        )?,
    ));

    let params = vec![random_tensor(rng, &[6], 1.0)];
    let w = weights(rng, 6);
    out.push((
        "scale",
        check_graph(|g, v| { let y = g.scale(v[0], -1.7); reduce(g, y, &w) }, &params, h, tight, floor)?,
    ));

    let params = vec![random_tensor(rng, &[3, 5], 3.0)];
    let w = weights(rng, 15);
    out.push((
        "gelu",
        check_graph(|g, v| { let y = g.gelu(v[0]); reduce(g, y, &w) }, &params, h, tight, floor)?,
    ));

    let params = vec![random_tensor(rng, &[2, 3, 4], 2.0)];
    let w = weights(rng, 24);
    out.push((
        "softmax_rows",
        check_graph(|g, v| { let y = g.softmax_rows(v[0])?; reduce(g, y, &w) }, &params, h, tight, floor)?,
    ));

    let mut gain = random_tensor(rng, &[6], 0.5);
    for x in gain.data_mut() {
        *x += 1.0;
    }
    let params = vec![random_tensor(rng, &[4, 6], 2.0), gain, random_tensor(rng, &[6], 0.5)];
    let w = weights(rng, 24);
    out.push((
        "layer_norm_rows",
        check_graph(
            |g, v| {
                let y = g.layer_norm_rows(v[0], v[1], v[2], 1e-5)?;
                reduce(g, y, &w)
            },
            &params,
            h,
            tight,
            floor,
        )?,
    ));

    let params = vec![random_tensor(rng, &[5, 3], 1.0)];
    let w = weights(rng, 12);
    out.push((
        "embedding_gather",
        check_graph(
            |g, v| {
                let y = g.embedding_gather(v[0], &[4, 0, 4, 2])?;
                reduce(g, y, &w)
            },
            &params,
            h,
            tight,
            floor,
        )?,
    ));

    let params = vec![random_tensor(rng, &[2, 3, 4], 1.0)];
    let w = weights(rng, 24);
    out.push((
        "reshape_transpose",
        check_graph(
            |g, v| {
                let y = g.transpose(v[0])?;
                let y = g.reshape(y, &[8, 3])?;
                let y = g.transpose(y)?;
                reduce(g, y, &w)
            },
            &params,
            h,
            tight,
            floor,
        )?,
    ));

    let params = vec![random_tensor(rng, &[2, 3, 4], 1.0)];
    let w = weights(rng, 24);
    out.push((
        "split_merge_heads",
        check_graph(
            |g, v| {
                let s = g.split_heads(v[0], 2)?;
                let s = g.scale(s, 0.5);
                let sq = g.transpose(s)?;
                let p = g.matmul(s, sq)?;
                let m = g.matmul(p, s)?;
                let y = g.merge_heads(m, 2)?;
                reduce(g, y, &w)
            },
            &params,
            h,
            tight,
            floor,
        )?,
    ));

    let params = vec![random_tensor(rng, &[5, 4], 2.0)];
    // masked rows carry targets that would be out of range if read
    let targets = [1, usize::MAX, 3, 0, usize::MAX];
    let mask = [1.0, 0.0, 1.0, 1.0, 0.0];
    out.push((
        "cross_entropy_masked",
        check_graph(|g, v| g.cross_entropy_masked(v[0], &targets, &mask), &params, h, tight, floor)?,
    ));

    let params = vec![random_tensor(rng, &[7], 1.0)];
    let w = weights(rng, 7);
    out.push((
        "weighted_sum",
        check_graph(|g, v| reduce(g, v[0], &w), &params, h, tight, floor)?,
    ));

    Ok(out)
}
