//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Feed, Graph, Mode};
use super::tensor::{ParamSet, Tensor};
use super::NumericError;

/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates probed per slot; `None` probes all of them.
    pub coords_per_slot: Option<usize>,
    /// Random joint directions probed in addition to single coordinates.
    pub directions: usize,
    pub seed: u64,
    /// Fourth-order stencil; pair it with a larger epsilon when the
    /// function's magnitude makes rounding dominate small gradients.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            coords_per_slot: None,
            directions: 0,
            seed: 0,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Where the largest relative error occurred (slot, flat index), or
    /// `("<direction>", k)` for a joint direction.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, slot: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let rel = relative_error(analytic, numeric);
        self.max_abs_error = self.max_abs_error.max((analytic - numeric).abs());
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((slot.to_string(), index));
        }
    }
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn check_function(
    params: &ParamSet,
    analytic: &ParamSet,
    opts: &GradCheckOptions,
    mut f: impl FnMut(&ParamSet) -> Result<f64, NumericError>,
) -> Result<GradCheckReport, NumericError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let len = params.get(name).unwrap().len();
        let grad = analytic
            .get(name)
            .ok_or_else(|| NumericError::MissingParam(name.clone()))?;
        let coords: Vec<usize> = match opts.coords_per_slot {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let orig = params.get(name).unwrap().data()[i];
            let numeric = derivative(opts, |t| {
                probe.get_mut(name).unwrap().data_mut()[i] = orig + t;
                let v = f(&probe);
                probe.get_mut(name).unwrap().data_mut()[i] = orig;
                v
            })?;
            report.record(name, i, grad.data()[i], numeric);
        }
    }
    for k in 0..opts.directions {
        let mut dir = params.zeros_like();
        for (_, t) in dir.iter_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let norm = dir.global_norm();
        dir.scale(1.0 / norm);
        let analytic_dd: f64 = dir
            .iter()
            .map(|(n, d)| d.data().iter().zip(analytic.get(n).unwrap().data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let numeric = derivative(opts, |t| {
            let mut moved = params.clone();
            moved.add_scaled(&dir, t);
            f(&moved)
        })?;
        report.record("<direction>", k, analytic_dd, numeric);
    }
    Ok(report)
}

fn derivative(
    opts: &GradCheckOptions,
    mut at: impl FnMut(f64) -> Result<f64, NumericError>,
) -> Result<f64, NumericError> {
    let h = opts.epsilon;
    if opts.five_point {
        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
    } else {
        Ok((at(h)? - at(-h)?) / (2.0 * h))
    }
}

/// Finite-difference check of a graph output. Non-scalar outputs are
/// reduced with fixed random weights.
pub fn check_graph(
    graph: &Graph,
    params: &ParamSet,
    feed: &Feed,
    output: &str,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericError> {
    let out = graph.output(output)?;
    let shape = graph.node(out).shape.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let weights = if shape == [1] {
        Tensor::scalar(1.0)
    } else {
        Tensor::uniform(&shape, -1.0, 1.0, &mut rng)
    };
    let eval = graph.forward(params, feed, Mode::Train)?;
    let analytic = graph.backward(&eval, out, &weights)?;
    check_function(params, &analytic, opts, |p| {
        let e = graph.forward(p, feed, Mode::Train)?;
        Ok(e.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    })
}

/// Random parameter values for every slot of a graph.
pub fn random_params(graph: &Graph, scale: f64, rng: &mut impl Rng) -> ParamSet {
    graph
        .slots()
        .iter()
        .map(|(name, shape)| (name.clone(), Tensor::uniform(shape, -scale, scale, rng)))
        .collect()
}
