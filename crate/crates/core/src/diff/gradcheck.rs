//! Central finite-difference checks against tape gradients.

use rand::Rng;

use super::graph::{Graph, Var};
use crate::error::Result;

/// One probed coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `∂f/∂inputs` from the tape with central differences of step `h`
/// at `n_probes` coordinates. Coordinates are visited in a shuffled cycle, so
/// every coordinate is probed once before any repeats.
///
/// `f` builds a scalar from leaves created by [`Graph::input`].
pub fn check<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    n_probes: usize,
    h: f64,
    rng: &mut impl Rng,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Vec<f64>], grad: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = if grad { Graph::new() } else { Graph::no_grad() };
        let vars = inputs
            .iter()
            .zip(values)
            .map(|((shape, _), v)| g.input(shape.clone(), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (g, vars, out) = eval(&values, true)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();

    let coords: Vec<(usize, usize)> = values
        .iter()
        .enumerate()
        .flat_map(|(i, v)| (0..v.len()).map(move |j| (i, j)))
        .collect();
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut probes = Vec::with_capacity(n_probes);
    while probes.len() < n_probes && !coords.is_empty() {
        if order.is_empty() {
            order = coords.clone();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
        }
        let (i, j) = order.pop().unwrap();
        let x0 = values[i][j];
        values[i][j] = x0 + h;
        let (gp, _, op) = eval(&values, false)?;
        let fp = gp.item(op);
        values[i][j] = x0 - h;
        let (gm, _, om) = eval(&values, false)?;
        let fm = gm.item(om);
        values[i][j] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i][j];
        probes.push(Probe {
            input: i,
            index: j,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport { probes })
}
