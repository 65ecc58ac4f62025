//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::ParamStore;
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many entries per parameter (sampled), `None` = all.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-6)`
    /// over the checked entries.
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares autodiff gradients of the scalar `f` against central differences
/// for every non-frozen parameter in `store`.
pub fn grad_check<F, E>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&Graph, &ParamStore) -> std::result::Result<Var, E>,
    E: From<NumericsError>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let eval = |s: &ParamStore| -> std::result::Result<f64, E> {
        let g = Graph::inference();
        let v = f(&g, s)?;
        Ok(g.value(v).item())
    };
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let n = p.value.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.param(id);
        let mut max_diff = 0.0f64;
        let mut scale = 1e-6f64;
        for &i in &entries {
            let orig = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        report.params.push(ParamCheck {
            name: p.name.clone(),
            checked: entries.len(),
            max_rel_err: max_diff / scale,
        });
    }
    Ok(report)
}
