//! Simulation fixtures shared by the integration tests.
#![allow(dead_code)]

use lgcp::igmrf::{build_rw2d, scale_to_unit_gv, SpectrumMethod};
use lgcp::lattice::{CountGrid, CovariateStack, Window};
use lgcp::model::{simulate, Hyperparameters, LatentState, ModelSpec};
use lgcp::pc_priors::{pc_mix_prior, pc_prec_prior, DEFAULT_GRID_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

pub const BETA_TRUE: [f64; 2] = [0.5, -0.5];
pub const TAU_TRUE: f64 = 4.0;
pub const PHI_TRUE: f64 = 0.7;
/// Hyperparameters of the confounded design: a unit-scale random component
/// dominated by its structured part.
pub const CONFOUNDED_TAU: f64 = 1.0;
pub const CONFOUNDED_PHI: f64 = 0.8;

/// Unit-area cells on `[0, ncol] x [0, nrow]`.
pub fn unit_window(nrow: usize, ncol: usize) -> Window {
    Window::new(0.0, ncol as f64, 0.0, nrow as f64, nrow, ncol).unwrap()
}

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    v.iter_mut().for_each(|x| *x = (*x - m) / s);
    v
}

/// Smooth standardized surface from a few random plane waves, evaluated at
/// cell centres of `window`. Depends only on `seed` and the window extent.
pub fn smooth_covariate(window: &Window, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = window.width().max(window.height());
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let k = 2.0 * std::f64::consts::PI / (span * rng.random_range(0.3..1.0));
            (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..6.3), rng.random_range(0.5..1.0))
        })
        .collect();
    let raw = window
        .cell_centres()
        .into_iter()
        .map(|(x, y)| waves.iter().map(|(kx, ky, p, a)| a * (kx * x + ky * y + p).cos()).sum())
        .collect();
    standardize(raw)
}

/// Model specification on unit-area cells with exact spectra and the
/// priors `(u_sigma, 0.01)` and `(0.5, 2/3)`.
pub fn spec_with(counts: CountGrid, covariates: CovariateStack, u_sigma: f64) -> ModelSpec {
    let w = counts.window;
    let method = SpectrumMethod::auto(w.n_cells(), lgcp::igmrf::DEFAULT_EXACT_LIMIT);
    let prec = scale_to_unit_gv(&build_rw2d(w.nrow, w.ncol).unwrap(), method).unwrap();
    let pp = pc_prec_prior(u_sigma, 0.01).unwrap();
    let mp = pc_mix_prior(0.5, 2.0 / 3.0, &prec, DEFAULT_GRID_SIZE, method).unwrap();
    ModelSpec::new(counts, covariates, prec, pp, mp).unwrap()
}

/// Data from the model with one smooth covariate and the true parameters above.
pub fn simulated(window: Window, seed: u64) -> (ModelSpec, LatentState) {
    let z = smooth_covariate(&window, seed.wrapping_mul(7919));
    let cov = CovariateStack::new(vec!["z".into()], vec![z]).unwrap();
    let skeleton = spec_with(CountGrid::from_counts(window, vec![0; window.n_cells()]).unwrap(), cov.clone(), 1.0);
    let hyper = Hyperparameters::new(TAU_TRUE, PHI_TRUE).unwrap();
    let (counts, state) = simulate(&skeleton, &hyper, &BETA_TRUE, seed).unwrap();
    (spec_with(counts, cov, 1.0), state)
}

/// Data whose covariate is strongly correlated with the true structured
/// field, so covariate effect and spatial field compete for the same signal.
pub fn confounded(window: Window, seed: u64) -> ModelSpec {
    let n = window.n_cells();
    let placeholder = CovariateStack::new(vec!["z".into()], vec![smooth_covariate(&window, seed)]).unwrap();
    let skeleton = spec_with(CountGrid::from_counts(window, vec![0; n]).unwrap(), placeholder.clone(), 1.0);
    let hyper = Hyperparameters::new(CONFOUNDED_TAU, CONFOUNDED_PHI).unwrap();
    let (_, state) = simulate(&skeleton, &hyper, &BETA_TRUE, seed).unwrap();
    let noise = smooth_covariate(&window, seed ^ 0xc0f0);
    let z = standardize(
        state
            .u_star
            .iter()
            .zip(&noise)
            .map(|(u, e)| u + 0.5 * e)
            .collect(),
    );
    let a = hyper.weight_structured();
    let b = hyper.weight_unstructured();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    let counts = (0..n)
        .map(|i| {
            let eta = BETA_TRUE[0] + BETA_TRUE[1] * z[i] + a * state.u_star[i] + b * state.v[i];
            Poisson::new(eta.exp()).unwrap().sample(&mut rng) as u64
        })
        .collect();
    let cov = CovariateStack::new(vec!["z".into()], vec![z]).unwrap();
    spec_with(CountGrid::from_counts(window, counts).unwrap(), cov, 1.0)
}

pub fn with_u_sigma(spec: &ModelSpec, u_sigma: f64) -> ModelSpec {
    let mut s = spec.clone();
    s.prec_prior = pc_prec_prior(u_sigma, 0.01).unwrap();
    s
}
