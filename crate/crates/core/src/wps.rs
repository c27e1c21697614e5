//! Working propensity score model and its pseudo-likelihood fit.
//!
//! The recruitment ratio is modelled as `delta(x) = 1 + exp(-x'alpha)` (with
//! an intercept prepended to `x`), which keeps `delta > 1` for every
//! parameter value. The working propensity score follows as
//! `e(x) = r delta / (1 + r delta)`, i.e. `logit e = log(r delta)`, where `r`
//! is the design odds of cluster treatment.

use serde::Serialize;

use crate::data::{design_ratio, RecruitedDataset};
use crate::error::{Error, Result};
use crate::optim::{minimizer, Objective, OptimizerSettings, Start};

/// `log(1 + exp(v))` and `1 / (1 + exp(-v))` sharing one exponential.
#[inline]
fn softplus_and_expit(v: f64) -> (f64, f64) {
    let w = (-v.abs()).exp();
    let sp = v.max(0.0) + w.ln_1p();
    let sig = if v >= 0.0 { 1.0 / (1.0 + w) } else { w / (1.0 + w) };
    (sp, sig)
}

/// Per-row pieces of the pseudo-likelihood at linear predictor `eta`.
#[derive(Debug, Clone, Copy)]
struct RowTerms {
    log_e: f64,
    log_1me: f64,
    e: f64,
    /// `1 - 1/delta = d(-log delta)/d eta`, in (0, 1).
    s: f64,
}

#[inline]
fn row_terms(eta: f64, log_r: f64) -> RowTerms {
    // log delta = softplus(-eta); s = expit(-eta)
    let (log_delta, s) = softplus_and_expit(-eta);
    let logit_e = log_r + log_delta;
    // log e = -softplus(-L), log(1 - e) = -softplus(L) = -(L + softplus(-L))
    let (q, e_neg) = softplus_and_expit(-logit_e);
    RowTerms {
        log_e: -q,
        log_1me: -(logit_e + q),
        e: 1.0 - e_neg,
        s,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WpsModel {
    /// Intercept first, then one coefficient per covariate.
    pub alpha: Vec<f64>,
    /// Design odds `P(Z = 1) / P(Z = 0)`.
    pub r: f64,
}

impl WpsModel {
    pub fn new(alpha: Vec<f64>, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidInput(format!("design ratio must be positive, got {r}")));
        }
        if alpha.is_empty() || alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidInput("alpha must be a non-empty finite vector".into()));
        }
        Ok(Self { alpha, r })
    }

    /// `alpha = 0`, i.e. `delta = 2` everywhere.
    pub fn zero(covariate_dim: usize, r: f64) -> Result<Self> {
        Self::new(vec![0.0; covariate_dim + 1], r)
    }

    pub fn covariate_dim(&self) -> usize {
        self.alpha.len() - 1
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.covariate_dim() {
            return Err(Error::Dimension {
                expected: self.covariate_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn eta(&self, x: &[f64]) -> f64 {
        self.alpha[0] + self.alpha[1..].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
    }

    /// Intercept-augmented linear predictor `x'alpha`.
    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.eta(x))
    }

    /// `delta(x) = 1 + exp(-x'alpha)`.
    pub fn delta(&self, x: &[f64]) -> Result<f64> {
        Ok(1.0 + (-self.linear_predictor(x)?).exp())
    }

    /// `e(x) = r delta / (1 + r delta)`.
    pub fn propensity(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(row_terms(self.eta(x), self.r.ln()).e)
    }

    /// Propensities for every row of `dataset`.
    pub fn propensities(&self, dataset: &RecruitedDataset) -> Result<Vec<f64>> {
        self.check_dataset(dataset)?;
        let log_r = self.r.ln();
        Ok((0..dataset.n())
            .map(|i| row_terms(self.eta(dataset.row(i)), log_r).e)
            .collect())
    }

    fn check_dataset(&self, dataset: &RecruitedDataset) -> Result<()> {
        if dataset.covariate_dim() != self.covariate_dim() {
            return Err(Error::Dimension {
                expected: self.covariate_dim(),
                got: dataset.covariate_dim(),
            });
        }
        Ok(())
    }
}

/// Working-independence binomial pseudo-likelihood over recruited rows,
/// as a minimization objective: the *mean* negative log pseudo-likelihood.
#[derive(Debug, Clone, Copy)]
pub struct PseudoLikelihood<'a> {
    covariates: &'a [f64],
    treatment: &'a [bool],
    dim: usize,
    log_r: f64,
}

impl<'a> PseudoLikelihood<'a> {
    /// `covariates` is row-major `n x dim` (no intercept column).
    pub fn new(covariates: &'a [f64], treatment: &'a [bool], dim: usize, r: f64) -> Result<Self> {
        if covariates.len() != treatment.len() * dim {
            return Err(Error::Dimension {
                expected: treatment.len() * dim,
                got: covariates.len(),
            });
        }
        if treatment.is_empty() {
            return Err(Error::InvalidInput("empty design".into()));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidInput(format!("design ratio must be positive, got {r}")));
        }
        Ok(Self {
            covariates,
            treatment,
            dim,
            log_r: r.ln(),
        })
    }

    pub fn from_dataset(dataset: &'a RecruitedDataset) -> Self {
        Self {
            covariates: dataset.covariate_matrix(),
            treatment: dataset.treatment(),
            dim: dataset.covariate_dim(),
            log_r: design_ratio(dataset).ln(),
        }
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    #[inline]
    fn eta(&self, alpha: &[f64], i: usize) -> f64 {
        let x = &self.covariates[i * self.dim..(i + 1) * self.dim];
        alpha[0] + alpha[1..].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
    }

    /// Total log pseudo-likelihood and (optionally) its gradient.
    fn total(&self, alpha: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut ll = 0.0;
        for (i, &z) in self.treatment.iter().enumerate() {
            let t = row_terms(self.eta(alpha, i), self.log_r);
            ll += if z { t.log_e } else { t.log_1me };
            if let Some(g) = grad.as_deref_mut() {
                // d ll / d eta = (e - z) s
                let d = (t.e - if z { 1.0 } else { 0.0 }) * t.s;
                g[0] += d;
                let x = &self.covariates[i * self.dim..(i + 1) * self.dim];
                for (gk, xk) in g[1..].iter_mut().zip(x) {
                    *gk += d * xk;
                }
            }
        }
        ll
    }

    pub fn log_likelihood(&self, alpha: &[f64]) -> f64 {
        self.total(alpha, None)
    }

    /// Gradient of the total log pseudo-likelihood.
    pub fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim + 1];
        self.total(alpha, Some(&mut g));
        g
    }
}

impl Objective for PseudoLikelihood<'_> {
    fn dim(&self) -> usize {
        self.dim + 1
    }

    fn value(&self, x: &[f64]) -> f64 {
        -self.total(x, None) / self.n() as f64
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let ll = self.total(x, Some(grad));
        let scale = -1.0 / self.n() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        ll * scale
    }
}

/// `sum_ij [Z log e + (1 - Z) log(1 - e)]` over recruited rows.
pub fn log_pseudo_likelihood(model: &WpsModel, dataset: &RecruitedDataset) -> Result<f64> {
    model.check_dataset(dataset)?;
    let design = PseudoLikelihood::new(
        dataset.covariate_matrix(),
        dataset.treatment(),
        dataset.covariate_dim(),
        model.r,
    )?;
    Ok(design.log_likelihood(&model.alpha))
}

/// Analytic gradient of [`log_pseudo_likelihood`] with respect to `alpha`.
pub fn log_pseudo_likelihood_gradient(model: &WpsModel, dataset: &RecruitedDataset) -> Result<Vec<f64>> {
    model.check_dataset(dataset)?;
    let design = PseudoLikelihood::new(
        dataset.covariate_matrix(),
        dataset.treatment(),
        dataset.covariate_dim(),
        model.r,
    )?;
    Ok(design.gradient(&model.alpha))
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FitSettings {
    /// Registered minimizer name, see [`crate::optim::MINIMIZERS`].
    pub optimizer: String,
    pub optim: OptimizerSettings,
    /// Any `|alpha_k|` above this is reported as separation.
    pub max_param_norm: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            optimizer: "bfgs".into(),
            optim: OptimizerSettings::default(),
            max_param_norm: 15.0,
        }
    }
}

/// Warm start for [`fit_from`].
#[derive(Debug, Clone, Default)]
pub struct FitInit {
    pub alpha: Option<Vec<f64>>,
    pub inverse_hessian: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub model: WpsModel,
    pub converged: bool,
    /// Total negative log pseudo-likelihood at the optimum.
    pub neg_log_pseudo_likelihood: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Max-norm of the gradient of the mean negative log pseudo-likelihood.
    pub gradient_norm: f64,
    pub optimizer: String,
    pub used_fallback: bool,
    #[serde(skip)]
    pub inverse_hessian: Option<Vec<f64>>,
}

/// Maximizes the pseudo-likelihood, starting from `init` or `alpha = 0`.
pub fn fit(dataset: &RecruitedDataset, init: Option<&[f64]>, settings: &FitSettings) -> Result<FitResult> {
    let design = PseudoLikelihood::from_dataset(dataset);
    fit_design(
        &design,
        &FitInit {
            alpha: init.map(<[f64]>::to_vec),
            inverse_hessian: None,
        },
        design_ratio(dataset),
        settings,
    )
}

pub fn fit_from(dataset: &RecruitedDataset, init: &FitInit, settings: &FitSettings) -> Result<FitResult> {
    fit_design(
        &PseudoLikelihood::from_dataset(dataset),
        init,
        design_ratio(dataset),
        settings,
    )
}

/// Fits on a raw design. Fails on non-convergence, on any coefficient above
/// the separation cap, and when the optimum sits on the `delta = 1` or
/// `delta = infinity` boundary for every row.
pub fn fit_design(design: &PseudoLikelihood<'_>, init: &FitInit, r: f64, settings: &FitSettings) -> Result<FitResult> {
    let dim = design.dim + 1;
    let alpha0 = init.alpha.clone().unwrap_or_else(|| vec![0.0; dim]);
    if alpha0.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: alpha0.len(),
        });
    }
    let method = minimizer(&settings.optimizer)
        .ok_or_else(|| Error::InvalidInput(format!("unknown optimizer {:?}", settings.optimizer)))?;
    let out = method.minimize(
        design,
        Start {
            x: &alpha0,
            inverse_hessian: init.inverse_hessian.as_deref(),
        },
        &settings.optim,
    );

    let largest = out.x.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
    if !largest.is_finite() || largest > settings.max_param_norm {
        return Err(Error::Separation(format!(
            "coefficient magnitude {largest:.3e} exceeds cap {}",
            settings.max_param_norm
        )));
    }
    if !out.converged {
        return Err(Error::Convergence {
            iterations: out.iterations,
            gradient_norm: out.gradient_norm,
        });
    }
    let (mut lower, mut upper) = (true, true);
    for i in 0..design.n() {
        let t = row_terms(design.eta(&out.x, i), 0.0);
        // s = 1 - 1/delta
        lower &= t.s < 1e-6;
        upper &= 1.0 - t.s < 1e-6;
        if !lower && !upper {
            break;
        }
    }
    if lower || upper {
        return Err(Error::Separation(format!(
            "pseudo-likelihood maximized on the boundary delta = {}",
            if lower { "1" } else { "infinity" }
        )));
    }

    Ok(FitResult {
        model: WpsModel::new(out.x, r)?,
        converged: true,
        neg_log_pseudo_likelihood: out.value * design.n() as f64,
        iterations: out.iterations,
        evaluations: out.evaluations,
        gradient_norm: out.gradient_norm,
        optimizer: method.name().to_string(),
        used_fallback: out.used_fallback,
        inverse_hessian: out.inverse_hessian,
    })
}
