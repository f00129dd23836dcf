//! Convergence constants for IPSG and empirical checks of the bounds they
//! feed.
//!
//! Notation: `M = AᵀA/N`, `Λᵢ = ‖aⁱ‖²`, `K_β = (M + βI)⁻¹`, `K̃ = K − K_β`,
//! `z = x − x*`. Eigenvalues `s1 ≥ sd` are those of `AᵀA` itself.

use serde::Serialize;

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{
    dot, frob_norm, gram, matvec, matvec_t, spectral_norm, solve_spd, sym_eigen, sym_spectral_norm, vec_norm, Matrix,
};
use crate::optimizers::{precond_residuals_into, stoch_grad, GradientSample, IpsgParams, IpsgState};
use crate::rng::{derive_seed, sample_uniform, stream};

/// Probe radii for the noise bounds, as multiples of `‖x*‖ + 1`.
pub const PROBE_RADII: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_PROBES: usize = 100;

/// Slack, in standard errors, granted to every Monte Carlo comparison.
pub const MC_SLACK: f64 = 3.0;

// ---------------------------------------------------------------------------
// Basic constants

/// `K_β = (AᵀA/N + βI)⁻¹`.
pub fn compute_kbeta(a: &Matrix, beta: f64) -> Result<Matrix> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::domain(format!("beta must be positive, got {beta}")));
    }
    let n = a.rows() as f64;
    let s = gram(a).scaled(1.0 / n).add_diagonal(beta);
    let d = s.rows();
    let k = solve_spd(&s, &Matrix::identity(d))?;
    let resid = frob_norm(&s.matmul(&k)?.sub(&Matrix::identity(d))?);
    if resid > 1e-10 * (d as f64).sqrt() {
        return Err(Error::numerical(format!("K_beta residual {resid:e} exceeds 1e-10")));
    }
    Ok(k)
}

/// Per-row `‖I − α(aⁱᵀaⁱ + βI)‖` from the rank-one eigenstructure: the
/// eigenvalues are `1 − α(Λᵢ + β)` once and `1 − αβ` with multiplicity
/// `d − 1`.
pub fn row_contraction_norm(lambda_i: f64, alpha: f64, beta: f64, d: usize) -> f64 {
    let along = (1.0 - alpha * (lambda_i + beta)).abs();
    if d > 1 {
        along.max((1.0 - alpha * beta).abs())
    } else {
        along
    }
}

/// `ρ = (1/N) Σᵢ ‖I − α(aⁱᵀaⁱ + βI)‖`.
pub fn compute_rho(a: &Matrix, alpha: f64, beta: f64) -> f64 {
    let d = a.cols();
    let total: f64 = a
        .row_iter()
        .map(|r| row_contraction_norm(dot(r, r), alpha, beta, d))
        .sum();
    total / a.rows() as f64
}

/// `‖aⁱᵀaⁱ − M‖` for every row.
///
/// With `M = Q·diag(λ)·Qᵀ` and `u = Qᵀaⁱ`, the matrix `M − aⁱᵀaⁱ` is
/// similar to `diag(λ) − uuᵀ`, whose extreme eigenvalues are roots of the
/// secular function `1 − Σ u_k²/(λ_k − μ)`. One decomposition of `M` then
/// serves all rows at `O(d²)` each.
pub fn row_deviation_norms(a: &Matrix) -> Result<Vec<f64>> {
    let n = a.rows() as f64;
    let eig = sym_eigen(&gram(a).scaled(1.0 / n))?;
    let q = eig.vectors.expect("eigenvectors requested");
    let lam = eig.values;
    let mut u = vec![0.0; lam.len()];
    Ok(a
        .row_iter()
        .map(|r| {
            // u = Qᵀ r
            u.iter_mut().for_each(|v| *v = 0.0);
            for (i, &ri) in r.iter().enumerate() {
                if ri != 0.0 {
                    crate::linalg::axpy(ri, q.row(i), &mut u);
                }
            }
            let (lo, hi) = downdate_extremes(&lam, &u);
            lo.abs().max(hi.abs())
        })
        .collect())
}

/// Smallest and largest eigenvalue of `diag(lam) − u·uᵀ`, `lam` ascending.
fn downdate_extremes(lam: &[f64], u: &[f64]) -> (f64, f64) {
    let w: Vec<f64> = u.iter().map(|v| v * v).collect();
    let wsum: f64 = w.iter().sum();
    let active = |k: usize| w[k] > 1e-300;
    let mut lo_eig = f64::INFINITY;
    let mut hi_eig = f64::NEG_INFINITY;
    // components orthogonal to u keep their eigenvalue
    for k in 0..lam.len() {
        if !active(k) {
            lo_eig = lo_eig.min(lam[k]);
            hi_eig = hi_eig.max(lam[k]);
        }
    }
    let Some(first) = (0..lam.len()).find(|&k| active(k)) else {
        return (lo_eig, hi_eig);
    };
    let last = (0..lam.len()).rev().find(|&k| active(k)).expect("first exists");

    let h = |mu: f64| {
        1.0 - (0..lam.len())
            .filter(|&k| active(k))
            .map(|k| w[k] / (lam[k] - mu))
            .sum::<f64>()
    };
    // h falls from +1 (or +∞) to −∞ between consecutive active poles
    let bisect = |mut lo: f64, mut hi: f64| {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if h(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };

    // left of the outermost pole the bracket end is finite and may be the root
    let outer = |lo: f64, hi: f64| if h(lo) <= 0.0 { lo } else { bisect(lo, hi) };
    lo_eig = lo_eig.min(outer(lam[first] - wsum, lam[first]));

    let top = lam[last];
    let ties = (0..lam.len()).filter(|&k| active(k) && lam[k] == top).count();
    let hi_root = if ties > 1 {
        top
    } else {
        let below = (0..last).rev().find(|&k| active(k) && lam[k] < top);
        match below {
            Some(p) => bisect(lam[p], top),
            None => outer(top - wsum, top),
        }
    };
    hi_eig = hi_eig.max(hi_root);
    (lo_eig, hi_eig)
}

/// `(ρ, C1, C2)`.
pub fn compute_rho_c1_c2(a: &Matrix, alpha: f64, beta: f64, k_beta: &Matrix) -> Result<(f64, f64, f64)> {
    check_positive("alpha", alpha)?;
    check_positive("beta", beta)?;
    let dev = row_deviation_norms(a)?;
    let c1 = dev.iter().copied().fold(0.0, f64::max);
    let mean_dev = dev.iter().sum::<f64>() / a.rows() as f64;
    let c2 = alpha * mean_dev * sym_spectral_norm(k_beta)?;
    Ok((compute_rho(a, alpha, beta), c1, c2))
}

/// `L = β + maxᵢ Λᵢ`.
pub fn compute_l(a: &Matrix, beta: f64) -> f64 {
    beta + a.row_iter().map(|r| dot(r, r)).fold(0.0, f64::max)
}

/// `σ² = max_j (1/N) Σᵢ ‖(aⁱᵀaⁱ + βI)K_β e_j − e_j‖²`.
///
/// With `c = aⁱ·k_j` the summand expands to
/// `c²Λᵢ + 2c(βc − a_ij) + ‖βk_j − e_j‖²`, so only `A·K_β` is needed.
pub fn compute_sigma2(a: &Matrix, beta: f64, k_beta: &Matrix) -> Result<f64> {
    let ak = a.matmul(k_beta)?;
    let d = a.cols();
    let n = a.rows();
    let lambdas: Vec<f64> = a.row_iter().map(|r| dot(r, r)).collect();
    let mut best = 0.0f64;
    for j in 0..d {
        let mut tail = 0.0;
        for i in 0..d {
            let v = beta * k_beta[(i, j)] - if i == j { 1.0 } else { 0.0 };
            tail += v * v;
        }
        let mut s = 0.0;
        for i in 0..n {
            let c = ak[(i, j)];
            s += c * c * lambdas[i] + 2.0 * c * (beta * c - a[(i, j)]);
        }
        best = best.max((s + n as f64 * tail) / n as f64);
    }
    Ok(best.max(0.0))
}

/// `(L, σ², C3)` with `C3 = αNσ²/(sd(1 − αL))`.
pub fn compute_l_sigma2_c3(a: &Matrix, beta: f64, alpha: f64, k_beta: &Matrix, sd: f64) -> Result<(f64, f64, f64)> {
    let l = compute_l(a, beta);
    let sigma2 = compute_sigma2(a, beta, k_beta)?;
    Ok((l, sigma2, c3_from(alpha, a.rows(), sigma2, sd, l)?))
}

fn c3_from(alpha: f64, n: usize, sigma2: f64, sd: f64, l: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::Assumption(format!("smallest eigenvalue {sd:e} is not positive")));
    }
    if alpha * l >= 1.0 {
        return Err(Error::domain(format!(
            "C3 needs alpha < 1/L = {:e}, got alpha = {alpha}",
            1.0 / l
        )));
    }
    Ok(alpha * n as f64 * sigma2 / (sd * (1.0 - alpha * l)))
}

/// `ᾱ = min{N/sd, 1/L, 2/(s1/N + β)}`.
pub fn compute_alpha_bar(n: usize, s1: f64, sd: f64, l: f64, beta: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::Assumption(format!("smallest eigenvalue {sd:e} is not positive")));
    }
    let n = n as f64;
    Ok((n / sd).min(1.0 / l).min(2.0 / (s1 / n + beta)))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive and finite, got {v}")))
    }
}

// ---------------------------------------------------------------------------
// Gradient noise

/// Bounds on the spread of the single-row gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NoiseBounds {
    #[serde(rename = "V1")]
    pub v1: f64,
    #[serde(rename = "V2")]
    pub v2: f64,
    #[serde(rename = "E1")]
    pub e1: f64,
    #[serde(rename = "E2")]
    pub e2: f64,
}

impl NoiseBounds {
    pub fn zero() -> Self {
        NoiseBounds { v1: 0.0, v2: 0.0, e1: 0.0, e2: 0.0 }
    }
}

/// Mean, variance and largest norm of the row gradients at `x`.
struct GradSpread {
    mean: Vec<f64>,
    var: f64,
    max_norm: f64,
}

fn grad_spread(ds: &Dataset, x: &[f64]) -> Result<GradSpread> {
    let n = ds.n_rows() as f64;
    let mut grads = Vec::with_capacity(ds.n_rows());
    for (r, &b) in ds.a.row_iter().zip(&ds.b) {
        grads.push(stoch_grad(x, r, b)?);
    }
    let mut mean = vec![0.0; x.len()];
    for g in &grads {
        crate::linalg::axpy(1.0 / n, g, &mut mean);
    }
    let mut var = 0.0;
    let mut max_norm = 0.0f64;
    for g in &grads {
        var += g.iter().zip(&mean).map(|(gi, mi)| (gi - mi) * (gi - mi)).sum::<f64>();
        max_norm = max_norm.max(vec_norm(g));
    }
    Ok(GradSpread { mean, var: var / n, max_norm })
}

/// `V1` by enumeration at `x*`; `V2`, `E2` fitted over random probes on
/// spheres of radius `r·(‖x*‖ + 1)` for each `r` in [`PROBE_RADII`].
pub fn estimate_noise_bounds(ds: &Dataset, x_star: &[f64], probes: usize, seed: u64) -> Result<NoiseBounds> {
    if probes == 0 {
        return Err(Error::invalid("noise estimation needs at least one probe"));
    }
    let n = ds.n_rows() as f64;
    let at_min = grad_spread(ds, x_star)?;
    let v1 = at_min.var;
    let e1 = at_min.max_norm.max((v1 * n).sqrt());

    let mut rng = stream(seed, 0x9015e);
    let scale = vec_norm(x_star) + 1.0;
    let mut v2 = 0.0f64;
    let mut e2_fit = 0.0f64;
    for r in PROBE_RADII {
        for _ in 0..probes {
            let dir = random_unit(&mut rng, x_star.len());
            let x: Vec<f64> = x_star.iter().zip(&dir).map(|(s, u)| s + r * scale * u).collect();
            let spread = grad_spread(ds, &x)?;
            let gnorm = vec_norm(&spread.mean);
            if gnorm > 0.0 {
                v2 = v2.max((spread.var - v1) / (gnorm * gnorm));
                e2_fit = e2_fit.max((spread.max_norm - e1) / gnorm);
            }
        }
    }
    let v2 = v2.max(0.0);
    Ok(NoiseBounds {
        v1,
        v2,
        e1,
        e2: e2_fit.max(((v2 + 1.0) * n).sqrt()),
    })
}

fn random_unit(rng: &mut crate::rng::StreamRng, d: usize) -> Vec<f64> {
    use rand::Rng;
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let norm = vec_norm(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReportInputs {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
}

/// Time-dependent quantities at iteration `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub t: u64,
    #[serde(rename = "C4")]
    pub c4: f64,
    #[serde(rename = "C5")]
    pub c5: f64,
    #[serde(rename = "C6")]
    pub c6: f64,
    #[serde(rename = "C7")]
    pub c7: f64,
    #[serde(rename = "C8")]
    pub c8: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    #[serde(rename = "R3")]
    pub r3: f64,
    pub delta_bar: f64,
}

/// Every constant of the convergence analysis for one problem and one
/// parameter choice.
#[derive(Clone, Debug, Serialize)]
pub struct ConstantsReport {
    pub dataset: String,
    pub inputs: ReportInputs,
    #[serde(rename = "K_beta")]
    pub k_beta: Matrix,
    pub k_beta_norm: f64,
    pub k_beta_frob: f64,
    pub s1: f64,
    pub sd: f64,
    pub kappa: f64,
    pub rho: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    /// Absent when `α ≥ 1/L`.
    #[serde(rename = "C3")]
    pub c3: Option<f64>,
    #[serde(rename = "L")]
    pub l: f64,
    pub sigma2: f64,
    pub mu: f64,
    pub varrho: f64,
    pub alpha_bar: f64,
    /// `‖K(0) − K_β‖` and its Frobenius norm.
    pub ktilde0_norm: f64,
    pub ktilde0_frob: f64,
    pub noise: Option<NoiseBounds>,
    pub series: Vec<SeriesPoint>,
    pub limit_error_bound: Option<f64>,
    pub warnings: Vec<String>,
}

impl ConstantsReport {
    /// Constants that do not involve the gradient noise, with `K(0) = k0`
    /// (zero when absent).
    pub fn compute(ds: &Dataset, params: IpsgParams, k0: Option<&Matrix>) -> Result<Self> {
        params.validate()?;
        let IpsgParams { alpha, beta, delta } = params;
        let a = &ds.a;
        let (n, d) = (a.rows(), a.cols());
        if n == 0 || d == 0 {
            return Err(Error::invalid("constants need a non-empty dataset"));
        }
        let g = gram(a);
        let eig = crate::linalg::sym_eigenvalues(&g)?;
        let (sd, s1) = (eig[0], eig[d - 1]);
        if !(sd > 1e-12 * s1.max(f64::MIN_POSITIVE)) {
            return Err(Error::Assumption(format!(
                "A^T A is singular to working precision (smallest eigenvalue {sd:e}, largest {s1:e})"
            )));
        }
        let k_beta = compute_kbeta(a, beta)?;
        let k_beta_norm = sym_spectral_norm(&k_beta)?;
        let (rho, c1, c2) = compute_rho_c1_c2(a, alpha, beta, &k_beta)?;
        let l = compute_l(a, beta);
        let sigma2 = compute_sigma2(a, beta, &k_beta)?;
        let alpha_bar = compute_alpha_bar(n, s1, sd, l, beta)?;
        let nf = n as f64;
        let mu = 1.0 - (2.0 * alpha * sd / nf) * (1.0 - alpha * l);
        let varrho = (1.0 - alpha * (s1 / nf + beta))
            .abs()
            .max((1.0 - alpha * (sd / nf + beta)).abs());

        let mut warnings = Vec::new();
        let c3 = match c3_from(alpha, n, sigma2, sd, l) {
            Ok(v) => Some(v),
            Err(e) => {
                warnings.push(e.to_string());
                None
            }
        };
        if alpha >= alpha_bar {
            warnings.push(format!(
                "alpha = {alpha} is not below alpha_bar = {alpha_bar:e}; the convergence guarantee does not apply"
            ));
        }
        let ktilde0 = match k0 {
            Some(k) => k.sub(&k_beta)?,
            None => k_beta.scaled(-1.0),
        };
        Ok(ConstantsReport {
            dataset: ds.name.clone(),
            inputs: ReportInputs { alpha, beta, delta, n, d },
            k_beta_frob: frob_norm(&k_beta),
            k_beta,
            k_beta_norm,
            s1,
            sd,
            kappa: s1 / sd,
            rho,
            c1,
            c2,
            c3,
            l,
            sigma2,
            mu,
            varrho,
            alpha_bar,
            ktilde0_norm: spectral_norm(&ktilde0)?,
            ktilde0_frob: frob_norm(&ktilde0),
            noise: None,
            series: Vec::new(),
            limit_error_bound: None,
            warnings,
        })
    }

    /// Adds the noise bounds, the series at `ts` and the limit bound.
    pub fn with_noise(mut self, noise: NoiseBounds, ts: &[u64]) -> Result<Self> {
        self.noise = Some(noise);
        if self.c3.is_some() {
            self.series = compute_series(&self, &noise, ts)?;
        }
        match limit_error_bound(&self, &noise, self.inputs.alpha, self.inputs.delta) {
            Ok(v) => self.limit_error_bound = Some(v),
            Err(e) => self.warnings.push(e.to_string()),
        }
        if noise.v1 == 0.0 && self.sigma2 > 0.0 {
            self.warnings.push(format!(
                "gradient variance at the minimizer is zero yet sigma2 = {:e}; sigma2 is reported as defined, not assumed zero",
                self.sigma2
            ));
        }
        Ok(self)
    }
}

/// `Σ_{j=0}^{t} ρʲ`.
fn geometric_sum(rho: f64, t: u64) -> f64 {
    if rho == 1.0 {
        (t + 1) as f64
    } else if t == u64::MAX {
        1.0 / (1.0 - rho)
    } else {
        (1.0 - rho.powf(t as f64 + 1.0)) / (1.0 - rho)
    }
}

/// Evaluates `C4(t)…C8(t)`, `R1(t)…R3(t)` and `δ̄(t)` for each requested `t`.
pub fn compute_series(rep: &ConstantsReport, noise: &NoiseBounds, ts: &[u64]) -> Result<Vec<SeriesPoint>> {
    let c3 = rep
        .c3
        .ok_or_else(|| Error::domain("series need C3, which requires alpha < 1/L"))?;
    let ReportInputs { alpha, delta, n, d, .. } = rep.inputs;
    let nf = n as f64;
    let kb = rep.k_beta_norm;
    let (k0, k0f) = (rep.ktilde0_norm, rep.ktilde0_frob);
    Ok(ts
        .iter()
        .map(|&t| {
            let tf = t as f64;
            let bracket = d as f64 * c3
                + kb * kb
                + 2.0 * rep.c2 * kb * geometric_sum(rep.rho, t)
                + k0f * k0f * rep.mu.powf(tf + 1.0)
                + 2.0 * kb * k0 * rep.rho.powf(tf + 1.0);
            let c4 = (noise.v2 + 1.0) * rep.s1 * rep.s1 / nf * bracket;
            let c5 = 2.0 * rep.c1 * noise.e2 * rep.s1 / nf * (kb + k0 * rep.varrho.powf(tf));
            let c6 = 2.0 * rep.sd / (rep.sd + nf * rep.inputs.beta)
                - 2.0 * rep.s1 / nf * k0 * rep.varrho.powf(tf + 1.0);
            let c7 = 2.0 * rep.c1 * noise.e1 * (kb + k0 * rep.varrho.powf(tf));
            let c8 = c4 + 0.5;
            let r3 = delta * delta * noise.v1 * nf * bracket;
            let r2 = r3 + 0.5 * alpha * alpha * c7 * c7;
            let r1 = 1.0 + delta * delta * c8 + alpha * delta * c5 - delta * c6;
            let delta_bar = (1.0 / c6).min((c6 - alpha * c5) / c8);
            SeriesPoint { t, c4, c5, c6, c7, c8, r1, r2, r3, delta_bar }
        })
        .collect())
}

/// Asymptotic bound on `E‖x(t) − x*‖²`.
pub fn limit_error_bound(rep: &ConstantsReport, noise: &NoiseBounds, alpha: f64, delta: f64) -> Result<f64> {
    if rep.rho >= 1.0 {
        return Err(Error::domain(format!("limit bound needs rho < 1, got {}", rep.rho)));
    }
    let c3 = rep
        .c3
        .ok_or_else(|| Error::domain("limit bound needs C3, which requires alpha < 1/L"))?;
    let kb = rep.k_beta_norm;
    let n = rep.inputs.n as f64;
    let d = rep.inputs.d as f64;
    let noise_part = delta * delta * noise.v1 * n * (d * c3 + kb * kb + 2.0 * rep.c2 * kb / (1.0 - rep.rho));
    let bias = rep.c1 * noise.e1 * kb;
    Ok(noise_part + 2.0 * alpha * alpha * bias * bias)
}

// ---------------------------------------------------------------------------
// Verification

/// Outcome of one named check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct UnbiasednessReport {
    /// `‖mean_i gⁱ(x) − (AᵀAx − AᵀB)/N‖` over the reference scale.
    pub rel_err: f64,
    /// Component with the largest absolute discrepancy.
    pub worst_component: usize,
    pub grad_norm: f64,
    /// `(s1/N)‖x − x*‖`.
    pub grad_bound: f64,
    pub passed: bool,
}

/// Compares the enumeration mean of the row gradients with the full
/// gradient formed from `AᵀA` and `AᵀB`, and checks the gradient-norm
/// bound.
pub fn verify_unbiasedness(ds: &Dataset, x: &[f64], s1: f64, tol: f64) -> Result<UnbiasednessReport> {
    let n = ds.n_rows() as f64;
    let mut mean = vec![0.0; x.len()];
    let mut mag = 0.0;
    for (r, &b) in ds.a.row_iter().zip(&ds.b) {
        let g = stoch_grad(x, r, b)?;
        mag += vec_norm(&g) / n;
        crate::linalg::axpy(1.0, &g, &mut mean);
    }
    mean.iter_mut().for_each(|v| *v /= n);

    let gx = matvec(&gram(&ds.a), x)?;
    let atb = matvec_t(&ds.a, &ds.b)?;
    let full: Vec<f64> = gx.iter().zip(&atb).map(|(p, q)| (p - q) / n).collect();

    let (mut worst, mut worst_abs) = (0, 0.0);
    for (j, (m, f)) in mean.iter().zip(&full).enumerate() {
        if (m - f).abs() > worst_abs {
            worst_abs = (m - f).abs();
            worst = j;
        }
    }
    let diff = vec_norm(&crate::linalg::vec_sub(&mean, &full));
    let scale = vec_norm(&full).max(mag);
    let rel_err = if scale > 0.0 { diff / scale } else { diff };

    let x_star = ds.minimizer()?;
    let grad_norm = vec_norm(&full);
    let grad_bound = s1 / n * vec_norm(&crate::linalg::vec_sub(x, &x_star));
    let bound_ok = grad_norm <= grad_bound * (1.0 + 1e-10) + 1e-14 * mag.max(1e-300);
    Ok(UnbiasednessReport {
        rel_err,
        worst_component: worst,
        grad_norm,
        grad_bound,
        passed: rel_err <= tol && bound_ok,
    })
}

/// Running mean and variance.
#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, v: f64) {
        self.count += 1.0;
        let delta = v - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (v - self.mean);
    }

    fn std_err(&self) -> f64 {
        if self.count < 2.0 {
            return 0.0;
        }
        (self.m2.max(0.0) / (self.count - 1.0) / self.count).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Lemma1Row {
    pub t: usize,
    pub mean: f64,
    pub std_err: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Lemma1Report {
    pub rho: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    pub ktilde0_norm: f64,
    pub rows: Vec<Lemma1Row>,
    /// Smallest `bound + slack − mean` over all `t`.
    pub worst_margin: f64,
    pub passed: bool,
}

/// Options for [`verify_lemma1`].
#[derive(Clone, Copy, Debug)]
pub struct Lemma1Config {
    pub alpha: f64,
    pub beta: f64,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    /// Added to the computed `ρ` before it enters the bound; for fault
    /// injection only.
    pub rho_offset: f64,
}

/// Monte Carlo check of `E‖K̃(t)‖ ≤ ρᵗ‖K̃(0)‖ + C2 Σ_{j<t} ρʲ` together with
/// `ρ < 1`, driving `K` with the IPSG pre-conditioner update on rows drawn
/// uniformly from the whole dataset.
pub fn verify_lemma1(ds: &Dataset, k0: &Matrix, cfg: &Lemma1Config) -> Result<Lemma1Report> {
    let a = &ds.a;
    let (n, d) = (a.rows(), a.cols());
    check_positive("alpha", cfg.alpha)?;
    check_positive("beta", cfg.beta)?;
    if cfg.trials < 2 {
        return Err(Error::invalid("pre-conditioner check needs at least two trials"));
    }
    let max_lambda = a.row_iter().map(|r| dot(r, r)).fold(0.0, f64::max);
    let limit = 2.0 / (max_lambda + cfg.beta);
    if cfg.alpha >= limit {
        return Err(Error::domain(format!(
            "alpha = {} violates alpha < min_i 2/(Lambda_i + beta) = {limit:e}",
            cfg.alpha
        )));
    }
    let k_beta = compute_kbeta(a, cfg.beta)?;
    let (rho, _, c2) = compute_rho_c1_c2(a, cfg.alpha, cfg.beta, &k_beta)?;
    let rho = rho + cfg.rho_offset;
    let k0_err = spectral_norm(&k0.sub(&k_beta)?)?;

    let t_len = cfg.horizon + 1;
    let mut stats = vec![Welford::default(); t_len];
    let mut scratch = vec![0.0; d];
    let mut rmat = Matrix::zeros(d, d);
    for trial in 0..cfg.trials {
        let mut rng = stream(derive_seed(cfg.seed, trial as u64), 0);
        let mut k = k0.clone();
        for t in 0..t_len {
            if t > 0 {
                let i = sample_uniform(&mut rng, n)?;
                precond_residuals_into(&k, a.row(i), cfg.beta, &mut scratch, &mut rmat);
                for (kv, rv) in k.as_mut_slice().iter_mut().zip(rmat.as_slice()) {
                    *kv -= cfg.alpha * rv;
                }
            }
            stats[t].push(spectral_norm(&k.sub(&k_beta)?)?);
        }
    }

    let mut rows = Vec::with_capacity(t_len);
    let mut worst_margin = f64::INFINITY;
    let mut partial = 0.0; // Σ_{j<t} ρʲ
    for t in 0..t_len {
        let (mean, std_err) = (stats[t].mean, stats[t].std_err());
        let bound = rho.powi(t as i32) * k0_err + c2 * partial;
        let margin = bound + MC_SLACK * std_err - mean;
        worst_margin = worst_margin.min(margin);
        rows.push(Lemma1Row { t, mean, std_err, bound, ok: margin >= 0.0 });
        partial += rho.powi(t as i32);
    }
    let passed = rho < 1.0 && rows.iter().all(|r| r.ok);
    Ok(Lemma1Report { rho, c2, ktilde0_norm: k0_err, rows, worst_margin, passed })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepReport {
    pub t: u64,
    pub z_sq: f64,
    /// Monte Carlo mean of `‖z(t+1)‖²` and its standard error.
    pub mc_mean: f64,
    pub mc_std_err: f64,
    /// Exact conditional expectation by enumerating every row.
    pub exact: f64,
    /// `R1(t)‖z(t)‖² + R2(t)`.
    pub bound: f64,
    pub passed: bool,
}

/// One-step check of `E‖z(t+1)‖² ≤ R1(t)‖z(t)‖² + R2(t)` from a fixed
/// `(x(t), K(t))`.
pub fn verify_step_recursion(
    ds: &Dataset,
    params: IpsgParams,
    point: &SeriesPoint,
    x_t: &[f64],
    k_t: &Matrix,
    trials: usize,
    seed: u64,
) -> Result<StepReport> {
    params.validate()?;
    if trials < 2 {
        return Err(Error::invalid("step check needs at least two trials"));
    }
    let x_star = ds.minimizer()?;
    let next_err = |row: usize| -> Result<f64> {
        let sample = GradientSample::from_row(x_t, k_t, ds.a.row(row), ds.b[row], params.beta)?;
        let mut st = IpsgState::new(x_t.to_vec(), k_t.clone(), params)?;
        st.apply(&sample)?;
        let z = crate::linalg::vec_sub(&st.x, &x_star);
        Ok(dot(&z, &z))
    };

    let n = ds.n_rows();
    let per_row = (0..n).map(next_err).collect::<Result<Vec<_>>>()?;
    let exact = per_row.iter().sum::<f64>() / n as f64;

    let mut rng = stream(seed, 0x57e9);
    let mut mc = Welford::default();
    for _ in 0..trials {
        mc.push(per_row[sample_uniform(&mut rng, n)?]);
    }
    let (mc_mean, mc_std_err) = (mc.mean, mc.std_err());

    let z = crate::linalg::vec_sub(x_t, &x_star);
    let z_sq = dot(&z, &z);
    let bound = point.r1 * z_sq + point.r2;
    let tiny = 1e-12 * (bound.abs() + z_sq);
    Ok(StepReport {
        t: point.t,
        z_sq,
        mc_mean,
        mc_std_err,
        exact,
        bound,
        passed: mc_mean <= bound + MC_SLACK * mc_std_err + tiny && exact <= bound + tiny,
    })
}

/// Parameters under which the expected error contracts, found by the
/// recipe of the convergence argument: pick `α` below both `ᾱ` and the
/// limit of `C6(t)/C5(t)`, then the first `T` with `δ̄(T) > 0`, then
/// `δ = δ_frac·δ̄(T)`.
#[derive(Clone, Debug, Serialize)]
pub struct ContractionRegime {
    pub alpha: f64,
    pub delta: f64,
    pub t_start: u64,
    pub report: ConstantsReport,
    /// `(t, R1(t))` on the sampled grid at and beyond `t_start`.
    pub r1_samples: Vec<(u64, f64)>,
    pub contracts: bool,
}

/// Geometric grid `0, 1, 2, 4, …` up to `limit`, plus `limit` itself.
pub fn doubling_grid(limit: u64) -> Vec<u64> {
    let mut ts = vec![0];
    let mut t = 1;
    while t < limit {
        ts.push(t);
        t *= 2;
    }
    ts.push(limit);
    ts
}

pub fn find_contraction_regime(
    ds: &Dataset,
    beta: f64,
    alpha_frac: f64,
    delta_frac: f64,
    t_limit: u64,
    noise: &NoiseBounds,
) -> Result<ContractionRegime> {
    // α-independent limits: C5(∞) and C6(∞)
    let probe = ConstantsReport::compute(ds, IpsgParams { alpha: 1e-12, delta: 1.0, beta }, None)?;
    let nf = ds.n_rows() as f64;
    let c5_inf = 2.0 * probe.c1 * noise.e2 * probe.s1 / nf * probe.k_beta_norm;
    let c6_inf = 2.0 * probe.sd / (probe.sd + nf * beta);
    let alpha_cap = if c5_inf > 0.0 { c6_inf / c5_inf } else { f64::INFINITY };
    let alpha = alpha_frac * probe.alpha_bar.min(alpha_cap);

    let rep = ConstantsReport::compute(ds, IpsgParams { alpha, delta: 1.0, beta }, None)?;
    let grid = doubling_grid(t_limit);
    let series = compute_series(&rep, noise, &grid)?;
    let start = series
        .iter()
        .find(|p| p.c6 - alpha * p.c5 > 0.0 && p.delta_bar > 0.0)
        .ok_or_else(|| Error::Verification(format!("no T <= {t_limit} with delta_bar(T) > 0")))?;
    let t_start = start.t;
    let delta = delta_frac * start.delta_bar;

    let rep = ConstantsReport::compute(ds, IpsgParams { alpha, delta, beta }, None)?;
    let mut later: Vec<u64> = grid.iter().copied().filter(|&t| t >= t_start).collect();
    let mut t = t_limit.max(1);
    while t < 1_000_000_000 {
        t *= 10;
        later.push(t);
    }
    let samples = compute_series(&rep, noise, &later)?;
    let r1_samples: Vec<(u64, f64)> = samples.iter().map(|p| (p.t, p.r1)).collect();
    let contracts = r1_samples.iter().all(|&(_, r)| r > 0.0 && r < 1.0);
    let report = rep.with_noise(*noise, &later)?;
    Ok(ContractionRegime { alpha, delta, t_start, report, r1_samples, contracts })
}

/// Settings for [`verification_suite`].
#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub lemma_trials: usize,
    pub lemma_horizon: usize,
    pub step_trials: usize,
    pub rho_offset: f64,
    /// Overrides the automatically chosen `α` for the recursion checks.
    pub alpha: Option<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 2024,
            lemma_trials: 2000,
            lemma_horizon: 200,
            step_trials: 20_000,
            rho_offset: 0.0,
            alpha: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, outcome: Result<(bool, String)>) {
        let (passed, detail) = match outcome {
            Ok(v) => v,
            Err(e) => (false, e.to_string()),
        };
        self.checks.push(CheckOutcome { name: name.to_string(), passed, detail });
    }
}

/// Unbiasedness, pre-conditioner convergence, one-step recursion and limit
/// bound on the built-in problems.
pub fn verification_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    use crate::presets::Builtin;
    let mut report = SuiteReport { checks: Vec::new() };
    let beta = 1.0;

    let small = Builtin::Rand20x5.dataset()?;
    let wide = Builtin::Rand50x8.dataset()?;
    let consistent = Builtin::Consistent40x4.dataset()?;

    for ds in [&wide, &small] {
        report.push(&format!("unbiasedness/{}", ds.name), (|| {
            let s1 = crate::linalg::sym_extreme_eigs(&gram(&ds.a), 1e-10)?.0;
            let mut rng = stream(opts.seed, 0xb1a5);
            let mut worst: f64 = 0.0;
            let mut ok = true;
            for _ in 0..20 {
                let x = random_unit(&mut rng, ds.dim()).iter().map(|v| 3.0 * v).collect::<Vec<_>>();
                let r = verify_unbiasedness(ds, &x, s1, 1e-12)?;
                worst = worst.max(r.rel_err);
                ok &= r.passed;
            }
            Ok((ok, format!("worst relative error {worst:e} over 20 points")))
        })());
    }

    report.push("lemma1/rand20x5", (|| {
        let max_lambda = small.a.row_iter().map(|r| dot(r, r)).fold(0.0, f64::max);
        let cfg = Lemma1Config {
            alpha: 0.9 * 2.0 / (max_lambda + beta),
            beta,
            horizon: opts.lemma_horizon,
            trials: opts.lemma_trials,
            seed: opts.seed,
            rho_offset: opts.rho_offset,
        };
        let r = verify_lemma1(&small, &Matrix::zeros(small.dim(), small.dim()), &cfg)?;
        Ok((
            r.passed,
            format!("rho = {:.6}, C2 = {:.3e}, worst margin {:.3e}", r.rho, r.c2, r.worst_margin),
        ))
    })());

    let noise = estimate_noise_bounds(&small, &small.minimizer()?, DEFAULT_PROBES, opts.seed)?;
    report.push("recursion/rand20x5", (|| {
        let (regime, params) = match opts.alpha {
            None => {
                let regime = find_contraction_regime(&small, beta, 0.5, 0.5, 10_000, &noise)?;
                let p = IpsgParams { alpha: regime.alpha, delta: regime.delta, beta };
                (Some(regime), p)
            }
            Some(alpha) => {
                let rep = ConstantsReport::compute(&small, IpsgParams { alpha, delta: 1.0, beta }, None)?;
                if alpha >= rep.alpha_bar {
                    return Err(Error::domain(format!(
                        "alpha = {alpha} is not below alpha_bar = {:e}",
                        rep.alpha_bar
                    )));
                }
                (None, IpsgParams { alpha, delta: 1e-3, beta })
            }
        };
        let t_start = regime.as_ref().map_or(0, |r| r.t_start);
        let states = warm_states(&small, params, t_start, opts.seed)?;
        let rep = ConstantsReport::compute(&small, params, None)?;
        let ts: Vec<u64> = states.iter().map(|s| s.0).collect();
        let points = compute_series(&rep, &noise, &ts)?;
        let mut ok = true;
        let mut details = Vec::new();
        for ((t, x, k), p) in states.iter().zip(&points) {
            let r = verify_step_recursion(&small, params, p, x, k, opts.step_trials, derive_seed(opts.seed, *t))?;
            ok &= r.passed;
            details.push(format!("t={t}: {:.3e} <= {:.3e}", r.mc_mean, r.bound));
        }
        Ok((ok, details.join("; ")))
    })());

    report.push("limit/consistent40x4", (|| {
        let params = Builtin::Consistent40x4.ipsg();
        let noise = estimate_noise_bounds(&consistent, &consistent.minimizer()?, DEFAULT_PROBES, opts.seed)?;
        let rep = ConstantsReport::compute(&consistent, params, None)?;
        let bound = limit_error_bound(&rep, &noise, params.alpha, params.delta)?;
        Ok((bound == 0.0, format!("limit bound {bound:e} with V1 = {:e}", noise.v1)))
    })());

    Ok(report)
}

/// Three `(t, x(t), K(t))` snapshots of one IPSG run, taken at `T`, `2T`
/// and `3T` (with `T ≥ 50`).
pub fn warm_states(ds: &Dataset, params: IpsgParams, t_start: u64, seed: u64) -> Result<Vec<(u64, Vec<f64>, Matrix)>> {
    let base = t_start.max(50);
    let marks = [base, 2 * base, 3 * base];
    let d = ds.dim();
    let mut st = IpsgState::zero_k(vec![0.0; d], params)?;
    let mut rng = stream(seed, 0x3a7e);
    let mut out = Vec::new();
    for t in 1..=marks[2] {
        let i = sample_uniform(&mut rng, ds.n_rows())?;
        st.apply(&GradientSample::from_row(&st.x, &st.k, ds.a.row(i), ds.b[i], params.beta)?)?;
        if marks.contains(&t) {
            out.push((t, st.x.clone(), st.k.clone()));
        }
    }
    Ok(out)
}
