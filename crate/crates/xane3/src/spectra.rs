//! Canonical energy grid, edge-step normalization, finite-difference
//! derivatives, and the multi-scale Gaussian + sigmoid reconstruction basis.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{softplus, ParamStore, Tape, Tensor, Var};
use crate::error::{Result, XaneError};

pub const GRID_E_MIN: f64 = -30.0;
pub const GRID_E_MAX: f64 = 100.0;
pub const GRID_N: usize = 150;

/// Pre-edge fit window (linear) and post-edge fit window (quadratic), in eV
/// relative to the edge.
pub const PRE_EDGE_WINDOW: (f64, f64) = (-30.0, -10.0);
pub const POST_EDGE_WINDOW: (f64, f64) = (40.0, 100.0);

/// The fixed 150-point grid on [-30, 100] eV relative to the edge.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumGrid {
    energies: Vec<f64>,
}

impl Default for SpectrumGrid {
    fn default() -> Self {
        Self::canonical()
    }
}

impl SpectrumGrid {
    pub fn canonical() -> Self {
        Self::uniform(GRID_E_MIN, GRID_E_MAX, GRID_N)
    }

    pub fn uniform(e_min: f64, e_max: f64, n: usize) -> Self {
        assert!(n >= 2);
        let step = (e_max - e_min) / (n - 1) as f64;
        SpectrumGrid {
            energies: (0..n).map(|i| e_min + step * i as f64).collect(),
        }
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn n(&self) -> usize {
        self.energies.len()
    }

    pub fn spacing(&self) -> f64 {
        self.energies[1] - self.energies[0]
    }
}

/// A raw spectrum on an arbitrary ascending energy grid (absolute eV).
#[derive(Clone, Debug)]
pub struct RawSpectrum {
    pub energies: Vec<f64>,
    pub mu: Vec<f64>,
    pub e0: f64,
}

fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Vec<f64> {
    let n = xs.len();
    let cols = degree + 1;
    let a = DMatrix::from_fn(n, cols, |i, j| xs[i].powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    let sol = ata
        .lu()
        .solve(&atb)
        .expect("polyfit: singular normal equations");
    sol.iter().copied().collect()
}

fn polyval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    match xs.binary_search_by(|v| v.total_cmp(&x)) {
        Ok(i) => ys[i],
        Err(i) => {
            let i = i.clamp(1, xs.len() - 1);
            let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            ys[i - 1] + t * (ys[i] - ys[i - 1])
        }
    }
}

/// Edge-step normalization: shift to relative energies, remove the linear
/// pre-edge baseline, divide by the edge step (post-edge quadratic minus
/// pre-edge line at E = 0), and resample onto the canonical grid.
pub fn normalize_edge_step(raw: &RawSpectrum, grid: &SpectrumGrid) -> Result<Vec<f64>> {
    if raw.energies.len() < 4 || raw.energies.len() != raw.mu.len() {
        return Err(XaneError::InvalidArgument(
            "raw spectrum needs >= 4 aligned points".into(),
        ));
    }
    if raw.energies.windows(2).any(|w| w[1] <= w[0]) {
        return Err(XaneError::InvalidArgument(
            "raw energies must be strictly increasing".into(),
        ));
    }
    let rel: Vec<f64> = raw.energies.iter().map(|e| e - raw.e0).collect();
    let lo = *rel.first().unwrap();
    let hi = *rel.last().unwrap();
    if lo > GRID_E_MIN || hi < GRID_E_MAX {
        return Err(XaneError::GridNotCovered {
            have_lo: lo,
            have_hi: hi,
            need_lo: GRID_E_MIN,
            need_hi: GRID_E_MAX,
        });
    }

    let window =
        |range: (f64, f64)| -> (Vec<f64>, Vec<f64>) {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (i, &e) in rel.iter().enumerate() {
                if e >= range.0 && e <= range.1 {
                    xs.push(e);
                    ys.push(raw.mu[i]);
                }
            }
            (xs, ys)
        };
    let (pre_x, pre_y) = window(PRE_EDGE_WINDOW);
    if pre_x.len() < 3 {
        return Err(XaneError::FitWindow {
            window: "pre-edge",
            count: pre_x.len(),
        });
    }
    let (post_x, post_y) = window(POST_EDGE_WINDOW);
    if post_x.len() < 3 {
        return Err(XaneError::FitWindow {
            window: "post-edge",
            count: post_x.len(),
        });
    }
    let pre = polyfit(&pre_x, &pre_y, 1);
    let post = polyfit(&post_x, &post_y, 2);
    let step = polyval(&post, 0.0) - polyval(&pre, 0.0);
    if step.abs() <= 1e-6 {
        return Err(XaneError::DegenerateEdge(step));
    }
    let normed: Vec<f64> = rel
        .iter()
        .zip(&raw.mu)
        .map(|(&e, &m)| (m - polyval(&pre, e)) / step)
        .collect();
    Ok(grid
        .energies()
        .iter()
        .map(|&e| interp_linear(&rel, &normed, e))
        .collect())
}

/// Forward first differences and the second difference quotient. Exact for
/// constants (dy) and linears (d2y).
pub fn finite_derivatives(y: &[f64], grid: &SpectrumGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    if n < 3 || n != grid.n() {
        return Err(XaneError::InvalidArgument(format!(
            "finite_derivatives: length {} (grid {})",
            n,
            grid.n()
        )));
    }
    let e = grid.energies();
    let dy: Vec<f64> = (0..n - 1)
        .map(|i| (y[i + 1] - y[i]) / (e[i + 1] - e[i]))
        .collect();
    // spacing between successive dy sample midpoints
    let d2y: Vec<f64> = (0..n - 2)
        .map(|i| {
            let mid = 0.5 * ((e[i + 1] + e[i + 2]) - (e[i] + e[i + 1]));
            (dy[i + 1] - dy[i]) / mid
        })
        .collect();
    Ok((dy, d2y))
}

pub const BASIS_K: usize = 200;
pub const BASIS_SCALES: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 4.0];
pub const BASIS_PER_SCALE: usize = 40;

/// Multi-scale Gaussian basis plus sigmoid background. Widths are fixed;
/// centers and the background center/width are learnable.
#[derive(Clone, Debug)]
pub struct BasisSpec {
    /// K fixed widths in eV, sigma = scale * initial center spacing
    pub sigmas: Vec<f64>,
    /// initial center positions, eV
    pub centers_init: Vec<f64>,
    pub mu_bg_init: f64,
    /// raw value; effective width is softplus(raw)
    pub w_bg_raw_init: f64,
    pub use_background: bool,
}

impl BasisSpec {
    pub fn new(k: usize, per_scale: usize, use_background: bool) -> Self {
        assert_eq!(k, BASIS_SCALES.len() * per_scale);
        let spacing = (GRID_E_MAX - GRID_E_MIN) / (per_scale - 1) as f64;
        let mut sigmas = Vec::with_capacity(k);
        let mut centers = Vec::with_capacity(k);
        for &scale in BASIS_SCALES.iter() {
            for i in 0..per_scale {
                sigmas.push(scale * spacing);
                centers.push(GRID_E_MIN + spacing * i as f64);
            }
        }
        // w_bg = softplus(raw) = 2 eV at init
        let w_bg_raw = inverse_softplus(2.0);
        BasisSpec {
            sigmas,
            centers_init: centers,
            mu_bg_init: 0.0,
            w_bg_raw_init: w_bg_raw,
            use_background,
        }
    }

    pub fn default_full() -> Self {
        Self::new(BASIS_K, BASIS_PER_SCALE, true)
    }

    pub fn k(&self) -> usize {
        self.sigmas.len()
    }

    /// Number of coefficients the readout must produce.
    pub fn n_coeffs(&self) -> usize {
        self.k() + if self.use_background { 1 } else { 0 }
    }

    /// Register the learnable basis parameters.
    pub fn add_params(&self, store: &mut ParamStore) -> Result<()> {
        store.add("basis.centers", Tensor::col(self.centers_init.clone()))?;
        if self.use_background {
            store.add("basis.mu_bg", Tensor::scalar(self.mu_bg_init))?;
            store.add("basis.w_bg_raw", Tensor::scalar(self.w_bg_raw_init))?;
        }
        Ok(())
    }

    /// Differentiable design matrix of shape (n_coeffs, grid n): Gaussian
    /// rows then, if enabled, the logistic background row.
    pub fn eval_basis(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vars: &[Var],
        grid: &SpectrumGrid,
    ) -> Result<Var> {
        let k = self.k();
        let centers = vars[store
            .id("basis.centers")
            .ok_or_else(|| XaneError::Other("basis.centers not registered".into()))?];
        let e_row = tape.constant(Tensor::row(grid.energies().to_vec()))?;
        let diff = tape.sub(e_row, centers)?; // [K, n] via broadcast
        let inv_two_sigma2 = Tensor::col(
            self.sigmas
                .iter()
                .map(|s| -1.0 / (2.0 * s * s))
                .collect::<Vec<_>>(),
        );
        let coef = tape.constant(inv_two_sigma2)?;
        let d2 = tape.mul(diff, diff)?;
        let expo = tape.mul(d2, coef)?;
        let gauss = tape.exp(expo)?; // [K, n]
        if !self.use_background {
            return Ok(gauss);
        }
        let mu_bg = vars[store.id("basis.mu_bg").unwrap()];
        let w_raw = vars[store.id("basis.w_bg_raw").unwrap()];
        let w = tape.softplus(w_raw)?;
        let shifted = tape.sub(e_row, mu_bg)?; // [1, n]
        let scaled = tape.div(shifted, w)?;
        let bg = tape.sigmoid(scaled)?; // [1, n]
        let _ = k;
        tape.concat_rows(&[gauss, bg])
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    // x such that softplus(x) = y
    (y.exp() - 1.0).ln()
}

/// Linear combination of basis rows: coeffs [G, n_coeffs] x design
/// [n_coeffs, n] -> [G, n].
pub fn reconstruct(tape: &mut Tape, coeffs: Var, design: Var) -> Result<Var> {
    tape.matmul(coeffs, design)
}

/// Plain (non-tape) evaluation of the basis design matrix for tests and
/// least-squares fits.
pub fn eval_basis_plain(
    spec: &BasisSpec,
    centers: &[f64],
    mu_bg: f64,
    w_bg_raw: f64,
    grid: &SpectrumGrid,
) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(spec.n_coeffs());
    for (kk, &c) in centers.iter().enumerate() {
        let s = spec.sigmas[kk];
        rows.push(
            grid.energies()
                .iter()
                .map(|&e| (-((e - c) * (e - c)) / (2.0 * s * s)).exp())
                .collect(),
        );
    }
    if spec.use_background {
        let w = softplus(w_bg_raw);
        rows.push(
            grid.energies()
                .iter()
                .map(|&e| crate::autodiff::sigmoid((e - mu_bg) / w))
                .collect(),
        );
    }
    rows
}

/// Least-squares fit of a target onto the basis; returns (coeffs, residual
/// RMS). Independent of the tape path.
pub fn basis_least_squares(design_rows: &[Vec<f64>], target: &[f64]) -> (Vec<f64>, f64) {
    let k = design_rows.len();
    let n = target.len();
    let a = DMatrix::from_fn(n, k, |i, j| design_rows[j][i]);
    let b = DVector::from_column_slice(target);
    let svd = a.clone().svd(true, true);
    let coeffs = svd.solve(&b, 1e-12).expect("svd solve");
    let resid = &a * &coeffs - &b;
    let rms = (resid.norm_squared() / n as f64).sqrt();
    (coeffs.iter().copied().collect(), rms)
}
