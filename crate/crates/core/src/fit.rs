//! Linear least-squares fits used to read physical parameters off spectra.
//!
//! Every model here is linear in its parameters, so each fit is one weighted
//! least-squares solve. Errors come from the linearized covariance
//! `σ² (XᵀWX)⁻¹` with `σ² = RSS/(n − p)`; exact fits report zero errors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: f64,
    pub error: f64,
}

/// Which points enter a momentum fit; bounds are on |k| and inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KWindow {
    pub k_min: f64,
    pub k_max: f64,
    /// Keep only the points at the two smallest distinct |k|.
    #[serde(default)]
    pub two_point: bool,
}

impl Default for KWindow {
    fn default() -> Self {
        KWindow {
            k_min: 0.0,
            k_max: PI,
            two_point: false,
        }
    }
}

impl KWindow {
    pub fn up_to(k_max: f64) -> Self {
        KWindow {
            k_max,
            ..KWindow::default()
        }
    }

    pub fn two_point(k_min: f64) -> Self {
        KWindow {
            k_min,
            k_max: PI,
            two_point: true,
        }
    }

    fn select(&self, points: &[FitPoint]) -> Vec<FitPoint> {
        let eps = 1e-12;
        let mut p: Vec<FitPoint> = points
            .iter()
            .copied()
            .filter(|p| p.x.abs() >= self.k_min - eps && p.x.abs() <= self.k_max + eps)
            .collect();
        if self.two_point {
            // The two smallest distinct |k|; ±k partners both stay.
            let mut mags: Vec<f64> = p.iter().map(|q| q.x.abs()).collect();
            mags.sort_by(|a, b| a.total_cmp(b));
            mags.dedup_by(|a, b| (*a - *b).abs() <= eps);
            if let Some(&cut) = mags.get(1) {
                p.retain(|q| q.x.abs() <= cut + eps);
            }
        }
        p
    }
}

/// One datum; `weight` multiplies its squared residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub x: f64,
    pub y: f64,
    #[serde(default = "unit")]
    pub weight: f64,
}

fn unit() -> f64 {
    1.0
}

impl FitPoint {
    pub fn new(x: f64, y: f64) -> Self {
        FitPoint { x, y, weight: 1.0 }
    }

    /// Weight 1/σ² from a standard error.
    pub fn with_error(x: f64, y: f64, sigma: f64) -> Self {
        FitPoint {
            x,
            y,
            weight: 1.0 / (sigma * sigma),
        }
    }
}

pub fn points(xy: &[(f64, f64)]) -> Vec<FitPoint> {
    xy.iter().map(|&(x, y)| FitPoint::new(x, y)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: String,
    pub params: Vec<Param>,
    /// Weighted residual sum of squares.
    pub rss: f64,
    pub covariance: Vec<Vec<f64>>,
    pub n_points: usize,
    /// Points that entered, after windowing.
    pub used: Vec<FitPoint>,
    pub window: Option<KWindow>,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> f64 {
        self.get(name).map(|p| p.value).unwrap_or(f64::NAN)
    }

    pub fn error(&self, name: &str) -> f64 {
        self.get(name).map(|p| p.error).unwrap_or(f64::NAN)
    }
}

/// Weighted least squares of `y ≈ Σ_j c_j f_j(x)`.
pub fn linear_lsq(model: &str, names: &[&str], basis: &[&dyn Fn(f64) -> f64], pts: &[FitPoint]) -> Result<FitResult> {
    let p = names.len();
    let n = pts.len();
    if n < p {
        return Err(Error::Fit(format!("{model}: {n} points for {p} parameters")));
    }
    if pts
        .iter()
        .any(|q| !(q.x.is_finite() && q.y.is_finite() && q.weight.is_finite() && q.weight > 0.0))
    {
        return Err(Error::Fit(format!("{model}: non-finite input or nonpositive weight")));
    }
    let x = DMatrix::from_fn(n, p, |i, j| basis[j](pts[i].x) * pts[i].weight.sqrt());
    let y = DVector::from_fn(n, |i, _| pts[i].y * pts[i].weight.sqrt());
    let normal = x.transpose() * &x;
    let inv = normal.clone().try_inverse().ok_or_else(|| {
        Error::Fit(format!(
            "{model}: singular design (points do not determine the parameters)"
        ))
    })?;
    let svd = x.clone().svd(true, true);
    let c = svd.solve(&y, 1e-14).map_err(|e| Error::Fit(format!("{model}: {e}")))?;
    let r = &y - &x * &c;
    let rss = r.norm_squared();
    let dof = n - p;
    let s2 = if dof > 0 { rss / dof as f64 } else { 0.0 };
    let cov = inv * s2;
    let params = names
        .iter()
        .enumerate()
        .map(|(j, name)| Param {
            name: name.to_string(),
            value: c[j],
            error: cov[(j, j)].max(0.0).sqrt(),
        })
        .collect();
    Ok(FitResult {
        model: model.to_string(),
        params,
        rss,
        covariance: (0..p).map(|i| (0..p).map(|j| cov[(i, j)]).collect()).collect(),
        n_points: n,
        used: pts.to_vec(),
        window: None,
    })
}

/// `ξ(k) = v |sin k|` over points `(k, ξ − ξ₀)`.
pub fn fit_sine_dispersion(levels: &[FitPoint], window: KWindow) -> Result<FitResult> {
    let pts = window.select(levels);
    if pts.iter().filter(|p| p.x.sin().abs() > 1e-12).count() == 0 {
        return Err(Error::Fit(
            "sine dispersion: no point with sin k ≠ 0 in the window".into(),
        ));
    }
    if pts.len() < 2 && !window.two_point {
        return Err(Error::Fit(
            "sine dispersion: fewer than two points in the window".into(),
        ));
    }
    let mut r = linear_lsq("v|sin k|", &["v"], &[&|k: f64| k.sin().abs()], &pts)?;
    r.window = Some(window);
    Ok(r)
}

/// `v_L = v_∞ + b/L` over points `(L, v_L)`.
pub fn extrapolate_velocity(v_by_l: &[FitPoint]) -> Result<FitResult> {
    if v_by_l.len() < 3 {
        return Err(Error::Fit(format!(
            "velocity extrapolation needs ≥ 3 sizes, got {}",
            v_by_l.len()
        )));
    }
    linear_lsq("v_inf + b/L", &["v_inf", "b"], &[&|_| 1.0, &|l: f64| 1.0 / l], v_by_l)
}

/// `ξ₀/L = e₀ + d₁/L²` over points `(L, ξ₀)`. The velocity follows from
/// `|d₁| = π c v / 6` with `c = 1`; ξ₀ grows with the area law while the
/// finite-size correction lowers it, so d₁ itself comes out negative.
pub fn fit_groundlevel_scaling(xi0_by_l: &[FitPoint]) -> Result<FitResult> {
    if xi0_by_l.len() < 3 {
        return Err(Error::Fit(format!(
            "ground-level scaling needs ≥ 3 sizes, got {}",
            xi0_by_l.len()
        )));
    }
    let pts: Vec<FitPoint> = xi0_by_l
        .iter()
        .map(|p| FitPoint {
            x: p.x,
            y: p.y / p.x,
            weight: p.weight * p.x * p.x,
        })
        .collect();
    let mut r = linear_lsq(
        "xi0/L = e0 + d1/L^2",
        &["e0", "d1"],
        &[&|_| 1.0, &|l: f64| 1.0 / (l * l)],
        &pts,
    )?;
    let d1 = r.get("d1").unwrap().clone();
    r.params.push(Param {
        name: "v_cft".into(),
        value: cft_velocity(d1.value),
        error: 6.0 * d1.error / PI,
    });
    Ok(r)
}

/// `v = 6|d₁|/(π c)` at central charge 1.
pub fn cft_velocity(d1: f64) -> f64 {
    6.0 * d1.abs() / PI
}

/// `ξ(k) = a k²` over points `(k, ξ − ξ₀)`; also fits `2 J_eff sin²(k/2)` on
/// the same window and reports `J_eff`.
pub fn fit_quadratic(levels: &[FitPoint], window: KWindow) -> Result<FitResult> {
    let pts = window.select(levels);
    if pts.is_empty() {
        return Err(Error::Fit("quadratic: empty window".into()));
    }
    let mut r = linear_lsq("a k^2", &["a"], &[&|k: f64| k * k], &pts)?;
    let m = linear_lsq(
        "2 J_eff sin^2(k/2)",
        &["J_eff"],
        &[&|k: f64| 2.0 * (k / 2.0).sin().powi(2)],
        &pts,
    )?;
    r.params.push(m.params[0].clone());
    r.window = Some(window);
    Ok(r)
}

/// `ξ(k) = b |k|`, the linear companion to [`fit_quadratic`].
pub fn fit_linear_abs(levels: &[FitPoint], window: KWindow) -> Result<FitResult> {
    let pts = window.select(levels);
    if pts.is_empty() {
        return Err(Error::Fit("linear: empty window".into()));
    }
    let mut r = linear_lsq("b|k|", &["b"], &[&|k: f64| k.abs()], &pts)?;
    r.window = Some(window);
    Ok(r)
}

/// Ratio of quadratic to linear residuals on one window; above 1 the linear
/// law describes the branch better.
pub fn quadratic_linear_ratio(levels: &[FitPoint], window: KWindow) -> Result<(f64, FitResult, FitResult)> {
    let q = fit_quadratic(levels, window)?;
    let l = fit_linear_abs(levels, window)?;
    let ratio = if l.rss > 0.0 {
        q.rss / l.rss
    } else if q.rss > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    Ok((ratio, q, l))
}

/// `ξ_S = ξ₀ + slope · S(S+N−2)` over points `(S, lowest ξ in sector S)`,
/// with `χ⊥ = 1/(2 · slope · L^d)`.
pub fn fit_tos(levels: &[FitPoint], l: f64, d: u32, n: u32) -> Result<FitResult> {
    let mut distinct: Vec<f64> = levels.iter().map(|p| p.x).collect();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Fit(format!(
            "tower of states needs ≥ 3 spin sectors, got {}",
            distinct.len()
        )));
    }
    let nm2 = n as f64 - 2.0;
    let mut r = linear_lsq(
        "xi0 + slope S(S+N-2)",
        &["xi0", "slope"],
        &[&|_| 1.0, &|s: f64| s * (s + nm2)],
        levels,
    )?;
    let slope = r.get("slope").unwrap().clone();
    let chi = chi_perp(slope.value, l, d);
    r.params.push(Param {
        name: "chi_perp".into(),
        value: chi,
        error: chi * slope.error / slope.value.abs(),
    });
    Ok(r)
}

/// `χ⊥ = 1/(2 · slope · L^d)`.
pub fn chi_perp(slope: f64, l: f64, d: u32) -> f64 {
    1.0 / (2.0 * slope * l.powi(d as i32))
}

/// True when the values increase strictly with their keys.
pub fn is_monotone_increasing(points: &[FitPoint]) -> bool {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.x.total_cmp(&b.x));
    p.windows(2).all(|w| w[1].y > w[0].y)
}
