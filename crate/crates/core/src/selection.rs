//! Choosing the number of components by BIC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::estimation::{multi_start_fit, with_threads, FitConfig, FitResult};
use crate::model::{Dataset, ExpertDesign, Family};

/// Number of free parameters of a `g`-component model.
///
/// Gating contributes `(g - 1)(p + 1)`; each expert contributes `d + 2`
/// (Gaussian), `d + 1` (logistic, Poisson) or `(K - 1)(d + 1)` (multinomial),
/// where `d` is the expert design width.
pub fn param_count(g: usize, p: usize, family: Family, design: ExpertDesign) -> usize {
    let d = design.width(p);
    let gating = g.saturating_sub(1) * (p + 1);
    let per_expert = match family {
        Family::Gaussian => d + 2,
        Family::Logistic | Family::Poisson => d + 1,
        Family::Multinomial { k } => (k - 1) * (d + 1),
    };
    gating + g * per_expert
}

/// `-2 Q + dim ln n`; smaller is better.
pub fn bic_value(log_ql: f64, dim: usize, n: usize) -> f64 {
    -2.0 * log_ql + dim as f64 * (n as f64).ln()
}

/// BIC of a fitted model. Degenerate fits have no selectable BIC.
pub fn bic(fit: &FitResult, data: &Dataset) -> Result<f64> {
    if fit.degenerate {
        return Err(MoeError::Unsupported(
            "BIC of a degenerate (variance-floored) fit is not selectable".into(),
        ));
    }
    Ok(bic_value(fit.final_q(), fit.theta_hat.dim(), data.n()))
}

/// One row of the selection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub g: usize,
    pub log_ql: f64,
    pub dim: usize,
    pub bic: f64,
    pub converged: bool,
    pub degenerate: bool,
    /// Failure diagnostic when the fit for this `g` did not complete.
    pub error: Option<String>,
}

impl SelectionRow {
    pub fn eligible(&self) -> bool {
        self.error.is_none() && self.converged && !self.degenerate && self.bic.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub grid: Vec<usize>,
    pub rows: Vec<SelectionRow>,
    pub g_hat: usize,
    /// Fit for each `g` in the grid (`None` where it failed).
    pub fits: Vec<Option<FitResult>>,
}

impl SelectionReport {
    pub fn selected_fit(&self) -> &FitResult {
        let idx = self
            .grid
            .iter()
            .position(|&g| g == self.g_hat)
            .expect("g_hat is in the grid");
        self.fits[idx].as_ref().expect("selected fit exists")
    }

    /// Assembles the table and the BIC choice from per-`g` fit outcomes
    /// (`results[i]` belongs to `grid[i]`).
    pub fn from_fits(
        data: &Dataset,
        family: Family,
        design: ExpertDesign,
        grid: Vec<usize>,
        results: Vec<Result<FitResult>>,
    ) -> Result<SelectionReport> {
        if grid.len() != results.len() {
            return Err(MoeError::DimensionMismatch {
                what: "per-g fit results",
                expected: grid.len(),
                found: results.len(),
            });
        }
        let (rows, fits) = selection_rows(data, family, design, &grid, results);
        let g_hat = choose_g(&rows).ok_or_else(|| {
            MoeError::SelectionFailed(
                rows.iter()
                    .map(|r| match &r.error {
                        Some(e) => format!("g={}: {e}", r.g),
                        None => format!(
                            "g={}: converged={} degenerate={}",
                            r.g, r.converged, r.degenerate
                        ),
                    })
                    .collect(),
            )
        })?;
        Ok(SelectionReport {
            grid,
            rows,
            g_hat,
            fits,
        })
    }
}

/// BIC table rows for per-`g` fit outcomes, with the fits that succeeded.
pub fn selection_rows(
    data: &Dataset,
    family: Family,
    design: ExpertDesign,
    grid: &[usize],
    results: Vec<Result<FitResult>>,
) -> (Vec<SelectionRow>, Vec<Option<FitResult>>) {
    let mut rows = Vec::with_capacity(grid.len());
    let mut fits = Vec::with_capacity(grid.len());
    for (&g, r) in grid.iter().zip(results) {
        let dim = param_count(g, data.p(), family, design);
        match r {
            Ok(fit) => {
                rows.push(SelectionRow {
                    g,
                    log_ql: fit.final_q(),
                    dim,
                    bic: bic_value(fit.final_q(), dim, data.n()),
                    converged: fit.converged,
                    degenerate: fit.degenerate,
                    error: None,
                });
                fits.push(Some(fit));
            }
            Err(e) => {
                rows.push(SelectionRow {
                    g,
                    log_ql: f64::NAN,
                    dim,
                    bic: f64::NAN,
                    converged: false,
                    degenerate: false,
                    error: Some(e.to_string()),
                });
                fits.push(None);
            }
        }
    }
    (rows, fits)
}

/// Smallest `g` attaining the minimum BIC among eligible rows.
pub fn choose_g(rows: &[SelectionRow]) -> Option<usize> {
    let mut best: Option<&SelectionRow> = None;
    for r in rows.iter().filter(|r| r.eligible()) {
        best = match best {
            None => Some(r),
            Some(b) if r.bic < b.bic || (r.bic == b.bic && r.g < b.g) => Some(r),
            keep => keep,
        };
    }
    best.map(|r| r.g)
}

/// Multi-start fits for every `g` in `1..=max_g`, then the BIC choice.
/// Best multi-start fit for every `g` in `grid`, in grid order. With more
/// than one thread the values of `g` run in parallel.
pub fn fit_grid(
    data: &Dataset,
    grid: &[usize],
    family: Family,
    design: ExpertDesign,
    config: &FitConfig,
) -> Result<Vec<Result<FitResult>>> {
    config.validate()?;
    let inner = FitConfig {
        threads: 1,
        ..*config
    };
    let run = |&g: &usize| multi_start_fit(data, g, family, design, &inner);
    Ok(with_threads(config.threads, || {
        if config.threads > 1 {
            grid.par_iter().map(run).collect()
        } else {
            grid.iter().map(run).collect()
        }
    }))
}

pub fn select_g(
    data: &Dataset,
    max_g: usize,
    family: Family,
    design: ExpertDesign,
    config: &FitConfig,
) -> Result<SelectionReport> {
    if max_g == 0 {
        return Err(MoeError::InvalidConfig(
            "grid maximum G must be at least 1".into(),
        ));
    }
    let grid: Vec<usize> = (1..=max_g).collect();
    let results = fit_grid(data, &grid, family, design, config)?;
    SelectionReport::from_fits(data, family, design, grid, results)
}
