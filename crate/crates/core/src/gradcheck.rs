//! Central finite-difference checks of analytic gradients.
//!
//! The check works on anything whose trainable state lives in a
//! [`ParameterStore`]: the caller supplies a scalar loss evaluated at the
//! current parameter values and a routine that writes analytic gradients
//! into the store. Inputs can be checked the same way by registering them
//! as parameters of a throwaway store.
//!
//! Entries whose stencil straddles a kink (a ReLU input crossing zero) are
//! not differentiable at the step size and are counted separately. At a
//! kink the two one-sided slopes differ by twice the central-difference
//! error; on a smooth loss they differ only by `step * f''`, so a wrong
//! analytic gradient is never mistaken for a kink.

use std::fmt;

use rand::seq::index::sample;

use crate::error::Result;
use crate::params::ParameterStore;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is zero are judged by absolute error.
    pub floor: f64,
    /// Check a random subset of this many entries per block; `None` checks all.
    pub max_entries_per_block: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries_per_block: None,
            seed: 0,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub entries_checked: usize,
    /// Entries excluded because the stencil straddles a kink.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl BlockReport {
    fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance && 2 * self.kinks < self.entries_checked.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.blocks.iter().map(|b| b.kinks).sum()
    }

    /// Blocks over tolerance, or with half or more of their entries at kinks.
    pub fn failing_blocks(&self) -> impl Iterator<Item = &BlockReport> {
        let tol = self.tolerance;
        self.blocks.iter().filter(move |b| !b.passes(tol))
    }

    pub fn passed(&self) -> bool {
        self.failing_blocks().next().is_none()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} (max rel. error {:.3e}, tolerance {:.0e})",
            self.label,
            if self.passed() { "ok" } else { "FAILED" },
            self.max_rel_error(),
            self.tolerance
        )?;
        for b in &self.blocks {
            let mark = if b.passes(self.tolerance) { "ok" } else { "FAIL" };
            write!(
                f,
                "  {mark:4} {:40} entries={:<6} rel={:.3e} abs={:.3e}",
                b.name, b.entries_checked, b.max_rel_error, b.max_abs_error
            )?;
            if b.kinks > 0 {
                write!(f, " kinks={}", b.kinks)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter block of `store`. Parameter values are restored afterwards;
/// the store's gradient buffers hold the analytic gradients on return.
pub fn gradient_check<L, G>(
    label: &str,
    store: &mut ParameterStore,
    mut loss: L,
    mut analytic: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParameterStore) -> Result<f64>,
    G: FnMut(&mut ParameterStore) -> Result<()>,
{
    store.zero_grads();
    analytic(store)?;
    let center = loss(store)?;

    let ids: Vec<_> = store.ids().collect();
    let mut blocks = Vec::with_capacity(ids.len());
    for (block, id) in ids.into_iter().enumerate() {
        let len = store.value(id).len();
        let entries: Vec<usize> = match opts.max_entries_per_block {
            Some(limit) if limit < len => {
                let mut rng = substream(opts.seed, Stream::Test, &[block as u64]);
                let mut picked = sample(&mut rng, len, limit).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        let mut report = BlockReport {
            name: store.get(id).name.clone(),
            entries_checked: entries.len(),
            kinks: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in entries {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + opts.step;
            let plus = loss(store)?;
            store.value_mut(id).data_mut()[i] = original - opts.step;
            let minus = loss(store)?;
            store.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let exact = store.grad(id).data()[i];
            let abs = (exact - numeric).abs();
            let rel = relative_error(exact, numeric, opts.floor);
            let one_sided_gap = ((plus - center) - (center - minus)).abs() / opts.step;
            if rel >= opts.tolerance && one_sided_gap >= abs {
                report.kinks += 1;
                continue;
            }
            // NaN must register as a failure.
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
            }
            report.max_abs_error = report.max_abs_error.max(abs);
        }
        blocks.push(report);
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        tolerance: opts.tolerance,
        blocks,
    })
}
