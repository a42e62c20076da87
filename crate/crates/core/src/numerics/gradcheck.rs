//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
/// The floor keeps near-zero gradients from turning truncation noise into
/// large ratios.
pub const REL_FLOOR: f64 = 1e-2;

/// Something with named flat parameter blocks, a scalar objective and an
/// analytic gradient for each block.
pub trait Checkable {
    fn blocks(&self) -> usize;
    fn block_name(&self, k: usize) -> String;
    fn block_mut(&mut self, k: usize) -> &mut [f64];
    fn objective(&self) -> f64;
    /// Analytic gradient of [`Checkable::objective`], one vector per block.
    fn gradients(&self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub step: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(f, "{:>28}  max rel err {:.3e} (index {})", e.name, e.max_rel_error, e.worst_index)?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences for every scalar
/// of every block. `max_per_block` limits the number of checked coordinates
/// (evenly strided) for large blocks; `None` checks all of them.
pub fn grad_check<C: Checkable + ?Sized>(op: &mut C, step: f64, max_per_block: Option<usize>) -> Result<GradReport> {
    if !(step > 0.0) {
        return Err(Error::Domain(format!("grad_check step must be positive, got {step}")));
    }
    let analytic = op.gradients()?;
    let mut entries = Vec::with_capacity(op.blocks());
    for k in 0..op.blocks() {
        let n = op.block_mut(k).len();
        let stride = match max_per_block {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst = 0.0;
        let mut worst_index = 0;
        for i in (0..n).step_by(stride) {
            let a = analytic[k][i];
            if !a.is_finite() {
                return Err(Error::Numeric(format!("non-finite analytic gradient in {}", op.block_name(k))));
            }
            let orig = op.block_mut(k)[i];
            op.block_mut(k)[i] = orig + step;
            let plus = op.objective();
            op.block_mut(k)[i] = orig - step;
            let minus = op.objective();
            op.block_mut(k)[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite numeric gradient in {}", op.block_name(k))));
            }
            let err = relative_error(a, numeric);
            if err > worst {
                worst = err;
                worst_index = i;
            }
        }
        entries.push(GradEntry { name: op.block_name(k), max_rel_error: worst, worst_index });
    }
    Ok(GradReport { entries, step })
}

/// Closure-based check for a single flat input.
pub fn grad_check_fn<F>(x: &[f64], analytic: &[f64], step: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    struct Wrap<'a, F> {
        x: Vec<f64>,
        analytic: &'a [f64],
        f: std::cell::RefCell<&'a mut F>,
    }
    impl<F: FnMut(&[f64]) -> f64> Checkable for Wrap<'_, F> {
        fn blocks(&self) -> usize {
            1
        }
        fn block_name(&self, _: usize) -> String {
            "x".into()
        }
        fn block_mut(&mut self, _: usize) -> &mut [f64] {
            &mut self.x
        }
        fn objective(&self) -> f64 {
            (self.f.borrow_mut())(&self.x)
        }
        fn gradients(&self) -> Result<Vec<Vec<f64>>> {
            Ok(vec![self.analytic.to_vec()])
        }
    }
    if analytic.len() != x.len() {
        return Err(Error::dim("analytic gradient length differs from input"));
    }
    let mut w = Wrap { x: x.to_vec(), analytic, f: std::cell::RefCell::new(&mut f) };
    Ok(grad_check(&mut w, step, None)?.max_rel_error())
}

/// Records backward steps during a forward pass and replays them in reverse.
pub struct BackwardChain<'a, G, T> {
    steps: Vec<Box<dyn FnOnce(T, &mut G) -> Result<T> + 'a>>,
}

impl<'a, G, T> Default for BackwardChain<'a, G, T> {
    fn default() -> Self {
        BackwardChain { steps: Vec::new() }
    }
}

impl<'a, G, T> BackwardChain<'a, G, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: impl FnOnce(T, &mut G) -> Result<T> + 'a) {
        self.steps.push(Box::new(step));
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Runs every recorded backward from last to first.
    pub fn run(self, grad_out: T, grads: &mut G) -> Result<T> {
        let mut g = grad_out;
        for step in self.steps.into_iter().rev() {
            g = step(g, grads)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let x = [0.3, -1.2];
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[1];
        assert!(grad_check_fn(&x, &[0.6, 3.0], 1e-3, f).unwrap() < 1e-8);
        assert!(grad_check_fn(&x, &[0.6, 2.0], 1e-3, f).unwrap() > 0.1);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(grad_check_fn(&[1.0], &[1.0], 0.0, |v| v[0]).is_err());
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let r = grad_check_fn(&[1.0], &[f64::NAN], 1e-3, |v| v[0]);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn chain_runs_in_reverse() {
        let mut chain: BackwardChain<Vec<&str>, f64> = BackwardChain::new();
        chain.push(|g, log| {
            log.push("first");
            Ok(g * 2.0)
        });
        chain.push(|g, log| {
            log.push("second");
            Ok(g + 1.0)
        });
        let mut log = Vec::new();
        assert_eq!(chain.run(1.0, &mut log).unwrap(), 4.0);
        assert_eq!(log, vec!["second", "first"]);
    }
}
