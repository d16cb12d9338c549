//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative discrepancy used by every gradient check in the workspace.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// How a term tensor contributes to a decomposed loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    /// `weight · Σ v`
    Sum,
    /// `weight · Σ v²`
    SquaredSum,
}

/// One additive piece of a loss, kept unreduced so finite differences can be
/// taken element by element before summation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm {
    pub value: Var,
    pub weight: f64,
    pub kind: TermKind,
}

impl LossTerm {
    pub fn sum(value: Var, weight: f64) -> Self {
        Self { value, weight, kind: TermKind::Sum }
    }

    pub fn squared(value: Var, weight: f64) -> Self {
        Self { value, weight, kind: TermKind::SquaredSum }
    }
}

/// Reduces decomposed terms to the scalar loss they describe.
pub fn reduce_terms(g: &mut Graph, terms: &[LossTerm]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for t in terms {
        let v = match t.kind {
            TermKind::Sum => t.value,
            TermKind::SquaredSum => g.square(t.value),
        };
        let s = g.sum(v);
        let s = g.scale(s, t.weight);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    total.ok_or(crate::error::NumError::NonScalarLoss(Vec::new()))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must build a scalar from the supplied input variables. When `elements`
/// is `None` every element of every input is checked; otherwise only the
/// listed `(input, element)` pairs are.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    step: f64,
    elements: Option<&[(usize, usize)]>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_decomposed_gradients(inputs, step, elements, |g, v| {
        Ok(vec![LossTerm::sum(f(g, v)?, 1.0)])
    })
}

/// Like [`check_gradients`] for a loss given as unreduced terms.
///
/// The central difference `f(x+h) − f(x−h)` is accumulated per element
/// (`(a⁺−a⁻)(a⁺+a⁻)` for squared terms) instead of subtracting two reduced
/// totals. The function and step are unchanged; this only removes the
/// cancellation that otherwise limits resolution to roughly `ε·|f|/h`.
pub fn check_decomposed_gradients<F>(
    inputs: &[Tensor],
    step: f64,
    elements: Option<&[(usize, usize)]>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Vec<LossTerm>>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let terms = f(&mut g, &vars)?;
    let loss = reduce_terms(&mut g, &terms)?;
    g.backward(loss)?;

    let all: Vec<(usize, usize)>;
    let targets = match elements {
        Some(e) => e,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let eval = |perturbed: &[Tensor]| -> Result<Vec<(Vec<f64>, f64, TermKind)>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let terms = f(&mut g, &vars)?;
        Ok(terms
            .iter()
            .map(|t| (g.value(t.value).data().to_vec(), t.weight, t.kind))
            .collect())
    };

    let mut entries = Vec::with_capacity(targets.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(input, element) in targets {
        let analytic = g.grad(vars[input]).map_or(0.0, |gr| gr[element]);
        let orig = work[input].data()[element];
        work[input].data_mut()[element] = orig + step;
        let plus = eval(&work)?;
        work[input].data_mut()[element] = orig - step;
        let minus = eval(&work)?;
        work[input].data_mut()[element] = orig;
        let mut diff = 0.0;
        for ((p, w, kind), (m, _, _)) in plus.iter().zip(&minus) {
            let part: f64 = match kind {
                TermKind::Sum => p.iter().zip(m).map(|(a, b)| a - b).sum(),
                TermKind::SquaredSum => p.iter().zip(m).map(|(a, b)| (a - b) * (a + b)).sum(),
            };
            diff += w * part;
        }
        let numeric = diff / (2.0 * step);
        entries.push(GradCheckEntry {
            input,
            element,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { entries })
}
