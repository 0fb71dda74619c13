//! Homography refinement: descend the configured loss through the
//! differentiable warp, starting from a matched template's homography.
//!
//! The relative transform H̄ starts at identity and the final estimate is
//! H = H_k*·H̄. Steps are taken on H̄'s 8-parameter vector with a diagonal
//! preconditioner (translation-like and perspective-like entries scaled by
//! the output diagonal) and a backtracking line search that only accepts a
//! strict decrease, so the loss trajectory is non-increasing by
//! construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::loss::{topo_loss, TopoLossConfig};
use crate::raster::{
    iou, loss_gradient_full, to_onehot, warp_labels, warp_onehot, IouReport, OneHotMap,
    SemanticMap,
};

fn default_max_iters() -> u32 {
    200
}

fn default_initial_step() -> f64 {
    1e-2
}

fn default_step_shrink() -> f64 {
    0.5
}

fn default_grad_tolerance() -> f64 {
    1e-7
}

fn default_loss_tolerance() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    #[serde(default)]
    pub loss: TopoLossConfig,
    #[serde(default = "default_max_iters")]
    pub max_iters: u32,
    /// Step length in preconditioned parameter units; roughly the fraction
    /// of the output diagonal a translation step moves.
    #[serde(default = "default_initial_step")]
    pub initial_step: f64,
    #[serde(default = "default_step_shrink")]
    pub step_shrink: f64,
    #[serde(default = "default_grad_tolerance")]
    pub grad_tolerance: f64,
    #[serde(default = "default_loss_tolerance")]
    pub loss_tolerance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            loss: TopoLossConfig::default(),
            max_iters: default_max_iters(),
            initial_step: default_initial_step(),
            step_shrink: default_step_shrink(),
            grad_tolerance: default_grad_tolerance(),
            loss_tolerance: default_loss_tolerance(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.max_iters < 1 {
            return Err(Error::InvalidParameter("max_iters must be ≥ 1".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::InvalidParameter("initial_step must be > 0".into()));
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(Error::InvalidParameter(
                "step_shrink must lie in (0, 1)".into(),
            ));
        }
        if !(self.grad_tolerance > 0.0) || !(self.loss_tolerance > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    /// Final estimate `compose(H_k*, H̄)`.
    pub h: Homography,
    pub h_bar: Homography,
    /// Loss at the start and after each accepted step; non-increasing.
    pub trajectory: Vec<f64>,
    pub iterations: u32,
    pub converged: bool,
}

/// Smallest line-search step before the search gives up.
const MIN_STEP: f64 = 1e-14;
/// Line search may grow the step back up to this multiple of the initial.
const MAX_STEP_GROWTH: f64 = 16.0;

const IDENTITY_P8: [f64; 8] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

struct Objective<'a> {
    src: &'a OneHotMap,
    target: &'a OneHotMap,
    h_k: &'a Homography,
    loss: &'a TopoLossConfig,
    out_size: (u32, u32),
}

impl Objective<'_> {
    fn total(&self, p: &[f64; 8]) -> Result<Homography> {
        let h_bar = Homography::from_param8(*p)?;
        Homography::from_matrix(self.h_k.matrix() * h_bar.matrix())
    }

    fn value(&self, p: &[f64; 8]) -> Result<f64> {
        let total = self.total(p)?;
        let warped = warp_onehot(self.src, &total, self.out_size)?;
        topo_loss(&warped, self.target, self.loss)
    }

    /// Loss and its gradient with respect to the 8 parameters of H̄,
    /// chained through the composition `H = H_k*·H̄`.
    fn value_and_grad(&self, p: &[f64; 8]) -> Result<(f64, [f64; 8])> {
        let total = self.total(p)?;
        let (loss, full) = loss_gradient_full(self.src, self.target, &total, self.loss)?;
        let g_bar = self.h_k.matrix().transpose() * full;
        let mut g = [0.0; 8];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = g_bar[(i / 3, i % 3)];
        }
        Ok((loss, g))
    }
}

/// Refines the homography for `query`, starting from the matched template's
/// homography `h_k`, by line-searched gradient descent on H̄.
pub fn refine(
    query: &SemanticMap,
    birdseye: &SemanticMap,
    h_k: &Homography,
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    cfg.validate()?;
    if query.class_count() != birdseye.class_count() {
        return Err(Error::InvalidInput(format!(
            "class count mismatch: query {} vs bird's-eye {}",
            query.class_count(),
            birdseye.class_count()
        )));
    }
    h_k.invert()?; // a degenerate starting homography is a hard error

    let src = to_onehot(birdseye);
    let target = to_onehot(query);
    let out_size = (query.width(), query.height());
    let obj = Objective {
        src: &src,
        target: &target,
        h_k,
        loss: &cfg.loss,
        out_size,
    };

    let diag = ((out_size.0 as f64).powi(2) + (out_size.1 as f64).powi(2)).sqrt();
    let sc = [1.0, 1.0, diag, 1.0, 1.0, diag, 1.0 / diag, 1.0 / diag];

    let mut p = IDENTITY_P8;
    let (mut f, mut g) = obj.value_and_grad(&p)?;
    let mut trajectory = vec![f];
    let mut step = cfg.initial_step;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        let gs: Vec<f64> = (0..8).map(|i| g[i] * sc[i]).collect();
        let norm = gs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < cfg.grad_tolerance {
            converged = true;
            break;
        }
        // Steepest descent in the preconditioned metric, unit scaled length.
        let dir: Vec<f64> = (0..8).map(|i| -gs[i] / norm * sc[i]).collect();

        let at = |t: f64| -> Option<([f64; 8], f64)> {
            let mut cand = p;
            for i in 0..8 {
                cand[i] += t * dir[i];
            }
            // Degenerate candidates count as non-descent.
            obj.value(&cand).ok().map(|fc| (cand, fc))
        };
        let mut accepted = None;
        while step >= MIN_STEP {
            match at(step) {
                Some((cand, fc)) if fc < f => {
                    accepted = Some((cand, fc));
                    break;
                }
                _ => step *= cfg.step_shrink,
            }
        }
        // Expand along the same direction while the loss keeps dropping;
        // plain steepest descent crawls through valleys without this.
        if let Some((_, fc0)) = accepted {
            let mut best = fc0;
            let mut t = step;
            for _ in 0..30 {
                t /= cfg.step_shrink;
                match at(t) {
                    Some((cand, fc)) if fc < best => {
                        best = fc;
                        step = t;
                        accepted = Some((cand, fc));
                    }
                    _ => break,
                }
            }
        }
        let Some((cand, fc)) = accepted else {
            converged = true; // no descent direction left at any step size
            break;
        };
        let improvement = f - fc;
        p = cand;
        f = fc;
        trajectory.push(f);
        iterations += 1;
        if improvement < cfg.loss_tolerance {
            converged = true;
            break;
        }
        (f, g) = {
            let (fv, gv) = obj.value_and_grad(&p)?;
            // The gradient call recomputes the loss; keep the line-search
            // value, they agree to roundoff.
            debug_assert!((fv - f).abs() <= 1e-9 * f.abs().max(1.0));
            (f.min(fv), gv)
        };
        step = (step / cfg.step_shrink).min(cfg.initial_step * MAX_STEP_GROWTH);
    }

    let h_bar = Homography::from_param8(p)?;
    Ok(RefineResult {
        h: h_k.compose(&h_bar),
        h_bar,
        trajectory,
        iterations,
        converged,
    })
}

/// Multi-start refinement: refine from every candidate homography and keep
/// the lowest final loss (first on ties). Returns the winning candidate's
/// index alongside its result.
pub fn refine_best(
    query: &SemanticMap,
    birdseye: &SemanticMap,
    candidates: &[Homography],
    cfg: &RefineConfig,
) -> Result<(usize, RefineResult)> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate homographies".into()));
    }
    let mut best: Option<(usize, RefineResult)> = None;
    for (i, h_k) in candidates.iter().enumerate() {
        let r = refine(query, birdseye, h_k, cfg)?;
        let final_loss = *r.trajectory.last().unwrap();
        let better = match &best {
            None => true,
            Some((_, b)) => final_loss < *b.trajectory.last().unwrap(),
        };
        if better {
            best = Some((i, r));
        }
    }
    Ok(best.unwrap())
}

/// IoU of the refined estimate against the query's ground-truth map.
pub fn evaluate_estimate(
    result: &RefineResult,
    birdseye: &SemanticMap,
    query_gt: &SemanticMap,
) -> Result<IouReport> {
    let pred = warp_labels(birdseye, &result.h, (query_gt.width(), query_gt.height()))?;
    iou(&pred, query_gt)
}
