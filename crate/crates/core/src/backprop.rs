//! Reverse sweeps over the four DAGs and a finite-difference verifier.
//!
//! Within one direction, vertex groups are visited in reverse. When a group
//! is reached every successor of its vertices has already been processed, so
//! the error at each `h` is complete:
//!
//! ```text
//! dĥ_v = Vᵀ·do_v + (∂h_v/∂ĥ_v)ᵀ·dh_v
//! da_v = dĥ_v ∘ [a_v > 0]
//! dh_p += Wᵀ·da_v                   for every predecessor p of v
//! ```
//!
//! and the weight gradients accumulate `da_v·x_vᵀ` (U), `da_v·h_pᵀ` (W) and
//! `do_v·ĥ_vᵀ` (V).

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{partition_labels, BlockGrid, DagPlan, Direction};
use crate::model::{
    forward_image, nll_loss, sample, stack, BranchParams, CrrnParams, DirectionTape, ForwardTape, ModelConfig,
};
use crate::tensor::{batchnorm_backward, conv2d_backward_parts, matvec_t_acc, outer_acc, Mode, Tensor};

/// Gradient of the loss with respect to every learnable tensor of a
/// [`CrrnParams`], with the same layout and names.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub branches: Vec<BranchParams>,
    pub out_bias: Tensor,
    per_direction: bool,
}

impl Gradients {
    pub fn zeros_like(params: &CrrnParams) -> Self {
        Self {
            branches: vec![BranchParams::zeros(&params.config); params.branches.len()],
            out_bias: Tensor::zeros(params.out_bias.shape()),
            per_direction: params.config.per_direction_params,
        }
    }

    /// Same order and names as [`CrrnParams::named_tensors`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, br) in self.branches.iter().enumerate() {
            let prefix = if self.per_direction {
                format!("{}.", Direction::ALL[i].short_name())
            } else {
                String::new()
            };
            out.extend(br.tensors().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        out.push(("b_o".to_string(), &self.out_bias));
        out
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.branches
            .iter_mut()
            .flat_map(|b| b.tensors_mut().into_iter().map(|(_, t)| t))
            .chain(std::iter::once(&mut self.out_bias))
    }

    pub fn global_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors_mut().for_each(|t| t.scale(alpha));
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        let others: Vec<&Tensor> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        if others.len() != self.branches.len() * 12 + 1 {
            return Err(Error::Config("gradient layouts differ".into()));
        }
        for (mine, theirs) in self.tensors_mut().zip(others) {
            mine.axpy(alpha, theirs)?;
        }
        Ok(())
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named_tensors()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n)
    }
}

fn add_branch(acc: &mut BranchParams, part: &BranchParams) -> Result<()> {
    for ((_, a), (_, p)) in acc.tensors_mut().into_iter().zip(part.tensors()) {
        a.axpy(1.0, p)?;
    }
    Ok(())
}

fn check_tape(tape: &ForwardTape, plans: &[DagPlan; 4], dlogits: &[Vec<f64>], params: &CrrnParams) -> Result<()> {
    let n = params.config.vertices();
    if tape.directions.len() != 4 {
        return Err(Error::IncompleteTape(format!(
            "{} of 4 directions recorded",
            tape.directions.len()
        )));
    }
    for (dt, plan) in tape.directions.iter().zip(plans) {
        if dt.direction != plan.direction {
            return Err(Error::IncompleteTape(format!(
                "expected {:?}, found {:?}",
                plan.direction, dt.direction
            )));
        }
        let covered: usize = dt.groups.iter().map(|g| g.vertices.len()).sum();
        if dt.vertices.len() != n || covered != n || dt.vertices.iter().any(|v| v.hidden.is_empty()) {
            return Err(Error::IncompleteTape(format!(
                "{:?} sweep is missing vertices",
                dt.direction
            )));
        }
    }
    if tape.inputs.len() != n || tape.logits.len() != n {
        return Err(Error::IncompleteTape("inputs or logits missing".into()));
    }
    let out = params.config.output_dim();
    if dlogits.len() != n || dlogits.iter().any(|d| d.len() != out) {
        return Err(Error::Shape {
            op: "backward_image logits gradient",
            left: vec![n, out],
            right: vec![dlogits.len()],
        });
    }
    Ok(())
}

fn backward_direction(
    dt: &DirectionTape,
    plan: &DagPlan,
    tape: &ForwardTape,
    params: &CrrnParams,
    dlogits: &[Vec<f64>],
) -> Result<BranchParams> {
    let config = &params.config;
    let branch = params.branch(plan.direction);
    let ctx = &branch.context;
    let res = &branch.residual;
    let (hidden, side) = (config.hidden_dim, config.side());
    let n = dt.vertices.len();
    let mut g = BranchParams::zeros(config);

    // Error arriving from the output head.
    let mut head = vec![vec![0.0; hidden]; n];
    for v in 0..n {
        let rec = &dt.vertices[v];
        let fused = if config.fuse_post_residual {
            &rec.hidden
        } else {
            &rec.hat
        };
        matvec_t_acc(&ctx.v, &dlogits[v], &mut head[v]);
        outer_acc(&mut g.context.v, &dlogits[v], fused);
    }
    let mut dh = if config.fuse_post_residual {
        std::mem::replace(&mut head, vec![vec![0.0; hidden]; n])
    } else {
        vec![vec![0.0; hidden]; n]
    };

    for group in dt.groups.iter().rev() {
        let b = group.vertices.len();
        let ups: Vec<&[f64]> = group.vertices.iter().map(|&v| dh[v].as_slice()).collect();
        let mut dsum = stack(&ups, &[1, side, side])?;
        for (d, s) in dsum.data_mut().iter_mut().zip(group.sum.data()) {
            if *s <= 0.0 {
                *d = 0.0;
            }
        }
        let (dz2, dscale2, dshift2) = batchnorm_backward(&group.bn2, &dsum)?;
        g.residual.bn2_scale.axpy(1.0, &dscale2)?;
        g.residual.bn2_shift.axpy(1.0, &dshift2)?;
        let mut dact1 = Vec::with_capacity(group.act1.len());
        for s in 0..b {
            let cg = conv2d_backward_parts(&sample(&group.act1, s), &res.conv2, &sample(&dz2, s))?;
            g.residual.conv2.axpy(1.0, &cg.kernels)?;
            g.residual.conv2_bias.axpy(1.0, &cg.bias)?;
            dact1.extend(cg.input.into_data());
        }
        let mut dy1 = Tensor::new(group.act1.shape(), dact1)?;
        for (d, y) in dy1.data_mut().iter_mut().zip(group.bn1_out.data()) {
            if *y <= 0.0 {
                *d = 0.0;
            }
        }
        let (dz1, dscale1, dshift1) = batchnorm_backward(&group.bn1, &dy1)?;
        g.residual.bn1_scale.axpy(1.0, &dscale1)?;
        g.residual.bn1_shift.axpy(1.0, &dshift1)?;

        for (s, &v) in group.vertices.iter().enumerate() {
            let cg = conv2d_backward_parts(&sample(&group.maps, s), &res.conv1, &sample(&dz1, s))?;
            g.residual.conv1.axpy(1.0, &cg.kernels)?;
            g.residual.conv1_bias.axpy(1.0, &cg.bias)?;
            // Two sources: the output head and the residual block (skip path
            // plus the path through F).
            let skip = &dsum.data()[s * hidden..(s + 1) * hidden];
            let rec = &dt.vertices[v];
            let da: Vec<f64> = (0..hidden)
                .map(|i| {
                    let dhat = head[v][i] + skip[i] + cg.input.data()[i];
                    if rec.pre[i] > 0.0 {
                        dhat
                    } else {
                        0.0
                    }
                })
                .collect();
            outer_acc(&mut g.context.u, &da, &tape.inputs[v]);
            g.context.b.data_mut().iter_mut().zip(&da).for_each(|(gb, d)| *gb += d);
            for &p in &plan.predecessors[v] {
                outer_acc(&mut g.context.w, &da, &dt.vertices[p].hidden);
                matvec_t_acc(&ctx.w, &da, &mut dh[p]);
            }
        }
    }
    Ok(g)
}

/// Gradients of the loss given `dlogits = ∂L/∂o` for every vertex.
///
/// Directions are processed concurrently on the current rayon pool and
/// reduced in [`Direction::ALL`] order, so the result is bitwise independent
/// of the pool size.
pub fn backward_image(
    tape: &ForwardTape,
    plans: &[DagPlan; 4],
    params: &CrrnParams,
    dlogits: &[Vec<f64>],
) -> Result<Gradients> {
    check_tape(tape, plans, dlogits, params)?;
    let parts = tape
        .directions
        .par_iter()
        .zip(plans.par_iter())
        .map(|(dt, plan)| backward_direction(dt, plan, tape, params, dlogits))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::zeros_like(params);
    for (d, part) in Direction::ALL.into_iter().zip(&parts) {
        add_branch(&mut grads.branches[params.branch_index(d)], part)?;
    }
    for dl in dlogits {
        grads.out_bias.data_mut().iter_mut().zip(dl).for_each(|(g, d)| *g += d);
    }
    Ok(grads)
}

/// Loss of one labeled image and, optionally, the full gradient.
pub fn loss_and_gradients(
    params: &CrrnParams,
    grid: &BlockGrid,
    labels: &[Vec<u8>],
    plans: &[DagPlan; 4],
    mode: Mode,
) -> Result<(f64, Gradients, ForwardTape)> {
    let tape = forward_image(grid, plans, params, mode)?;
    let (loss, dlogits) = nll_loss(&tape.logits, labels, params.config.num_classes)?;
    let grads = backward_image(&tape, plans, params, &dlogits)?;
    Ok((loss, grads, tape))
}

/// Denominator floor of [`relative_error`]. A central difference with
/// `ε = 1e-6` of a loss of order one carries up to about `1e-9` of rounding
/// noise. Below the floor the check is effectively absolute: at a tolerance of
/// `1e-5` such coordinates must agree to `1e-8`.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Finite-difference step of the checker.
pub const GRAD_CHECK_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates whose perturbation flipped some relu.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.pass)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<22} {:>12} {:>8} {:>8}  result\n",
            "tensor", "max_rel_err", "checked", "skipped"
        );
        for t in &self.tensors {
            s.push_str(&format!(
                "{:<22} {:>12.3e} {:>8} {:>8}  {}\n",
                t.name,
                t.max_rel_err,
                t.checked,
                t.skipped,
                if t.pass { "pass" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "tolerance {:e}: {}\n",
            self.tolerance,
            if self.passed() { "all tensors pass" } else { "FAILED" }
        ));
        s
    }

    /// One JSON object per tensor: `{name, max_rel_err, pass, checked, skipped}`.
    pub fn to_jsonl(&self) -> String {
        self.tensors
            .iter()
            .map(|t| serde_json::to_string(t).expect("plain struct") + "\n")
            .collect()
    }
}

/// Sign pattern of every relu input in a tape.
fn relu_pattern(tape: &ForwardTape) -> Vec<bool> {
    let mut out = Vec::new();
    for dt in &tape.directions {
        for v in &dt.vertices {
            out.extend(v.pre.iter().map(|a| *a > 0.0));
        }
        for g in &dt.groups {
            out.extend(g.bn1_out.data().iter().map(|a| *a > 0.0));
            out.extend(g.sum.data().iter().map(|a| *a > 0.0));
        }
    }
    out
}

/// Compares the analytic gradient of the train-mode loss on one image against
/// central differences, coordinate by coordinate. Coordinates whose `±ε`
/// perturbation changes any relu's active set are skipped: the loss is not
/// differentiable across a kink.
pub fn grad_check_params(
    params: &CrrnParams,
    grid: &BlockGrid,
    labels: &[Vec<u8>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let plans = params.config.plans();
    let (_, grads, base_tape) = loss_and_gradients(params, grid, labels, &plans, Mode::Train)?;
    let base = relu_pattern(&base_tape);
    let eval = |p: &CrrnParams| -> Result<(f64, Vec<bool>)> {
        let tape = forward_image(grid, &plans, p, Mode::Train)?;
        let (loss, _) = nll_loss(&tape.logits, labels, p.config.num_classes)?;
        Ok((loss, relu_pattern(&tape)))
    };
    let analytic = grads.named_tensors();
    let mut probe = params.clone();
    let count = analytic.len();
    let mut tensors = Vec::with_capacity(count);
    for (ti, (name, grad)) in analytic.into_iter().enumerate() {
        let mut max_rel = 0.0f64;
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..grad.len() {
            let orig = params.named_tensors()[ti].1.data()[i];
            let mut at = |value: f64| -> Result<(f64, Vec<bool>)> {
                probe.named_tensors_mut()[ti].1.data_mut()[i] = value;
                eval(&probe)
            };
            let (plus, pat_plus) = at(orig + GRAD_CHECK_EPS)?;
            let (minus, pat_minus) = at(orig - GRAD_CHECK_EPS)?;
            probe.named_tensors_mut()[ti].1.data_mut()[i] = orig;
            if pat_plus != base || pat_minus != base {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_EPS);
            max_rel = max_rel.max(relative_error(grad.data()[i], numeric));
            checked += 1;
        }
        tensors.push(TensorCheck {
            name,
            max_rel_err: max_rel,
            pass: max_rel < tolerance,
            checked,
            skipped,
        });
    }
    Ok(GradCheckReport { tolerance, tensors })
}

/// Largest configuration [`grad_check`] accepts.
pub const GRAD_CHECK_MAX_GRID: usize = 4;
pub const GRAD_CHECK_MAX_HIDDEN: usize = 64;

/// Builds a freshly initialized model for `config`, a random image and random
/// labels from `seed`, and checks every parameter gradient.
pub fn grad_check(config: &ModelConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    config.validate()?;
    if config.grid_rows > GRAD_CHECK_MAX_GRID
        || config.grid_cols > GRAD_CHECK_MAX_GRID
        || config.hidden_dim > GRAD_CHECK_MAX_HIDDEN
    {
        return Err(Error::Config(format!(
            "gradient check needs a grid of at most {GRAD_CHECK_MAX_GRID}x{GRAD_CHECK_MAX_GRID} and hidden_dim <= {GRAD_CHECK_MAX_HIDDEN}"
        )));
    }
    let params = crate::train::init_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (c, h, w) = (config.channels, config.image_height, config.image_width);
    let image = Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let labels: Vec<u8> = (0..h * w)
        .map(|_| rng.random_range(0..config.num_classes) as u8)
        .collect();
    let grid = BlockGrid::partition(&image, config.grid_rows, config.grid_cols)?;
    let blocks = partition_labels(&labels, h, w, config.grid_rows, config.grid_cols)?;
    grad_check_params(&params, &grid, &blocks, tolerance)
}
