//! The contextual recurrent residual network.
//!
//! For each of the four sweep directions, every block vertex `v` computes
//!
//! ```text
//! a   = U·x_v + Σ_{p ∈ pred(v)} W·h_p + b      (context component)
//! ĥ   = relu(a)
//! h   = relu(F(ĥ) + ĥ)                         (residual visual component)
//! ```
//!
//! where `F` is conv → batch-norm → relu → conv → batch-norm applied to `ĥ`
//! reshaped to a one-channel square map. The four directions are then fused
//! into per-pixel class logits `o_v = Σ_d V·ĥ_d + b_o`. Only `h` feeds
//! successors; the output head reads `ĥ`.
//!
//! Batch normalization inside `F` computes train-mode statistics over one
//! vertex's map at a time. Sharing them across vertices would pass
//! information between blocks that are not connected in the sweep, and the
//! network learns to rely on that path, which inference does not have.
//! Running statistics are kept per sweep depth because the scale of `ĥ`
//! grows along the sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BlockGrid, Connectivity, DagPlan, Direction, IGNORE_LABEL};
use crate::tensor::{
    batchnorm_normalize, conv2d, matvec_acc, relu, softmax_in_place, BatchStats, BnCache, Mode, RunningStats, Tensor,
};

/// Shape of a network. Everything here is fixed once parameters exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Must be a perfect square; the hidden vector is reshaped to a square map.
    pub hidden_dim: usize,
    pub residual_mid_channels: usize,
    pub kernel_size: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub connectivity: Connectivity,
    /// Four independent parameter sets instead of one shared set.
    #[serde(default)]
    pub per_direction_params: bool,
    /// Fuse the residual outputs `h` instead of `ĥ` (ablation).
    #[serde(default)]
    pub fuse_post_residual: bool,
}

impl ModelConfig {
    /// Paper-scale defaults for a given image: 8×8 grid, 256 hidden units.
    pub fn new(image_height: usize, image_width: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            image_height,
            image_width,
            channels,
            grid_rows: 8,
            grid_cols: 8,
            hidden_dim: 256,
            residual_mid_channels: 4,
            kernel_size: 3,
            num_classes,
            connectivity: Connectivity::Eight,
            per_direction_params: false,
            fuse_post_residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            return fail("image extents must be >= 1".into());
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return fail("grid extents must be >= 1".into());
        }
        if self.grid_rows > self.image_height || self.grid_cols > self.image_width {
            return fail(format!(
                "grid {}x{} is finer than the {}x{} image",
                self.grid_rows, self.grid_cols, self.image_height, self.image_width
            ));
        }
        if self.hidden_dim == 0 || self.side() * self.side() != self.hidden_dim {
            return fail(format!("hidden_dim {} is not a perfect square", self.hidden_dim));
        }
        if self.residual_mid_channels == 0 {
            return fail("residual_mid_channels must be >= 1".into());
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::EvenKernel(self.kernel_size));
        }
        if self.num_classes < 2 || self.num_classes > IGNORE_LABEL as usize {
            return fail(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        (self.hidden_dim as f64).sqrt().round() as usize
    }

    pub fn block_h(&self) -> usize {
        self.image_height.div_ceil(self.grid_rows)
    }

    pub fn block_w(&self) -> usize {
        self.image_width.div_ceil(self.grid_cols)
    }

    pub fn block_pixels(&self) -> usize {
        self.block_h() * self.block_w()
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.block_pixels()
    }

    pub fn output_dim(&self) -> usize {
        self.block_pixels() * self.num_classes
    }

    pub fn vertices(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Number of wavefronts in every sweep.
    pub fn sweep_depth(&self) -> usize {
        self.grid_rows + self.grid_cols - 1
    }

    pub fn branch_count(&self) -> usize {
        if self.per_direction_params {
            4
        } else {
            1
        }
    }

    pub fn plans(&self) -> [DagPlan; 4] {
        crate::graph::build_plans(self.grid_rows, self.grid_cols, self.connectivity)
    }
}

/// Context-component weights for one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextParams {
    /// `[hidden, input]`
    pub u: Tensor,
    /// `[hidden, hidden]`
    pub w: Tensor,
    /// `[hidden]`
    pub b: Tensor,
    /// `[output, hidden]`
    pub v: Tensor,
}

/// The residual sub-network `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualParams {
    /// `[mid, 1, k, k]`
    pub conv1: Tensor,
    pub conv1_bias: Tensor,
    pub bn1_scale: Tensor,
    pub bn1_shift: Tensor,
    /// `[1, mid, k, k]`
    pub conv2: Tensor,
    pub conv2_bias: Tensor,
    pub bn2_scale: Tensor,
    pub bn2_shift: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub context: ContextParams,
    pub residual: ResidualParams,
}

const BRANCH_TENSOR_NAMES: [&str; 12] = [
    "U",
    "W",
    "b",
    "V",
    "res.conv1.kernels",
    "res.conv1.bias",
    "res.bn1.scale",
    "res.bn1.shift",
    "res.conv2.kernels",
    "res.conv2.bias",
    "res.bn2.scale",
    "res.bn2.shift",
];

impl BranchParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (h, i, o, m, k) = (
            config.hidden_dim,
            config.input_dim(),
            config.output_dim(),
            config.residual_mid_channels,
            config.kernel_size,
        );
        Self {
            context: ContextParams {
                u: Tensor::zeros(&[h, i]),
                w: Tensor::zeros(&[h, h]),
                b: Tensor::zeros(&[h]),
                v: Tensor::zeros(&[o, h]),
            },
            residual: ResidualParams {
                conv1: Tensor::zeros(&[m, 1, k, k]),
                conv1_bias: Tensor::zeros(&[m]),
                bn1_scale: Tensor::zeros(&[m]),
                bn1_shift: Tensor::zeros(&[m]),
                conv2: Tensor::zeros(&[1, m, k, k]),
                conv2_bias: Tensor::zeros(&[1]),
                bn2_scale: Tensor::zeros(&[1]),
                bn2_shift: Tensor::zeros(&[1]),
            },
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        let (c, r) = (&self.context, &self.residual);
        let t = [
            &c.u,
            &c.w,
            &c.b,
            &c.v,
            &r.conv1,
            &r.conv1_bias,
            &r.bn1_scale,
            &r.bn1_shift,
            &r.conv2,
            &r.conv2_bias,
            &r.bn2_scale,
            &r.bn2_shift,
        ];
        std::array::from_fn(|i| (BRANCH_TENSOR_NAMES[i], t[i]))
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        let (c, r) = (&mut self.context, &mut self.residual);
        let t = [
            &mut c.u,
            &mut c.w,
            &mut c.b,
            &mut c.v,
            &mut r.conv1,
            &mut r.conv1_bias,
            &mut r.bn1_scale,
            &mut r.bn1_shift,
            &mut r.conv2,
            &mut r.conv2_bias,
            &mut r.bn2_scale,
            &mut r.bn2_shift,
        ];
        let mut it = t.into_iter();
        std::array::from_fn(|i| (BRANCH_TENSOR_NAMES[i], it.next().expect("12 tensors")))
    }
}

/// Running batch-norm statistics of one residual sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    pub bn1: RunningStats,
    pub bn2: RunningStats,
}

impl ResidualStats {
    pub fn new(mid_channels: usize) -> Self {
        Self {
            bn1: RunningStats::new(mid_channels),
            bn2: RunningStats::new(1),
        }
    }
}

/// All learnable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CrrnParams {
    pub config: ModelConfig,
    /// One entry, or four (one per [`Direction`]) with `per_direction_params`.
    pub branches: Vec<BranchParams>,
    /// `[output]`
    pub out_bias: Tensor,
    /// Per branch, then per sweep depth: eval mode normalizes each vertex
    /// with the statistics its depth saw in training.
    pub stats: Vec<Vec<ResidualStats>>,
}

fn name_prefix(config: &ModelConfig, branch: usize) -> String {
    if config.per_direction_params {
        format!("{}.", Direction::ALL[branch].short_name())
    } else {
        String::new()
    }
}

impl CrrnParams {
    /// All-zero learnable tensors (batch-norm scales included), empty stats.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            branches: vec![BranchParams::zeros(config); config.branch_count()],
            out_bias: Tensor::zeros(&[config.output_dim()]),
            stats: vec![
                vec![ResidualStats::new(config.residual_mid_channels); config.sweep_depth()];
                config.branch_count()
            ],
            config: config.clone(),
        })
    }

    pub fn branch(&self, direction: Direction) -> &BranchParams {
        &self.branches[self.branch_index(direction)]
    }

    pub fn branch_index(&self, direction: Direction) -> usize {
        if self.config.per_direction_params {
            direction.index()
        } else {
            0
        }
    }

    /// Learnable tensors with stable names; `b_o` last.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, br) in self.branches.iter().enumerate() {
            let prefix = name_prefix(&self.config, i);
            out.extend(br.tensors().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        out.push(("b_o".to_string(), &self.out_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let per_dir = self.config.per_direction_params;
        for (i, br) in self.branches.iter_mut().enumerate() {
            let prefix = if per_dir {
                format!("{}.", Direction::ALL[i].short_name())
            } else {
                String::new()
            };
            out.extend(br.tensors_mut().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        out.push(("b_o".to_string(), &mut self.out_bias));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Folds the batch statistics a train-mode forward pass observed into the
    /// running statistics: one update per branch and depth, pooling the
    /// vertices of that depth over the directions sharing the branch.
    pub fn absorb_batch_stats(&mut self, tape: &ForwardTape) {
        for idx in 0..self.stats.len() {
            let tapes: Vec<&DirectionTape> = tape
                .directions
                .iter()
                .filter(|dt| self.branch_index(dt.direction) == idx)
                .collect();
            for (depth, stats) in self.stats[idx].iter_mut().enumerate() {
                let groups = || {
                    tapes
                        .iter()
                        .flat_map(|dt| dt.groups.iter().filter(move |g| g.depth == depth))
                };
                if let Some(s1) = BatchStats::pool(groups().filter_map(|g| g.bn1.batch.as_ref())) {
                    stats.bn1.update(&s1);
                }
                if let Some(s2) = BatchStats::pool(groups().filter_map(|g| g.bn2.batch.as_ref())) {
                    stats.bn2.update(&s2);
                }
            }
        }
    }

    /// True once every running statistic has seen a batch.
    pub fn stats_populated(&self) -> bool {
        self.stats
            .iter()
            .flatten()
            .all(|s| s.bn1.is_populated() && s.bn2.is_populated())
    }
}

/// Result of [`context_step`]: pre-activation `a` and `ĥ = relu(a)`.
pub fn context_step(x: &[f64], pred_hiddens: &[&[f64]], params: &ContextParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let hidden = params.b.len();
    if x.len() != params.u.shape()[1] {
        return Err(Error::Shape {
            op: "context_step input",
            left: params.u.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    if let Some(bad) = pred_hiddens.iter().find(|h| h.len() != hidden) {
        return Err(Error::Shape {
            op: "context_step hidden",
            left: vec![hidden],
            right: vec![bad.len()],
        });
    }
    let mut pre = params.b.data().to_vec();
    matvec_acc(&params.u, x, &mut pre);
    for h in pred_hiddens {
        matvec_acc(&params.w, h, &mut pre);
    }
    let hat = pre.iter().map(|v| v.max(0.0)).collect();
    Ok((pre, hat))
}

/// Intermediates of the residual sub-network over a group of `B` vertices
/// that share batch statistics, each map `[1, s, s]`. The sweep uses groups
/// of one.
#[derive(Clone, Debug)]
pub struct GroupRecord {
    pub vertices: Vec<usize>,
    /// Wavefront index of the group's vertices within their sweep.
    pub depth: usize,
    /// `ĥ` maps, `[B, 1, s, s]`; also the input of the first convolution.
    pub maps: Tensor,
    pub bn1: BnCache,
    /// First batch-norm output before relu, `[B, mid, s, s]`.
    pub bn1_out: Tensor,
    /// `relu(bn1_out)`, the input of the second convolution.
    pub act1: Tensor,
    pub bn2: BnCache,
    /// `F(ĥ) + ĥ` before the final relu, `[B, 1, s, s]`.
    pub sum: Tensor,
}

pub(crate) fn stack(parts: &[&[f64]], sample_shape: &[usize]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(sample_shape);
    Tensor::new(&shape, parts.concat())
}

pub(crate) fn sample(t: &Tensor, n: usize) -> Tensor {
    let per = t.len() / t.shape()[0];
    Tensor::new(&t.shape()[1..], t.data()[n * per..(n + 1) * per].to_vec()).expect("sample shape")
}

/// Applies `F` and the identity skip to a group of `ĥ` vectors that share
/// batch-norm statistics. Returns one `h` per input and the record the
/// backward pass needs.
pub fn residual_group(
    hats: &[&[f64]],
    params: &ResidualParams,
    stats: &ResidualStats,
    side: usize,
    mode: Mode,
) -> Result<(Vec<Vec<f64>>, GroupRecord)> {
    if hats.is_empty() {
        return Err(Error::Config("residual group must be non-empty".into()));
    }
    if let Some(bad) = hats.iter().find(|h| h.len() != side * side) {
        return Err(Error::Shape {
            op: "residual_step",
            left: vec![side * side],
            right: vec![bad.len()],
        });
    }
    let b = hats.len();
    let mid = params.conv1.shape()[0];
    let maps = stack(hats, &[1, side, side])?;
    let mut z1 = Vec::with_capacity(b * mid * side * side);
    for n in 0..b {
        z1.extend(conv2d(&sample(&maps, n), &params.conv1, &params.conv1_bias)?.into_data());
    }
    let z1 = Tensor::new(&[b, mid, side, side], z1)?;
    let (bn1_out, bn1) = batchnorm_normalize(&z1, &params.bn1_scale, &params.bn1_shift, mode, &stats.bn1)?;
    let act1 = relu(&bn1_out);
    let mut z2 = Vec::with_capacity(b * side * side);
    for n in 0..b {
        z2.extend(conv2d(&sample(&act1, n), &params.conv2, &params.conv2_bias)?.into_data());
    }
    let z2 = Tensor::new(&[b, 1, side, side], z2)?;
    let (mut sum, bn2) = batchnorm_normalize(&z2, &params.bn2_scale, &params.bn2_shift, mode, &stats.bn2)?;
    for (s, m) in sum.data_mut().iter_mut().zip(maps.data()) {
        *s += m;
    }
    let per = side * side;
    let outputs = sum
        .data()
        .chunks_exact(per)
        .map(|c| c.iter().map(|v| v.max(0.0)).collect())
        .collect();
    let record = GroupRecord {
        vertices: Vec::new(),
        depth: 0,
        maps,
        bn1,
        bn1_out,
        act1,
        bn2,
        sum,
    };
    Ok((outputs, record))
}

/// `h = relu(F(ĥ) + ĥ)` for a single vertex (a batch of one).
pub fn residual_step(
    hat: &[f64],
    params: &ResidualParams,
    stats: &ResidualStats,
    side: usize,
    mode: Mode,
) -> Result<Vec<f64>> {
    let (mut out, _) = residual_group(&[hat], params, stats, side, mode)?;
    Ok(out.pop().expect("one output"))
}

/// `o = Σ_d V_d·hidden_d + b_o`; with shared parameters all `V_d` are the
/// same matrix. Returns `block_pixels × C` logits, pixel-major.
pub fn fuse_outputs(hiddens: [&[f64]; 4], params: &CrrnParams) -> Result<Vec<f64>> {
    let hidden = params.config.hidden_dim;
    if let Some(bad) = hiddens.iter().find(|h| h.len() != hidden) {
        return Err(Error::Shape {
            op: "fuse_outputs",
            left: vec![hidden],
            right: vec![bad.len()],
        });
    }
    let mut out = params.out_bias.data().to_vec();
    if params.config.per_direction_params {
        for d in Direction::ALL {
            matvec_acc(&params.branch(d).context.v, hiddens[d.index()], &mut out);
        }
    } else {
        let mut total = vec![0.0; hidden];
        for h in hiddens {
            total.iter_mut().zip(h).for_each(|(t, v)| *t += v);
        }
        matvec_acc(&params.branches[0].context.v, &total, &mut out);
    }
    Ok(out)
}

/// Per-vertex record of one direction's sweep.
#[derive(Clone, Debug, Default)]
pub struct VertexRecord {
    pub pre: Vec<f64>,
    pub hat: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DirectionTape {
    pub direction: Direction,
    /// Indexed by vertex.
    pub vertices: Vec<VertexRecord>,
    /// One per vertex, in topological order.
    pub groups: Vec<GroupRecord>,
}

/// Everything the backward pass needs from one image's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub mode: Mode,
    pub inputs: Vec<Vec<f64>>,
    /// In [`Direction::ALL`] order.
    pub directions: Vec<DirectionTape>,
    /// Fused logits per vertex, `block_pixels × C` each.
    pub logits: Vec<Vec<f64>>,
}

fn sweep_direction(grid: &BlockGrid, plan: &DagPlan, params: &CrrnParams, mode: Mode) -> Result<DirectionTape> {
    let branch = params.branch(plan.direction);
    let stats = &params.stats[params.branch_index(plan.direction)];
    let side = params.config.side();
    let mut vertices = vec![VertexRecord::default(); grid.len()];
    let mut groups = Vec::with_capacity(grid.len());
    for (depth, (wave, stats)) in plan.wavefronts.iter().zip(stats).enumerate() {
        for &v in wave {
            let preds: Vec<&[f64]> = plan.predecessors[v]
                .iter()
                .map(|&p| vertices[p].hidden.as_slice())
                .collect();
            let (pre, hat) = context_step(&grid.blocks[v], &preds, &branch.context)?;
            let (mut hidden, mut record) = residual_group(&[&hat], &branch.residual, stats, side, mode)?;
            vertices[v].pre = pre;
            vertices[v].hat = hat;
            vertices[v].hidden = hidden.pop().expect("one output");
            record.vertices = vec![v];
            record.depth = depth;
            groups.push(record);
        }
    }
    Ok(DirectionTape {
        direction: plan.direction,
        vertices,
        groups,
    })
}

fn check_grid(grid: &BlockGrid, plans: &[DagPlan; 4], config: &ModelConfig) -> Result<()> {
    let found = (grid.channels, grid.rows * grid.block_h, grid.cols * grid.block_w);
    let expected = (
        config.channels,
        config.grid_rows * config.block_h(),
        config.grid_cols * config.block_w(),
    );
    if grid.rows != config.grid_rows || grid.cols != config.grid_cols || found != expected {
        return Err(Error::ExtentMismatch { expected, found });
    }
    for (plan, d) in plans.iter().zip(Direction::ALL) {
        if plan.direction != d || plan.rows != grid.rows || plan.cols != grid.cols {
            return Err(Error::Config(format!(
                "plan for {:?} on {}x{} does not match the {}x{} grid",
                plan.direction, plan.rows, plan.cols, grid.rows, grid.cols
            )));
        }
    }
    Ok(())
}

/// Runs all four sweeps and fuses them. The directions are independent and
/// run on the current rayon pool; results do not depend on the pool size.
pub fn forward_image(grid: &BlockGrid, plans: &[DagPlan; 4], params: &CrrnParams, mode: Mode) -> Result<ForwardTape> {
    check_grid(grid, plans, &params.config)?;
    let directions = plans
        .par_iter()
        .map(|plan| sweep_direction(grid, plan, params, mode))
        .collect::<Result<Vec<_>>>()?;
    let logits = (0..grid.len())
        .map(|v| {
            let pick = |d: usize| {
                let rec = &directions[d].vertices[v];
                if params.config.fuse_post_residual {
                    rec.hidden.as_slice()
                } else {
                    rec.hat.as_slice()
                }
            };
            fuse_outputs([pick(0), pick(1), pick(2), pick(3)], params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardTape {
        mode,
        inputs: grid.blocks.clone(),
        directions,
        logits,
    })
}

/// Mean negative log-likelihood over labeled pixels, and its gradient with
/// respect to every logit. Pixels labeled [`IGNORE_LABEL`] contribute
/// nothing; with no labeled pixel at all the loss is 0.
pub fn nll_loss(logits: &[Vec<f64>], labels: &[Vec<u8>], num_classes: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape {
            op: "nll_loss",
            left: vec![logits.len()],
            right: vec![labels.len()],
        });
    }
    let mut labeled = 0usize;
    for (lg, lb) in logits.iter().zip(labels) {
        if lg.len() != lb.len() * num_classes {
            return Err(Error::Shape {
                op: "nll_loss block",
                left: vec![lg.len()],
                right: vec![lb.len(), num_classes],
            });
        }
        for &l in lb {
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: num_classes,
                });
            }
            labeled += 1;
        }
    }
    let mut grads: Vec<Vec<f64>> = logits.iter().map(|l| vec![0.0; l.len()]).collect();
    if labeled == 0 {
        return Ok((0.0, grads));
    }
    let norm = 1.0 / labeled as f64;
    let mut loss = 0.0;
    for ((lg, lb), g) in logits.iter().zip(labels).zip(grads.iter_mut()) {
        for (j, &l) in lb.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let row = &lg[j * num_classes..(j + 1) * num_classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss -= row[l as usize] - lse;
            let grow = &mut g[j * num_classes..(j + 1) * num_classes];
            for (c, gv) in grow.iter_mut().enumerate() {
                let p = (row[c] - lse).exp();
                *gv = norm * (p - if c == l as usize { 1.0 } else { 0.0 });
            }
        }
    }
    Ok((loss * norm, grads))
}

/// Per-pixel class probabilities and argmax labels over the original image
/// extents.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    /// `[C, H, W]`
    pub probs: Tensor,
    /// Row-major `H × W`.
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl PredictionMap {
    /// Places per-vertex logits at their block locations and crops the
    /// padding.
    pub fn from_logits(logits: &[Vec<f64>], config: &ModelConfig) -> Result<Self> {
        let (h, w, c) = (config.image_height, config.image_width, config.num_classes);
        let (bh, bw) = (config.block_h(), config.block_w());
        if logits.len() != config.vertices() {
            return Err(Error::Shape {
                op: "prediction map",
                left: vec![config.vertices()],
                right: vec![logits.len()],
            });
        }
        let mut probs = vec![0.0; c * h * w];
        let mut labels = vec![0u8; h * w];
        let mut row = vec![0.0; c];
        for y in 0..h {
            for x in 0..w {
                let v = (y / bh) * config.grid_cols + x / bw;
                let p = (y % bh) * bw + x % bw;
                row.copy_from_slice(&logits[v][p * c..(p + 1) * c]);
                softmax_in_place(&mut row);
                let mut best = 0;
                for k in 0..c {
                    probs[(k * h + y) * w + x] = row[k];
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                labels[y * w + x] = best as u8;
            }
        }
        Ok(Self {
            probs: Tensor::new(&[c, h, w], probs)?,
            labels,
            height: h,
            width: w,
        })
    }
}

/// Labels an image with the network in eval mode.
pub fn infer(image: &Tensor, params: &CrrnParams) -> Result<PredictionMap> {
    let config = &params.config;
    let found = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::Shape {
                op: "infer",
                left: image.shape().to_vec(),
                right: vec![3],
            })
        }
    };
    let expected = (config.channels, config.image_height, config.image_width);
    if found != expected {
        return Err(Error::ExtentMismatch { expected, found });
    }
    let grid = BlockGrid::partition(image, config.grid_rows, config.grid_cols)?;
    let tape = forward_image(&grid, &config.plans(), params, Mode::Eval)?;
    PredictionMap::from_logits(&tape.logits, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff, max_rel_err, random_tensor};
    use crate::train::init_params;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_height: 4,
            image_width: 4,
            channels: 1,
            grid_rows: 2,
            grid_cols: 2,
            hidden_dim: 4,
            residual_mid_channels: 2,
            kernel_size: 3,
            num_classes: 3,
            connectivity: Connectivity::Eight,
            per_direction_params: false,
            fuse_post_residual: false,
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.hidden_dim = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.kernel_size = 2;
        assert!(matches!(c.validate(), Err(Error::EvenKernel(2))));
    }

    #[test]
    fn context_source_vertex() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = CrrnParams::zeros(&cfg).unwrap();
        params.branches[0].context.w = random_tensor(&mut rng, &[4, 4]);
        let x = rand_vec(&mut rng, cfg.input_dim());
        let (pre, hat) = context_step(&x, &[], &params.branches[0].context).unwrap();
        assert!(pre.iter().all(|v| *v == 0.0) && hat.iter().all(|v| *v == 0.0));

        params.branches[0].context.u = random_tensor(&mut rng, &[4, 4]);
        let (_, a) = context_step(&x, &[], &params.branches[0].context).unwrap();
        params.branches[0].context.w = random_tensor(&mut rng, &[4, 4]);
        let (_, b) = context_step(&x, &[], &params.branches[0].context).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_matches_composed_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ctx = ContextParams {
            u: random_tensor(&mut rng, &[4, 6]),
            w: random_tensor(&mut rng, &[4, 4]),
            b: random_tensor(&mut rng, &[4]),
            v: random_tensor(&mut rng, &[2, 4]),
        };
        let x = random_tensor(&mut rng, &[6, 1]);
        let h1 = random_tensor(&mut rng, &[4, 1]);
        let h2 = random_tensor(&mut rng, &[4, 1]);
        let (pre, hat) = context_step(x.data(), &[h1.data(), h2.data()], &ctx).unwrap();
        let mut expect = crate::tensor::matmul(&ctx.u, &x).unwrap();
        expect.axpy(1.0, &crate::tensor::matmul(&ctx.w, &h1).unwrap()).unwrap();
        expect.axpy(1.0, &crate::tensor::matmul(&ctx.w, &h2).unwrap()).unwrap();
        expect.axpy(1.0, &ctx.b.clone().reshape(&[4, 1]).unwrap()).unwrap();
        let expect_hat = relu(&expect);
        for i in 0..4 {
            assert!((pre[i] - expect.data()[i]).abs() < 1e-14);
            assert!((hat[i] - expect_hat.data()[i]).abs() < 1e-14);
            assert_eq!(hat[i], pre[i].max(0.0));
        }
    }

    #[test]
    fn context_rejects_bad_dimensions() {
        let cfg = tiny_config();
        let params = CrrnParams::zeros(&cfg).unwrap();
        assert!(context_step(&[0.0; 3], &[], &params.branches[0].context).is_err());
        assert!(context_step(&[0.0; 4], &[&[0.0; 3]], &params.branches[0].context).is_err());
    }

    #[test]
    fn residual_is_identity_when_branch_zeroed() {
        let cfg = tiny_config();
        let params = CrrnParams::zeros(&cfg).unwrap();
        let stats = ResidualStats::new(2);
        let hat = vec![0.5, 0.0, 2.0, 1.25];
        let h = residual_step(&hat, &params.branches[0].residual, &stats, 2, Mode::Train).unwrap();
        assert_eq!(h, hat);
        let h = residual_step(&[0.0; 4], &params.branches[0].residual, &stats, 2, Mode::Train).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn residual_matches_primitive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = ResidualParams {
            conv1: random_tensor(&mut rng, &[2, 1, 3, 3]),
            conv1_bias: random_tensor(&mut rng, &[2]),
            bn1_scale: random_tensor(&mut rng, &[2]),
            bn1_shift: random_tensor(&mut rng, &[2]),
            conv2: random_tensor(&mut rng, &[1, 2, 3, 3]),
            conv2_bias: random_tensor(&mut rng, &[1]),
            bn2_scale: random_tensor(&mut rng, &[1]),
            bn2_shift: random_tensor(&mut rng, &[1]),
        };
        let hat: Vec<f64> = rand_vec(&mut rng, 9).into_iter().map(f64::abs).collect();
        let mut stats = ResidualStats::new(2);
        let got = residual_step(&hat, &res, &stats, 3, Mode::Train).unwrap();

        let map = Tensor::new(&[1, 3, 3], hat.clone()).unwrap();
        let z1 = conv2d(&map, &res.conv1, &res.conv1_bias)
            .unwrap()
            .reshape(&[1, 2, 3, 3])
            .unwrap();
        let (y1, _) =
            crate::tensor::batchnorm_forward(&z1, &res.bn1_scale, &res.bn1_shift, Mode::Train, &mut stats.bn1).unwrap();
        let r1 = relu(&y1).reshape(&[2, 3, 3]).unwrap();
        let z2 = conv2d(&r1, &res.conv2, &res.conv2_bias)
            .unwrap()
            .reshape(&[1, 1, 3, 3])
            .unwrap();
        let (y2, _) =
            crate::tensor::batchnorm_forward(&z2, &res.bn2_scale, &res.bn2_shift, Mode::Train, &mut stats.bn2).unwrap();
        let expect: Vec<f64> = y2.data().iter().zip(&hat).map(|(f, x)| (f + x).max(0.0)).collect();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn fusion_cases() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = CrrnParams::zeros(&cfg).unwrap();
        params.out_bias = random_tensor(&mut rng, &[cfg.output_dim()]);
        let z = vec![0.0; 4];
        let o = fuse_outputs([&z, &z, &z, &z], &params).unwrap();
        assert_eq!(o, params.out_bias.data());
        let hs: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 4)).collect();
        let o = fuse_outputs([&hs[0], &hs[1], &hs[2], &hs[3]], &params).unwrap();
        assert_eq!(o, params.out_bias.data());

        params.branches[0].context.v = random_tensor(&mut rng, &[cfg.output_dim(), 4]);
        let o = fuse_outputs([&hs[0], &hs[1], &hs[2], &hs[3]], &params).unwrap();
        let mut expect = params.out_bias.data().to_vec();
        for h in &hs {
            matvec_acc(&params.branches[0].context.v, h, &mut expect);
        }
        for (a, b) in o.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-13);
        }
        // Affine in the hiddens: doubling every input doubles o - b_o.
        let doubled: Vec<Vec<f64>> = hs.iter().map(|h| h.iter().map(|v| 2.0 * v).collect()).collect();
        let o2 = fuse_outputs([&doubled[0], &doubled[1], &doubled[2], &doubled[3]], &params).unwrap();
        for ((a, b), bias) in o.iter().zip(&o2).zip(params.out_bias.data()) {
            assert!((2.0 * (a - bias) - (b - bias)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_block_has_no_recurrence() {
        let mut cfg = tiny_config();
        cfg.grid_rows = 1;
        cfg.grid_cols = 1;
        let params = init_params(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = random_tensor(&mut rng, &[1, 4, 4]);
        let grid = BlockGrid::partition(&image, 1, 1).unwrap();
        let tape = forward_image(&grid, &cfg.plans(), &params, Mode::Train).unwrap();
        let (_, hat) = context_step(&grid.blocks[0], &[], &params.branches[0].context).unwrap();
        let mut expect = params.out_bias.data().to_vec();
        let four: Vec<f64> = hat.iter().map(|v| 4.0 * v).collect();
        matvec_acc(&params.branches[0].context.v, &four, &mut expect);
        for (a, b) in tape.logits[0].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_mismatched_grid() {
        let cfg = tiny_config();
        let params = CrrnParams::zeros(&cfg).unwrap();
        let grid = BlockGrid::partition(&Tensor::zeros(&[1, 6, 6]), 2, 2).unwrap();
        assert!(matches!(
            forward_image(&grid, &cfg.plans(), &params, Mode::Train),
            Err(Error::ExtentMismatch { .. })
        ));
    }

    #[test]
    fn loss_cases() {
        let (l, _) = nll_loss(&[vec![0.3, 0.3]], &[vec![1]], 2).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let (l, g) = nll_loss(&[vec![100.0, 0.0]], &[vec![0]], 2).unwrap();
        assert!(l < 1e-40 && g[0].iter().all(|v| v.abs() < 1e-40));
        let (l, g) = nll_loss(&[vec![1.0, 2.0, 5.0, 1.0]], &[vec![IGNORE_LABEL, 0]], 2).unwrap();
        assert_eq!(&g[0][..2], &[0.0, 0.0]);
        assert!((l - (1.0 + (-4f64).exp()).ln()).abs() < 1e-14);
        assert!(matches!(
            nll_loss(&[vec![0.0, 0.0]], &[vec![2]], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        let (l, g) = nll_loss(&[vec![0.0, 0.0]], &[vec![IGNORE_LABEL]], 2).unwrap();
        assert_eq!((l, g), (0.0, vec![vec![0.0, 0.0]]));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = random_tensor(&mut rng, &[2, 12]);
        let labels = vec![vec![0u8, 2, 1, IGNORE_LABEL], vec![1, 1, 0, 2]];
        let split = |t: &Tensor| vec![t.data()[..12].to_vec(), t.data()[12..].to_vec()];
        let (_, g) = nll_loss(&split(&logits), &labels, 3).unwrap();
        let num = central_diff(&logits, |t| nll_loss(&split(t), &labels, 3).unwrap().0);
        assert!(max_rel_err(&g.concat(), &num) < 1e-6);
    }

    #[test]
    fn prediction_map_crops_and_argmaxes() {
        let mut cfg = tiny_config();
        cfg.image_height = 3;
        cfg.image_width = 3;
        cfg.num_classes = 2;
        let logits: Vec<Vec<f64>> = (0..4)
            .map(|v| {
                (0..4)
                    .flat_map(|p| if (v + p) % 2 == 0 { [1.0, 0.0] } else { [0.0, 3.0] })
                    .collect()
            })
            .collect();
        let map = PredictionMap::from_logits(&logits, &cfg).unwrap();
        assert_eq!(map.probs.shape(), &[2, 3, 3]);
        // Pixel (2, 2) is block 3, in-block position 0.
        assert_eq!(map.labels[8], 1);
        assert_eq!(map.labels[0], 0);
        for i in 0..9 {
            let s = map.probs.data()[i] + map.probs.data()[9 + i];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_requires_running_stats_and_matching_extents() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 1).unwrap();
        assert!(matches!(
            infer(&Tensor::zeros(&[1, 4, 4]), &params),
            Err(Error::UninitializedRunningStats)
        ));
        assert!(matches!(
            infer(&Tensor::zeros(&[1, 5, 4]), &params),
            Err(Error::ExtentMismatch { .. })
        ));
    }
}
