//! Block grids and the four directed sweeps over them.
//!
//! An image is cut into a `rows × cols` grid of blocks. The blocks are the
//! vertices of an undirected neighborhood graph, which is cyclic and cannot
//! be unrolled by a recurrence. Each [`Direction`] orients it into a DAG:
//! southeast makes every vertex depend on its north, west and north-west
//! neighbors, and the other three mirror that pattern.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from the loss and from metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    SouthEast,
    SouthWest,
    NorthWest,
    NorthEast,
}

impl Direction {
    /// Also the fixed order in which gradients are accumulated.
    pub const ALL: [Direction; 4] = [
        Direction::SouthEast,
        Direction::SouthWest,
        Direction::NorthWest,
        Direction::NorthEast,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Direction::SouthEast => "se",
            Direction::SouthWest => "sw",
            Direction::NorthWest => "nw",
            Direction::NorthEast => "ne",
        }
    }

    pub fn reversed(self) -> Direction {
        match self {
            Direction::SouthEast => Direction::NorthWest,
            Direction::SouthWest => Direction::NorthEast,
            Direction::NorthWest => Direction::SouthEast,
            Direction::NorthEast => Direction::SouthWest,
        }
    }

    /// Unit steps `(row, col)` along which information flows.
    fn flow(self) -> (isize, isize) {
        match self {
            Direction::SouthEast => (1, 1),
            Direction::SouthWest => (1, -1),
            Direction::NorthWest => (-1, -1),
            Direction::NorthEast => (-1, 1),
        }
    }
}

/// Neighborhood of the undirected block graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Eight,
    Four,
}

/// An image cut into vectorized blocks.
///
/// Each block vector is laid out channel-major, then row-major within the
/// block. Vertex `i` sits at grid position `(i / cols, i % cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrid {
    pub rows: usize,
    pub cols: usize,
    pub block_h: usize,
    pub block_w: usize,
    pub channels: usize,
    /// Extents of the image before padding.
    pub image_h: usize,
    pub image_w: usize,
    pub blocks: Vec<Vec<f64>>,
}

impl BlockGrid {
    /// Zero-pads `image` (`[c, H, W]`) on the bottom and right up to the next
    /// multiple of the grid extents and splits it into blocks.
    pub fn partition(image: &Tensor, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("grid extents must be >= 1, got {rows}x{cols}")));
        }
        if image.rank() != 3 {
            return Err(Error::Shape {
                op: "partition",
                left: image.shape().to_vec(),
                right: vec![3],
            });
        }
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let block_h = h.div_ceil(rows);
        let block_w = w.div_ceil(cols);
        let px = block_h * block_w;
        let mut blocks = vec![vec![0.0; c * px]; rows * cols];
        let data = image.data();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = (y / block_h) * cols + x / block_w;
                    let (by, bx) = (y % block_h, x % block_w);
                    blocks[v][ch * px + by * block_w + bx] = data[(ch * h + y) * w + x];
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            block_h,
            block_w,
            channels: c,
            image_h: h,
            image_w: w,
            blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_pixels(&self) -> usize {
        self.block_h * self.block_w
    }

    pub fn vertex(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn coords(&self, vertex: usize) -> (usize, usize) {
        (vertex / self.cols, vertex % self.cols)
    }

    /// Inverse of [`partition`](Self::partition), keeping the padding.
    pub fn reassemble(&self) -> Tensor {
        let (h, w) = (self.rows * self.block_h, self.cols * self.block_w);
        let px = self.block_pixels();
        let mut out = vec![0.0; self.channels * h * w];
        for (v, block) in self.blocks.iter().enumerate() {
            let (r, c) = self.coords(v);
            for ch in 0..self.channels {
                for by in 0..self.block_h {
                    for bx in 0..self.block_w {
                        let (y, x) = (r * self.block_h + by, c * self.block_w + bx);
                        out[(ch * h + y) * w + x] = block[ch * px + by * self.block_w + bx];
                    }
                }
            }
        }
        Tensor::new(&[self.channels, h, w], out).expect("grid extents are non-zero")
    }
}

/// Splits an `h × w` label map into per-block label vectors matching
/// [`BlockGrid::partition`]. Padding pixels get [`IGNORE_LABEL`].
pub fn partition_labels(labels: &[u8], h: usize, w: usize, rows: usize, cols: usize) -> Result<Vec<Vec<u8>>> {
    if labels.len() != h * w || h == 0 || w == 0 {
        return Err(Error::Shape {
            op: "partition_labels",
            left: vec![h, w],
            right: vec![labels.len()],
        });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("grid extents must be >= 1, got {rows}x{cols}")));
    }
    let (bh, bw) = (h.div_ceil(rows), w.div_ceil(cols));
    let mut blocks = vec![vec![IGNORE_LABEL; bh * bw]; rows * cols];
    for y in 0..h {
        for x in 0..w {
            blocks[(y / bh) * cols + x / bw][(y % bh) * bw + x % bw] = labels[y * w + x];
        }
    }
    Ok(blocks)
}

/// One orientation of the block graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DagPlan {
    pub direction: Direction,
    pub rows: usize,
    pub cols: usize,
    /// Topological order: row sweep along the flow direction.
    pub order: Vec<usize>,
    pub predecessors: Vec<Vec<usize>>,
    pub successors: Vec<Vec<usize>>,
    /// Anti-chains by longest-path depth from the sources. Vertices inside a
    /// wavefront never depend on each other.
    pub wavefronts: Vec<Vec<usize>>,
}

impl DagPlan {
    pub fn build(rows: usize, cols: usize, direction: Direction, connectivity: Connectivity) -> Self {
        let n = rows * cols;
        let (dr, dc) = direction.flow();
        let mut offsets = vec![(-dr, 0), (0, -dc)];
        if connectivity == Connectivity::Eight {
            offsets.push((-dr, -dc));
        }
        let mut predecessors = vec![Vec::new(); n];
        let mut successors = vec![Vec::new(); n];
        for r in 0..rows {
            for c in 0..cols {
                let v = r * cols + c;
                for &(or, oc) in &offsets {
                    let (pr, pc) = (r as isize + or, c as isize + oc);
                    if pr < 0 || pc < 0 || pr >= rows as isize || pc >= cols as isize {
                        continue;
                    }
                    let p = pr as usize * cols + pc as usize;
                    predecessors[v].push(p);
                    successors[p].push(v);
                }
            }
        }
        predecessors.iter_mut().for_each(|p| p.sort_unstable());
        successors.iter_mut().for_each(|s| s.sort_unstable());

        let row_seq: Vec<usize> = if dr > 0 {
            (0..rows).collect()
        } else {
            (0..rows).rev().collect()
        };
        let col_seq: Vec<usize> = if dc > 0 {
            (0..cols).collect()
        } else {
            (0..cols).rev().collect()
        };
        let order: Vec<usize> = row_seq
            .iter()
            .flat_map(|&r| col_seq.iter().map(move |&c| r * cols + c))
            .collect();

        let mut depth = vec![0usize; n];
        for &v in &order {
            depth[v] = predecessors[v].iter().map(|&p| depth[p] + 1).max().unwrap_or(0);
        }
        let levels = depth.iter().max().map_or(0, |d| d + 1);
        let mut wavefronts = vec![Vec::new(); levels];
        for &v in &order {
            wavefronts[depth[v]].push(v);
        }

        Self {
            direction,
            rows,
            cols,
            order,
            predecessors,
            successors,
            wavefronts,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.predecessors.iter().map(Vec::len).sum()
    }

    /// Whether every predecessor of a vertex precedes it in `sequence`.
    pub fn is_topological(&self, sequence: &[usize]) -> bool {
        let mut pos = vec![usize::MAX; self.len()];
        for (i, &v) in sequence.iter().enumerate() {
            if v >= pos.len() || pos[v] != usize::MAX {
                return false;
            }
            pos[v] = i;
        }
        if pos.contains(&usize::MAX) {
            return false;
        }
        (0..self.len()).all(|v| self.predecessors[v].iter().all(|&p| pos[p] < pos[v]))
    }

    /// Undirected edges as sorted `(low, high)` pairs.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .predecessors
            .iter()
            .enumerate()
            .flat_map(|(v, ps)| ps.iter().map(move |&p| (p.min(v), p.max(v))))
            .collect();
        edges.sort_unstable();
        edges
    }

    /// `mask[u]` is true when `u` is a proper ancestor of `v`.
    pub fn ancestors(&self, v: usize) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        let mut stack: Vec<usize> = self.predecessors[v].clone();
        while let Some(u) = stack.pop() {
            if !mask[u] {
                mask[u] = true;
                stack.extend_from_slice(&self.predecessors[u]);
            }
        }
        mask
    }
}

/// Plans for all four directions, in [`Direction::ALL`] order.
pub fn build_plans(rows: usize, cols: usize, connectivity: Connectivity) -> [DagPlan; 4] {
    Direction::ALL.map(|d| DagPlan::build(rows, cols, d, connectivity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn partition_exact_multiple() {
        let img = Tensor::new(&[1, 8, 8], (0..64).map(f64::from).collect()).unwrap();
        let g = BlockGrid::partition(&img, 2, 2).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.blocks.iter().all(|b| b.len() == 16));
        let expect: Vec<f64> = (0..4).flat_map(|y| (0..4).map(move |x| f64::from(y * 8 + x))).collect();
        assert_eq!(g.blocks[0], expect);
    }

    #[test]
    fn partition_pads_bottom_right() {
        let img = Tensor::filled(&[1, 7, 7], 1.0);
        let g = BlockGrid::partition(&img, 2, 2).unwrap();
        assert_eq!((g.block_h, g.block_w), (4, 4));
        let last = &g.blocks[3];
        assert_eq!(last.iter().filter(|v| **v == 1.0).count(), 9);
        // Rows 4..7 and columns 4..7 of the original: a 3x3 window survives.
        assert_eq!(last.iter().filter(|v| **v == 0.0).count(), 7);
    }

    #[test]
    fn partition_seven_by_seven_counts() {
        // Bottom-right block of a 7x7 image on a 2x2 grid covers original
        // rows/cols 4..=6, i.e. 3x3 = 9 pixels; 7 of its 16 slots are padding.
        let img = Tensor::filled(&[1, 7, 7], 2.0);
        let g = BlockGrid::partition(&img, 2, 2).unwrap();
        let originals: usize = g.blocks.iter().map(|b| b.iter().filter(|v| **v == 2.0).count()).sum();
        assert_eq!(originals, 49);
        assert_eq!(g.reassemble().shape(), &[1, 8, 8]);
    }

    #[test]
    fn partition_rejects_zero_grid() {
        assert!(BlockGrid::partition(&Tensor::zeros(&[1, 2, 2]), 0, 1).is_err());
    }

    #[test]
    fn channel_major_vectorization() {
        let img = Tensor::new(&[2, 2, 2], vec![1., 2., 3., 4., 10., 20., 30., 40.]).unwrap();
        let g = BlockGrid::partition(&img, 1, 1).unwrap();
        assert_eq!(g.blocks[0], vec![1., 2., 3., 4., 10., 20., 30., 40.]);
    }

    #[test]
    fn label_partition_marks_padding_ignored() {
        let labels = vec![1u8; 9];
        let blocks = partition_labels(&labels, 3, 3, 2, 2).unwrap();
        assert_eq!(blocks[0], vec![1, 1, 1, 1]);
        assert_eq!(blocks[3], vec![1, IGNORE_LABEL, IGNORE_LABEL, IGNORE_LABEL]);
    }

    #[test]
    fn southeast_two_by_two() {
        let plan = DagPlan::build(2, 2, Direction::SouthEast, Connectivity::Eight);
        assert_eq!(plan.predecessors[3], vec![0, 1, 2]);
        assert!(plan.predecessors[0].is_empty());
        assert_eq!(plan.order, vec![0, 1, 2, 3]);
        assert_eq!(plan.wavefronts, vec![vec![0], vec![1, 2], vec![3]]);
    }

    #[test]
    fn single_vertex_grid() {
        for d in Direction::ALL {
            let plan = DagPlan::build(1, 1, d, Connectivity::Eight);
            assert_eq!(plan.order, vec![0]);
            assert_eq!(plan.edge_count(), 0);
        }
    }

    #[test]
    fn mirrored_orders() {
        let plan = DagPlan::build(2, 3, Direction::NorthWest, Connectivity::Eight);
        assert_eq!(plan.order, vec![5, 4, 3, 2, 1, 0]);
        let plan = DagPlan::build(2, 3, Direction::SouthWest, Connectivity::Eight);
        assert_eq!(plan.order, vec![2, 1, 0, 5, 4, 3]);
        assert_eq!(plan.predecessors[3], vec![0, 1, 4]);
    }

    #[test]
    fn edge_sets_under_each_connectivity() {
        let four = build_plans(3, 4, Connectivity::Four);
        for p in &four[1..] {
            assert_eq!(p.undirected_edges(), four[0].undirected_edges());
        }
        let eight = build_plans(3, 4, Connectivity::Eight);
        assert_eq!(eight[0].undirected_edges(), eight[2].undirected_edges());
        assert_eq!(eight[1].undirected_edges(), eight[3].undirected_edges());
        // The union is the full 8-neighborhood graph.
        let mut union: Vec<_> = eight.iter().flat_map(|p| p.undirected_edges()).collect();
        union.sort_unstable();
        union.dedup();
        let (rows, cols) = (3usize, 4usize);
        let mut expect = Vec::new();
        for a in 0..rows * cols {
            for b in a + 1..rows * cols {
                let (ra, ca) = (a / cols, a % cols);
                let (rb, cb) = (b / cols, b % cols);
                if ra.abs_diff(rb) <= 1 && ca.abs_diff(cb) <= 1 {
                    expect.push((a, b));
                }
            }
        }
        assert_eq!(union, expect);
    }

    proptest! {
        #[test]
        fn plan_invariants(rows in 1usize..7, cols in 1usize..7, four in any::<bool>()) {
            let conn = if four { Connectivity::Four } else { Connectivity::Eight };
            let plans = build_plans(rows, cols, conn);
            for plan in &plans {
                prop_assert!(plan.is_topological(&plan.order));
                let flat: Vec<usize> = plan.wavefronts.concat();
                prop_assert!(plan.is_topological(&flat));
                for wave in &plan.wavefronts {
                    for &v in wave {
                        prop_assert!(plan.predecessors[v].iter().all(|p| !wave.contains(p)));
                    }
                }
                for v in 0..plan.len() {
                    for &p in &plan.predecessors[v] {
                        prop_assert!(plan.successors[p].contains(&v));
                    }
                    for &s in &plan.successors[v] {
                        prop_assert!(plan.predecessors[s].contains(&v));
                    }
                }
            }
            for d in Direction::ALL {
                let p = &plans[d.index()];
                let q = &plans[d.reversed().index()];
                prop_assert_eq!(&p.predecessors, &q.successors);
            }
        }

        #[test]
        fn every_pair_is_reachable_in_some_direction(rows in 1usize..6, cols in 1usize..6, four in any::<bool>()) {
            let conn = if four { Connectivity::Four } else { Connectivity::Eight };
            let plans = build_plans(rows, cols, conn);
            let n = rows * cols;
            for v in 0..n {
                let masks: Vec<Vec<bool>> = plans.iter().map(|p| p.ancestors(v)).collect();
                for u in (0..n).filter(|&u| u != v) {
                    prop_assert!(masks.iter().any(|m| m[u]), "{} not reachable to {}", u, v);
                }
            }
        }

        #[test]
        fn partition_round_trip(c in 1usize..3, h in 1usize..10, w in 1usize..10, rows in 1usize..4, cols in 1usize..4) {
            let data: Vec<f64> = (0..c * h * w).map(|i| i as f64 + 1.0).collect();
            let img = Tensor::new(&[c, h, w], data).unwrap();
            let g = BlockGrid::partition(&img, rows, cols).unwrap();
            let back = g.reassemble();
            let (ph, pw) = (back.shape()[1], back.shape()[2]);
            prop_assert_eq!(ph % rows, 0);
            prop_assert_eq!(pw % cols, 0);
            for ch in 0..c {
                for y in 0..ph {
                    for x in 0..pw {
                        let got = back.data()[(ch * ph + y) * pw + x];
                        let want = if y < h && x < w { img.data()[(ch * h + y) * w + x] } else { 0.0 };
                        prop_assert_eq!(got, want);
                    }
                }
            }
        }
    }
}
