//! Grid navmesh and A* path planning.
//!
//! The grid is 8-connected with an octile heuristic, so equal f-costs are
//! common. How the frontier orders those ties is selectable: insertion order
//! (stable), raw binary-heap order (deterministic but arbitrary), or a random
//! key drawn per push.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{densify, SimError};
use crate::trace::Position;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavGrid {
    pub cell_size: f64,
    pub cols: u32,
    pub rows: u32,
    /// Blocked cells as `[col, row]`.
    #[serde(default)]
    pub blocked: BTreeSet<[u32; 2]>,
}

pub type Cell = [u32; 2];

impl NavGrid {
    pub fn open(cell_size: f64, cols: u32, rows: u32) -> Self {
        NavGrid { cell_size, cols, rows, blocked: BTreeSet::new() }
    }

    /// Blocks every cell whose center lies inside the rectangle.
    pub fn block_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        for c in 0..self.cols {
            for r in 0..self.rows {
                let ctr = self.center([c, r]);
                if ctr.x >= x0 && ctr.x <= x1 && ctr.y >= y0 && ctr.y <= y1 {
                    self.blocked.insert([c, r]);
                }
            }
        }
    }

    pub fn is_blocked(&self, cell: Cell) -> bool {
        self.blocked.contains(&cell)
    }

    pub fn cell_of(&self, p: &Position) -> Option<Cell> {
        if p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let c = (p.x / self.cell_size).floor() as u64;
        let r = (p.y / self.cell_size).floor() as u64;
        (c < self.cols as u64 && r < self.rows as u64).then_some([c as u32, r as u32])
    }

    pub fn center(&self, cell: Cell) -> Position {
        Position::planar(
            (cell[0] as f64 + 0.5) * self.cell_size,
            (cell[1] as f64 + 0.5) * self.cell_size,
        )
    }

    fn index(&self, cell: Cell) -> usize {
        cell[1] as usize * self.cols as usize + cell[0] as usize
    }

    fn cell_at(&self, index: usize) -> Cell {
        [(index % self.cols as usize) as u32, (index / self.cols as usize) as u32]
    }

    /// Free neighbors with step cost. Diagonal moves may not cut a blocked corner.
    fn neighbors(&self, cell: Cell, out: &mut Vec<(Cell, f64)>) {
        out.clear();
        let (c, r) = (cell[0] as i64, cell[1] as i64);
        let free = |dc: i64, dr: i64| {
            let (nc, nr) = (c + dc, r + dr);
            nc >= 0
                && nr >= 0
                && nc < self.cols as i64
                && nr < self.rows as i64
                && !self.is_blocked([nc as u32, nr as u32])
        };
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                if (dc, dr) == (0, 0) || !free(dc, dr) {
                    continue;
                }
                let diagonal = dc != 0 && dr != 0;
                if diagonal && !(free(dc, 0) && free(0, dr)) {
                    continue;
                }
                let step = if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
                out.push(([(c + dc) as u32, (r + dr) as u32], step * self.cell_size));
            }
        }
    }
}

/// Octile distance between cell centers.
pub fn octile(grid: &NavGrid, a: Cell, b: Cell) -> f64 {
    let dx = (a[0] as f64 - b[0] as f64).abs();
    let dy = (a[1] as f64 - b[1] as f64).abs();
    let (lo, hi) = if dx < dy { (dx, dy) } else { (dy, dx) };
    ((hi - lo) + std::f64::consts::SQRT_2 * lo) * grid.cell_size
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontierMode {
    StableInsertionOrder,
    HeapOrderDeterministic,
    RandomTiebreak,
}

#[derive(Debug)]
struct Entry {
    f: f64,
    key: u64,
    node: usize,
    compare_key: bool,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    // Reversed: BinaryHeap is a max-heap and we pop the smallest f first.
    fn cmp(&self, other: &Self) -> Ordering {
        let by_f = other.f.total_cmp(&self.f);
        if self.compare_key {
            by_f.then(other.key.cmp(&self.key))
        } else {
            by_f
        }
    }
}

/// Priority-ordered open set for A*.
pub struct Frontier<'r, R: Rng> {
    heap: BinaryHeap<Entry>,
    mode: FrontierMode,
    next_seq: u64,
    rng: Option<&'r mut R>,
}

impl<'r, R: Rng> Frontier<'r, R> {
    /// `rng` is required for [`FrontierMode::RandomTiebreak`] and ignored otherwise.
    pub fn new(mode: FrontierMode, rng: Option<&'r mut R>) -> Self {
        Frontier { heap: BinaryHeap::new(), mode, next_seq: 0, rng }
    }

    pub fn push(&mut self, f: f64, node: usize) {
        let (key, compare_key) = match self.mode {
            FrontierMode::StableInsertionOrder => (self.next_seq, true),
            FrontierMode::HeapOrderDeterministic => (self.next_seq, false),
            FrontierMode::RandomTiebreak => {
                let rng = self.rng.as_mut().expect("random tie-break needs an rng");
                (rng.gen(), true)
            }
        };
        self.next_seq += 1;
        self.heap.push(Entry { f, key, node, compare_key });
    }

    pub fn pop(&mut self) -> Option<(f64, usize)> {
        self.heap.pop().map(|e| (e.f, e.node))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    pub cells: Vec<Cell>,
    pub cost: f64,
}

/// A* over grid cells.
pub fn plan_cells<R: Rng>(
    grid: &NavGrid,
    start: Cell,
    goal: Cell,
    mode: FrontierMode,
    rng: Option<&mut R>,
) -> Result<GridPath, SimError> {
    for (what, cell) in [("start", start), ("goal", goal)] {
        if cell[0] >= grid.cols || cell[1] >= grid.rows || grid.is_blocked(cell) {
            return Err(SimError::BlockedCell { what, cell });
        }
    }
    let size = grid.cols as usize * grid.rows as usize;
    let mut g = vec![f64::INFINITY; size];
    let mut parent: Vec<Option<usize>> = vec![None; size];
    let mut closed = vec![false; size];
    let mut frontier = Frontier::new(mode, rng);
    let mut nbrs = Vec::with_capacity(8);

    let s = grid.index(start);
    let goal_idx = grid.index(goal);
    g[s] = 0.0;
    frontier.push(octile(grid, start, goal), s);

    while let Some((_, node)) = frontier.pop() {
        if closed[node] {
            continue;
        }
        if node == goal_idx {
            let mut cells = vec![grid.cell_at(node)];
            let mut cur = node;
            while let Some(p) = parent[cur] {
                cells.push(grid.cell_at(p));
                cur = p;
            }
            cells.reverse();
            return Ok(GridPath { cells, cost: g[goal_idx] });
        }
        closed[node] = true;
        grid.neighbors(grid.cell_at(node), &mut nbrs);
        for &(cell, step) in &nbrs {
            let ni = grid.index(cell);
            if closed[ni] {
                continue;
            }
            let tentative = g[node] + step;
            if tentative < g[ni] {
                g[ni] = tentative;
                parent[ni] = Some(node);
                frontier.push(tentative + octile(grid, cell, goal), ni);
            }
        }
    }
    Err(SimError::Unreachable { start, goal })
}

/// Plans from `start` to `goal` and returns waypoints spaced at most
/// `spacing` apart: the start point, the centers of intermediate cells, then
/// the goal point.
pub fn plan_path<R: Rng>(
    grid: &NavGrid,
    start: Position,
    goal: Position,
    mode: FrontierMode,
    rng: Option<&mut R>,
    spacing: f64,
) -> Result<Vec<Position>, SimError> {
    let sc = grid.cell_of(&start).ok_or(SimError::OffGrid(start))?;
    let gc = grid.cell_of(&goal).ok_or(SimError::OffGrid(goal))?;
    let path = plan_cells(grid, sc, gc, mode, rng)?;
    let mut control = vec![start];
    if path.cells.len() > 2 {
        control.extend(path.cells[1..path.cells.len() - 1].iter().map(|&c| grid.center(c)));
    }
    control.push(goal);
    Ok(densify(&control, spacing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    #[test]
    fn stable_frontier_pops_ties_in_insertion_order() {
        let mut f: Frontier<NoRng> = Frontier::new(FrontierMode::StableInsertionOrder, None);
        for node in [5, 3, 9, 1] {
            f.push(1.0, node);
        }
        f.push(0.5, 7);
        let order: Vec<usize> = std::iter::from_fn(|| f.pop().map(|(_, n)| n)).collect();
        assert_eq!(order, vec![7, 5, 3, 9, 1]);
    }

    #[test]
    fn heap_frontier_is_repeatable() {
        let run = || {
            let mut f: Frontier<NoRng> = Frontier::new(FrontierMode::HeapOrderDeterministic, None);
            for node in 0..40 {
                f.push((node % 3) as f64, node);
            }
            std::iter::from_fn(|| f.pop().map(|(_, n)| n)).collect::<Vec<_>>()
        };
        let first = run();
        assert_eq!(first, run());
        // f-order is still respected.
        assert!(first[..14].iter().all(|n| n % 3 == 0));
    }

    #[test]
    fn start_equals_goal_gives_single_waypoint() {
        let grid = NavGrid::open(1.0, 10, 10);
        let p = Position::planar(2.5, 2.5);
        let path = plan_path::<NoRng>(&grid, p, p, FrontierMode::StableInsertionOrder, None, 0.1).unwrap();
        assert_eq!(path, vec![p]);
    }

    #[test]
    fn straight_corridor_costs_euclidean_distance() {
        let grid = NavGrid::open(1.0, 30, 3);
        let a = Position::planar(0.5, 1.5);
        let b = Position::planar(20.5, 1.5);
        let cells = plan_cells::<NoRng>(&grid, [0, 1], [20, 1], FrontierMode::StableInsertionOrder, None).unwrap();
        assert!((cells.cost - 20.0).abs() < 1e-12);
        let path = plan_path::<NoRng>(&grid, a, b, FrontierMode::HeapOrderDeterministic, None, 0.1).unwrap();
        let len: f64 = path.windows(2).map(|w| w[0].distance(&w[1])).sum();
        assert!((len - a.distance(&b)).abs() < 1e-9);
        assert!(path.windows(2).all(|w| w[0].distance(&w[1]) <= 0.1 + 1e-12));
        assert_eq!(path.len(), 201);
    }

    #[test]
    fn optimal_cost_is_octile_in_open_grid() {
        let grid = NavGrid::open(0.5, 20, 20);
        for (goal, mode) in [([13, 4], FrontierMode::StableInsertionOrder), ([2, 17], FrontierMode::HeapOrderDeterministic)] {
            let p = plan_cells::<NoRng>(&grid, [1, 1], goal, mode, None).unwrap();
            assert!((p.cost - octile(&grid, [1, 1], goal)).abs() < 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = plan_cells(&grid, [1, 1], [13, 9], FrontierMode::RandomTiebreak, Some(&mut rng)).unwrap();
        assert!((p.cost - octile(&grid, [1, 1], [13, 9])).abs() < 1e-9);
    }

    #[test]
    fn detours_around_wall_and_reports_unreachable() {
        let mut grid = NavGrid::open(1.0, 10, 10);
        for r in 0..9 {
            grid.blocked.insert([5, r]);
        }
        let p = plan_cells::<NoRng>(&grid, [0, 0], [9, 0], FrontierMode::StableInsertionOrder, None).unwrap();
        assert!(p.cells.iter().all(|c| !grid.is_blocked(*c)));
        assert!(p.cells.contains(&[5, 9]));
        grid.blocked.insert([5, 9]);
        assert!(matches!(
            plan_cells::<NoRng>(&grid, [0, 0], [9, 0], FrontierMode::StableInsertionOrder, None),
            Err(SimError::Unreachable { .. })
        ));
        assert!(matches!(
            plan_cells::<NoRng>(&grid, [5, 3], [9, 0], FrontierMode::StableInsertionOrder, None),
            Err(SimError::BlockedCell { what: "start", .. })
        ));
    }

    #[test]
    fn no_corner_cutting() {
        let mut grid = NavGrid::open(1.0, 3, 3);
        grid.blocked.insert([1, 0]);
        let p = plan_cells::<NoRng>(&grid, [0, 0], [2, 1], FrontierMode::StableInsertionOrder, None).unwrap();
        // (0,0) -> (1,1) diagonal would clip blocked (1,0).
        assert_eq!(p.cells[1], [0, 1]);
    }
}
