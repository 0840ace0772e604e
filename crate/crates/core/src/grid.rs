//! Grid traversal (Amanatides–Woo DDA) shared by the ray tracer, the depth
//! sensor, the occupancy mapper and line-of-sight checks.

use crate::world::World;

/// Which cell boundary a step crossed: `X` means a vertical boundary (the
/// surface normal points along x).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    /// Cell entered by this step; may lie outside the grid.
    pub cell: (i64, i64),
    /// Distance along the ray at which the cell is entered.
    pub t: f64,
    pub axis: Axis,
}

/// Walks the cells pierced by a ray, starting from the cell that contains
/// the origin (or an explicitly supplied start cell).
#[derive(Debug, Clone)]
pub struct CellWalker {
    cell: (i64, i64),
    step: (i64, i64),
    t_max: (f64, f64),
    t_delta: (f64, f64),
}

impl CellWalker {
    pub fn new(cell_size: f64, origin: (f64, f64), dir: (f64, f64)) -> Self {
        let cell = (
            (origin.0 / cell_size).floor() as i64,
            (origin.1 / cell_size).floor() as i64,
        );
        Self::from_cell(cell_size, cell, origin, dir)
    }

    /// Starts from `cell`, which must (up to rounding) contain `origin`.
    pub fn from_cell(
        cell_size: f64,
        cell: (i64, i64),
        origin: (f64, f64),
        dir: (f64, f64),
    ) -> Self {
        let axis_setup = |c: i64, o: f64, d: f64| -> (i64, f64, f64) {
            if d > 0.0 {
                (
                    1,
                    (((c + 1) as f64 * cell_size - o) / d).max(0.0),
                    cell_size / d,
                )
            } else if d < 0.0 {
                (
                    -1,
                    ((c as f64 * cell_size - o) / d).max(0.0),
                    -cell_size / d,
                )
            } else {
                (0, f64::INFINITY, f64::INFINITY)
            }
        };
        let (sx, tx, dx) = axis_setup(cell.0, origin.0, dir.0);
        let (sy, ty, dy) = axis_setup(cell.1, origin.1, dir.1);
        Self {
            cell,
            step: (sx, sy),
            t_max: (tx, ty),
            t_delta: (dx, dy),
        }
    }

    pub fn cell(&self) -> (i64, i64) {
        self.cell
    }

    /// Distance to the next boundary crossing.
    #[inline]
    pub fn next_t(&self) -> f64 {
        self.t_max.0.min(self.t_max.1)
    }

    #[inline]
    pub fn advance(&mut self) -> Step {
        // ties go to x, which keeps corner handling deterministic
        if self.t_max.0 <= self.t_max.1 {
            let t = self.t_max.0;
            self.cell.0 += self.step.0;
            self.t_max.0 += self.t_delta.0;
            Step {
                cell: self.cell,
                t,
                axis: Axis::X,
            }
        } else {
            let t = self.t_max.1;
            self.cell.1 += self.step.1;
            self.t_max.1 += self.t_delta.1;
            Step {
                cell: self.cell,
                t,
                axis: Axis::Y,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallHit {
    pub t: f64,
    pub cell: (i64, i64),
    /// Last free cell before the wall.
    pub from: (i64, i64),
    pub axis: Axis,
}

#[inline]
fn blocked(world: &World, cell: (i64, i64)) -> bool {
    !world.in_bounds(cell.0, cell.1) || !world.cell(cell.0 as usize, cell.1 as usize).is_free()
}

/// First wall (or grid edge) hit within `max_t`, starting in `start`.
#[inline]
pub fn first_wall_from(
    world: &World,
    start: (i64, i64),
    origin: (f64, f64),
    dir: (f64, f64),
    max_t: f64,
) -> Option<WallHit> {
    let mut walker = CellWalker::from_cell(world.cell_size(), start, origin, dir);
    loop {
        if walker.next_t() > max_t {
            return None;
        }
        let from = walker.cell();
        let s = walker.advance();
        if blocked(world, s.cell) {
            return Some(WallHit {
                t: s.t,
                cell: s.cell,
                from,
                axis: s.axis,
            });
        }
    }
}

pub fn first_wall(
    world: &World,
    origin: (f64, f64),
    dir: (f64, f64),
    max_t: f64,
) -> Option<WallHit> {
    let start = world.cell_of(origin.0, origin.1);
    if blocked(world, start) {
        return Some(WallHit {
            t: 0.0,
            cell: start,
            from: start,
            axis: Axis::X,
        });
    }
    first_wall_from(world, start, origin, dir, max_t)
}

/// True when the open segment `a → b` crosses no wall cell.
pub fn segment_clear(world: &World, a: (f64, f64), b: (f64, f64)) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return !blocked(world, world.cell_of(a.0, a.1));
    }
    first_wall(world, a, (dx / len, dy / len), len).is_none()
        && !blocked(world, world.cell_of(b.0, b.1))
}

/// Unit vector for a heading in degrees, counter-clockwise from +x.
#[inline]
pub fn heading_vector(deg: f64) -> (f64, f64) {
    // exact values for the four lattice headings
    let d = deg.rem_euclid(360.0);
    if d == 0.0 {
        (1.0, 0.0)
    } else if d == 90.0 {
        (0.0, 1.0)
    } else if d == 180.0 {
        (-1.0, 0.0)
    } else if d == 270.0 {
        (0.0, -1.0)
    } else {
        let r = d.to_radians();
        (r.cos(), r.sin())
    }
}
