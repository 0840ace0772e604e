//! Recursive room placement with an optional central corridor and door
//! punching along a random spanning tree of room adjacencies.

use super::{Cell, World, WorldError, WorldSpec};
use crate::rng::{streams, substream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Smallest room span between wall lines, in meters.
const MIN_ROOM: i32 = 3;
/// Probability that a non-tree adjacency also gets a door.
const EXTRA_DOOR_PROB: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Region {
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
    corridor: bool,
}

impl Region {
    fn span(&self, axis: usize) -> i32 {
        if axis == 0 {
            self.x1 - self.x0
        } else {
            self.y1 - self.y0
        }
    }

    fn area(&self) -> i32 {
        self.span(0) * self.span(1)
    }

    fn split(&self, axis: usize, at: i32) -> (Region, Region) {
        let (mut a, mut b) = (*self, *self);
        if axis == 0 {
            a.x1 = at;
            b.x0 = at;
        } else {
            a.y1 = at;
            b.y0 = at;
        }
        (a, b)
    }
}

/// A shared wall segment between two regions.
#[derive(Debug, Clone, Copy)]
struct Adjacency {
    a: usize,
    b: usize,
    /// 0: the wall is a vertical line `x = line`; 1: horizontal `y = line`.
    axis: usize,
    line: i32,
    lo: i32,
    hi: i32,
}

/// Generates a world; a pure function of `spec`.
pub fn generate_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let mut rng = substream(spec.seed, streams::WORLDGEN, 0);
    let mut last_err = String::new();
    for _ in 0..spec.max_retries.max(1) {
        match try_generate(spec, &mut rng) {
            Ok(world) => return Ok(world),
            Err(e) => last_err = e,
        }
    }
    Err(WorldError::InfeasibleSpec(format!(
        "{} rooms do not fit in {}x{} m after {} attempts: {last_err}",
        spec.room_count, spec.extent[0], spec.extent[1], spec.max_retries
    )))
}

fn try_generate(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<World, String> {
    let (w, h) = (spec.extent[0].round() as i32, spec.extent[1].round() as i32);
    let cpm = spec.cells_per_meter() as i32;
    let door = spec.corridor_width.ceil() as i32;
    let corridor_span = (spec.corridor_width + spec.cell_size).ceil() as i32;

    let regions = place_regions(spec, rng, w, h, corridor_span)?;

    let (nx, ny) = ((w * cpm) as usize, (h * cpm) as usize);
    let line_x = |k: i32| {
        if k == w {
            (k * cpm - 1) as usize
        } else {
            (k * cpm) as usize
        }
    };
    let line_y = |k: i32| {
        if k == h {
            (k * cpm - 1) as usize
        } else {
            (k * cpm) as usize
        }
    };

    let mut region_of: Vec<Option<usize>> = vec![None; nx * ny];
    for (r, reg) in regions.iter().enumerate() {
        for j in line_y(reg.y0) + 1..line_y(reg.y1) {
            for i in line_x(reg.x0) + 1..line_x(reg.x1) {
                region_of[j * nx + i] = Some(r);
            }
        }
    }

    // Doors: corridor to every neighbour, then a random spanning tree, then
    // a few extra loops.
    let mut adj = adjacencies(&regions, w, h, door);
    adj.shuffle(rng);
    adj.sort_by_key(|e| !(regions[e.a].corridor || regions[e.b].corridor));
    let mut parent: Vec<usize> = (0..regions.len()).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let n = p[c];
            p[c] = r;
            c = n;
        }
        r
    }
    for e in &adj {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        let is_corridor = regions[e.a].corridor || regions[e.b].corridor;
        let punch = if ra != rb {
            parent[ra] = rb;
            true
        } else {
            is_corridor || rng.gen_bool(EXTRA_DOOR_PROB)
        };
        if !punch {
            continue;
        }
        let at = rng.gen_range(e.lo + 1..=e.hi - door - 1);
        for m in 0..door * cpm {
            let along = (at * cpm + m) as usize;
            let k = if e.axis == 0 {
                along * nx + line_x(e.line)
            } else {
                line_y(e.line) * nx + along
            };
            region_of[k] = Some(e.a);
        }
    }

    let palette = &spec.material_palette;
    // cycle through the palette so neighbouring rooms tend to differ
    let mut region_material: Vec<u16> = (0..regions.len())
        .map(|r| (r % palette.len()) as u16)
        .collect();
    region_material.shuffle(rng);

    let mut cells = vec![Cell::Wall(0); nx * ny];
    for k in 0..nx * ny {
        if region_of[k].is_some() {
            cells[k] = Cell::Free;
        }
    }
    for j in 0..ny {
        for i in 0..nx {
            if cells[j * nx + i].is_free() {
                continue;
            }
            let mut best: Option<usize> = None;
            let neighbours = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            for (ni, nj) in neighbours {
                if ni < nx && nj < ny {
                    if let Some(r) = region_of[nj * nx + ni] {
                        best = Some(best.map_or(r, |b| b.min(r)));
                    }
                }
            }
            if let Some(r) = best {
                cells[j * nx + i] = Cell::Wall(region_material[r]);
            }
        }
    }

    World::from_grid(spec.clone(), nx, ny, cells, palette.clone()).map_err(|e| e.to_string())
}

fn place_regions(
    spec: &WorldSpec,
    rng: &mut ChaCha8Rng,
    w: i32,
    h: i32,
    corridor_span: i32,
) -> Result<Vec<Region>, String> {
    let full = Region {
        x0: 0,
        y0: 0,
        x1: w,
        y1: h,
        corridor: false,
    };
    let mut rooms = Vec::new();
    let mut corridor = None;
    if spec.room_count >= 3 {
        let axis = if w >= h { 0 } else { 1 };
        let span = full.span(axis);
        if span >= 2 * MIN_ROOM + corridor_span {
            let at = rng.gen_range(MIN_ROOM..=span - MIN_ROOM - corridor_span);
            let (a, rest) = full.split(axis, at);
            let (mut c, b) = rest.split(axis, at + corridor_span);
            c.corridor = true;
            corridor = Some(c);
            rooms.push(a);
            rooms.push(b);
        }
    }
    if rooms.is_empty() {
        rooms.push(full);
    }
    while rooms.len() < spec.room_count {
        let splittable = |r: &Region| r.span(0).max(r.span(1)) >= 2 * MIN_ROOM;
        let Some(idx) = (0..rooms.len())
            .filter(|&i| splittable(&rooms[i]))
            .max_by_key(|&i| (rooms[i].area(), std::cmp::Reverse(i)))
        else {
            return Err(format!("only {} rooms could be placed", rooms.len()));
        };
        let r = rooms[idx];
        let axis = match r.span(0).cmp(&r.span(1)) {
            std::cmp::Ordering::Greater => 0,
            std::cmp::Ordering::Less => 1,
            std::cmp::Ordering::Equal => rng.gen_range(0..2),
        };
        let at = rng.gen_range(MIN_ROOM..=r.span(axis) - MIN_ROOM);
        let origin = if axis == 0 { r.x0 } else { r.y0 };
        let (a, b) = r.split(axis, origin + at);
        rooms[idx] = a;
        rooms.push(b);
    }
    rooms.extend(corridor);
    Ok(rooms)
}

fn adjacencies(regions: &[Region], w: i32, h: i32, door: i32) -> Vec<Adjacency> {
    let mut out = Vec::new();
    for a in 0..regions.len() {
        for b in 0..regions.len() {
            if a == b {
                continue;
            }
            let (ra, rb) = (&regions[a], &regions[b]);
            if ra.x1 == rb.x0 && ra.x1 < w {
                let (lo, hi) = (ra.y0.max(rb.y0), ra.y1.min(rb.y1));
                if hi - lo >= door + 2 {
                    out.push(Adjacency {
                        a,
                        b,
                        axis: 0,
                        line: ra.x1,
                        lo,
                        hi,
                    });
                }
            }
            if ra.y1 == rb.y0 && ra.y1 < h {
                let (lo, hi) = (ra.x0.max(rb.x0), ra.x1.min(rb.x1));
                if hi - lo >= door + 2 {
                    out.push(Adjacency {
                        a,
                        b,
                        axis: 1,
                        line: ra.y1,
                        lo,
                        hi,
                    });
                }
            }
        }
    }
    out
}
