//! Procedural indoor worlds.
//!
//! A [`World`] is an immutable occupancy grid whose wall cells carry a
//! material index. Layout is built on an integer-meter skeleton: every wall
//! line sits on the first fine cell of an integer meter, so the agent's 1 m
//! motion lattice (cell centres at `k + 0.5`) always runs through room
//! interiors and door openings.

mod gen;

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

pub use gen::generate_world;

/// Frequency band edges in Hz, `[lo, hi)` per band.
pub const BAND_EDGES_HZ: [(f64, f64); 4] = [
    (0.0, 500.0),
    (500.0, 1500.0),
    (1500.0, 4000.0),
    (4000.0, 8000.0),
];
pub const NUM_BANDS: usize = BAND_EDGES_HZ.len();

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
    #[error("cell ({0}, {1}) is outside the grid")]
    OutOfBounds(i64, i64),
    #[error("malformed world document: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaterialId(pub String);

impl From<&str> for MaterialId {
    fn from(s: &str) -> Self {
        MaterialId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub id: MaterialId,
    /// Energy absorption per band, each in `[0, 1]`.
    pub absorption: Vec<f64>,
    /// Fraction of reflected energy scattered diffusely, in `[0, 1]`.
    pub scattering: f64,
}

impl Material {
    pub fn new(id: &str, absorption: [f64; NUM_BANDS], scattering: f64) -> Self {
        Self {
            id: id.into(),
            absorption: absorption.to_vec(),
            scattering,
        }
    }

    /// Same absorption in every band.
    pub fn uniform(id: &str, absorption: f64, scattering: f64) -> Self {
        Self::new(id, [absorption; NUM_BANDS], scattering)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.absorption.len() != NUM_BANDS {
            return Err(WorldError::InvalidSpec(format!(
                "material {} has {} bands, expected {NUM_BANDS}",
                self.id.0,
                self.absorption.len()
            )));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.absorption.iter().copied().all(in_unit) || !in_unit(self.scattering) {
            return Err(WorldError::InvalidSpec(format!(
                "material {} has coefficients outside [0, 1]",
                self.id.0
            )));
        }
        Ok(())
    }

    pub fn concrete() -> Self {
        Self::new("concrete", [0.02, 0.03, 0.04, 0.05], 0.1)
    }

    pub fn drywall() -> Self {
        Self::new("drywall", [0.28, 0.15, 0.10, 0.10], 0.2)
    }

    pub fn curtain() -> Self {
        Self::new("curtain", [0.30, 0.45, 0.55, 0.60], 0.5)
    }

    pub fn default_palette() -> Vec<Material> {
        vec![Self::concrete(), Self::drywall(), Self::curtain()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    /// Width and height in meters.
    pub extent: [f64; 2],
    pub room_count: usize,
    pub corridor_width: f64,
    pub cell_size: f64,
    pub material_palette: Vec<Material>,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
}

fn default_max_retries() -> usize {
    64
}

impl WorldSpec {
    pub fn new(seed: u64, extent: [f64; 2], room_count: usize) -> Self {
        Self {
            seed,
            extent,
            room_count,
            corridor_width: 1.0,
            cell_size: 0.25,
            material_palette: Material::default_palette(),
            max_retries: default_max_retries(),
        }
    }

    /// Cells per meter; the layout skeleton needs this to be integral.
    pub fn cells_per_meter(&self) -> usize {
        (1.0 / self.cell_size).round() as usize
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidSpec(m));
        if !(self.cell_size > 0.0) {
            return bad("cell_size must be positive".into());
        }
        let cpm = 1.0 / self.cell_size;
        if (cpm - cpm.round()).abs() > 1e-9 {
            return bad(format!("cell_size {} does not divide 1 m", self.cell_size));
        }
        for e in self.extent {
            if !(e >= 3.0) || (e - e.round()).abs() > 1e-9 {
                return bad(format!("extent {e} must be a whole number of meters >= 3"));
            }
        }
        if self.room_count < 1 {
            return bad("room_count must be >= 1".into());
        }
        if !(self.corridor_width >= 1.0) {
            return bad("corridor_width must be at least one agent step (1 m)".into());
        }
        if self.material_palette.is_empty() {
            return bad("material palette is empty".into());
        }
        for m in &self.material_palette {
            m.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Free,
    /// Index into [`World::materials`].
    Wall(u16),
}

impl Cell {
    #[inline]
    pub fn is_free(self) -> bool {
        matches!(self, Cell::Free)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    spec: WorldSpec,
    width: usize,
    height: usize,
    cell_size: f64,
    cells: Vec<Cell>,
    materials: Vec<Material>,
}

impl World {
    /// Builds a world from a raw grid, checking boundary closure and
    /// connectivity of free space.
    pub fn from_grid(
        spec: WorldSpec,
        width: usize,
        height: usize,
        cells: Vec<Cell>,
        materials: Vec<Material>,
    ) -> Result<Self, WorldError> {
        if cells.len() != width * height || width < 3 || height < 3 {
            return Err(WorldError::Malformed("grid size mismatch".into()));
        }
        for m in &materials {
            m.validate()?;
        }
        if let Some(bad) = cells.iter().find_map(|c| match c {
            Cell::Wall(m) if *m as usize >= materials.len() => Some(*m),
            _ => None,
        }) {
            return Err(WorldError::Malformed(format!(
                "unknown material index {bad}"
            )));
        }
        let world = Self {
            cell_size: spec.cell_size,
            spec,
            width,
            height,
            cells,
            materials,
        };
        for i in 0..width {
            for j in [0, height - 1] {
                if world.cell(i, j).is_free() {
                    return Err(WorldError::Malformed("open boundary".into()));
                }
            }
        }
        for j in 0..height {
            for i in [0, width - 1] {
                if world.cell(i, j).is_free() {
                    return Err(WorldError::Malformed("open boundary".into()));
                }
            }
        }
        let free = world.free_cell_count();
        if free == 0 {
            return Err(WorldError::Malformed("world has no free space".into()));
        }
        if world.flood_fill_count(world.first_free_cell().unwrap()) != free {
            return Err(WorldError::Malformed("free space is disconnected".into()));
        }
        Ok(world)
    }

    /// A single closed rectangular room of `w × h` meters whose walls are all
    /// `material`.
    pub fn rectangular_room(
        w: f64,
        h: f64,
        cell_size: f64,
        material: Material,
    ) -> Result<Self, WorldError> {
        let mut spec = WorldSpec::new(0, [w, h], 1);
        spec.cell_size = cell_size;
        spec.material_palette = vec![material.clone()];
        spec.validate()?;
        let cpm = spec.cells_per_meter();
        let (nx, ny) = ((w.round() as usize) * cpm, (h.round() as usize) * cpm);
        let cells = (0..nx * ny)
            .map(|k| {
                let (i, j) = (k % nx, k / nx);
                if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                    Cell::Wall(0)
                } else {
                    Cell::Free
                }
            })
            .collect();
        Self::from_grid(spec, nx, ny, cells, vec![material])
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }
    pub fn materials(&self) -> &[Material] {
        &self.materials
    }
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }
    /// Extent in meters.
    pub fn extent(&self) -> [f64; 2] {
        [
            self.width as f64 * self.cell_size,
            self.height as f64 * self.cell_size,
        ]
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> Cell {
        self.cells[j * self.width + i]
    }

    pub fn in_bounds(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.width && (j as usize) < self.height
    }

    /// True iff the cell is free space.
    pub fn is_navigable(&self, i: i64, j: i64) -> Result<bool, WorldError> {
        if !self.in_bounds(i, j) {
            return Err(WorldError::OutOfBounds(i, j));
        }
        Ok(self.cell(i as usize, j as usize).is_free())
    }

    /// Cell containing a point (floor convention: a point on a boundary
    /// belongs to the cell on its positive side).
    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            (x / self.cell_size).floor() as i64,
            (y / self.cell_size).floor() as i64,
        )
    }

    pub fn is_free_point(&self, x: f64, y: f64) -> bool {
        let (i, j) = self.cell_of(x, y);
        self.in_bounds(i, j) && self.cell(i as usize, j as usize).is_free()
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.cell_size,
            (j as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn material_of(&self, i: usize, j: usize) -> Option<&Material> {
        match self.cell(i, j) {
            Cell::Free => None,
            Cell::Wall(m) => Some(&self.materials[m as usize]),
        }
    }

    pub fn free_cell_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_free()).count()
    }

    /// Total free floor area in m².
    pub fn free_area(&self) -> f64 {
        self.free_cell_count() as f64 * self.cell_size * self.cell_size
    }

    pub fn first_free_cell(&self) -> Option<(usize, usize)> {
        self.cells
            .iter()
            .position(|c| c.is_free())
            .map(|k| (k % self.width, k / self.width))
    }

    /// Number of free cells 4-connected to `start`.
    pub fn flood_fill_count(&self, start: (usize, usize)) -> usize {
        if !self.cell(start.0, start.1).is_free() {
            return 0;
        }
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::from([start]);
        seen[start.1 * self.width + start.0] = true;
        let mut count = 0;
        while let Some((i, j)) = queue.pop_front() {
            count += 1;
            let neighbours = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            for (ni, nj) in neighbours {
                if ni < self.width && nj < self.height {
                    let k = nj * self.width + ni;
                    if !seen[k] && self.cells[k].is_free() {
                        seen[k] = true;
                        queue.push_back((ni, nj));
                    }
                }
            }
        }
        count
    }

    /// Centres of the 1 m lattice (`k + 0.5`) whose fine cell is free.
    pub fn lattice_points(&self) -> Vec<(f64, f64)> {
        let [w, h] = self.extent();
        let mut out = Vec::new();
        for yi in 0..h.floor() as usize {
            for xi in 0..w.floor() as usize {
                let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
                if self.is_free_point(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Mirrors the grid about its vertical centre line; used by symmetry tests.
    pub fn mirrored_x(&self) -> World {
        let mut cells = self.cells.clone();
        for j in 0..self.height {
            for i in 0..self.width {
                cells[j * self.width + i] = self.cell(self.width - 1 - i, j);
            }
        }
        World {
            cells,
            ..self.clone()
        }
    }

    /// Rotates the grid by 90° counter-clockwise about the origin, shifting
    /// it back into the positive quadrant. A point `(x, y)` maps to
    /// `(H - y, x)` where `H` is the height in meters.
    pub fn rotated_ccw(&self) -> World {
        let (w, h) = (self.width, self.height);
        let mut cells = vec![Cell::Free; w * h];
        // new grid is h wide, w tall
        for j in 0..h {
            for i in 0..w {
                let (ni, nj) = (h - 1 - j, i);
                cells[nj * h + ni] = self.cell(i, j);
            }
        }
        let mut spec = self.spec.clone();
        spec.extent = [self.spec.extent[1], self.spec.extent[0]];
        World {
            spec,
            width: h,
            height: w,
            cells,
            ..self.clone()
        }
    }

    /// Returns a copy with every material replaced.
    pub fn with_materials(&self, materials: Vec<Material>) -> Result<World, WorldError> {
        if materials.len() != self.materials.len() {
            return Err(WorldError::Malformed("material table size changed".into()));
        }
        for m in &materials {
            m.validate()?;
        }
        Ok(World {
            materials,
            ..self.clone()
        })
    }

    /// Returns a copy with extra wall cells (material index `material`).
    pub fn with_walls(&self, walls: &[(usize, usize)], material: u16) -> Result<World, WorldError> {
        let mut cells = self.cells.clone();
        for &(i, j) in walls {
            cells[j * self.width + i] = Cell::Wall(material);
        }
        World::from_grid(
            self.spec.clone(),
            self.width,
            self.height,
            cells,
            self.materials.clone(),
        )
    }
}

/// On-disk representation: spec, material table and a row-major run-length
/// encoded grid where code 0 is free space and `m + 1` is a wall of material
/// `m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldDocument {
    pub format: String,
    pub version: u32,
    pub spec: WorldSpec,
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub materials: Vec<Material>,
    /// `[code, run_length]` pairs.
    pub grid_rle: Vec<[u32; 2]>,
}

const WORLD_FORMAT: &str = "echobench-world";

impl World {
    pub fn to_document(&self) -> WorldDocument {
        let code = |c: &Cell| match c {
            Cell::Free => 0u32,
            Cell::Wall(m) => *m as u32 + 1,
        };
        let mut rle: Vec<[u32; 2]> = Vec::new();
        for c in &self.cells {
            let k = code(c);
            match rle.last_mut() {
                Some(run) if run[0] == k => run[1] += 1,
                _ => rle.push([k, 1]),
            }
        }
        WorldDocument {
            format: WORLD_FORMAT.into(),
            version: 1,
            spec: self.spec.clone(),
            width: self.width,
            height: self.height,
            cell_size: self.cell_size,
            materials: self.materials.clone(),
            grid_rle: rle,
        }
    }

    pub fn from_document(doc: WorldDocument) -> Result<World, WorldError> {
        if doc.format != WORLD_FORMAT || doc.version != 1 {
            return Err(WorldError::Malformed(format!(
                "unsupported format {} v{}",
                doc.format, doc.version
            )));
        }
        let mut cells = Vec::with_capacity(doc.width * doc.height);
        for [code, len] in doc.grid_rle {
            let cell = if code == 0 {
                Cell::Free
            } else {
                Cell::Wall((code - 1) as u16)
            };
            cells.extend(std::iter::repeat(cell).take(len as usize));
        }
        let mut spec = doc.spec;
        spec.cell_size = doc.cell_size;
        World::from_grid(spec, doc.width, doc.height, cells, doc.materials)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("world document serializes")
    }

    pub fn from_json(s: &str) -> Result<World, WorldError> {
        let doc: WorldDocument =
            serde_json::from_str(s).map_err(|e| WorldError::Malformed(e.to_string()))?;
        World::from_document(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangular_room_has_closed_boundary() {
        let w = World::rectangular_room(6.0, 4.0, 0.25, Material::concrete()).unwrap();
        assert_eq!((w.width(), w.height()), (24, 16));
        assert!(!w.is_navigable(0, 5).unwrap());
        assert!(w.is_navigable(12, 8).unwrap());
        assert_eq!(w.free_cell_count(), 22 * 14);
        assert!(matches!(
            w.is_navigable(-1, 0),
            Err(WorldError::OutOfBounds(-1, 0))
        ));
        assert!(matches!(
            w.is_navigable(24, 0),
            Err(WorldError::OutOfBounds(24, 0))
        ));
    }

    #[test]
    fn navigable_matches_exhaustive_scan() {
        let w = generate_world(&WorldSpec::new(3, [16.0, 12.0], 4)).unwrap();
        let mut n = 0;
        for j in 0..w.height() {
            for i in 0..w.width() {
                let nav = w.is_navigable(i as i64, j as i64).unwrap();
                assert_eq!(nav, w.cells()[j * w.width() + i] == Cell::Free);
                n += nav as usize;
            }
        }
        assert_eq!(n, w.free_cell_count());
    }

    #[test]
    fn rejects_open_boundary_and_disconnected_space() {
        let spec = WorldSpec::new(0, [3.0, 3.0], 1);
        let mut cells = vec![Cell::Wall(0); 9];
        cells[4] = Cell::Free;
        cells[1] = Cell::Free;
        let err =
            World::from_grid(spec.clone(), 3, 3, cells, vec![Material::concrete()]).unwrap_err();
        assert!(matches!(err, WorldError::Malformed(_)));

        let mut cells = vec![Cell::Wall(0); 25];
        cells[6] = Cell::Free;
        cells[18] = Cell::Free;
        let err = World::from_grid(spec, 5, 5, cells, vec![Material::concrete()]).unwrap_err();
        assert!(err.to_string().contains("disconnected"));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let w = generate_world(&WorldSpec::new(11, [20.0, 14.0], 5)).unwrap();
        let back = World::from_json(&w.to_json()).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn rotation_maps_points() {
        let w = generate_world(&WorldSpec::new(5, [14.0, 10.0], 3)).unwrap();
        let r = w.rotated_ccw();
        assert_eq!(r.extent(), [10.0, 14.0]);
        for (x, y) in [(1.3, 2.7), (5.5, 5.5), (12.1, 8.9)] {
            assert_eq!(w.is_free_point(x, y), r.is_free_point(10.0 - y, x));
        }
    }
}
