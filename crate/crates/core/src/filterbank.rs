//! Fixed bank of 30 zero-sum high-pass kernels built from seven prototypes
//! by discrete rotation, and its application to image patches.
//!
//! Prototypes (all on a 5×5 grid, the centre cell being the pixel the
//! residual is attached to):
//!
//! | id | shape | orientations |
//! |----|-------|--------------|
//! | a  | first-order difference `[-1, 1]` | 8 compass directions |
//! | b  | second-order difference `[1, -2, 1]` starting at the centre | 8 compass directions |
//! | c  | third-order difference `[1, -3, 3, -1]` | →, ↓, ↗, ↘ |
//! | d  | 3×3 edge predictor | 4 cardinal |
//! | e  | 5×5 edge predictor | 4 cardinal |
//! | f  | 3×3 square predictor | none |
//! | g  | 5×5 square predictor | none |
//!
//! Coefficients are kept as integers with a per-kernel divisor so that the
//! zero-sum property is exact; the divisor makes the dominant coefficient ±1.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{reflect, Image};

pub const KERNEL_SIZE: usize = 5;
pub const BANK_SIZE: usize = 30;
const R: isize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prototype {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl Prototype {
    pub const ALL: [Prototype; 7] = [
        Prototype::A,
        Prototype::B,
        Prototype::C,
        Prototype::D,
        Prototype::E,
        Prototype::F,
        Prototype::G,
    ];

    /// Orientations kept in the bank, in bank order.
    pub fn directions(self) -> &'static [Direction] {
        use Direction::*;
        match self {
            Prototype::A | Prototype::B => &[NorthEast, East, SouthEast, South, SouthWest, West, NorthWest, North],
            Prototype::C => &[East, South, NorthEast, SouthEast],
            Prototype::D | Prototype::E => &[East, South, West, North],
            Prototype::F | Prototype::G => &[Identity],
        }
    }

    fn canonical_direction(self) -> Direction {
        match self {
            Prototype::F | Prototype::G => Direction::Identity,
            _ => Direction::East,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    North,
    NorthEast,
    East,
    SouthEast,
    South,
    SouthWest,
    West,
    NorthWest,
    Identity,
}

impl Direction {
    /// (row, column) unit step; rows grow downwards.
    fn step(self) -> (isize, isize) {
        match self {
            Direction::North => (-1, 0),
            Direction::NorthEast => (-1, 1),
            Direction::East => (0, 1),
            Direction::SouthEast => (1, 1),
            Direction::South => (1, 0),
            Direction::SouthWest => (1, -1),
            Direction::West => (0, -1),
            Direction::NorthWest => (-1, -1),
            Direction::Identity => (0, 0),
        }
    }

    /// Clockwise quarter turns from North, for the cardinal directions.
    fn quarter_turns(self) -> Option<usize> {
        match self {
            Direction::North => Some(0),
            Direction::East => Some(1),
            Direction::South => Some(2),
            Direction::West => Some(3),
            _ => None,
        }
    }

    pub fn arrow(self) -> &'static str {
        match self {
            Direction::North => "↑",
            Direction::NorthEast => "↗",
            Direction::East => "→",
            Direction::SouthEast => "↘",
            Direction::South => "↓",
            Direction::SouthWest => "↙",
            Direction::West => "←",
            Direction::NorthWest => "↖",
            Direction::Identity => "·",
        }
    }
}

type Grid = [[i32; KERNEL_SIZE]; KERNEL_SIZE];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub prototype: Prototype,
    pub direction: Direction,
    /// Integer taps; the real coefficient is `taps / divisor`.
    taps: Grid,
    divisor: i32,
}

impl Kernel {
    pub fn coefficients(&self) -> [[f64; KERNEL_SIZE]; KERNEL_SIZE] {
        self.taps.map(|row| row.map(|t| f64::from(t) / f64::from(self.divisor)))
    }

    pub fn taps(&self) -> &Grid {
        &self.taps
    }

    pub fn divisor(&self) -> i32 {
        self.divisor
    }

    /// Exact integer sum of the taps.
    pub fn tap_sum(&self) -> i64 {
        self.taps.iter().flatten().map(|&t| i64::from(t)).sum()
    }

    fn nonzero(&self) -> Vec<(isize, isize, f32)> {
        let mut out = Vec::new();
        for (u, row) in self.taps.iter().enumerate() {
            for (v, &t) in row.iter().enumerate() {
                if t != 0 {
                    out.push((u as isize - R, v as isize - R, t as f32 / self.divisor as f32));
                }
            }
        }
        out
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?}){}", self.prototype, self.direction.arrow())
    }
}

fn line(offsets_and_taps: &[(isize, i32)], dir: Direction) -> Grid {
    let (dy, dx) = dir.step();
    let mut g = [[0; KERNEL_SIZE]; KERNEL_SIZE];
    for &(t, w) in offsets_and_taps {
        g[(R + t * dy) as usize][(R + t * dx) as usize] += w;
    }
    g
}

fn rotate_cw(g: &Grid) -> Grid {
    let mut out = [[0; KERNEL_SIZE]; KERNEL_SIZE];
    for (r, row) in g.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c][KERNEL_SIZE - 1 - r] = v;
        }
    }
    out
}

fn embed3(k: [[i32; 3]; 3]) -> Grid {
    let mut g = [[0; KERNEL_SIZE]; KERNEL_SIZE];
    for r in 0..3 {
        for c in 0..3 {
            g[r + 1][c + 1] = k[r][c];
        }
    }
    g
}

const EDGE5: Grid = [
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
];

const SQUARE5: Grid = [
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
];

/// Raw geometry of `prototype` facing `direction`, with no check that the
/// orientation belongs to the prototype's rotation group.
fn oriented(prototype: Prototype, direction: Direction) -> Option<Kernel> {
    let (taps, divisor) = match prototype {
        Prototype::A => (line(&[(0, -1), (1, 1)], direction), 1),
        Prototype::B => (line(&[(0, 1), (1, -2), (2, 1)], direction), 2),
        Prototype::C => (line(&[(-1, 1), (0, -3), (1, 3), (2, -1)], direction), 3),
        Prototype::D | Prototype::E => {
            let base = if prototype == Prototype::D {
                embed3([[-1, 2, -1], [2, -4, 2], [0, 0, 0]])
            } else {
                EDGE5
            };
            let mut g = base;
            for _ in 0..direction.quarter_turns()? {
                g = rotate_cw(&g);
            }
            (g, if prototype == Prototype::D { 4 } else { 12 })
        }
        Prototype::F => (embed3([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]]), 4),
        Prototype::G => (SQUARE5, 12),
    };
    if direction == Direction::Identity && !matches!(prototype, Prototype::F | Prototype::G) {
        return None;
    }
    Some(Kernel {
        prototype,
        direction,
        taps,
        divisor,
    })
}

pub fn build_prototypes() -> Vec<Kernel> {
    Prototype::ALL
        .into_iter()
        .map(|p| oriented(p, p.canonical_direction()).expect("canonical orientation"))
        .collect()
}

/// Re-orients `kernel`'s prototype to face `direction`.
pub fn rotate_kernel(kernel: &Kernel, direction: Direction) -> Result<Kernel> {
    let p = kernel.prototype;
    if !p.directions().contains(&direction) {
        return Err(invalid(format!(
            "prototype {p:?} has no {:?} orientation",
            direction
        )));
    }
    Ok(oriented(p, direction).expect("direction in group"))
}

/// a×8, b×8, c×4, d×4, e×4, f, g.
pub fn build_bank() -> Vec<Kernel> {
    build_prototypes()
        .iter()
        .flat_map(|proto| {
            proto
                .prototype
                .directions()
                .iter()
                .map(move |&d| rotate_kernel(proto, d).expect("bank orientation"))
        })
        .collect()
}

#[derive(Serialize)]
struct KernelDoc<'a> {
    prototype: Prototype,
    direction: Direction,
    coefficients: [[f64; KERNEL_SIZE]; KERNEL_SIZE],
    #[serde(skip)]
    _k: std::marker::PhantomData<&'a ()>,
}

/// JSON array of `{prototype, direction, coefficients}` objects.
pub fn bank_to_json(bank: &[Kernel]) -> String {
    let docs: Vec<KernelDoc> = bank
        .iter()
        .map(|k| KernelDoc {
            prototype: k.prototype,
            direction: k.direction,
            coefficients: k.coefficients(),
            _k: std::marker::PhantomData,
        })
        .collect();
    serde_json::to_string_pretty(&docs).expect("bank serializes")
}

/// 30 residual maps of one `size`×`size` patch, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStack {
    pub size: usize,
    pub data: Vec<f32>,
}

impl ResidualStack {
    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[k * n..(k + 1) * n]
    }
}

/// Applies a bank to single-channel planes.
#[derive(Clone, Debug)]
pub struct FilterBank {
    kernels: Vec<Kernel>,
    taps: Vec<Vec<(isize, isize, f32)>>,
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::new(build_bank())
    }
}

impl FilterBank {
    pub fn new(kernels: Vec<Kernel>) -> Self {
        let taps = kernels.iter().map(Kernel::nonzero).collect();
        Self { kernels, taps }
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Correlates a `size`×`size` plane with every kernel under symmetric
    /// padding, writing `len()` maps into `out`.
    pub fn apply_plane(&self, plane: &[f32], size: usize, out: &mut [f32]) {
        let n = size * size;
        assert_eq!(plane.len(), n);
        assert_eq!(out.len(), n * self.len());
        let p = size + 2 * R as usize;
        let mut padded = vec![0f32; p * p];
        for y in 0..p {
            let sy = reflect(y as isize - R, size);
            for x in 0..p {
                padded[y * p + x] = plane[sy * size + reflect(x as isize - R, size)];
            }
        }
        for (k, taps) in self.taps.iter().enumerate() {
            let dst = &mut out[k * n..(k + 1) * n];
            for y in 0..size {
                for x in 0..size {
                    let centre = padded[(y + 2) * p + x + 2];
                    // Taps sum to zero, so summing differences to the centre
                    // gives the same response and keeps flat input exactly 0.
                    let mut acc = 0f32;
                    for &(du, dv, w) in taps {
                        let v = padded[(y as isize + 2 + du) as usize * p + (x as isize + 2 + dv) as usize];
                        acc += w * (v - centre);
                    }
                    dst[y * size + x] = acc;
                }
            }
        }
    }

    /// Luma residuals of a square patch.
    pub fn apply(&self, patch: &Image) -> Result<ResidualStack> {
        let size = patch.height();
        if patch.width() != size {
            return Err(invalid(format!("patch is {}x{}, expected square", size, patch.width())));
        }
        if size < KERNEL_SIZE {
            return Err(invalid(format!("patch side {size} is below the kernel size {KERNEL_SIZE}")));
        }
        let mut data = vec![0f32; self.len() * size * size];
        self.apply_plane(&patch.luminance(), size, &mut data);
        Ok(ResidualStack { size, data })
    }
}

pub fn apply_bank(patch: &Image) -> Result<ResidualStack> {
    FilterBank::default().apply(patch)
}
