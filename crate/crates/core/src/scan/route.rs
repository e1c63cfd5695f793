//! Bijections between a 2-D grid and a 1-D sequence.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Grid traversal orders.
///
/// * `HRaster`: row-major, left to right, top to bottom.
/// * `VRaster`: column-major, top to bottom, left to right.
/// * `DiagMain`: anti-diagonals `i + j = 0 ..= H+W-2`, each by increasing row.
/// * `DiagAnti`: diagonals `j - i` in ascending order, each by increasing row.
/// * `ParallelSnake`: row-major with every odd row reversed.
/// * `DiagSnake`: `DiagMain` with every odd anti-diagonal reversed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanStrategy {
    HRaster,
    VRaster,
    DiagMain,
    DiagAnti,
    ParallelSnake,
    DiagSnake,
}

impl ScanStrategy {
    pub const ALL: [ScanStrategy; 6] = [
        ScanStrategy::HRaster,
        ScanStrategy::VRaster,
        ScanStrategy::DiagMain,
        ScanStrategy::DiagAnti,
        ScanStrategy::ParallelSnake,
        ScanStrategy::DiagSnake,
    ];

    /// The four directions combined by the four-directional scan.
    pub const FOUR_DIRECTIONS: [ScanStrategy; 4] = [
        ScanStrategy::HRaster,
        ScanStrategy::VRaster,
        ScanStrategy::DiagMain,
        ScanStrategy::DiagAnti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScanStrategy::HRaster => "hraster",
            ScanStrategy::VRaster => "vraster",
            ScanStrategy::DiagMain => "diagmain",
            ScanStrategy::DiagAnti => "diaganti",
            ScanStrategy::ParallelSnake => "parallelsnake",
            ScanStrategy::DiagSnake => "diagsnake",
        }
    }
}

impl fmt::Display for ScanStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScanStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScanStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown scan strategy {s:?}")))
    }
}

/// `order[t]` is the flat grid position `row * W + col` visited at step `t`;
/// `inverse[pos]` is the step at which `pos` is visited.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanRoute {
    pub strategy: ScanStrategy,
    pub h: usize,
    pub w: usize,
    pub order: Vec<usize>,
    pub inverse: Vec<usize>,
}

impl ScanRoute {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Grid coordinate visited at step `t`.
    pub fn coord(&self, t: usize) -> (usize, usize) {
        (self.order[t] / self.w, self.order[t] % self.w)
    }

    /// True when `order` and `inverse` are mutually inverse permutations.
    pub fn is_bijection(&self) -> bool {
        let n = self.h * self.w;
        if self.order.len() != n || self.inverse.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for (t, &pos) in self.order.iter().enumerate() {
            if pos >= n || seen[pos] || self.inverse[pos] != t {
                return false;
            }
            seen[pos] = true;
        }
        true
    }
}

fn anti_diagonal(d: usize, h: usize, w: usize) -> impl DoubleEndedIterator<Item = (usize, usize)> {
    let lo = d.saturating_sub(w - 1);
    let hi = d.min(h - 1);
    (lo..=hi).map(move |i| (i, d - i))
}

pub fn make_route(strategy: ScanStrategy, h: usize, w: usize) -> Result<ScanRoute> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("scan route on empty grid {h}x{w}")));
    }
    let mut order = Vec::with_capacity(h * w);
    let mut push = |i: usize, j: usize| order.push(i * w + j);
    match strategy {
        ScanStrategy::HRaster => (0..h).for_each(|i| (0..w).for_each(|j| push(i, j))),
        ScanStrategy::VRaster => (0..w).for_each(|j| (0..h).for_each(|i| push(i, j))),
        ScanStrategy::ParallelSnake => {
            for i in 0..h {
                if i % 2 == 0 {
                    (0..w).for_each(|j| push(i, j));
                } else {
                    (0..w).rev().for_each(|j| push(i, j));
                }
            }
        }
        ScanStrategy::DiagMain | ScanStrategy::DiagSnake => {
            for d in 0..(h + w - 1) {
                if strategy == ScanStrategy::DiagSnake && d % 2 == 1 {
                    anti_diagonal(d, h, w).rev().for_each(|(i, j)| push(i, j));
                } else {
                    anti_diagonal(d, h, w).for_each(|(i, j)| push(i, j));
                }
            }
        }
        ScanStrategy::DiagAnti => {
            for k in -(h as isize - 1)..=(w as isize - 1) {
                let start = if k < 0 { (-k) as usize } else { 0 };
                for i in start..h {
                    let j = i as isize + k;
                    if j >= w as isize {
                        break;
                    }
                    push(i, j as usize);
                }
            }
        }
    }
    let mut inverse = vec![0; h * w];
    for (t, &pos) in order.iter().enumerate() {
        inverse[pos] = t;
    }
    Ok(ScanRoute {
        strategy,
        h,
        w,
        order,
        inverse,
    })
}
