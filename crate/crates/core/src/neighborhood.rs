//! Neighborhood systems on a 2D grid.
//!
//! Order 1 is the 8-connected ring around a voxel. Order 2 is the ring of 16
//! voxels at chessboard distance exactly 2. Voxels near the border keep only the
//! in-grid part of each ring (truncated cliques).

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodSystem {
    order: usize,
    height: usize,
    width: usize,
    starts: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborhoodSystem {
    pub fn new(height: usize, width: usize, order: usize) -> Result<Self> {
        if !(1..=2).contains(&order) {
            return Err(Error::Config(format!("neighborhood order must be 1 or 2, got {order}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty grid {height}x{width}")));
        }
        let r = order as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy.abs().max(dx.abs()) == r)
            .collect();
        let mut starts = Vec::with_capacity(height * width + 1);
        let mut indices = Vec::with_capacity(height * width * offsets.len());
        starts.push(0);
        for y in 0..height as isize {
            for x in 0..width as isize {
                for (dy, dx) in &offsets {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < height as isize && nx >= 0 && nx < width as isize {
                        indices.push(ny as usize * width + nx as usize);
                    }
                }
                starts.push(indices.len());
            }
        }
        Ok(Self { order, height, width, starts, indices })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_voxels(&self) -> usize {
        self.height * self.width
    }

    pub fn neighbors(&self, s: usize) -> &[usize] {
        &self.indices[self.starts[s]..self.starts[s + 1]]
    }

    /// Total number of (voxel, neighbor) pairs.
    pub fn total_links(&self) -> usize {
        self.indices.len()
    }
}

/// The first- and second-order systems for one grid size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cliques {
    pub first: NeighborhoodSystem,
    pub second: NeighborhoodSystem,
}

impl Cliques {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            first: NeighborhoodSystem::new(height, width, 1)?,
            second: NeighborhoodSystem::new(height, width, 2)?,
        })
    }

    pub fn height(&self) -> usize {
        self.first.height()
    }

    pub fn width(&self) -> usize {
        self.first.width()
    }
}
