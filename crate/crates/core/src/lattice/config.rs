use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the routing lattice: `num_layers` layers of `num_scales` nodes,
/// where scale `s` works at `1 / 2^s` of the input resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub num_layers: usize,
    pub num_scales: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub gate_hidden: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_scales: 3,
            channels: 8,
            num_classes: 2,
            input_channels: 1,
            height: 32,
            width: 32,
            gate_hidden: 8,
        }
    }
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_scales", self.num_scales),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
            ("input_channels", self.input_channels),
            ("height", self.height),
            ("width", self.width),
            ("gate_hidden", self.gate_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let factor = 1usize << (self.num_scales - 1);
        if !self.height.is_multiple_of(factor) {
            return Err(Error::config(
                "height",
                format!("must be divisible by 2^(num_scales-1) = {factor}"),
            ));
        }
        if !self.width.is_multiple_of(factor) {
            return Err(Error::config(
                "width",
                format!("must be divisible by 2^(num_scales-1) = {factor}"),
            ));
        }
        Ok(())
    }

    /// `(height, width)` at `scale`.
    pub fn spatial(&self, scale: usize) -> (usize, usize) {
        (self.height >> scale, self.width >> scale)
    }

    /// Number of routing directions available at `scale`.
    pub fn directions_at(&self, scale: usize) -> usize {
        super::Direction::ALL
            .iter()
            .filter(|d| d.target(scale, self.num_scales).is_some())
            .count()
    }

    /// Dimension of A-space, i.e. the number of lattice edges.
    pub fn gate_dim(&self) -> usize {
        self.num_layers * (0..self.num_scales).map(|s| self.directions_at(s)).sum::<usize>()
    }
}
