use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of leading layers treated as coarse (pose / global structure).
pub const DEFAULT_COARSE_LAYERS: usize = 4;

/// Resolution of the layer used for clustering when none is named.
pub const DEFAULT_CLUSTER_RESOLUTION: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub channels: usize,
    pub resolution: usize,
    pub style_offset: usize,
}

impl LayerSpec {
    pub fn span(&self) -> Range<usize> {
        self.style_offset..self.style_offset + self.channels
    }

    pub fn cells(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Number of activation values in this layer's `C × H × W` tensor.
    pub fn activation_len(&self) -> usize {
        self.channels * self.cells()
    }
}

/// Maps the concatenated style vector onto generator layers.
///
/// The layer spans partition `[0, total_channels)` in order, resolutions never
/// decrease, and the first `coarse_layers` layers make up the coarse range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    #[serde(rename = "coarse_layers")]
    coarse_layers: usize,
    layers: Vec<LayerSpec>,
}

impl LayerLayout {
    /// Builds a layout from `(name, channels, resolution)` triples, assigning
    /// contiguous style offsets.
    pub fn new<S: Into<String>>(
        layers: impl IntoIterator<Item = (S, usize, usize)>,
        coarse_layers: usize,
    ) -> Result<Self> {
        let mut offset = 0;
        let layers = layers
            .into_iter()
            .map(|(name, channels, resolution)| {
                let spec = LayerSpec {
                    name: name.into(),
                    channels,
                    resolution,
                    style_offset: offset,
                };
                offset += channels;
                spec
            })
            .collect();
        Self::from_specs(layers, coarse_layers)
    }

    /// Validates explicit specs (as read from a manifest).
    pub fn from_specs(layers: Vec<LayerSpec>, coarse_layers: usize) -> Result<Self> {
        let layout = LayerLayout {
            coarse_layers,
            layers,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected_offset = 0;
        let mut last_res = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if l.style_offset != expected_offset {
                return Err(Error::NonContiguousLayout(format!(
                    "layer `{}` starts at {} but previous span ends at {}",
                    l.name, l.style_offset, expected_offset
                )));
            }
            if l.channels == 0 {
                return Err(Error::NonContiguousLayout(format!(
                    "layer `{}` has zero channels",
                    l.name
                )));
            }
            if l.resolution == 0 {
                return Err(Error::NonContiguousLayout(format!(
                    "layer `{}` has zero resolution",
                    l.name
                )));
            }
            if l.resolution < last_res {
                return Err(Error::NonContiguousLayout(format!(
                    "resolution decreases at layer {i} (`{}`)",
                    l.name
                )));
            }
            if self.layers[..i].iter().any(|p| p.name == l.name) {
                return Err(Error::NonContiguousLayout(format!(
                    "duplicate layer name `{}`",
                    l.name
                )));
            }
            last_res = l.resolution;
            expected_offset += l.channels;
        }
        if self.coarse_layers > self.layers.len() {
            return Err(Error::NonContiguousLayout(format!(
                "{} coarse layers requested but layout has {}",
                self.coarse_layers,
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn coarse_layers(&self) -> usize {
        self.coarse_layers
    }

    pub fn total_channels(&self) -> usize {
        self.layers
            .last()
            .map_or(0, |l| l.style_offset + l.channels)
    }

    /// Channel span covered by the first `coarse_layers` layers.
    pub fn coarse_range(&self) -> Range<usize> {
        let end = self.layers[..self.coarse_layers]
            .last()
            .map_or(0, |l| l.style_offset + l.channels);
        0..end
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// The layer clustering runs on when none is named: the first layer at
    /// resolution 32, else the last layer of the largest resolution below 32,
    /// else the first layer.
    pub fn default_cluster_layer(&self) -> Option<&LayerSpec> {
        if let Some(l) = self
            .layers
            .iter()
            .find(|l| l.resolution == DEFAULT_CLUSTER_RESOLUTION)
        {
            return Some(l);
        }
        self.layers
            .iter()
            .filter(|l| l.resolution < DEFAULT_CLUSTER_RESOLUTION)
            .max_by_key(|l| l.resolution)
            .or_else(|| self.layers.first())
    }

    /// Returns the contiguous slice of `values` belonging to `layer`.
    pub fn slice_layer<'a>(&self, values: &'a [f32], layer: &str) -> Result<&'a [f32]> {
        let spec = self.layer(layer)?;
        if values.len() != self.total_channels() {
            return Err(Error::LengthMismatch {
                expected: self.total_channels(),
                actual: values.len(),
            });
        }
        Ok(&values[spec.span()])
    }
}
