use crate::error::{Error, Result};
use crate::store::layout::LayerLayout;

/// One image's concatenated per-layer style coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector {
    pub image_id: String,
    pub values: Vec<f32>,
}

impl StyleVector {
    pub fn new(image_id: impl Into<String>, values: Vec<f32>) -> Self {
        StyleVector {
            image_id: image_id.into(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, layout: &LayerLayout) -> Result<()> {
        if self.values.len() != layout.total_channels() {
            return Err(Error::LengthMismatch {
                expected: layout.total_channels(),
                actual: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("style/{}", self.image_id)));
        }
        Ok(())
    }
}

/// A dense `C × H × W` activation tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ActivationTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ActivationTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// The `H × W` plane of channel `c`.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.cells();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }
}

/// One image's activations, one tensor per layout layer in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    pub image_id: String,
    pub layers: Vec<ActivationTensor>,
}

impl ActivationStack {
    pub fn check(&self, layout: &LayerLayout) -> Result<()> {
        if self.layers.len() != layout.layers().len() {
            return Err(Error::shape(
                format!("act/{}", self.image_id),
                format!(
                    "{} layer tensors for a {}-layer layout",
                    self.layers.len(),
                    layout.layers().len()
                ),
            ));
        }
        for (t, spec) in self.layers.iter().zip(layout.layers()) {
            if t.channels != spec.channels
                || t.height != spec.resolution
                || t.width != spec.resolution
                || t.data.len() != spec.activation_len()
            {
                return Err(Error::shape(
                    format!("act/{}/{}", self.image_id, spec.name),
                    format!(
                        "got {}x{}x{}, layout wants {}x{}x{}",
                        t.channels,
                        t.height,
                        t.width,
                        spec.channels,
                        spec.resolution,
                        spec.resolution
                    ),
                ));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "act/{}/{}",
                    self.image_id, spec.name
                )));
            }
        }
        Ok(())
    }

    pub fn layer(&self, layout: &LayerLayout, name: &str) -> Result<&ActivationTensor> {
        let i = layout.layer_index(name)?;
        self.layers
            .get(i)
            .ok_or_else(|| Error::MissingActivations(self.image_id.clone()))
    }
}
