use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const MNIST: ImageShape = ImageShape::new(1, 28, 28);
    pub const CIFAR10: ImageShape = ImageShape::new(3, 32, 32);

    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Planar (CHW) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f32>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::DataLength {
                shape: shape.dims().to_vec(),
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        let (h, w) = (self.shape.height, self.shape.width);
        self.data[(c * h + y) * w + x] = value;
    }

    /// `‖self − other‖∞`.
    pub fn linf_distance(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn to_tensor(&self) -> Tensor {
        let [c, h, w] = self.shape.dims();
        Tensor::new(vec![1, c, h, w], self.data.clone()).expect("image length matches its shape")
    }

    /// Stacks equally shaped images into an `[N, C, H, W]` tensor.
    pub fn stack(images: &[&Image]) -> Result<Tensor, TensorError> {
        let Some(first) = images.first() else {
            return Err(TensorError::DataLength { shape: vec![0], len: 0 });
        };
        let shape = first.shape;
        let mut data = Vec::with_capacity(images.len() * shape.len());
        for img in images {
            if img.shape != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: shape.dims().to_vec(),
                    right: img.shape.dims().to_vec(),
                });
            }
            data.extend_from_slice(&img.data);
        }
        let [c, h, w] = shape.dims();
        Tensor::new(vec![images.len(), c, h, w], data)
    }
}
