use serde::{Deserialize, Serialize};

/// Dense `C×H×W` tensor in row-major channel-planar layout.
///
/// Vectors are represented with `h = w = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length does not match shape");
        Tensor { c, h, w, data }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor { c: n, h: 1, w: 1, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    /// Stacks single-channel planes into one multi-channel tensor.
    pub fn stack(planes: &[&Tensor]) -> Self {
        let (h, w) = (planes[0].h, planes[0].w);
        let mut data = Vec::with_capacity(planes.iter().map(|p| p.len()).sum());
        let mut c = 0;
        for p in planes {
            assert_eq!((p.h, p.w), (h, w), "stacked planes must share spatial size");
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Tensor { c, h, w, data }
    }
}
