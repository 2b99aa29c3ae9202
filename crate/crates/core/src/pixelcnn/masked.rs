use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, Tensor, Var};

/// Whether the kernel center is excluded (A) or included (B).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskType {
    A,
    B,
}

/// Which taps of the kernel footprint a mask may keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRegion {
    /// Every tap before the center in raster order (plus the center for B).
    Raster,
    /// Rows up to and including the center row, every column. The mask type
    /// is ignored; causality comes from shifting the output down one row.
    Vertical,
    /// Center row only, columns before the center (plus the center for B).
    Horizontal,
}

/// Binary `[kh, kw]` footprint of a mask.
pub fn mask_footprint(kh: usize, kw: usize, mask_type: MaskType, region: MaskRegion) -> Vec<bool> {
    let (cy, cx) = (kh / 2, kw / 2);
    let mut keep = vec![false; kh * kw];
    for ky in 0..kh {
        for kx in 0..kw {
            let before_center = ky < cy || (ky == cy && kx < cx);
            let center = ky == cy && kx == cx;
            keep[ky * kw + kx] = match region {
                MaskRegion::Raster => before_center || (center && mask_type == MaskType::B),
                MaskRegion::Vertical => ky <= cy,
                MaskRegion::Horizontal => {
                    ky == cy && (kx < cx || (kx == cx && mask_type == MaskType::B))
                }
            };
        }
    }
    keep
}

/// A convolution kernel together with the mask multiplied into it before
/// every forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedKernel {
    pub kernel: Tensor,
    pub mask: Tensor,
    pub mask_type: MaskType,
    pub region: MaskRegion,
}

impl MaskedKernel {
    pub fn new(kernel: Tensor, mask_type: MaskType, region: MaskRegion) -> Result<Self> {
        let mask = build_mask(kernel.dims(), mask_type, region)?;
        Ok(Self {
            kernel,
            mask,
            mask_type,
            region,
        })
    }

    /// Kernel with masked taps zeroed.
    pub fn effective(&self) -> Tensor {
        let data = self.kernel.data().iter().zip(self.mask.data()).map(|(k, m)| k * m).collect();
        Tensor::new(self.kernel.dims().to_vec(), data).expect("mask matches kernel")
    }
}

/// Mask tensor matching `[O, C, kh, kw]` kernel dims.
pub fn build_mask(dims: &[usize], mask_type: MaskType, region: MaskRegion) -> Result<Tensor> {
    let &[o, c, kh, kw] = dims else {
        return Err(Error::Shape(format!("masked kernel must be 4-d, got {dims:?}")));
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!("masked kernel size {kh}x{kw} must be odd")));
    }
    let keep = mask_footprint(kh, kw, mask_type, region);
    let mut data = Vec::with_capacity(o * c * kh * kw);
    for _ in 0..o * c {
        data.extend(keep.iter().map(|&k| if k { 1.0 } else { 0.0 }));
    }
    Tensor::new(dims.to_vec(), data)
}

/// Same-padded convolution of `x` with `kernel * mask`.
pub fn masked_conv(g: &mut Graph, x: Var, kernel: Var, mask: Var) -> Result<Var> {
    let dims = g.dims(kernel).to_vec();
    if dims.len() != 4 || dims[2] % 2 == 0 || dims[3] % 2 == 0 {
        return Err(Error::Config(format!("masked kernel {dims:?} must be 4-d with odd size")));
    }
    let k = g.mul(kernel, mask)?;
    g.conv2d(x, k, ConvSpec::same(dims[2], dims[3]))
}
