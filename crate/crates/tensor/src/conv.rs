//! im2col-based 2-D convolution kernels.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(TensorError::dim(
                "conv2d",
                "rank",
                format!("input {:?}, kernel {:?} must both be rank 4", input, kernel),
            ));
        }
        if input[1] != kernel[1] {
            return Err(TensorError::dim(
                "conv2d",
                "input axis 1 / kernel axis 1",
                format!("{} input channels vs {} kernel channels", input[1], kernel[1]),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv2d stride must be >= 1".into()));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if kernel[2] > h || kernel[3] > w || kernel[2] == 0 || kernel[3] == 0 {
            return Err(TensorError::dim(
                "conv2d",
                "axes 2,3",
                format!(
                    "kernel {}x{} does not fit padded input {}x{}",
                    kernel[2], kernel[3], h, w
                ),
            ));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h: (h - kernel[2]) / stride + 1,
            out_w: (w - kernel[3]) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Input coordinate of output row `o` with kernel offset `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Scalar>(geo: &Geometry, image: &[T], cols: &mut [T]) {
    let plane = geo.out_plane();
    let mut row = 0;
    for c in 0..geo.in_channels {
        let chan = &image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..geo.out_h {
                    let ih = geo.source(oh, ki, geo.height);
                    for ow in 0..geo.out_w {
                        dst[oh * geo.out_w + ow] = match (ih, geo.source(ow, kj, geo.width)) {
                            (Some(ih), Some(iw)) => chan[ih * geo.width + iw],
                            _ => T::zero(),
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(geo: &Geometry, cols: &[T], image: &mut [T]) {
    let plane = geo.out_plane();
    let mut row = 0;
    for c in 0..geo.in_channels {
        let chan = &mut image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..geo.out_h {
                    let Some(ih) = geo.source(oh, ki, geo.height) else {
                        continue;
                    };
                    for ow in 0..geo.out_w {
                        if let Some(iw) = geo.source(ow, kj, geo.width) {
                            let idx = ih * geo.width + iw;
                            chan[idx] = chan[idx] + src[oh * geo.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Returns the output and the im2col buffer retained for the kernel adjoint.
pub(crate) fn forward<T: Scalar>(geo: &Geometry, input: &[T], kernel: &[T]) -> (Vec<T>, Vec<T>) {
    let patch = geo.patch_len();
    let plane = geo.out_plane();
    let mut cols = vec![T::zero(); geo.batch * patch * plane];
    let mut out = vec![T::zero(); geo.batch * geo.out_channels * plane];
    for b in 0..geo.batch {
        let col = &mut cols[b * patch * plane..(b + 1) * patch * plane];
        im2col(geo, &input[b * geo.in_image()..(b + 1) * geo.in_image()], col);
        let dst = &mut out[b * geo.out_channels * plane..(b + 1) * geo.out_channels * plane];
        gemm(geo.out_channels, patch, plane, kernel, false, col, false, dst, false);
    }
    (out, cols)
}

pub(crate) fn backward_kernel<T: Scalar>(geo: &Geometry, grad: &[T], cols: &[T], dkernel: &mut [T]) {
    let patch = geo.patch_len();
    let plane = geo.out_plane();
    for b in 0..geo.batch {
        let g = &grad[b * geo.out_channels * plane..(b + 1) * geo.out_channels * plane];
        let col = &cols[b * patch * plane..(b + 1) * patch * plane];
        gemm(geo.out_channels, plane, patch, g, false, col, true, dkernel, true);
    }
}

pub(crate) fn backward_input<T: Scalar>(geo: &Geometry, grad: &[T], kernel: &[T], dinput: &mut [T]) {
    let patch = geo.patch_len();
    let plane = geo.out_plane();
    let mut dcols = vec![T::zero(); patch * plane];
    for b in 0..geo.batch {
        let g = &grad[b * geo.out_channels * plane..(b + 1) * geo.out_channels * plane];
        gemm(patch, geo.out_channels, plane, kernel, true, g, false, &mut dcols, false);
        col2im_add(geo, &dcols, &mut dinput[b * geo.in_image()..(b + 1) * geo.in_image()]);
    }
}
