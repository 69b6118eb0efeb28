use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Argmax positions recorded by 2x2 max pooling.
///
/// Each entry is the row-major offset inside its window:
/// 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    shape: Vec<usize>,
    idx: Vec<u8>,
}

impl PoolIndices {
    pub fn new(shape: &[usize], idx: Vec<u8>) -> Result<Self> {
        if shape.len() < 2 || shape.iter().product::<usize>() != idx.len() {
            return Err(Error::Shape(format!(
                "pool indices of length {} do not fit shape {shape:?}",
                idx.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            idx,
        })
    }

    /// Shape of the pooled map these indices belong to.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.idx
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "pooling needs at least 2 dims, got {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let lead: usize = shape[..shape.len() - 2].iter().product();
    Ok((lead, h, w))
}

/// 2x2 stride-2 max pooling over the last two axes, recording argmax
/// positions. Ties resolve to the first maximum in row-major window order.
pub fn max_pool_with_indices<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (lead, h, w) = spatial(x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut out_shape = x.shape().to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = ph;
    out_shape[r - 1] = pw;
    let mut pooled = Vec::with_capacity(lead * ph * pw);
    let mut idx = Vec::with_capacity(lead * ph * pw);
    let d = x.data();
    for p in 0..lead {
        let plane = &d[p * h * w..(p + 1) * h * w];
        for i in 0..ph {
            let r0 = &plane[2 * i * w..(2 * i + 1) * w];
            let r1 = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..pw {
                let cand = [r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]];
                let mut best = 0u8;
                for k in 1..4u8 {
                    if cand[k as usize] > cand[best as usize] {
                        best = k;
                    }
                }
                pooled.push(cand[best as usize]);
                idx.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(&out_shape, pooled)?,
        PoolIndices {
            shape: out_shape,
            idx,
        },
    ))
}

/// Places each pooled value at its recorded window position; every other
/// output element is zero.
pub fn unpool_with_indices<T: Scalar>(pooled: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if pooled.shape() != indices.shape() {
        return Err(Error::Shape(format!(
            "unpool values {:?} vs indices {:?}",
            pooled.shape(),
            indices.shape()
        )));
    }
    let (lead, ph, pw) = spatial(pooled.shape())?;
    let (h, w) = (2 * ph, 2 * pw);
    let mut out_shape = pooled.shape().to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = h;
    out_shape[r - 1] = w;
    let mut out = Tensor::zeros(&out_shape);
    let o = out.data_mut();
    for p in 0..lead {
        for i in 0..ph {
            for j in 0..pw {
                let src = (p * ph + i) * pw + j;
                let k = indices.idx[src];
                if k > 3 {
                    return Err(Error::Index(format!(
                        "pool index {k} at position {src} is outside its 2x2 window"
                    )));
                }
                let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                o[p * h * w + (2 * i + dy) * w + 2 * j + dx] = pooled.data()[src];
            }
        }
    }
    Ok(out)
}

/// Backward of [`unpool_with_indices`]: reads the gradient at each recorded position.
pub(crate) fn gather_with_indices<T: Scalar>(grad: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    let (lead, ph, pw) = spatial(indices.shape())?;
    let (h, w) = (2 * ph, 2 * pw);
    let (gl, gh, gw) = spatial(grad.shape())?;
    if (gl, gh, gw) != (lead, h, w) {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match indices {:?}",
            grad.shape(),
            indices.shape()
        )));
    }
    let mut out = Vec::with_capacity(lead * ph * pw);
    for p in 0..lead {
        for i in 0..ph {
            for j in 0..pw {
                let k = indices.idx[(p * ph + i) * pw + j] as usize;
                out.push(grad.data()[p * h * w + (2 * i + k / 2) * w + 2 * j + k % 2]);
            }
        }
    }
    Tensor::from_vec(indices.shape(), out)
}
