use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Average-pools each of `p` equal horizontal stripes of NCHW maps into an N×C tensor.
pub fn stripe_pool(maps: &Tensor, p: usize) -> Result<Vec<Tensor>> {
    if maps.rank() != 4 {
        return Err(Error::shape("stripe_pool", "rank", 4, maps.rank()));
    }
    let (n, c, h, w) = (maps.dim(0), maps.dim(1), maps.dim(2), maps.dim(3));
    if p == 0 || h % p != 0 {
        return Err(Error::InvalidSpec(format!("map height {h} is not divisible by {p} stripes")));
    }
    let rows = h / p;
    let area = (rows * w) as f64;
    let mut out: Vec<Tensor> = (0..p).map(|_| Tensor::zeros(&[n, c])).collect();
    for (plane_idx, plane) in maps.data().chunks(h * w).enumerate() {
        for (s, t) in out.iter_mut().enumerate() {
            let sum: f64 = plane[s * rows * w..(s + 1) * rows * w].iter().sum();
            t.data_mut()[plane_idx] = sum / area;
        }
    }
    Ok(out)
}

pub fn stripe_pool_backward(grads: &[Tensor], maps_shape: &[usize]) -> Result<Tensor> {
    let (h, w) = (maps_shape[2], maps_shape[3]);
    let p = grads.len();
    if p == 0 || h % p != 0 {
        return Err(Error::InvalidSpec(format!("map height {h} is not divisible by {p} stripes")));
    }
    let rows = h / p;
    let area = (rows * w) as f64;
    let mut grad = Tensor::zeros(maps_shape);
    for (plane_idx, plane) in grad.data_mut().chunks_mut(h * w).enumerate() {
        for (s, g) in grads.iter().enumerate() {
            plane[s * rows * w..(s + 1) * rows * w].fill(g.data()[plane_idx] / area);
        }
    }
    Ok(grad)
}
