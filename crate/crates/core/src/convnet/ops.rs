use rayon::prelude::*;

use super::ConvError;
use crate::tensor::Tensor;

fn dims3(x: &Tensor, what: &str) -> Result<(usize, usize, usize), ConvError> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(ConvError::ShapeMismatch(format!(
            "{what} must be rank 3 (C×H×W), got {s:?}"
        ))),
    }
}

/// Zero-padded 2-D cross-correlation with a per-output-channel bias.
///
/// Inner products accumulate in `f64` and are rounded to `f32` once per output.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, ConvError> {
    let (c, h, w) = dims3(x, "conv input")?;
    let (o, wc, kh, kw) = match *weight.shape() {
        [o, wc, kh, kw] => (o, wc, kh, kw),
        ref s => {
            return Err(ConvError::ShapeMismatch(format!(
                "conv weight must be rank 4 (O×I×k×k), got {s:?}"
            )))
        }
    };
    if wc != c {
        return Err(ConvError::ShapeMismatch(format!(
            "conv weight expects {wc} input channels, input has {c}"
        )));
    }
    if bias.shape() != [o] {
        return Err(ConvError::ShapeMismatch(format!(
            "conv bias must have shape [{o}], got {:?}",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(ConvError::ShapeMismatch("stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(ConvError::ShapeMismatch(format!(
            "kernel {kh}×{kw} larger than padded input {}×{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    // Output column range [lo, hi) whose input column j·stride + v − pad is in bounds.
    let valid = |offset: usize, len: usize, out_len: usize| -> (usize, usize) {
        let lo = if offset >= pad {
            0
        } else {
            (pad - offset).div_ceil(stride)
        };
        let hi = if len + pad > offset {
            ((len + pad - offset - 1) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    };

    let xd = x.data();
    let wd = weight.data();
    let planes: Vec<Vec<f32>> = (0..o)
        .into_par_iter()
        .map(|oc| {
            let mut acc = vec![bias.data()[oc] as f64; oh * ow];
            for ic in 0..c {
                let xin = &xd[ic * h * w..(ic + 1) * h * w];
                for u in 0..kh {
                    let (i_lo, i_hi) = valid(u, h, oh);
                    for v in 0..kw {
                        let wv = wd[((oc * c + ic) * kh + u) * kw + v] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (j_lo, j_hi) = valid(v, w, ow);
                        for i in i_lo..i_hi {
                            let row = i * stride + u - pad;
                            let xrow = &xin[row * w..(row + 1) * w];
                            let out = &mut acc[i * ow..(i + 1) * ow];
                            for j in j_lo..j_hi {
                                out[j] += wv * xrow[j * stride + v - pad] as f64;
                            }
                        }
                    }
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    Ok(Tensor::from_parts(vec![o, oh, ow], planes.concat()))
}

/// 2×2 max-pool with stride 2. Odd spatial dimensions are rejected.
pub fn maxpool2d_forward(x: &Tensor) -> Result<Tensor, ConvError> {
    let (c, h, w) = dims3(x, "max-pool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(ConvError::ShapeMismatch(format!(
            "max-pool needs even spatial dims, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let r0 = &plane[2 * i * w..(2 * i + 1) * w];
            let r1 = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                out.push(r0[2 * j].max(r0[2 * j + 1]).max(r1[2 * j]).max(r1[2 * j + 1]));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

pub fn flatten(x: &Tensor) -> Tensor {
    Tensor::from_parts(vec![x.len()], x.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn ones_kernel_sums_nine() {
        let x = t(&[1, 3, 3], vec![1.0; 9]);
        let w = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let b = t(&[1], vec![0.0]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let data: Vec<f32> = (0..2 * 5 * 4).map(|i| i as f32 * 0.37 - 3.0).collect();
        let x = t(&[2, 5, 4], data);
        let mut wd = vec![0.0; 2 * 2 * 9];
        wd[4] = 1.0; // out 0 <- in 0 centre
        wd[3 * 9 + 4] = 1.0; // out 1 <- in 1 centre
        let w = t(&[2, 2, 3, 3], wd);
        let b = t(&[2], vec![0.0, 0.0]);
        assert_eq!(conv2d_forward(&x, &w, &b, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv_shape_errors() {
        let x = t(&[3, 4, 4], vec![0.0; 48]);
        let w = t(&[2, 4, 3, 3], vec![0.0; 72]);
        let b = t(&[2], vec![0.0; 2]);
        assert!(matches!(
            conv2d_forward(&x, &w, &b, 1, 1),
            Err(ConvError::ShapeMismatch(_))
        ));
        let w = t(&[2, 3, 3, 3], vec![0.0; 54]);
        let bad_bias = t(&[3], vec![0.0; 3]);
        assert!(conv2d_forward(&x, &w, &bad_bias, 1, 1).is_err());
        let flat = t(&[48], vec![0.0; 48]);
        assert!(conv2d_forward(&flat, &w, &b, 1, 1).is_err());
    }

    #[test]
    fn pool_small_cases() {
        let x = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2d_forward(&x).unwrap().data(), &[4.0]);
        let c = t(&[2, 4, 6], vec![1.5; 48]);
        assert_eq!(maxpool2d_forward(&c).unwrap(), t(&[2, 2, 3], vec![1.5; 12]));
        let odd = t(&[1, 3, 2], vec![0.0; 6]);
        assert!(matches!(maxpool2d_forward(&odd), Err(ConvError::ShapeMismatch(_))));
    }

    #[test]
    fn pool_matches_window_scan() {
        let data: Vec<f32> = (0..3 * 8 * 8).map(|i| ((i * 7919) % 101) as f32 - 50.0).collect();
        let x = t(&[3, 8, 8], data.clone());
        let y = maxpool2d_forward(&x).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut m = f32::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            m = m.max(data[c * 64 + (2 * i + di) * 8 + 2 * j + dj]);
                        }
                    }
                    assert_eq!(y.data()[c * 16 + i * 4 + j], m);
                }
            }
        }
    }

    #[test]
    fn flatten_keeps_channel_major_order() {
        let x = t(&[3, 2, 2], (0..12).map(|v| v as f32).collect());
        let f = flatten(&x);
        assert_eq!(f.shape(), &[12]);
        assert_eq!(f.data(), x.data());
    }

    proptest! {
        #[test]
        fn relu_idempotent(v in proptest::collection::vec(-10.0f32..10.0, 1..50)) {
            let x = t(&[v.len()], v);
            let once = relu(&x);
            prop_assert_eq!(relu(&once), once.clone());
            prop_assert!(once.data().iter().all(|&a| a >= 0.0));
        }
    }
}
