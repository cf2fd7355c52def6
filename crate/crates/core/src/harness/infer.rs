use crate::error::{Error, Result};
use crate::segnet::SubModel;
use crate::synthdata::Sample;
use crate::tensor::{Element, Tensor};

/// A sample's intensities as a `[1, 1, H, W]` tensor.
pub fn image_tensor<T: Element>(sample: &Sample) -> Tensor<T> {
    Tensor::from_f64(&[1, 1, sample.height, sample.width], &sample.image).expect("sample size is consistent")
}

/// Mirror index into `0..n` without repeating the edge pixel.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Window origins along one axis of length `n`, always including the last
/// position.
fn origins(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=n - patch).step_by(stride).collect();
    if *out.last().unwrap() != n - patch {
        out.push(n - patch);
    }
    out
}

/// Sliding-window probabilities for one `[1, C, H, W]` image. Window logits
/// are averaged by coverage count before the head activation. Images smaller
/// than the patch are reflect-padded and the result cropped back.
pub fn infer_sliding<T: Element>(head: &SubModel<'_, T>, image: &Tensor<T>, patch: usize, stride: usize) -> Result<Tensor<T>> {
    let (b, cin, h, w) = image.dims4()?;
    if b != 1 {
        return Err(Error::Input(format!("sliding inference takes one image, got a batch of {b}")));
    }
    if stride == 0 || patch == 0 {
        return Err(Error::Config("patch and stride must be positive".into()));
    }
    if stride > patch {
        return Err(Error::Config(format!(
            "stride {stride} exceeds patch {patch} and would leave pixels uncovered"
        )));
    }
    let (ph, pw) = (h.max(patch), w.max(patch));
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let padded = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        let src = image.data();
        let mut data = Vec::with_capacity(cin * ph * pw);
        for c in 0..cin {
            for r in 0..ph {
                let sr = reflect(r as isize - top as isize, h);
                for col in 0..pw {
                    let sc = reflect(col as isize - left as isize, w);
                    data.push(src[(c * h + sr) * w + sc]);
                }
            }
        }
        Tensor::new(&[1, cin, ph, pw], data)?
    };

    let mut acc: Vec<f64> = Vec::new();
    let mut count = vec![0u32; ph * pw];
    let mut channels = 0;
    for &r0 in &origins(ph, patch, stride) {
        for &c0 in &origins(pw, patch, stride) {
            let mut window = Vec::with_capacity(cin * patch * patch);
            for c in 0..cin {
                for r in 0..patch {
                    let row = (c * ph + r0 + r) * pw + c0;
                    window.extend_from_slice(&padded.data()[row..row + patch]);
                }
            }
            let logits = head.predict_logits(&Tensor::new(&[1, cin, patch, patch], window)?)?;
            let k = logits.shape()[1];
            if acc.is_empty() {
                channels = k;
                acc = vec![0.0; k * ph * pw];
            }
            for c in 0..k {
                for r in 0..patch {
                    for q in 0..patch {
                        acc[(c * ph + r0 + r) * pw + c0 + q] += logits.data()[(c * patch + r) * patch + q].as_f64();
                    }
                }
            }
            for r in 0..patch {
                for q in 0..patch {
                    count[(r0 + r) * pw + c0 + q] += 1;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        for r in top..top + h {
            for q in left..left + w {
                let i = r * pw + q;
                out.push(T::of(acc[c * ph * pw + i] / count[i] as f64));
            }
        }
    }
    head.activate(&Tensor::new(&[1, channels, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn window_origins_cover_the_end() {
        assert_eq!(origins(128, 64, 32), vec![0, 32, 64]);
        assert_eq!(origins(100, 64, 32), vec![0, 32, 36]);
        assert_eq!(origins(64, 64, 16), vec![0]);
    }
}
