//! Fixed Sobel filtering, both differentiable and on plain maps.

use refcod_tensor::{Tensor, Var};

/// Horizontal and vertical Sobel kernels stacked as a `[2, 1, 3, 3]` conv weight.
pub fn sobel_kernels() -> Tensor {
    Tensor::from_vec(
        &[2, 1, 3, 3],
        vec![
            -1., 0., 1., -2., 0., 2., -1., 0., 1., //
            -1., -2., -1., 0., 0., 0., 1., 2., 1.,
        ],
    )
}

/// Sobel magnitude `sqrt(gx² + gy² + eps)` of a `[B, 1, H, W]` map with
/// replicate padding. `eps` keeps the gradient finite on flat regions.
pub fn sobel_magnitude_var(x: &Var, eps: f64) -> Var {
    assert_eq!(x.shape()[1], 1, "sobel expects a single channel");
    let g = x
        .pad_replicate(1)
        .conv2d(&Var::constant(sobel_kernels()), None, 1, 0);
    g.square().sum_axes(&[1]).add_scalar(eps).sqrt()
}

/// Exact Sobel magnitude of an `[H, W]` map with replicate padding.
pub fn sobel_magnitude(map: &Tensor) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        map.data()[r * w + c]
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            out[r as usize * w + c as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// Number of 4-connected foreground components of a binary `[H, W]` mask.
pub fn connected_components(mask: &Tensor) -> usize {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let fg: Vec<bool> = mask.data().iter().map(|&v| v >= 0.5).collect();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn differentiable_and_plain_sobel_agree() {
        let data: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let plain = sobel_magnitude(&Tensor::from_vec(&[5, 6], data.clone()));
        let var = sobel_magnitude_var(&Var::constant(Tensor::from_vec(&[1, 1, 5, 6], data)), 0.0);
        for (a, b) in plain.data().iter().zip(var.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn counts_components() {
        let m = Tensor::from_vec(
            &[3, 4],
            vec![1., 0., 0., 1., 1., 0., 1., 1., 0., 0., 0., 0.],
        );
        assert_eq!(connected_components(&m), 2);
        assert_eq!(connected_components(&Tensor::zeros(&[3, 3])), 0);
    }
}
