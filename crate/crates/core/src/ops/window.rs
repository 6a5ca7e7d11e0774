use std::f64::consts::PI;

use crate::tensor::Tensor2;

/// Symmetric Hann window; endpoints are zero and a length-1 window is `[1]`.
pub fn hanning1d(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0; n];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / denom).cos())
        .collect()
}

/// Outer product of two 1-D Hann windows.
pub fn hanning2d(h: usize, w: usize) -> Tensor2 {
    let wy = hanning1d(h);
    let wx = hanning1d(w);
    Tensor2::from_fn(h, w, |y, x| wy[y] * wx[x])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_window() {
        assert_eq!(hanning2d(1, 1).data(), &[1.0]);
    }

    #[test]
    fn symmetric_and_bounded() {
        let m = hanning2d(6, 9);
        for y in 0..6 {
            for x in 0..9 {
                let v = m.get(y, x);
                assert!((0.0..=1.0).contains(&v));
                assert!((v - m.get(5 - y, 8 - x)).abs() < 1e-15);
            }
        }
        assert!(m.data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn five_by_five_closed_form() {
        let m = hanning2d(5, 5);
        // 1-D Hann of length 5: [0, 0.5, 1, 0.5, 0]
        assert!((m.get(2, 2) - 1.0).abs() < 1e-15);
        assert!((m.get(1, 2) - 0.5).abs() < 1e-15);
        assert!((m.get(1, 3) - 0.25).abs() < 1e-15);
        assert_eq!(m.argmax().y, 2);
    }
}
