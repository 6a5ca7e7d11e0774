use crate::tensor::Tensor2;

/// Wrap-around translation: `out[y][x] = map[(y - dy) mod H][(x - dx) mod W]`.
pub fn circular_shift(map: &Tensor2, dy: isize, dx: isize) -> Tensor2 {
    let (h, w) = (map.h(), map.w());
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    Tensor2::from_fn(h, w, |y, x| map.get((y + h - sy) % h, (x + w - sx) % w))
}

/// The adjoint of a permutation is its inverse.
pub fn circular_shift_backward(grad: &Tensor2, dy: isize, dx: isize) -> Tensor2 {
    circular_shift(grad, -dy, -dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_is_identity() {
        let m = Tensor2::from_fn(3, 4, |y, x| (y * 4 + x) as f64);
        assert_eq!(circular_shift(&m, 0, 0), m);
        assert_eq!(circular_shift(&m, 3, -8), m);
    }

    #[test]
    fn single_spike_moves_by_shift() {
        let mut m = Tensor2::zeros(3, 3);
        m.set(0, 0, 1.0);
        let s = circular_shift(&m, 1, 2);
        assert_eq!(s.get(1, 2), 1.0);
        assert_eq!(s.sum(), 1.0);
    }

    #[test]
    fn inverse_composition() {
        let m = Tensor2::from_fn(5, 7, |y, x| ((y * 7 + x) as f64).sin());
        let back = circular_shift(&circular_shift(&m, 4, -9), -4, 9);
        assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
