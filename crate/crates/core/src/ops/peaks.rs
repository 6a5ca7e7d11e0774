//! Peak extraction on single-channel maps.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{PeakLocation, Tensor2};

fn by_score_then_index(map: &Tensor2) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| map.data()[b].total_cmp(&map.data()[a]).then(a.cmp(&b))
}

fn to_peak(map: &Tensor2, i: usize) -> PeakLocation {
    PeakLocation::new(i / map.w(), i % map.w(), map.data()[i])
}

/// The `k` largest elements in non-increasing order; equal scores keep row-major order.
pub fn topk_peaks(map: &Tensor2, k: usize) -> Result<Vec<PeakLocation>> {
    if k == 0 || k > map.len() {
        return Err(Error::invalid(
            "topk_peaks",
            format!("k = {k} outside 1..={}", map.len()),
        ));
    }
    let mut idx: Vec<usize> = (0..map.len()).collect();
    let cmp = by_score_then_index(map);
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_by(&cmp);
    Ok(idx.into_iter().map(|i| to_peak(map, i)).collect())
}

/// Cells that are no smaller than any of their 8 neighbours.
pub fn local_maxima(map: &Tensor2) -> Vec<usize> {
    let (h, w) = (map.h(), map.w());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y, x);
            let mut keep = true;
            'n: for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    if map.get(ny, nx) > v {
                        keep = false;
                        break 'n;
                    }
                }
            }
            if keep {
                out.push(y * w + x);
            }
        }
    }
    out
}

/// Up to `k` local maxima (3x3 neighbourhood suppression) ordered like
/// [`topk_peaks`]. The first entry is always the global argmax.
pub fn topk_local_peaks(map: &Tensor2, k: usize) -> Result<Vec<PeakLocation>> {
    if k == 0 {
        return Err(Error::invalid("topk_local_peaks", "k must be positive"));
    }
    let mut idx = local_maxima(map);
    idx.sort_by(by_score_then_index(map));
    idx.truncate(k);
    Ok(idx.into_iter().map(|i| to_peak(map, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unimodal_first_is_argmax() {
        let m = Tensor2::from_fn(7, 7, |y, x| -(((y as f64) - 2.0).powi(2) + ((x as f64) - 5.0).powi(2)));
        let p = topk_peaks(&m, 4).unwrap();
        assert_eq!((p[0].y, p[0].x), (2, 5));
        assert!(p.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_follow_row_major_order() {
        let m = Tensor2::filled(3, 3, 1.0);
        let p = topk_peaks(&m, 3).unwrap();
        let cells: Vec<_> = p.iter().map(|p| (p.y, p.x)).collect();
        assert_eq!(cells, vec![(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Tensor2::random(8, 8, 0.0, 1.0, &mut rng);
        let mut all: Vec<(f64, usize)> = m.data().iter().copied().zip(0..).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for k in [1, 5, 64] {
            let p = topk_peaks(&m, k).unwrap();
            for (got, want) in p.iter().zip(&all) {
                assert_eq!(got.y * 8 + got.x, want.1);
                assert_eq!(got.score, want.0);
            }
        }
    }

    #[test]
    fn k_out_of_range() {
        let m = Tensor2::zeros(2, 2);
        assert!(topk_peaks(&m, 0).is_err());
        assert!(topk_peaks(&m, 5).is_err());
        assert!(topk_local_peaks(&m, 0).is_err());
    }

    #[test]
    fn local_peaks_skip_shoulders() {
        let mut m = Tensor2::zeros(7, 9);
        m.set(3, 2, 1.0);
        m.set(3, 3, 0.9);
        m.set(2, 2, 0.8);
        m.set(4, 7, 0.6);
        let p = topk_local_peaks(&m, 3).unwrap();
        assert_eq!((p[0].y, p[0].x), (3, 2));
        assert_eq!((p[1].y, p[1].x), (4, 7));
        assert_eq!(p[2].score, 0.0);
    }
}
