use std::collections::VecDeque;

use super::BinaryMask;

/// Fills every background region that is not 4-connected to the image
/// border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();

    let seed = |r: usize, c: usize, outside: &mut [bool], queue: &mut VecDeque<usize>| {
        let i = r * w + c;
        if !mask.data[i] && !outside[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    };
    for c in 0..w {
        seed(0, c, &mut outside, &mut queue);
        seed(h - 1, c, &mut outside, &mut queue);
    }
    for r in 0..h {
        seed(r, 0, &mut outside, &mut queue);
        seed(r, w - 1, &mut outside, &mut queue);
    }

    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / w, i % w);
        let mut visit = |j: usize| {
            if !mask.data[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
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

    BinaryMask {
        width: w,
        height: h,
        data: outside.into_iter().map(|o| !o).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ring(n: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |r, c| {
            let inner = r > 1 && r < n - 2 && c > 1 && c < n - 2;
            let outer = r > 0 && r < n - 1 && c > 0 && c < n - 1;
            outer && !inner
        })
    }

    #[test]
    fn ring_becomes_disk() {
        let filled = fill_holes(&ring(8));
        let disk = BinaryMask::from_fn(8, 8, |r, c| r > 0 && r < 7 && c > 0 && c < 7);
        assert_eq!(filled, disk);
    }

    #[test]
    fn empty_mask_stays_empty() {
        let m = BinaryMask::zeros(9, 4);
        assert_eq!(fill_holes(&m), m);
    }

    #[test]
    fn diagonal_gap_does_not_leak() {
        // Background pixel at (1,1) touches the outside only diagonally, so
        // under 4-connectivity it is a hole.
        let m = BinaryMask::from_fn(3, 3, |r, c| (r + c) % 2 == 1);
        let f = fill_holes(&m);
        assert!(f.get(1, 1));
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), w * h)
                .prop_map(move |d| BinaryMask::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn idempotent(m in mask_strategy()) {
            let once = fill_holes(&m);
            prop_assert_eq!(fill_holes(&once), once);
        }

        #[test]
        fn superset_of_input(m in mask_strategy()) {
            let f = fill_holes(&m);
            for (a, b) in m.data().iter().zip(f.data()) {
                prop_assert!(!a || *b);
            }
        }

        #[test]
        fn monotone(m in mask_strategy(), extra in proptest::collection::vec(any::<bool>(), 144)) {
            let bigger = BinaryMask::new(
                m.width(),
                m.height(),
                m.data().iter().zip(&extra).map(|(a, b)| *a || *b).collect(),
            ).unwrap();
            let (f, g) = (fill_holes(&m), fill_holes(&bigger));
            for (a, b) in f.data().iter().zip(g.data()) {
                prop_assert!(!a || *b);
            }
        }
    }
}
