//! Binary masks and 8-connected component labeling.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length");
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Self {
        BinaryMask::new(height, width, bytes.iter().map(|&b| b != 0).collect())
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask::new(height, width, vec![false; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// One connected region: its pixels in row-major discovery order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub pixels: Vec<(usize, usize)>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// The eight (dr, dc) neighbor offsets.
pub const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Labels the foreground of `mask` into 8-connected regions. Regions are
/// ordered by their first pixel in row-major scan order, so the labeling
/// is deterministic.
pub fn connected_components(mask: &BinaryMask) -> Vec<Region> {
    let (h, w) = (mask.height(), mask.width());
    let mut visited = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = std::collections::VecDeque::new();

    for start_r in 0..h {
        for start_c in 0..w {
            if !mask.get(start_r, start_c) || visited[start_r * w + start_c] {
                continue;
            }
            let mut pixels = Vec::new();
            visited[start_r * w + start_c] = true;
            queue.push_back((start_r, start_c));
            while let Some((r, c)) = queue.pop_front() {
                pixels.push((r, c));
                for (dr, dc) in NEIGHBORS_8 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask.get(nr, nc) && !visited[nr * w + nc] {
                        visited[nr * w + nc] = true;
                        queue.push_back((nr, nc));
                    }
                }
            }
            regions.push(Region { pixels });
        }
    }
    regions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::oracle::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn empty_mask_has_no_regions() {
        assert!(connected_components(&BinaryMask::zeros(4, 4)).is_empty());
    }

    #[test]
    fn diagonal_pixels_are_one_region() {
        let mut mask = BinaryMask::zeros(3, 3);
        mask.set(0, 0, true);
        mask.set(1, 1, true);
        let regions = connected_components(&mask);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].area(), 2);
    }

    #[test]
    fn separate_blobs_are_ordered_by_first_pixel() {
        let mut mask = BinaryMask::zeros(4, 4);
        mask.set(3, 0, true); // later in scan order
        mask.set(0, 3, true); // earlier
        let regions = connected_components(&mask);
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].pixels[0], (0, 3));
        assert_eq!(regions[1].pixels[0], (3, 0));
    }

    proptest! {
        #[test]
        fn matches_flood_fill_oracle(seed in 0u64..400) {
            let mut rng = SplitMix64::new(seed);
            let h = 1 + (rng.next_u64() % 8) as usize;
            let w = 1 + (rng.next_u64() % 8) as usize;
            let bits: Vec<bool> = (0..h * w).map(|_| rng.next_u64() % 3 == 0).collect();
            let mask = BinaryMask::new(h, w, bits);
            let fast = connected_components(&mask);
            let slow = oracle::flood_fill_components(&mask);
            prop_assert_eq!(fast.len(), slow.len());
            // Same pixel sets per region (both orderings are scan-first).
            for (a, b) in fast.iter().zip(&slow) {
                let mut pa = a.pixels.clone();
                let mut pb = b.clone();
                pa.sort_unstable();
                pb.sort_unstable();
                prop_assert_eq!(pa, pb);
            }
        }
    }
}
