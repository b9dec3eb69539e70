//! Uncompressed COCO run-length encoding: column-major, runs alternate
//! starting with zeros.

use serde::{Deserialize, Serialize};

use crate::decoder::BinaryMask;
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.counts.iter().sum();
        let expect = (self.size[0] * self.size[1]) as u64;
        ensure!(
            total == expect,
            Format,
            "RLE counts sum to {total}, expected {expect} for size {:?}",
            self.size
        );
        Ok(())
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = (mask.height, mask.width);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask { size: [h, w], counts }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    rle.validate()?;
    let (h, w) = (rle.height(), rle.width());
    let mut out = BinaryMask::empty(h, w);
    let mut pos = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let value = i % 2 == 1;
        for p in pos..pos + c as usize {
            if value {
                let (x, y) = (p / h, p % h);
                out.data[y * w + x] = true;
            }
        }
        pos += c as usize;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_fixtures() {
        assert_eq!(rle_encode(&BinaryMask::empty(2, 2)).counts, vec![4]);
        let tl = BinaryMask::new(2, 2, vec![true, false, false, false]);
        assert_eq!(rle_encode(&tl).counts, vec![0, 1, 3]);
        // Column-major: the top-right pixel is the third in scan order.
        let tr = BinaryMask::new(2, 2, vec![false, true, false, false]);
        assert_eq!(rle_encode(&tr).counts, vec![2, 1, 1]);
        let rect = BinaryMask::new(2, 3, vec![false, true, true, false, true, true]);
        assert_eq!(rle_encode(&rect).counts, vec![2, 4]);
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let p: f64 = rng.random();
            let m = BinaryMask::new(16, 16, (0..256).map(|_| rng.random::<f64>() < p).collect());
            let rle = rle_encode(&m);
            assert_eq!(rle.area() as usize, m.count());
            assert_eq!(rle_decode(&rle).unwrap(), m);
        }
    }

    #[test]
    fn bad_counts_rejected() {
        let rle = RleMask {
            size: [2, 2],
            counts: vec![1, 1],
        };
        assert!(matches!(rle_decode(&rle), Err(crate::Error::Format(_))));
    }
}
