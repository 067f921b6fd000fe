use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDropConfig {
    pub p_hd: f32,
}

/// Which heads survive and the factor `H_ma / H⁺_ma` applied to the
/// layer's concatenated context.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadDropMask {
    pub keep: Vec<bool>,
    pub scale: f32,
}

impl HeadDropMask {
    pub fn identity(heads: usize) -> Self {
        Self { keep: vec![true; heads], scale: 1.0 }
    }

    pub fn survivors(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Independently drop each head with probability `p_hd`. If every head is
/// dropped, one uniformly chosen head is kept.
pub fn draw<R: Rng>(heads: usize, cfg: HeadDropConfig, mode: Mode, rng: &mut R) -> HeadDropMask {
    if mode == Mode::Test || cfg.p_hd <= 0.0 || heads == 0 {
        return HeadDropMask::identity(heads);
    }
    let mut keep: Vec<bool> = (0..heads).map(|_| rng.gen::<f32>() >= cfg.p_hd).collect();
    if keep.iter().all(|&k| !k) {
        keep[rng.gen_range(0..heads)] = true;
    }
    let survivors = keep.iter().filter(|&&k| k).count();
    HeadDropMask { keep, scale: heads as f32 / survivors as f32 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStreams;

    #[test]
    fn zero_probability_is_identity() {
        let mut rng = RngStreams::new(0).stream("hd");
        for _ in 0..100 {
            assert_eq!(draw(4, HeadDropConfig { p_hd: 0.0 }, Mode::Train, &mut rng), HeadDropMask::identity(4));
        }
    }

    #[test]
    fn test_mode_is_identity() {
        let mut rng = RngStreams::new(0).stream("hd");
        assert_eq!(draw(4, HeadDropConfig { p_hd: 0.9 }, Mode::Test, &mut rng), HeadDropMask::identity(4));
    }

    #[test]
    fn two_of_four_dropped_scales_by_two() {
        let mut rng = RngStreams::new(0).stream("hd");
        let m = (0..1000)
            .map(|_| draw(4, HeadDropConfig { p_hd: 0.5 }, Mode::Train, &mut rng))
            .find(|m| m.survivors() == 2)
            .unwrap();
        assert_eq!(m.scale, 2.0);
    }

    #[test]
    fn never_drops_every_head() {
        let mut rng = RngStreams::new(3).stream("hd");
        for _ in 0..1000 {
            assert!(draw(2, HeadDropConfig { p_hd: 0.99 }, Mode::Train, &mut rng).survivors() >= 1);
        }
    }
}
