//! Deterministic state generators shared by the unit tests.

use crate::linalg::{herm_part, zeros, C64, CMat};
use crate::state::RcmpsState;

/// SplitMix-style deterministic stream in [-0.5, 0.5).
pub(crate) struct Stream(u64);

impl Stream {
    pub(crate) fn new(seed: u64) -> Self {
        Stream(
            seed.wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407),
        )
    }

    pub(crate) fn next_f64(&mut self) -> f64 {
        self.0 ^= self.0 >> 33;
        self.0 = self.0.wrapping_mul(0xff51afd7ed558ccd);
        self.0 ^= self.0 >> 33;
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    }

    pub(crate) fn next_c64(&mut self) -> C64 {
        C64::new(self.next_f64(), self.next_f64())
    }

    pub(crate) fn matrix(&mut self, d: usize) -> CMat {
        let mut m = zeros(d);
        for i in 0..d {
            for j in 0..d {
                m[[i, j]] = self.next_c64();
            }
        }
        m
    }
}

/// Generic (not regular) state with entries O(1).
pub(crate) fn sample_state(d: usize, seed: u64) -> RcmpsState {
    let mut s = Stream::new(seed);
    let k = herm_part(&s.matrix(d));
    let r1 = s.matrix(d);
    let r2 = s.matrix(d);
    RcmpsState::new(k, r1, r2).unwrap()
}

/// Regular state ([R_1, R_2] = 0 exactly): both R's diagonal in the same
/// basis... here simply diagonal, with a generic Hermitian K. `scale`
/// multiplies the R entries.
pub(crate) fn regular_state(d: usize, seed: u64, scale: f64) -> RcmpsState {
    let mut s = Stream::new(seed);
    let k = herm_part(&s.matrix(d));
    let mut r1 = zeros(d);
    let mut r2 = zeros(d);
    for i in 0..d {
        r1[[i, i]] = s.next_c64() * scale;
        r2[[i, i]] = s.next_c64() * scale;
    }
    RcmpsState::new(k, r1, r2).unwrap()
}

/// D = 1 coherent state with given field amplitudes and gauge phase.
pub(crate) fn coherent_d1(r1: C64, r2: C64, k: f64) -> RcmpsState {
    let mut km = zeros(1);
    km[[0, 0]] = C64::new(k, 0.0);
    let mut m1 = zeros(1);
    m1[[0, 0]] = r1;
    let mut m2 = zeros(1);
    m2[[0, 0]] = r2;
    RcmpsState::new(km, m1, m2).unwrap()
}
