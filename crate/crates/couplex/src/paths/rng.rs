//! Counter-based random numbers: Philox4x32-10 plus Gaussian conversion.
//!
//! A sequential generator would make results depend on the order in which
//! worker threads consume it. Instead every 128-bit random block is addressed
//! by an explicit counter and produced by the Philox4x32-10 bijection, so the
//! noise attached to a path is a pure function of its coordinates:
//!
//! ```text
//! ctr[0] = path index, low 32 bits      ctr[2] = step index
//! ctr[1] = path index, high 32 bits     ctr[3] = experiment << 16 | block
//! key    = the user seed split into two 32-bit words
//! ```
//!
//! `experiment` separates logical noise sources (forward runs, coupled runs,
//! solver paths, ...); reusing an experiment id across two estimators is how
//! common random numbers are arranged on purpose. `block` indexes 128-bit
//! chunks within one (path, step) cell, two normals per block.

/// Multiplier for counter word 0.
const PHILOX_M0: u32 = 0xD251_1F53;
/// Multiplier for counter word 2.
const PHILOX_M1: u32 = 0xCD9E_8D57;
/// Weyl increment for key word 0 (golden ratio).
const PHILOX_W0: u32 = 0x9E37_79B9;
/// Weyl increment for key word 1 (sqrt 3 - 1).
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// One Philox4x32-10 block cipher application: 128 counter bits and a 64-bit
/// key in, 128 pseudo-random bits out.
pub fn philox4x32_10(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut x = ctr;
    let mut k = key;
    for _ in 0..10 {
        let (hi0, lo0) = mulhilo(PHILOX_M0, x[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, x[2]);
        x = [hi1 ^ x[1] ^ k[0], lo1, hi0 ^ x[3] ^ k[1], lo0];
        k[0] = k[0].wrapping_add(PHILOX_W0);
        k[1] = k[1].wrapping_add(PHILOX_W1);
    }
    x
}

/// A keyed, addressable stream of Gaussian variates.
///
/// Copyable and stateless: cloning or sharing a stream cannot change what any
/// coordinate produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    experiment: u16,
}

impl RngStream {
    /// A stream for one logical noise source. Streams with different
    /// `experiment` ids are independent even under the same seed; estimators
    /// that must share noise (common random numbers) share the id.
    pub fn new(seed: u64, experiment: u16) -> Self {
        Self { seed, experiment }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn experiment(&self) -> u16 {
        self.experiment
    }

    /// Raw 128-bit block at (path, step, block).
    #[inline]
    fn raw(&self, path: u64, step: u32, block: u16) -> [u32; 4] {
        let ctr = [
            path as u32,
            (path >> 32) as u32,
            step,
            (u32::from(self.experiment) << 16) | u32::from(block),
        ];
        let key = [self.seed as u32, (self.seed >> 32) as u32];
        philox4x32_10(ctr, key)
    }

    /// Two independent standard normals via Box-Muller.
    ///
    /// The radial uniform is mapped to (0, 1] so the logarithm is always
    /// finite; both uniforms use 53 of the 64 available bits.
    #[inline]
    pub fn normal_pair(&self, path: u64, step: u32, block: u16) -> (f64, f64) {
        let w = self.raw(path, step, block);
        let bits0 = (u64::from(w[1]) << 32) | u64::from(w[0]);
        let bits1 = (u64::from(w[3]) << 32) | u64::from(w[2]);
        // u1 in (0, 1], u2 in [0, 1).
        let u1 = ((bits0 >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u2 = (bits1 >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        (r * phi.cos(), r * phi.sin())
    }

    /// Fill `out` with standard normals for one (path, step) cell.
    ///
    /// Coordinates 2j and 2j+1 come from block j, so a cell supplies up to
    /// 2 * 65536 coordinates — far beyond any desk-scale dimension.
    pub fn fill_normals(&self, path: u64, step: u32, out: &mut [f64]) {
        let mut i = 0;
        let mut block = 0u16;
        while i < out.len() {
            let (a, b) = self.normal_pair(path, step, block);
            out[i] = a;
            if i + 1 < out.len() {
                out[i + 1] = b;
            }
            i += 2;
            block += 1;
        }
    }

    /// Fill `out` with N(0, dt) increments (normals scaled by sqrt(dt)).
    pub fn fill_increments(&self, path: u64, step: u32, sqrt_dt: f64, out: &mut [f64]) {
        self.fill_normals(path, step, out);
        for w in out.iter_mut() {
            *w *= sqrt_dt;
        }
    }
}
