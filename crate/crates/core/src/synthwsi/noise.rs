//! Hash-based lattice noise. Stateless, so any pixel can be evaluated
//! independently and the result depends only on (seed, coordinates).

#[inline]
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub fn hash2(seed: u64, x: i64, y: i64) -> u64 {
    splitmix(seed ^ splitmix((x as u64).wrapping_mul(0x9e37_79b9) ^ splitmix(y as u64)))
}

/// Uniform in [0, 1).
#[inline]
pub fn unit(h: u64) -> f32 {
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// FNV-1a of a string, for deriving seeds from identifiers.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Smooth value noise in [0, 1) with lattice spacing `cell` pixels.
#[derive(Clone, Copy, Debug)]
pub struct ValueNoise {
    seed: u64,
    inv_cell: f32,
}

impl ValueNoise {
    pub fn new(seed: u64, cell: f32) -> Self {
        ValueNoise {
            seed,
            inv_cell: 1.0 / cell,
        }
    }

    pub fn at(&self, x: u32, y: u32) -> f32 {
        let fx = x as f32 * self.inv_cell;
        let fy = y as f32 * self.inv_cell;
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (smooth(fx - x0), smooth(fy - y0));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let v = |dx: i64, dy: i64| unit(hash2(self.seed, ix + dx, iy + dy));
        let top = v(0, 0) + (v(1, 0) - v(0, 0)) * tx;
        let bottom = v(0, 1) + (v(1, 1) - v(0, 1)) * tx;
        top + (bottom - top) * ty
    }
}

#[inline]
fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}
