use super::Tensor;

/// splitmix64 generator. Fully specified by its constants, so a seed yields
/// the same stream on every platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)` from the top 24 bits of one draw. Exact in `f32`.
    pub fn next_signed_unit(&mut self) -> f32 {
        let top = (self.next_u64() >> 40) as i32;
        (top - (1 << 23)) as f32 / (1u32 << 23) as f32
    }

    /// Uniform in `[0, 1)` from the top 24 bits of one draw.
    pub fn next_unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u32 << 24) as f32
    }

    /// Uniform integer in `0..bound` (multiply-high reduction; `bound > 0`).
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "empty range");
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Seed for an independent child stream.
    pub fn fork(&mut self) -> Prng {
        Prng::new(self.next_u64())
    }
}

/// Tensor with entries uniform in `[-scale, scale)`, consuming exactly one
/// draw per element in row-major order.
pub fn random_tensor(shape: Vec<usize>, prng: &mut Prng, scale: f32) -> Tensor {
    assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
    let n = shape.iter().product();
    let data = (0..n).map(|_| prng.next_signed_unit() * scale).collect();
    Tensor::from_kernel(shape, data)
}
