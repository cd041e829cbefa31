use ndarray::NdFloat;

/// Element type the runtime is generic over (`f32` for inference, `f64`
/// for high-precision gradient checks).
pub trait Real: NdFloat + num_traits::Float + std::iter::Sum + Default {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
