use super::Real;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(SQRT_2_OVER_PI) * (x + T::from_f64(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let k = T::from_f64(SQRT_2_OVER_PI);
    let c = T::from_f64(GELU_CUBIC);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::from_f64(3.0) * c * x * x)
}

/// Strided matrix view: (data, row stride, column stride).
pub(crate) type View<'a, T> = (&'a [T], isize, isize);

/// `C (m×n, row-major) = A·B + beta·C`.
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass views whose extents cover m×k and k×n elements
    // at the given strides, and c holds m×n elements.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
