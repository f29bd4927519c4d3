use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes `dy` where `x > 0`; the derivative at exactly zero is taken as 0.
pub fn relu_vjp<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, "relu_vjp", |v, d| if v > T::ZERO { d } else { T::ZERO })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn clamps_and_masks() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let dy = Tensor::full(x.shape(), 5.0);
        assert_eq!(relu_vjp(&x, &dy).unwrap().data(), &[0.0, 0.0, 5.0]);
    }
}
