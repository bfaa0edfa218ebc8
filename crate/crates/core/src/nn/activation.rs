use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn value(self, a: f64) -> f64 {
        match self {
            Self::Identity => a,
            Self::Relu => a.max(0.0),
            Self::LeakyRelu(slope) => {
                if a > 0.0 {
                    a
                } else {
                    slope * a
                }
            }
            Self::Sigmoid => sigmoid(a),
        }
    }

    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Relu => (a > 0.0) as u8 as f64,
            Self::LeakyRelu(slope) => {
                if a > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Self::Sigmoid => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
        }
    }

    /// Second derivative; zero almost everywhere for piecewise-linear kinds.
    pub fn second_derivative(self, a: f64) -> f64 {
        match self {
            Self::Sigmoid => {
                let s = sigmoid(a);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            _ => 0.0,
        }
    }

    pub fn is_piecewise_linear(self) -> bool {
        !matches!(self, Self::Sigmoid)
    }

    pub fn forward(self, a: &Array4<f64>) -> Array4<f64> {
        a.mapv(|v| self.value(v))
    }

    /// `upstream * f'(a)`.
    pub fn backward(self, a: &Array4<f64>, upstream: &Array4<f64>) -> Array4<f64> {
        let mut out = upstream.clone();
        Zip::from(&mut out).and(a).for_each(|o, &x| *o *= self.derivative(x));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_differences() {
        let h = 1e-6;
        for act in [Activation::Identity, Activation::Relu, Activation::LeakyRelu(0.2), Activation::Sigmoid] {
            for a in [-2.3, -0.4, 0.7, 3.1] {
                let fd = (act.value(a + h) - act.value(a - h)) / (2.0 * h);
                assert!((fd - act.derivative(a)).abs() < 1e-8);
                let fd2 = (act.derivative(a + h) - act.derivative(a - h)) / (2.0 * h);
                assert!((fd2 - act.second_derivative(a)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(Activation::Sigmoid.value(-1000.0), 0.0);
        assert_eq!(Activation::Sigmoid.value(1000.0), 1.0);
    }
}
