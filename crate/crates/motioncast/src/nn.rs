//! Scalar nonlinearities shared across the network.

/// Negative-side slope used by every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the sigmoid expressed through its output value.
pub fn sigmoid_deriv_from_output(y: f64) -> f64 {
    y * (1.0 - y)
}
