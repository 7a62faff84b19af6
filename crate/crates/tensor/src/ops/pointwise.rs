#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    /// Requires strictly positive input.
    Log,
    Abs,
}

impl Pointwise {
    pub fn name(self) -> &'static str {
        match self {
            Pointwise::Sigmoid => "sigmoid",
            Pointwise::Tanh => "tanh",
            Pointwise::Relu => "relu",
            Pointwise::Exp => "exp",
            Pointwise::Log => "log",
            Pointwise::Abs => "abs",
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Pointwise::Sigmoid => {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            }
            Pointwise::Tanh => v.tanh(),
            Pointwise::Relu => v.max(0.0),
            Pointwise::Exp => v.exp(),
            Pointwise::Log => v.ln(),
            Pointwise::Abs => v.abs(),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Pointwise::Sigmoid => y * (1.0 - y),
            Pointwise::Tanh => 1.0 - y * y,
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Exp => y,
            Pointwise::Log => 1.0 / x,
            Pointwise::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}
