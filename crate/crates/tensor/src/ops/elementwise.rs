use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::graph::{BackwardArgs, Var};
use crate::tensor::Tensor;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Var {
    fn binary(
        &self,
        other: &Var,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Var {
        let value = self.value().broadcast_with(other.value(), f);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let a = args.parents[0].value();
                let b = args.parents[1].value();
                let out_shape = args.grad.shape();
                let ae = a.expand_to(out_shape);
                let be = b.expand_to(out_shape);
                let ga = args.parents[0].requires_grad().then(|| {
                    let g = Tensor::from_vec(
                        out_shape,
                        args.grad
                            .data()
                            .iter()
                            .zip(ae.data().iter().zip(be.data()))
                            .map(|(&g, (&x, &y))| da(g, x, y))
                            .collect(),
                    );
                    g.reduce_to(a.shape())
                });
                let gb = args.parents[1].requires_grad().then(|| {
                    let g = Tensor::from_vec(
                        out_shape,
                        args.grad
                            .data()
                            .iter()
                            .zip(ae.data().iter().zip(be.data()))
                            .map(|(&g, (&x, &y))| db(g, x, y))
                            .collect(),
                    );
                    g.reduce_to(b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(
            other,
            |a, b| a / b,
            |g, _, b| g / b,
            |g, a, b| -g * a / (b * b),
        )
    }

    /// Elementwise op given as a value function and its derivative in terms of the input.
    pub fn unary(&self, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let value = self.value().map(f);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let x = args.parents[0].value();
                vec![Some(args.grad.zip_map(x, |g, x| g * df(x)))]
            }),
        )
    }

    /// Elementwise op whose derivative is cheaper in terms of the output.
    fn unary_out(&self, f: fn(f64) -> f64, df_from_out: fn(f64) -> f64) -> Var {
        let value = self.value().map(f);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                vec![Some(args.grad.zip_map(args.out, |g, y| g * df_from_out(y)))]
            }),
        )
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, |_| -1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.value().map(|x| x + c);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_>| vec![Some(args.grad.clone())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let value = self.value().map(|x| x * c);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| vec![Some(args.grad.map(|g| g * c))]),
        )
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: f64) -> Var {
        self.neg().add_scalar(c)
    }

    pub fn exp(&self) -> Var {
        self.unary_out(f64::exp, |y| y)
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary_out(f64::sqrt, |y| 0.5 / y)
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x| 2.0 * x)
    }

    pub fn powf(&self, p: f64) -> Var {
        let value = self.value().map(|x| x.powf(p));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let x = args.parents[0].value();
                vec![Some(args.grad.zip_map(x, |g, x| g * p * x.powf(p - 1.0)))]
            }),
        )
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sigmoid(&self) -> Var {
        self.unary_out(sigmoid, |y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self) -> Var {
        self.unary(softplus, sigmoid)
    }

    /// `ln(sigmoid(x))`, stable for large |x|.
    pub fn log_sigmoid(&self) -> Var {
        self.unary(|x| -softplus(-x), |x| sigmoid(-x))
    }

    pub fn tanh(&self) -> Var {
        self.unary_out(f64::tanh, |y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x| {
                let inner = C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.value().map(|x| x.clamp(lo, hi));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let x = args.parents[0].value();
                vec![Some(args.grad.zip_map(x, |g, x| {
                    if x < lo || x > hi {
                        0.0
                    } else {
                        g
                    }
                }))]
            }),
        )
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $call:ident) => {
        impl $trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                Var::$call(self, rhs)
            }
        }
        impl $trait<Var> for Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                Var::$call(&self, &rhs)
            }
        }
        impl $trait<&Var> for Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                Var::$call(&self, rhs)
            }
        }
        impl $trait<Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                Var::$call(self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(&self)
    }
}
