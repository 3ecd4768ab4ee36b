//! Forward-mode jets carrying value, gradient, Hessian and third-derivative
//! tensor of a scalar function of `n` variables.

/// Truncated Taylor data of a scalar function of `n` variables. Tensors are
/// stored dense, row-major, and kept fully symmetric by every operation.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    n: usize,
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub t: Vec<f64>,
}

impl Jet {
    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            n,
            v: value,
            g: vec![0.0; n],
            h: vec![0.0; n * n],
            t: vec![0.0; n * n * n],
        }
    }

    /// The coordinate function `x_i` evaluated at `value`.
    pub fn variable(n: usize, i: usize, value: f64) -> Self {
        let mut j = Self::constant(n, value);
        j.g[i] = 1.0;
        j
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn hess(&self, a: usize, b: usize) -> f64 {
        self.h[a * self.n + b]
    }

    pub fn third(&self, a: usize, b: usize, c: usize) -> f64 {
        self.t[(a * self.n + b) * self.n + c]
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &Jet) {
        debug_assert_eq!(self.n, other.n);
        self.v += c * other.v;
        for (x, y) in self.g.iter_mut().zip(&other.g) {
            *x += c * y;
        }
        for (x, y) in self.h.iter_mut().zip(&other.h) {
            *x += c * y;
        }
        for (x, y) in self.t.iter_mut().zip(&other.t) {
            *x += c * y;
        }
    }

    pub fn add(&self, other: &Jet) -> Jet {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn scale(&self, c: f64) -> Jet {
        let mut out = Jet::constant(self.n, 0.0);
        out.axpy(c, self);
        out
    }

    pub fn add_const(&self, c: f64) -> Jet {
        let mut out = self.clone();
        out.v += c;
        out
    }

    pub fn mul(&self, o: &Jet) -> Jet {
        let n = self.n;
        let (f, g) = (self, o);
        let mut out = Jet::constant(n, f.v * g.v);
        for a in 0..n {
            out.g[a] = f.g[a] * g.v + f.v * g.g[a];
        }
        for a in 0..n {
            for b in 0..n {
                let ab = a * n + b;
                out.h[ab] = f.h[ab] * g.v + f.g[a] * g.g[b] + f.g[b] * g.g[a] + f.v * g.h[ab];
            }
        }
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let abc = (a * n + b) * n + c;
                    let (ab, ac, bc) = (a * n + b, a * n + c, b * n + c);
                    out.t[abc] = f.t[abc] * g.v
                        + f.h[ab] * g.g[c]
                        + f.h[ac] * g.g[b]
                        + f.h[bc] * g.g[a]
                        + f.g[a] * g.h[bc]
                        + f.g[b] * g.h[ac]
                        + f.g[c] * g.h[ab]
                        + f.v * g.t[abc];
                }
            }
        }
        out
    }

    /// `φ ∘ self` given `φ(v), φ'(v), φ''(v), φ'''(v)`.
    pub fn compose(&self, d0: f64, d1: f64, d2: f64, d3: f64) -> Jet {
        let n = self.n;
        let u = self;
        let mut out = Jet::constant(n, d0);
        for a in 0..n {
            out.g[a] = d1 * u.g[a];
        }
        for a in 0..n {
            for b in 0..n {
                let ab = a * n + b;
                out.h[ab] = d2 * u.g[a] * u.g[b] + d1 * u.h[ab];
            }
        }
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let abc = (a * n + b) * n + c;
                    let (ab, ac, bc) = (a * n + b, a * n + c, b * n + c);
                    out.t[abc] = d3 * u.g[a] * u.g[b] * u.g[c]
                        + d2 * (u.h[ab] * u.g[c] + u.h[ac] * u.g[b] + u.h[bc] * u.g[a])
                        + d1 * u.t[abc];
                }
            }
        }
        out
    }

    pub fn tanh(&self) -> Jet {
        let t = self.v.tanh();
        let s = 1.0 - t * t;
        self.compose(t, s, -2.0 * t * s, -2.0 * s * (1.0 - 3.0 * t * t))
    }

    pub fn softplus(&self) -> Jet {
        let x = self.v;
        let sp = crate::scm::softplus(x);
        let s = 1.0 / (1.0 + (-x).exp());
        let s1 = s * (1.0 - s);
        self.compose(sp, s, s1, s1 * (1.0 - 2.0 * s))
    }

    pub fn recip(&self) -> Jet {
        let x = self.v;
        let r = 1.0 / x;
        self.compose(r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r)
    }

    pub fn ln(&self) -> Jet {
        let r = 1.0 / self.v;
        self.compose(self.v.ln(), r, -r * r, 2.0 * r * r * r)
    }

    pub fn square(&self) -> Jet {
        let x = self.v;
        self.compose(x * x, 2.0 * x, 2.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite()
            && self.g.iter().all(|x| x.is_finite())
            && self.h.iter().all(|x| x.is_finite())
            && self.t.iter().all(|x| x.is_finite())
    }
}
