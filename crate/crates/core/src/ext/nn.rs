use rand::Rng;

use crate::error::{Error, Result};

/// One-hidden-layer tanh network with scalar output, parameters stored flat.
///
/// Layout with `hidden > 0`: `W1` (row-major, `hidden x input`), `b1`, `w2`,
/// `b2`, then the direct input-to-output weights when `skip` is set. With
/// `hidden == 0` the net is linear: `w` then `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input_dim: usize,
    hidden: usize,
    skip: bool,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn n_params_for(input_dim: usize, hidden: usize, skip: bool) -> usize {
        if hidden == 0 {
            input_dim + 1
        } else {
            hidden * input_dim + 2 * hidden + 1 + if skip { input_dim } else { 0 }
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, skip: bool) -> Self {
        let skip = skip && hidden > 0;
        Self {
            input_dim,
            hidden,
            skip,
            params: vec![0.0; Self::n_params_for(input_dim, hidden, skip)],
        }
    }

    /// Weights uniform in `[-scale, scale]`; the output bias and any direct
    /// weights start at zero.
    pub fn random<R: Rng>(input_dim: usize, hidden: usize, skip: bool, scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(input_dim, hidden, skip);
        let n_random = if hidden == 0 {
            input_dim
        } else {
            hidden * input_dim + 2 * hidden
        };
        for p in &mut net.params[..n_random] {
            *p = rng.random_range(-scale..=scale);
        }
        net
    }

    pub fn from_params(input_dim: usize, hidden: usize, skip: bool, params: Vec<f64>) -> Result<Self> {
        let skip = skip && hidden > 0;
        let expected = Self::n_params_for(input_dim, hidden, skip);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            input_dim,
            hidden,
            skip,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn skip(&self) -> bool {
        self.skip
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn bias_index(&self) -> usize {
        if self.hidden == 0 {
            self.input_dim
        } else {
            self.hidden * self.input_dim + 2 * self.hidden
        }
    }

    pub fn output_bias_mut(&mut self) -> &mut f64 {
        let i = self.bias_index();
        &mut self.params[i]
    }

    /// Weights acting on the input directly: the linear weights when
    /// `hidden == 0`, the skip weights otherwise (`None` without skip).
    pub fn direct_weights_mut(&mut self) -> Option<&mut [f64]> {
        if self.hidden == 0 {
            Some(&mut self.params[..self.input_dim])
        } else if self.skip {
            let start = self.bias_index() + 1;
            Some(&mut self.params[start..])
        } else {
            None
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let (d, h, p) = (self.input_dim, self.hidden, &self.params);
        if h == 0 {
            return Ok(dot(&p[..d], x) + p[d]);
        }
        let b1 = h * d;
        let w2 = b1 + h;
        let mut u = p[w2 + h];
        for j in 0..h {
            let a = dot(&p[j * d..(j + 1) * d], x) + p[b1 + j];
            u += p[w2 + j] * a.tanh();
        }
        if self.skip {
            u += dot(&p[w2 + h + 1..], x);
        }
        Ok(u)
    }

    /// Output and its gradient with respect to `params`.
    pub fn backward(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(x)?;
        let (d, h, p) = (self.input_dim, self.hidden, &self.params);
        let mut g = vec![0.0; p.len()];
        if h == 0 {
            g[..d].copy_from_slice(x);
            g[d] = 1.0;
            return Ok((dot(&p[..d], x) + p[d], g));
        }
        let b1 = h * d;
        let w2 = b1 + h;
        let mut u = p[w2 + h];
        for j in 0..h {
            let z = (dot(&p[j * d..(j + 1) * d], x) + p[b1 + j]).tanh();
            u += p[w2 + j] * z;
            g[w2 + j] = z;
            let back = p[w2 + j] * (1.0 - z * z);
            for (gi, xi) in g[j * d..(j + 1) * d].iter_mut().zip(x) {
                *gi = back * xi;
            }
            g[b1 + j] = back;
        }
        g[w2 + h] = 1.0;
        if self.skip {
            u += dot(&p[w2 + h + 1..], x);
            g[w2 + h + 1..].copy_from_slice(x);
        }
        Ok((u, g))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
