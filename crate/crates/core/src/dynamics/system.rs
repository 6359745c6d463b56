use std::fmt;
use std::sync::Arc;

type Rhs = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;

/// An autonomous or time-dependent vector field `ds/dt = f(s, t)`.
#[derive(Clone)]
pub struct OdeSystem {
    name: String,
    dimension: usize,
    parameters: Vec<(String, f64)>,
    rhs: Arc<Rhs>,
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("dimension", &self.dimension)
            .field("parameters", &self.parameters)
            .finish()
    }
}

impl OdeSystem {
    pub fn new<F>(name: &str, dimension: usize, parameters: &[(&str, f64)], rhs: F) -> Self
    where
        F: Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        assert!(dimension > 0, "ODE dimension must be positive");
        Self {
            name: name.to_owned(),
            dimension,
            parameters: parameters
                .iter()
                .map(|(k, v)| ((*k).to_owned(), *v))
                .collect(),
            rhs: Arc::new(rhs),
        }
    }

    /// Standard Lorenz system.
    pub fn lorenz(a: f64, b: f64, c: f64) -> Self {
        Self::new(
            "lorenz",
            3,
            &[("a", a), ("b", b), ("c", c)],
            move |s, _, ds| {
                ds[0] = a * (s[1] - s[0]);
                ds[1] = s[0] * (b - s[2]) - s[1];
                ds[2] = s[0] * s[1] - c * s[2];
            },
        )
    }

    pub fn lorenz_default() -> Self {
        Self::lorenz(10.0, 28.0, 8.0 / 3.0)
    }

    /// Rössler system in its chaotic form `dz/dt = b + z (x - c)`.
    pub fn rossler(a: f64, b: f64, c: f64) -> Self {
        Self::new(
            "rossler",
            3,
            &[("a", a), ("b", b), ("c", c)],
            move |s, _, ds| {
                ds[0] = -s[1] - s[2];
                ds[1] = s[0] + a * s[1];
                ds[2] = b + s[2] * (s[0] - c);
            },
        )
    }

    pub fn rossler_default() -> Self {
        Self::rossler(0.2, 0.2, 5.7)
    }

    /// Unidirectionally coupled pair of Lorenz systems. Components 0..3 are
    /// the driven system, 3..6 the hidden driver.
    pub fn uctls(sigma_force: f64) -> Self {
        let (a, b, c) = (10.0, 28.0, 8.0 / 3.0);
        Self::new(
            "uctls",
            6,
            &[("a", a), ("b", b), ("c", c), ("sigma_force", sigma_force)],
            move |s, _, ds| {
                let (x1, y1, z1, x2, y2, z2) = (s[0], s[1], s[2], s[3], s[4], s[5]);
                ds[0] = (a + sigma_force * x2) * (y1 - x1);
                ds[1] = x1 * (b + sigma_force * y2 - z1) - y1;
                ds[2] = x1 * y1 - (c + sigma_force * z2) * z1;
                ds[3] = a * (y2 - x2);
                ds[4] = x2 * (b - z2) - y2;
                ds[5] = x2 * y2 - c * z2;
            },
        )
    }

    /// `ds/dt = -rate * s` in every component.
    pub fn linear_decay(dimension: usize, rate: f64) -> Self {
        Self::new(
            "linear_decay",
            dimension,
            &[("rate", rate)],
            move |s, _, ds| {
                for (d, x) in ds.iter_mut().zip(s) {
                    *d = -rate * x;
                }
            },
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn parameters(&self) -> &[(String, f64)] {
        &self.parameters
    }

    pub fn parameter(&self, key: &str) -> Option<f64> {
        self.parameters
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
    }

    #[inline]
    pub fn eval(&self, state: &[f64], t: f64, out: &mut [f64]) {
        debug_assert_eq!(state.len(), self.dimension);
        (self.rhs)(state, t, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uctls_driver_is_plain_lorenz() {
        let sys = OdeSystem::uctls(0.05);
        let lor = OdeSystem::lorenz_default();
        let s = [1.0, -2.0, 3.0, 0.5, 0.25, 7.0];
        let mut ds = [0.0; 6];
        let mut dl = [0.0; 3];
        sys.eval(&s, 0.0, &mut ds);
        lor.eval(&s[3..], 0.0, &mut dl);
        assert_eq!(&ds[3..], &dl);
    }

    #[test]
    fn zero_forcing_decouples() {
        let sys = OdeSystem::uctls(0.0);
        let lor = OdeSystem::lorenz_default();
        let s = [1.0, -2.0, 3.0, 0.5, 0.25, 7.0];
        let mut ds = [0.0; 6];
        let mut dl = [0.0; 3];
        sys.eval(&s, 0.0, &mut ds);
        lor.eval(&s[..3], 0.0, &mut dl);
        assert_eq!(&ds[..3], &dl);
    }

    #[test]
    fn parameters_are_named() {
        let r = OdeSystem::rossler_default();
        assert_eq!(r.parameter("c"), Some(5.7));
        assert_eq!(r.parameter("missing"), None);
    }
}
