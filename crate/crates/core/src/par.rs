//! Data-parallel helpers. With the `parallel` feature these fan out over the
//! rayon pool; without it (or with [`Execution::Sequential`]) they run in a
//! plain loop. Results always come back in input order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
            }
            _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }

    pub fn map_range<U, F>(self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }
}

/// Sums equally sized gradient buffers in index order.
pub fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let xs: Vec<u32> = (0..100).collect();
        let a = Execution::Sequential.map(&xs, |i, x| (i as u32) * 2 + x);
        let b = Execution::Parallel.map(&xs, |i, x| (i as u32) * 2 + x);
        assert_eq!(a, b);
        assert_eq!(Execution::Parallel.map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
