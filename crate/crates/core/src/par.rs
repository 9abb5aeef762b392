//! Data-parallel map with a sequential fallback. With the `parallel`
//! feature (default) the work runs on a rayon pool sized by
//! [`Parallelism`]; without it everything is sequential. Results always
//! come back in input order, so outputs are identical either way.

/// Worker-count policy for the parallel inner loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    /// One logical worker; no pool is spun up.
    Serial,
    /// rayon's default thread count.
    #[default]
    Auto,
    /// An explicit worker count (1 behaves like `Serial`).
    Workers(usize),
}

impl Parallelism {
    /// Reads the `HOPMP_WORKERS` environment variable; absent or invalid
    /// means `Auto`.
    pub fn from_env() -> Self {
        match std::env::var("HOPMP_WORKERS") {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(0) => Parallelism::Auto,
                Ok(1) => Parallelism::Serial,
                Ok(w) => Parallelism::Workers(w),
                Err(_) => Parallelism::Auto,
            },
            Err(_) => Parallelism::Auto,
        }
    }

    fn is_serial(&self) -> bool {
        matches!(self, Parallelism::Serial | Parallelism::Workers(1))
    }
}

#[cfg(feature = "parallel")]
pub fn map_collect<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match par {
        _ if par.is_serial() => items.iter().map(f).collect(),
        Parallelism::Workers(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .expect("worker pool");
            pool.install(|| items.par_iter().map(f).collect())
        }
        _ => items.par_iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, R, F>(_par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
