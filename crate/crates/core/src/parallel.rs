//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers run on rayon; without it they
//! degrade to plain iterators. Results are always collected in input order,
//! and callers only parallelize work items whose results do not depend on
//! scheduling, so outputs are identical either way.

/// How a batch of independent work items is executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecPolicy {
    Sequential,
    /// Use the ambient rayon pool (sequential without the feature).
    #[default]
    Parallel,
}

impl ExecPolicy {
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs <= 1 {
            ExecPolicy::Sequential
        } else {
            ExecPolicy::Parallel
        }
    }
}

/// Map `f` over `items`, preserving order.
pub fn map_items<T, R, F>(policy: ExecPolicy, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match policy {
        ExecPolicy::Sequential => items.iter().map(f).collect(),
        ExecPolicy::Parallel => par_map(items, f),
    }
}

/// Map `f` over `0..n`, preserving order.
pub fn map_range<R, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map_items(policy, &idx, |&i| f(i))
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Run `f` inside a pool of `jobs` worker threads (the caller's thread
/// without the `parallel` feature).
#[cfg(feature = "parallel")]
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_jobs<R: Send>(_jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Number of worker threads available to `ExecPolicy::Parallel`.
pub fn available_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<u64> = (0..100).collect();
        let a = map_items(ExecPolicy::Parallel, &v, |x| x * x);
        let b = map_items(ExecPolicy::Sequential, &v, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(with_jobs(3, || map_range(ExecPolicy::Parallel, 5, |i| i + 1)), vec![1, 2, 3, 4, 5]);
    }
}
