//! Data-parallel map helpers. Pure per-item stages (entity extraction,
//! categorization, batch scoring, per-pair metrics) fan out across a rayon
//! pool when the `parallel` feature is enabled; otherwise they run
//! sequentially. Both paths preserve input order, so results are identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, order-preserving. Parallel when the `parallel`
/// feature is on.
pub fn map_items<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential map, always. Kept public so benches can compare both paths
/// regardless of feature flags.
pub fn map_items_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Parallel map, always (falls back to sequential without rayon).
pub fn map_items_par<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
