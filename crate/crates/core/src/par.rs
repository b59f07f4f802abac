//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper has two entry points: the plain `*_seq` function, which is
//! always compiled, and the default-named function, which fans out over
//! rayon when the `parallel` feature is enabled and otherwise delegates to
//! the sequential version. Callers must only use these for element-wise
//! independent work; any reduction over the results is done by the caller
//! in index order so parallel and sequential builds produce identical bits.

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    map_indexed_seq(n, f)
}

/// Map `f` over a slice, collecting results in input order.
pub fn map_slice_seq<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    F: Fn(&I) -> T + Sync + Send,
    T: Send,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    F: Fn(&I) -> T + Sync + Send,
    T: Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    F: Fn(&I) -> T + Sync + Send,
    T: Send,
{
    map_slice_seq(items, f)
}

/// Run `f` on mutually disjoint chunks of `data`, one call per chunk.
pub fn for_each_chunk_seq<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

#[cfg(feature = "parallel")]
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for_each_chunk_seq(data, chunk, f);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let a = map_indexed(100, |i| i * i);
        let b = map_indexed_seq(100, |i| i * i);
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_writes_cover_all_elements() {
        let mut data = vec![0u32; 37];
        for_each_chunk(&mut data, 5, |i, c| {
            for x in c.iter_mut() {
                *x = i as u32 + 1;
            }
        });
        assert!(data.iter().all(|&x| x > 0));
    }
}
