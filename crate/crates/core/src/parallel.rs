//! Scoped worker pool for per-client work. Results come back in item order,
//! so outputs are independent of the pool size; determinism rests on each
//! work item deriving its own RNG streams.

/// Apply `f` to every item, splitting the slice across up to `workers`
/// threads. Results are returned in input order.
pub fn map_mut<T, R, F>(items: &mut [T], workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync,
{
    let n = items.len();
    if workers <= 1 || n <= 1 {
        return items
            .iter_mut()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect();
    }
    let chunk = n.div_ceil(workers.min(n));
    let mut results: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let mut base = 0usize;
        let mut res_rest: &mut [Option<R>] = &mut results;
        for items_chunk in items.chunks_mut(chunk) {
            let (res_chunk, rest) = res_rest.split_at_mut(items_chunk.len());
            res_rest = rest;
            let start = base;
            base += items_chunk.len();
            scope.spawn(move || {
                for (k, (item, slot)) in
                    items_chunk.iter_mut().zip(res_chunk.iter_mut()).enumerate()
                {
                    *slot = Some(f(start + k, item));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_in_order_regardless_of_workers() {
        let mut items: Vec<u64> = (0..13).collect();
        let serial = map_mut(&mut items.clone(), 1, |i, v| (i as u64) * 100 + *v);
        for workers in [2, 3, 8, 32] {
            let parallel = map_mut(&mut items, workers, |i, v| (i as u64) * 100 + *v);
            assert_eq!(parallel, serial, "workers={workers}");
        }
    }

    #[test]
    fn mutates_in_place() {
        let mut items = vec![1, 2, 3, 4];
        map_mut(&mut items, 2, |_, v| *v *= 10);
        assert_eq!(items, vec![10, 20, 30, 40]);
    }
}
