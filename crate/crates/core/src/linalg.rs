//! Dense products used by the network graph.
//!
//! Row-independent products are split into fixed blocks of rows, which keeps
//! every output element's summation order independent of the thread count.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

const ROW_BLOCK: usize = 2048;

fn row_blocks(rows: usize) -> Vec<(usize, usize)> {
    (0..rows)
        .step_by(ROW_BLOCK)
        .map(|s| (s, (s + ROW_BLOCK).min(rows)))
        .collect()
}

fn blocked<F>(a: ArrayView2<f64>, f: F) -> Array2<f64>
where
    F: Fn(ArrayView2<f64>) -> Array2<f64> + Sync + Send,
{
    let blocks = row_blocks(a.nrows());
    if blocks.len() <= 1 {
        return f(a);
    }
    let parts = crate::parallel::map_items(crate::parallel::ExecPolicy::Parallel, &blocks, |&(lo, hi)| {
        f(a.slice(s![lo..hi, ..]))
    });
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("row blocks share column count")
}

/// `a * w^T`
pub fn matmul_nt(a: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    blocked(a, |blk| blk.dot(&w.t()))
}

/// `a * w`
pub fn matmul_nn(a: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    blocked(a, |blk| blk.dot(&w))
}

/// `g^T * a`, reduced over rows in a single pass.
pub fn matmul_tn(g: ArrayView2<f64>, a: ArrayView2<f64>) -> Array2<f64> {
    g.t().dot(&a)
}
