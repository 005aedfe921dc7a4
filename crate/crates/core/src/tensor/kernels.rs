//! Raw numeric kernels over flat slices. Shapes are validated by the caller.

use rayon::prelude::*;

use super::Element;

/// `c[m×n] = a[m×k] · b[k×n]`, all row-major.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), T::zero(), &mut c);
    c
}

/// Gradients of `c = a·b` given `dc`: returns (da = dc·bᵀ, db = aᵀ·dc).
pub fn matmul_backward<T: Element>(
    a: &[T],
    b: &[T],
    dc: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); m * k];
    T::gemm(m, n, k, dc, (n as isize, 1), b, (1, n as isize), T::zero(), &mut da);
    let mut db = vec![T::zero(); k * n];
    T::gemm(k, m, n, a, (1, k as isize), dc, (n as isize, 1), T::zero(), &mut db);
    (da, db)
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output extent `floor((n + 2·pad − k)/stride) + 1`, or `None` when the
    /// padded input is smaller than the kernel.
    pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = n + 2 * pad;
        if stride == 0 || padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.pixels();
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.pixels();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = ii as usize * g.w;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            plane[base + jj as usize] = plane[base + jj as usize] + src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.patch(), g.pixels());
    let in_len = g.in_c * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.out_c * p];
    out.par_chunks_mut(g.out_c * p).enumerate().for_each(|(b, y)| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            T::gemm(g.out_c, k, p, w, (k as isize, 1), xb, (p as isize, 1), T::zero(), y);
        } else {
            let mut cols = vec![T::zero(); k * p];
            im2col(xb, g, &mut cols);
            T::gemm(g.out_c, k, p, w, (k as isize, 1), &cols, (p as isize, 1), T::zero(), y);
        }
    });
    out
}

/// Returns (dx, dw). Per-sample weight gradients are summed in sample order
/// so results do not depend on the worker count.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.patch(), g.pixels());
    let in_len = g.in_c * g.h * g.w;
    let out_len = g.out_c * p;
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            let cols_owned;
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else if need_dw {
                let mut c = vec![T::zero(); k * p];
                im2col(xb, g, &mut c);
                cols_owned = c;
                &cols_owned
            } else {
                &[]
            };
            let dw = need_dw.then(|| {
                let mut dw = vec![T::zero(); g.out_c * k];
                T::gemm(g.out_c, p, k, dyb, (p as isize, 1), cols, (1, p as isize), T::zero(), &mut dw);
                dw
            });
            let dx = need_dx.then(|| {
                if g.is_pointwise() {
                    let mut dx = vec![T::zero(); in_len];
                    T::gemm(k, g.out_c, p, w, (1, k as isize), dyb, (p as isize, 1), T::zero(), &mut dx);
                    dx
                } else {
                    let mut dcols = vec![T::zero(); k * p];
                    T::gemm(k, g.out_c, p, w, (1, k as isize), dyb, (p as isize, 1), T::zero(), &mut dcols);
                    let mut dx = vec![T::zero(); in_len];
                    col2im(&dcols, g, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.batch * in_len));
    let mut dw_all = need_dw.then(|| vec![T::zero(); g.out_c * k]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            for (a, v) in all.iter_mut().zip(dw) {
                *a = *a + v;
            }
        }
    }
    (dx_all, dw_all)
}

/// 2×2 average pooling with stride 2 over NCHW; `h` and `w` must be even.
pub fn avg_pool2<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[pl * h * w + i * w + j] = dy[pl * oh * ow + (i / 2) * ow + j / 2] * quarter;
            }
        }
    }
    dx
}

/// Source index for nearest-neighbour resizing: `floor(dst·src_len/dst_len)`.
pub fn nearest_source(dst: usize, src_len: usize, dst_len: usize) -> usize {
    dst * src_len / dst_len
}

pub fn resize_nearest<T: Element>(x: &[T], planes: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<T> {
    let rows: Vec<usize> = (0..th).map(|i| nearest_source(i, h, th)).collect();
    let cols: Vec<usize> = (0..tw).map(|j| nearest_source(j, w, tw)).collect();
    let mut out = Vec::with_capacity(planes * th * tw);
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for &r in &rows {
            out.extend(cols.iter().map(|&c| src[r * w + c]));
        }
    }
    out
}

pub fn resize_nearest_backward<T: Element>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<T> {
    let rows: Vec<usize> = (0..th).map(|i| nearest_source(i, h, th)).collect();
    let cols: Vec<usize> = (0..tw).map(|j| nearest_source(j, w, tw)).collect();
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        let src = &dy[pl * th * tw..(pl + 1) * th * tw];
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                dst[r * w + c] = dst[r * w + c] + src[i * tw + j];
            }
        }
    }
    dx
}

/// Maps every flat index of `shape` to its flat index after removing `axes`.
pub fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    let mut out_strides = vec![0usize; shape.len()];
    let mut s = 1;
    for &a in kept.iter().rev() {
        out_strides[a] = s;
        s *= shape[a];
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            flat += out_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            flat -= out_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        assert_eq!(ConvGeom::out_extent(32, 3, 2, 1), Some(16));
        assert_eq!(ConvGeom::out_extent(3, 3, 1, 0), Some(1));
        assert_eq!(ConvGeom::out_extent(2, 3, 1, 0), None);
    }

    #[test]
    fn reduction_map_axis0() {
        let (shape, map) = reduction_map(&[2, 3], &[0]);
        assert_eq!(shape, vec![3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
        let (shape, map) = reduction_map(&[2, 3], &[1]);
        assert_eq!(shape, vec![2]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        let (shape, map) = reduction_map(&[2, 2, 2], &[0, 2]);
        assert_eq!(shape, vec![2]);
        assert_eq!(map, vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn nearest_source_replicates() {
        let idx: Vec<usize> = (0..4).map(|i| nearest_source(i, 2, 4)).collect();
        assert_eq!(idx, vec![0, 0, 1, 1]);
        let idx: Vec<usize> = (0..10).map(|i| nearest_source(i, 8, 10)).collect();
        assert_eq!(idx, vec![0, 0, 1, 2, 3, 4, 4, 5, 6, 7]);
    }
}
