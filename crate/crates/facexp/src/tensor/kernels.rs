//! Plain array kernels used by the autodiff graph.
//!
//! Everything operates on f64 NHWC tensors. These functions carry no
//! gradient logic; `ops` pairs each with its adjoint.

use ndarray::{s, Array1, Array2, Array4, Array5, ArrayView4, Axis, Zip};

/// Valid output/source ranges for one 3x3 tap under same padding.
///
/// Output pixel (y,x) reads source (y+dy-1, x+dx-1); this returns the output
/// range [o0,o1) whose source stays in-bounds along one axis of length `len`.
fn tap_range(d: usize, len: usize) -> (usize, usize) {
    let o0 = 1usize.saturating_sub(d);
    let o1 = (len + 1 - d).min(len);
    (o0, o1)
}

/// Unfold 3x3 patches (stride 1, zero pad 1) into rows: [n,h,w,c] -> [n*h*w, 9*c].
///
/// Row layout: for output pixel (b,y,x), the 9 taps in (dy,dx) scan order,
/// each tap contributing `c` contiguous channels.
pub fn im2col3x3(x: ArrayView4<f64>) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    let mut cols = Array5::<f64>::zeros((n, h, w, 9, c));
    for dy in 0..3usize {
        let (y0, y1) = tap_range(dy, h);
        for dx in 0..3usize {
            let (x0, x1) = tap_range(dx, w);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            let tap = dy * 3 + dx;
            let src = x.slice(s![
                ..,
                (y0 + dy - 1)..(y1 + dy - 1),
                (x0 + dx - 1)..(x1 + dx - 1),
                ..
            ]);
            cols.slice_mut(s![.., y0..y1, x0..x1, tap, ..]).assign(&src);
        }
    }
    cols.into_shape_with_order((n * h * w, 9 * c))
        .expect("im2col reshape")
}

/// Adjoint of `im2col3x3`: scatter column gradients back to image positions.
pub fn col2im3x3(cols: &Array2<f64>, n: usize, h: usize, w: usize, c: usize) -> Array4<f64> {
    assert_eq!(cols.dim(), (n * h * w, 9 * c));
    let cols = cols
        .view()
        .into_shape_with_order((n, h, w, 9, c))
        .expect("col2im reshape");
    let mut x = Array4::<f64>::zeros((n, h, w, c));
    for dy in 0..3usize {
        let (y0, y1) = tap_range(dy, h);
        for dx in 0..3usize {
            let (x0, x1) = tap_range(dx, w);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            let tap = dy * 3 + dx;
            let src = cols.slice(s![.., y0..y1, x0..x1, tap, ..]);
            let dst = x.slice_mut(s![
                ..,
                (y0 + dy - 1)..(y1 + dy - 1),
                (x0 + dx - 1)..(x1 + dx - 1),
                ..
            ]);
            Zip::from(dst).and(src).for_each(|d, &s| *d += s);
        }
    }
    x
}

/// 3x3 stride-1 same-padding convolution. Weights are [3,3,c_in,c_out].
pub fn conv3x3(x: ArrayView4<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array4<f64> {
    let (n, h, w, c_in) = x.dim();
    let (kh, kw, wc_in, c_out) = weight.dim();
    assert_eq!((kh, kw), (3, 3));
    assert_eq!(wc_in, c_in, "conv weight in-channels mismatch");
    assert_eq!(bias.len(), c_out);
    let cols = im2col3x3(x);
    let w2 = weight
        .view()
        .into_shape_with_order((9 * c_in, c_out))
        .expect("contiguous conv weight");
    let mut y2 = cols.dot(&w2);
    y2 += &bias.view().insert_axis(Axis(0));
    y2.into_shape_with_order((n, h, w, c_out))
        .expect("conv output reshape")
}

/// 2x2 average pooling with stride 2. Requires even height and width.
pub fn avgpool2(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, h, w, c) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even spatial dims");
    let mut y = Array4::<f64>::zeros((n, h / 2, w / 2, c));
    for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let src = x.slice(s![.., oy..;2, ox..;2, ..]);
        Zip::from(&mut y).and(src).for_each(|d, &s| *d += 0.25 * s);
    }
    y
}

/// Adjoint of `avgpool2`: spread each output gradient over its 2x2 window.
pub fn avgpool2_back(dy: ArrayView4<f64>) -> Array4<f64> {
    let (n, oh, ow, c) = dy.dim();
    let mut dx = Array4::<f64>::zeros((n, oh * 2, ow * 2, c));
    for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let dst = dx.slice_mut(s![.., oy..;2, ox..;2, ..]);
        Zip::from(dst).and(dy).for_each(|d, &s| *d = 0.25 * s);
    }
    dx
}

/// 2x nearest-neighbor upsampling.
pub fn upsample2(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, h, w, c) = x.dim();
    let mut y = Array4::<f64>::zeros((n, h * 2, w * 2, c));
    for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        y.slice_mut(s![.., oy..;2, ox..;2, ..]).assign(&x);
    }
    y
}

/// Adjoint of `upsample2`: sum each 2x2 block of output gradients.
pub fn upsample2_back(dy: ArrayView4<f64>) -> Array4<f64> {
    let (n, h2, w2, c) = dy.dim();
    let mut dx = Array4::<f64>::zeros((n, h2 / 2, w2 / 2, c));
    for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let src = dy.slice(s![.., oy..;2, ox..;2, ..]);
        Zip::from(&mut dx).and(src).for_each(|d, &s| *d += s);
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Numerically stable sigmoid.
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
