use crate::tensor::Tensor;

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Bilinear sample of a `[H, W, C]` image at continuous column `x` and row
/// `y` (pixel centers on integers) into `out`. Rows clamp; columns wrap when
/// `wrap_x`, otherwise clamp.
pub fn bilinear(img: &Tensor, x: f64, y: f64, wrap_x: bool, out: &mut [f64]) {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let col = |i: isize| if wrap_x { wrap(i, w) } else { clamp(i, w) };
    let (c0, c1) = (col(x0), col(x0 + 1));
    let (r0, r1) = (clamp(y0, h), clamp(y0 + 1, h));
    let d = img.data();
    let px = |r: usize, cc: usize| (r * w + cc) * c;
    let (p00, p01, p10, p11) = (px(r0, c0), px(r0, c1), px(r1, c0), px(r1, c1));
    for (k, o) in out.iter_mut().enumerate().take(c) {
        let top = d[p00 + k] * (1.0 - fx) + d[p01 + k] * fx;
        let bot = d[p10 + k] * (1.0 - fx) + d[p11 + k] * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
}

/// Nearest-neighbour sample of a `[H, W]` map.
pub fn nearest(map: &Tensor, x: f64, y: f64, wrap_x: bool) -> f64 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (xi, yi) = (x.round() as isize, y.round() as isize);
    let cc = if wrap_x { wrap(xi, w) } else { clamp(xi, w) };
    map.data()[clamp(yi, h) * w + cc]
}
