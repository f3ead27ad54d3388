//! Raw loops behind the tape ops. Everything here works on flat row-major
//! slices; shape checking happens at the tape layer.

use super::Element;

/// C += A(m,k) * B(k,n)
pub fn mm_nn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// C += A(m,k) * B(n,k)^T   (dot products of rows)
pub fn mm_nt<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            c[i * n + j] += acc;
        }
    }
}

/// C += A(m,k)^T * B(m,n)   (C is k-by-n)
pub fn mm_tn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// Geometry of one convolution axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvAxis {
    pub input: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub output: usize,
}

impl ConvAxis {
    /// "Same" padding: output = ceil(input / stride), padded symmetrically
    /// with the extra cell on the high-index side.
    pub fn same(input: usize, kernel: usize, stride: usize) -> Self {
        let output = input.div_ceil(stride);
        let need = (output - 1) * stride + kernel;
        let total = need.saturating_sub(input);
        ConvAxis {
            input,
            kernel,
            stride,
            pad_lo: total / 2,
            output,
        }
    }

    /// "Valid" padding: output = floor((input - kernel) / stride) + 1.
    pub fn valid(input: usize, kernel: usize, stride: usize) -> Option<Self> {
        if input < kernel {
            return None;
        }
        Some(ConvAxis {
            input,
            kernel,
            stride,
            pad_lo: 0,
            output: (input - kernel) / stride + 1,
        })
    }
}

/// Forward 2-D convolution over (batch, channels, freq, time) input with
/// (out_ch, in_ch, kf, kt) filters.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<E: Element>(
    input: &[E],
    filters: &[E],
    out: &mut [E],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    f_axis: ConvAxis,
    t_axis: ConvAxis,
) {
    let (fi, ti) = (f_axis.input, t_axis.input);
    let (fo, to) = (f_axis.output, t_axis.output);
    let (kf, kt) = (f_axis.kernel, t_axis.kernel);
    for b in 0..batch {
        for oc in 0..out_ch {
            for of in 0..fo {
                for ot in 0..to {
                    let mut acc = E::zero();
                    for ic in 0..in_ch {
                        let in_base = (b * in_ch + ic) * fi * ti;
                        let w_base = (oc * in_ch + ic) * kf * kt;
                        for df in 0..kf {
                            let f = (of * f_axis.stride + df) as isize - f_axis.pad_lo as isize;
                            if f < 0 || f as usize >= fi {
                                continue;
                            }
                            for dt in 0..kt {
                                let t = (ot * t_axis.stride + dt) as isize - t_axis.pad_lo as isize;
                                if t < 0 || t as usize >= ti {
                                    continue;
                                }
                                acc += input[in_base + f as usize * ti + t as usize]
                                    * filters[w_base + df * kt + dt];
                            }
                        }
                    }
                    out[((b * out_ch + oc) * fo + of) * to + ot] = acc;
                }
            }
        }
    }
}

/// Backward 2-D convolution: accumulates input and filter gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Element>(
    input: &[E],
    filters: &[E],
    grad_out: &[E],
    grad_input: &mut [E],
    grad_filters: &mut [E],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    f_axis: ConvAxis,
    t_axis: ConvAxis,
) {
    let (fi, ti) = (f_axis.input, t_axis.input);
    let (fo, to) = (f_axis.output, t_axis.output);
    let (kf, kt) = (f_axis.kernel, t_axis.kernel);
    for b in 0..batch {
        for oc in 0..out_ch {
            for of in 0..fo {
                for ot in 0..to {
                    let g = grad_out[((b * out_ch + oc) * fo + of) * to + ot];
                    if g == E::zero() {
                        continue;
                    }
                    for ic in 0..in_ch {
                        let in_base = (b * in_ch + ic) * fi * ti;
                        let w_base = (oc * in_ch + ic) * kf * kt;
                        for df in 0..kf {
                            let f = (of * f_axis.stride + df) as isize - f_axis.pad_lo as isize;
                            if f < 0 || f as usize >= fi {
                                continue;
                            }
                            for dt in 0..kt {
                                let t = (ot * t_axis.stride + dt) as isize - t_axis.pad_lo as isize;
                                if t < 0 || t as usize >= ti {
                                    continue;
                                }
                                let in_idx = in_base + f as usize * ti + t as usize;
                                let w_idx = w_base + df * kt + dt;
                                grad_input[in_idx] += g * filters[w_idx];
                                grad_filters[w_idx] += g * input[in_idx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Broadcast-compatible output shape under the trailing-axes rule.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Row-major strides, with stride 0 on axes broadcast up to `out_shape`.
/// `shape` is right-aligned against `out_shape`.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let offset = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Apply an elementwise binary op with broadcasting. `f` sees (a_i, b_i).
pub fn broadcast_zip<E: Element>(
    a: &[E],
    a_shape: &[usize],
    b: &[E],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    let n: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; nd];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        // odometer increment
        for d in (0..nd).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Reduce `grad` (shaped `from`) onto `to` by summing broadcast axes.
pub fn reduce_to_shape<E: Element>(grad: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    if from == to {
        return grad.to_vec();
    }
    let n_to: usize = to.iter().product();
    let mut out = vec![E::zero(); n_to];
    let strides = broadcast_strides(to, from);
    let nd = from.len();
    let mut coords = vec![0usize; nd];
    let mut idx = 0usize;
    for &g in grad {
        out[idx] += g;
        for d in (0..nd).rev() {
            coords[d] += 1;
            idx += strides[d];
            if coords[d] < from[d] {
                break;
            }
            coords[d] = 0;
            idx -= strides[d] * from[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let mut c = [0.0; 9];
        mm_nn(&eye, &a, &mut c, 3, 3, 3);
        assert_eq!(c, a);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        // A (2,3), B (3,2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut ab = [0.0; 4];
        mm_nn(&a, &b, &mut ab, 2, 3, 2);
        // A * (B^T)^T via mm_nt with B stored transposed (2,3)
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut ab2 = [0.0; 4];
        mm_nt(&a, &bt, &mut ab2, 2, 3, 2);
        assert_eq!(ab, ab2);
        // (A^T)^T * B via mm_tn with A stored transposed (3,2)
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut ab3 = [0.0; 4];
        mm_tn(&at, &b, &mut ab3, 3, 2, 2);
        assert_eq!(ab, ab3);
    }

    #[test]
    fn same_padding_geometry() {
        // Extra pad cell goes on the high-index side.
        let ax = ConvAxis::same(8, 3, 2);
        assert_eq!(ax.output, 4);
        assert_eq!(ax.pad_lo, 0); // total pad = (4-1)*2+3-8 = 1 -> lo 0, hi 1
        let ax = ConvAxis::same(5, 3, 1);
        assert_eq!(ax.output, 5);
        assert_eq!(ax.pad_lo, 1);
    }

    #[test]
    fn valid_geometry() {
        let ax = ConvAxis::valid(8, 3, 2).unwrap();
        assert_eq!(ax.output, 3);
        assert!(ConvAxis::valid(2, 3, 1).is_none());
    }

    #[test]
    fn broadcast_shapes_and_reduce() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);

        let grad = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // (2,3)
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
    }
}
