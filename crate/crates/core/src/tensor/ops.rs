use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("rank {rank}"),
            format!("shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn conv_geometry(input: &Tensor, filters: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", filters, 4)?;
    let (n, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let fs = filters.shape();
    let (cout, fcin, k) = (fs[0], fs[1], fs[2]);
    if fcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("filters with Cin={cin}"),
            format!("filters {fs:?} for input {:?}", input.shape()),
        ));
    }
    if fs[3] != k {
        return Err(Error::shape("conv2d", "square kernels", format!("{fs:?}")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(
            "conv2d",
            format!("padded input at least {k}x{k}"),
            format!("{h}x{w} with pad {pad}"),
        ));
    }
    if !(h + 2 * pad - k).is_multiple_of(stride) || !(w + 2 * pad - k).is_multiple_of(stride) {
        return Err(Error::shape(
            "conv2d",
            format!("(H+2*pad-k) divisible by stride {stride}"),
            format!("{h}x{w}, pad {pad}, k {k}"),
        ));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    })
}

/// 2-D cross-correlation, `[N,Cin,H,W] x [Cout,Cin,k,k] + [Cout]`.
pub fn conv2d(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input, filters, stride, pad)?;
    if bias.shape() != [g.cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias [{}]", g.cout),
            format!("{:?}", bias.shape()),
        ));
    }
    let x = input.data();
    let wt = filters.data();
    let b = bias.data();
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.cout * plane];
    par::for_each_chunk_mut(&mut out, g.cout * plane, |n, out_n| {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        let xc = &xn[ci * g.h * g.w..];
                        let wc = &wt[(co * g.cin + ci) * g.k * g.k..];
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += xc[iy as usize * g.w + ix as usize] * wc[ky * g.k + kx];
                            }
                        }
                    }
                    out_n[co * plane + oy * g.wo + ox] = acc + b[co];
                }
            }
        }
    });
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    /// Absent when the caller did not ask for it (first layer).
    pub input: Option<Tensor>,
    pub filters: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<Conv2dGrads> {
    let g = conv_geometry(input, filters, stride, pad)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad [{}, {}, {}, {}]", g.n, g.cout, g.ho, g.wo),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let wt = filters.data();
    let go = grad_out.data();
    let plane = g.ho * g.wo;
    let in_plane = g.h * g.w;

    let mut gb = vec![0.0; g.cout];
    for n in 0..g.n {
        for (co, b) in gb.iter_mut().enumerate() {
            let base = (n * g.cout + co) * plane;
            *b += go[base..base + plane].iter().sum::<f64>();
        }
    }

    let kk = g.k * g.k;
    let per_filter = par::map_range(g.cout, |co| {
        let mut gw = vec![0.0; g.cin * kk];
        for n in 0..g.n {
            let gon = &go[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            for ci in 0..g.cin {
                let xc = &x[(n * g.cin + ci) * in_plane..(n * g.cin + ci + 1) * in_plane];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for ox in 0..g.wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += gon[oy * g.wo + ox] * xc[iy as usize * g.w + ix as usize];
                            }
                        }
                        gw[ci * kk + ky * g.k + kx] += acc;
                    }
                }
            }
        }
        gw
    });
    let gw: Vec<f64> = per_filter.into_iter().flatten().collect();

    let grad_input = if need_input_grad {
        let mut gi = vec![0.0; g.n * g.cin * in_plane];
        par::for_each_chunk_mut(&mut gi, g.cin * in_plane, |n, gin| {
            for co in 0..g.cout {
                let gon = &go[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let gv = gon[oy * g.wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..g.cin {
                            let wc = &wt[(co * g.cin + ci) * kk..(co * g.cin + ci + 1) * kk];
                            for ky in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for kx in 0..g.k {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    gin[ci * in_plane + iy as usize * g.w + ix as usize] +=
                                        gv * wc[ky * g.k + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::new(input.shape(), gi)?)
    } else {
        None
    };

    Ok(Conv2dGrads {
        input: grad_input,
        filters: Tensor::new(filters.shape(), gw)?,
        bias: Tensor::new(&[g.cout], gb)?,
    })
}

/// Affine map `x W^T + b`, `[N,D] x [O,D] + [O] -> [N,O]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank("linear", input, 2)?;
    expect_rank("linear", weight, 2)?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (o, wd) = (weight.shape()[0], weight.shape()[1]);
    if wd != d {
        return Err(Error::shape(
            "linear",
            format!("weight [_, {d}]"),
            format!("{:?}", weight.shape()),
        ));
    }
    if bias.shape() != [o] {
        return Err(Error::shape(
            "linear",
            format!("bias [{o}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; n * o];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..o {
            let wj = &w[j * d..(j + 1) * d];
            let dot: f64 = xi.iter().zip(wj).map(|(a, b)| a * b).sum();
            out[i * o + j] = dot + b[j];
        }
    }
    Tensor::new(&[n, o], out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    expect_rank("linear_backward", input, 2)?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    if weight.shape() != [o, d] || grad_out.shape() != [n, o] {
        return Err(Error::shape(
            "linear_backward",
            format!("weight [{o}, {d}], grad [{n}, {o}]"),
            format!("{:?}, {:?}", weight.shape(), grad_out.shape()),
        ));
    }
    let (x, w, g) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![0.0; n * d];
    let mut gw = vec![0.0; o * d];
    let mut gb = vec![0.0; o];
    for i in 0..n {
        for j in 0..o {
            let gij = g[i * o + j];
            gb[j] += gij;
            if gij == 0.0 {
                continue;
            }
            for k in 0..d {
                gx[i * d + k] += gij * w[j * d + k];
                gw[j * d + k] += gij * x[i * d + k];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(&[n, d], gx)?,
        weight: Tensor::new(&[o, d], gw)?,
        bias: Tensor::new(&[o], gb)?,
    })
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient at exactly zero is taken as 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data)
}

#[derive(Clone, Debug)]
pub struct Pooled {
    pub output: Tensor,
    /// Flat input index chosen for every output element.
    pub argmax: Vec<usize>,
}

/// Windowed max. Ties go to the first maximal element in row-major order.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<Pooled> {
    expect_rank("maxpool2d", input, 4)?;
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if k == 0 || stride == 0 {
        return Err(Error::invalid(
            "maxpool2d",
            "window and stride must be >= 1",
        ));
    }
    if k > h || k > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("input at least {k}x{k}"),
            format!("{h}x{w}"),
        ));
    }
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(&[n, c, ho, wo], out)?,
        argmax: arg,
    })
}

pub fn maxpool2d_backward(
    pooled: &Pooled,
    input_shape: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if grad_out.shape() != pooled.output.shape() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!("{:?}", pooled.output.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &v) in pooled.argmax.iter().zip(grad_out.data()) {
        gd[idx] += v;
    }
    Ok(g)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    expect_rank("cross_entropy", logits, 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} labels"),
            labels.len(),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {bad} out of range [0, {k})"),
        ));
    }
    let z = logits.data();
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &z[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[labels[i]];
        for j in 0..k {
            let p = (row[j] - lse).exp();
            grad[i * k + j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(&[n, k], grad)?))
}

#[derive(Clone, Debug)]
pub struct GroupNormCache {
    pub xhat: Tensor,
    /// One entry per (sample, group).
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

#[derive(Clone, Debug)]
pub struct GroupNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Group normalization over `[N,C,H,W]` with per-channel affine parameters.
pub fn group_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<(Tensor, GroupNormCache)> {
    expect_rank("group_norm", input, 4)?;
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("{groups} groups do not divide {c} channels"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("affine [{c}]"),
            format!("{:?} / {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let per = c / groups * h * w;
    let x = input.data();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(n * groups);
    for blk in 0..n * groups {
        let seg = &x[blk * per..(blk + 1) * per];
        let mean = seg.iter().sum::<f64>() / per as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv.push(is);
        for (j, v) in seg.iter().enumerate() {
            let idx = blk * per + j;
            let ch = (idx / (h * w)) % c;
            xhat[idx] = (v - mean) * is;
            y[idx] = gamma.data()[ch] * xhat[idx] + beta.data()[ch];
        }
    }
    Ok((
        Tensor::new(s, y)?,
        GroupNormCache {
            xhat: Tensor::new(s, xhat)?,
            inv_std: inv,
            groups,
        },
    ))
}

pub fn group_norm_backward(
    cache: &GroupNormCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<GroupNormGrads> {
    let s = cache.xhat.shape();
    if grad_out.shape() != s {
        return Err(Error::shape(
            "group_norm_backward",
            format!("{s:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let per = c / cache.groups * hw;
    let xh = cache.xhat.data();
    let go = grad_out.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (idx, (&g, &xv)) in go.iter().zip(xh).enumerate() {
        let ch = (idx / hw) % c;
        dgamma[ch] += g * xv;
        dbeta[ch] += g;
    }
    let mut dx = vec![0.0; go.len()];
    for blk in 0..n * cache.groups {
        let r = blk * per..(blk + 1) * per;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for idx in r.clone() {
            let d = go[idx] * gamma.data()[(idx / hw) % c];
            sum_d += d;
            sum_dx += d * xh[idx];
        }
        let m = per as f64;
        let is = cache.inv_std[blk];
        for idx in r {
            let d = go[idx] * gamma.data()[(idx / hw) % c];
            dx[idx] = is / m * (m * d - sum_d - xh[idx] * sum_dx);
        }
    }
    Ok(GroupNormGrads {
        input: Tensor::new(s, dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}
