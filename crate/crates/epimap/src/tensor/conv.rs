//! Convolution kernels for the tape: dense 3D convolution over the
//! (time, height, width) axes and a locally-connected variant with one
//! filter per output location.
//!
//! Output dimensions always equal input dimensions. Spatial axes are
//! same-padded (even kernels pad less on the leading side); the time axis
//! is either causally padded (all `kt - 1` zeros before the sequence, so
//! step `t` never sees steps beyond `t`) or same-padded.

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    CausalTemporal,
    SameSpatial,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: (usize, usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: PadMode,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(
        kernel: (usize, usize, usize),
        in_channels: usize,
        out_channels: usize,
        padding: PadMode,
        bias: bool,
    ) -> Self {
        ConvSpec { kernel, in_channels, out_channels, padding, bias }
    }

    fn pads(&self) -> (usize, usize, usize) {
        let (kt, kh, kw) = self.kernel;
        let pt = match self.padding {
            PadMode::CausalTemporal => kt - 1,
            PadMode::SameSpatial => (kt - 1) / 2,
        };
        ((pt), (kh - 1) / 2, (kw - 1) / 2)
    }

    pub(crate) fn check(
        &self,
        input: Shape5,
        weight: Shape5,
        bias: Option<Shape5>,
    ) -> Result<()> {
        let (kt, kh, kw) = self.kernel;
        if kt == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape("kernel dims must be >= 1".into()));
        }
        if input[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "conv3d: input has {} channels, spec expects {}",
                input[1], self.in_channels
            )));
        }
        let expected = [self.out_channels, self.in_channels, kt, kh, kw];
        if weight != expected {
            return Err(Error::Shape(format!(
                "conv3d: weight shape {weight:?}, expected {expected:?}"
            )));
        }
        match (self.bias, bias) {
            (true, Some(b)) => {
                if b != [1, self.out_channels, 1, 1, 1] {
                    return Err(Error::Shape(format!(
                        "conv3d: bias shape {b:?}, expected [1, {}, 1, 1, 1]",
                        self.out_channels
                    )));
                }
            }
            (false, None) => {}
            (true, None) => return Err(Error::Shape("conv3d: spec has bias but none given".into())),
            (false, Some(_)) => {
                return Err(Error::Shape("conv3d: bias given but spec has none".into()))
            }
        }
        Ok(())
    }
}

/// Valid output range along one axis for kernel offset `k` with pad `p`:
/// input index `o - p + k` must land in `[0, len)`.
#[inline]
fn axis_range(len: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len as isize + pad as isize - k as isize).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn forward(
    x: &Tensor5,
    weight: &Tensor5,
    bias: Option<&Tensor5>,
    spec: &ConvSpec,
) -> Tensor5 {
    let [bsz, cin, t_in, h_in, w_in] = x.shape;
    let cout = spec.out_channels;
    let (kt, kh, kw) = spec.kernel;
    let (pt, ph, pw) = spec.pads();
    let mut out = Tensor5::zeros([bsz, cout, t_in, h_in, w_in]);

    let plane = t_in * h_in * w_in;
    if let Some(b) = bias {
        for bi in 0..bsz {
            for co in 0..cout {
                let base = (bi * cout + co) * plane;
                out.data[base..base + plane].fill(b.data[co]);
            }
        }
    }

    for bi in 0..bsz {
        for co in 0..cout {
            let out_base = (bi * cout + co) * plane;
            for ci in 0..cin {
                let in_base = (bi * cin + ci) * plane;
                for ki in 0..kt {
                    let (t_lo, t_hi) = axis_range(t_in, pt, ki);
                    for kj in 0..kh {
                        let (h_lo, h_hi) = axis_range(h_in, ph, kj);
                        for kk in 0..kw {
                            let wgt =
                                weight.data[(((co * cin + ci) * kt + ki) * kh + kj) * kw + kk];
                            if wgt == 0.0 {
                                continue;
                            }
                            let (w_lo, w_hi) = axis_range(w_in, pw, kk);
                            if w_lo >= w_hi {
                                continue;
                            }
                            for t in t_lo..t_hi {
                                let it = t + ki - pt;
                                for h in h_lo..h_hi {
                                    let ih = h + kj - ph;
                                    let orow = out_base + (t * h_in + h) * w_in;
                                    let irow = in_base + (it * h_in + ih) * w_in + w_lo + kk
                                        - pw;
                                    for off in 0..(w_hi - w_lo) {
                                        out.data[orow + w_lo + off] +=
                                            wgt * x.data[irow + off];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv3d w.r.t. input, weight and bias. The bias gradient is
/// always returned (length `out_channels`); callers ignore it when the
/// spec carries no bias.
pub(crate) fn backward(
    grad: &[f64],
    x: &Tensor5,
    weight: &Tensor5,
    spec: &ConvSpec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [bsz, cin, t_in, h_in, w_in] = x.shape;
    let cout = spec.out_channels;
    let (kt, kh, kw) = spec.kernel;
    let (pt, ph, pw) = spec.pads();
    let plane = t_in * h_in * w_in;

    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; weight.numel()];
    let mut gb = vec![0.0; cout];

    for bi in 0..bsz {
        for co in 0..cout {
            let out_base = (bi * cout + co) * plane;
            gb[co] += grad[out_base..out_base + plane].iter().sum::<f64>();
            for ci in 0..cin {
                let in_base = (bi * cin + ci) * plane;
                for ki in 0..kt {
                    let (t_lo, t_hi) = axis_range(t_in, pt, ki);
                    for kj in 0..kh {
                        let (h_lo, h_hi) = axis_range(h_in, ph, kj);
                        for kk in 0..kw {
                            let widx = (((co * cin + ci) * kt + ki) * kh + kj) * kw + kk;
                            let wgt = weight.data[widx];
                            let (w_lo, w_hi) = axis_range(w_in, pw, kk);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let mut wacc = 0.0;
                            for t in t_lo..t_hi {
                                let it = t + ki - pt;
                                for h in h_lo..h_hi {
                                    let ih = h + kj - ph;
                                    let orow = out_base + (t * h_in + h) * w_in + w_lo;
                                    let irow =
                                        in_base + (it * h_in + ih) * w_in + w_lo + kk - pw;
                                    for off in 0..(w_hi - w_lo) {
                                        let g = grad[orow + off];
                                        gx[irow + off] += wgt * g;
                                        wacc += g * x.data[irow + off];
                                    }
                                }
                            }
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) fn check_local(
    input: Shape5,
    weight: Shape5,
    kernel: (usize, usize, usize),
) -> Result<()> {
    let (kt, kh, kw) = kernel;
    if kt == 0 || kh == 0 || kw == 0 {
        return Err(Error::Shape("kernel dims must be >= 1".into()));
    }
    let [_, cin, t_in, h_in, w_in] = input;
    let flen = cin * kt * kh * kw;
    let [_, wt, wh, ww, wf] = weight;
    if [wt, wh, ww] != [t_in, h_in, w_in] || wf != flen {
        return Err(Error::Shape(format!(
            "locally_connected: weight shape {weight:?}, expected [c_out, {t_in}, {h_in}, {w_in}, {flen}]"
        )));
    }
    Ok(())
}

pub(crate) fn local_forward(
    x: &Tensor5,
    weight: &Tensor5,
    kernel: (usize, usize, usize),
) -> Tensor5 {
    let [bsz, cin, t_in, h_in, w_in] = x.shape;
    let cout = weight.shape[0];
    let (kt, kh, kw) = kernel;
    let (pt, ph, pw) = (kt - 1, (kh - 1) / 2, (kw - 1) / 2);
    let flen = cin * kt * kh * kw;
    let plane = t_in * h_in * w_in;
    let mut out = Tensor5::zeros([bsz, cout, t_in, h_in, w_in]);

    for bi in 0..bsz {
        for co in 0..cout {
            let out_base = (bi * cout + co) * plane;
            for t in 0..t_in {
                for h in 0..h_in {
                    for w in 0..w_in {
                        let wbase = (((co * t_in + t) * h_in + h) * w_in + w) * flen;
                        let mut acc = 0.0;
                        let mut fi = 0;
                        for ci in 0..cin {
                            let in_base = (bi * cin + ci) * plane;
                            for ki in 0..kt {
                                let it = t as isize - pt as isize + ki as isize;
                                for kj in 0..kh {
                                    let ih = h as isize - ph as isize + kj as isize;
                                    for kk in 0..kw {
                                        let iw = w as isize - pw as isize + kk as isize;
                                        if it >= 0
                                            && (it as usize) < t_in
                                            && ih >= 0
                                            && (ih as usize) < h_in
                                            && iw >= 0
                                            && (iw as usize) < w_in
                                        {
                                            let xi = in_base
                                                + ((it as usize * h_in + ih as usize) * w_in
                                                    + iw as usize);
                                            acc += weight.data[wbase + fi] * x.data[xi];
                                        }
                                        fi += 1;
                                    }
                                }
                            }
                        }
                        out.data[out_base + (t * h_in + h) * w_in + w] = acc;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn local_backward(
    grad: &[f64],
    x: &Tensor5,
    weight: &Tensor5,
    kernel: (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let [bsz, cin, t_in, h_in, w_in] = x.shape;
    let cout = weight.shape[0];
    let (kt, kh, kw) = kernel;
    let (pt, ph, pw) = (kt - 1, (kh - 1) / 2, (kw - 1) / 2);
    let flen = cin * kt * kh * kw;
    let plane = t_in * h_in * w_in;

    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; weight.numel()];

    for bi in 0..bsz {
        for co in 0..cout {
            let out_base = (bi * cout + co) * plane;
            for t in 0..t_in {
                for h in 0..h_in {
                    for w in 0..w_in {
                        let g = grad[out_base + (t * h_in + h) * w_in + w];
                        if g == 0.0 {
                            continue;
                        }
                        let wbase = (((co * t_in + t) * h_in + h) * w_in + w) * flen;
                        let mut fi = 0;
                        for ci in 0..cin {
                            let in_base = (bi * cin + ci) * plane;
                            for ki in 0..kt {
                                let it = t as isize - pt as isize + ki as isize;
                                for kj in 0..kh {
                                    let ih = h as isize - ph as isize + kj as isize;
                                    for kk in 0..kw {
                                        let iw = w as isize - pw as isize + kk as isize;
                                        if it >= 0
                                            && (it as usize) < t_in
                                            && ih >= 0
                                            && (ih as usize) < h_in
                                            && iw >= 0
                                            && (iw as usize) < w_in
                                        {
                                            let xi = in_base
                                                + ((it as usize * h_in + ih as usize) * w_in
                                                    + iw as usize);
                                            gx[xi] += weight.data[wbase + fi] * g;
                                            gw[wbase + fi] += x.data[xi] * g;
                                        }
                                        fi += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}
