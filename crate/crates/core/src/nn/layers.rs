//! Parametrized layers. Auxiliary dimensions (input features, channels) are
//! fixed at construction; the graph elaboration layer infers them from shape
//! metadata before calling these constructors.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{CustomGrad, Element, Fill, Tensor};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Affine map `x W^T + b` with `weight: (out, in)`, `bias: (out)`.
pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut RngState) -> Result<Self> {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        let weight = Tensor::create(
            &[out_features, in_features],
            Fill::Uniform(-bound, bound),
            rng,
            true,
        )?;
        let bias = Tensor::create(&[out_features], Fill::Uniform(-bound, bound), rng, true)?;
        Ok(Linear { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 2 || x.shape()[1] != self.in_features() {
            return Err(Error::shape(format!(
                "linear({}->{}) got input {:?}",
                self.in_features(),
                self.out_features(),
                x.shape()
            )));
        }
        x.matmul_t(&self.weight)?.add(&self.bias)
    }
}

/// Inverted dropout: active only in training mode, scaling kept units by
/// `1/(1-p)` so the expectation matches the input.
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0,1)")));
        }
        Ok(Dropout { p })
    }

    pub fn forward<E: Element>(
        &self,
        x: &Tensor<E>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Tensor<E>> {
        if !training || self.p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let scale = E::from_f64(1.0 / keep);
        let mask: Vec<E> = (0..x.numel())
            .map(|_| if rng.bernoulli(keep) { scale } else { E::ZERO })
            .collect();
        let mask = Tensor::from_vec(x.shape(), mask)?;
        x.mul(&mask)
    }
}

/// 2-d convolution with square kernel and zero padding.
pub struct Conv2d<E: Element> {
    pub weight: Tensor<E>, // (out_ch, in_ch, k, k)
    pub bias: Tensor<E>,   // (out_ch)
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if kernel_size == 0 || stride == 0 {
            return Err(Error::invalid("conv2d kernel_size and stride must be positive"));
        }
        let fan_in = in_channels * kernel_size * kernel_size;
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = Tensor::create(
            &[out_channels, in_channels, kernel_size, kernel_size],
            Fill::Uniform(-bound, bound),
            rng,
            true,
        )?;
        let bias = Tensor::create(&[out_channels], Fill::Uniform(-bound, bound), rng, true)?;
        Ok(Conv2d { weight, bias, stride, padding })
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (k, s, p) = (self.kernel_size(), self.stride, self.padding);
        if x.rank() != 4 {
            return Err(Error::shape(format!("conv2d expects (B,C,H,W), got {:?}", x.shape())));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let (ho, wo) = conv_out_extent(h, w, k, s, p)?;
        let co = self.out_channels();
        let mut out = vec![E::ZERO; b * co * ho * wo];
        {
            let xd = x.data();
            let wd = self.weight.data();
            let bd = self.bias.data();
            for bi in 0..b {
                for oc in 0..co {
                    let bias = bd[oc];
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = bias;
                            for ic in 0..c {
                                let x_base = ((bi * c) + ic) * h * w;
                                let w_base = ((oc * c) + ic) * k * k;
                                for di in 0..k {
                                    let hi = (i * s + di) as isize - p as isize;
                                    if hi < 0 || hi >= h as isize {
                                        continue;
                                    }
                                    for dj in 0..k {
                                        let wj = (j * s + dj) as isize - p as isize;
                                        if wj < 0 || wj >= w as isize {
                                            continue;
                                        }
                                        acc = acc
                                            + xd[x_base + hi as usize * w + wj as usize]
                                                * wd[w_base + di * k + dj];
                                    }
                                }
                            }
                            out[((bi * co + oc) * ho + i) * wo + j] = acc;
                        }
                    }
                }
            }
        }
        let rule: Rc<dyn CustomGrad<E>> =
            Rc::new(Conv2dGrad { stride: s, padding: p });
        Ok(Tensor::custom_op(
            &[x, &self.weight, &self.bias],
            vec![b, co, ho, wo],
            out,
            rule,
        ))
    }
}

pub fn conv_out_extent(h: usize, w: usize, k: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    let hp = h + 2 * p;
    let wp = w + 2 * p;
    if hp < k || wp < k {
        return Err(Error::shape(format!(
            "window {k} larger than padded input ({hp}x{wp})"
        )));
    }
    Ok(((hp - k) / s + 1, (wp - k) / s + 1))
}

struct Conv2dGrad {
    stride: usize,
    padding: usize,
}

impl<E: Element> CustomGrad<E> for Conv2dGrad {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[Tensor<E>],
        output: &Tensor<E>,
        grad: &[E],
    ) -> Result<Vec<Option<Vec<E>>>> {
        let (x, weight) = (&inputs[0], &inputs[1]);
        let (s, p) = (self.stride, self.padding);
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (weight.shape()[0], weight.shape()[2]);
        let (ho, wo) = (output.shape()[2], output.shape()[3]);
        let xd = x.data();
        let wd = weight.data();
        let mut dx = vec![E::ZERO; x.numel()];
        let mut dw = vec![E::ZERO; weight.numel()];
        let mut db = vec![E::ZERO; co];
        for bi in 0..b {
            for oc in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let g = grad[((bi * co + oc) * ho + i) * wo + j];
                        db[oc] += g;
                        for ic in 0..c {
                            let x_base = ((bi * c) + ic) * h * w;
                            let w_base = ((oc * c) + ic) * k * k;
                            for di in 0..k {
                                let hi = (i * s + di) as isize - p as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for dj in 0..k {
                                    let wj = (j * s + dj) as isize - p as isize;
                                    if wj < 0 || wj >= w as isize {
                                        continue;
                                    }
                                    let xi = x_base + hi as usize * w + wj as usize;
                                    dx[xi] += g * wd[w_base + di * k + dj];
                                    dw[w_base + di * k + dj] += g * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![Some(dx), Some(dw), Some(db)])
    }
}

/// Max pooling; padding uses a -inf sentinel so padded cells never win, and
/// the gradient routes to the first maximal element in row-major window
/// order.
pub struct MaxPool2d {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn new(kernel_size: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel_size == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d kernel_size and stride must be positive"));
        }
        if padding * 2 > kernel_size {
            return Err(Error::invalid(
                "max_pool2d padding must not exceed half the kernel (windows would be all padding)",
            ));
        }
        Ok(MaxPool2d { kernel_size, stride, padding })
    }

    pub fn forward<E: Element>(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(Error::shape(format!("max_pool2d expects (B,C,H,W), got {:?}", x.shape())));
        }
        let (k, s, p) = (self.kernel_size, self.stride, self.padding);
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = conv_out_extent(h, w, k, s, p)?;
        let mut out = vec![E::ZERO; b * c * ho * wo];
        let mut argmax = vec![0usize; b * c * ho * wo];
        {
            let xd = x.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut best: Option<(E, usize)> = None;
                            for di in 0..k {
                                let hi = (i * s + di) as isize - p as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for dj in 0..k {
                                    let wj = (j * s + dj) as isize - p as isize;
                                    if wj < 0 || wj >= w as isize {
                                        continue;
                                    }
                                    let xi = base + hi as usize * w + wj as usize;
                                    let v = xd[xi];
                                    match best {
                                        // Strict comparison keeps the first
                                        // maximal element on ties.
                                        Some((bv, _)) if !(v > bv) => {}
                                        _ => best = Some((v, xi)),
                                    }
                                }
                            }
                            let (v, xi) = best.expect("window contains at least one valid cell");
                            let oi = ((bi * c + ci) * ho + i) * wo + j;
                            out[oi] = v;
                            argmax[oi] = xi;
                        }
                    }
                }
            }
        }
        let rule: Rc<dyn CustomGrad<E>> = Rc::new(MaxPool2dGrad { argmax });
        Ok(Tensor::custom_op(&[x], vec![b, c, ho, wo], out, rule))
    }
}

struct MaxPool2dGrad {
    argmax: Vec<usize>,
}

impl<E: Element> CustomGrad<E> for MaxPool2dGrad {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(
        &self,
        inputs: &[Tensor<E>],
        _output: &Tensor<E>,
        grad: &[E],
    ) -> Result<Vec<Option<Vec<E>>>> {
        let mut dx = vec![E::ZERO; inputs[0].numel()];
        for (g, &xi) in grad.iter().zip(&self.argmax) {
            dx[xi] += *g;
        }
        Ok(vec![Some(dx)])
    }
}

/// Per-channel batch normalization over (B, C, H, W).
pub struct BatchNorm2d<E: Element> {
    pub scale: Tensor<E>,
    pub shift: Tensor<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(num_features: usize, momentum: f64, eps: f64) -> Result<Self> {
        let scale = Tensor::from_vec(&[num_features], vec![E::ONE; num_features])?;
        let shift = Tensor::from_vec(&[num_features], vec![E::ZERO; num_features])?;
        scale.set_requires_grad(true);
        shift.set_requires_grad(true);
        Ok(BatchNorm2d {
            scale,
            shift,
            running_mean: vec![E::ZERO; num_features],
            running_var: vec![E::ONE; num_features],
            momentum,
            eps,
        })
    }

    pub fn num_features(&self) -> usize {
        self.scale.numel()
    }

    pub fn forward(&mut self, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(Error::shape(format!(
                "batch_norm2d expects (B,C,H,W), got {:?}",
                x.shape()
            )));
        }
        let c = x.shape()[1];
        if c != self.num_features() {
            return Err(Error::shape(format!(
                "batch_norm2d expects {} channels, got {c}",
                self.num_features()
            )));
        }
        let cs = [c as i64, 1, 1];
        let scale = self.scale.reshape(&cs)?;
        let shift = self.shift.reshape(&cs)?;
        if training {
            let b = x.shape()[0];
            if b < 2 {
                return Err(Error::invalid(
                    "batch_norm2d in training mode requires batch size >= 2",
                ));
            }
            let mean = x.mean(Some(&[0, 2, 3]))?;
            let centered = x.sub(&mean.reshape(&cs)?)?;
            let var = centered.mul(&centered)?.mean(Some(&[0, 2, 3]))?;
            let denom = var.add_scalar(self.eps).sqrt().reshape(&cs)?;
            let normalized = centered.div(&denom)?;
            // Running statistics are buffers, not tape nodes; the variance
            // uses the unbiased estimator.
            let n = (x.numel() / c) as f64;
            let unbias = E::from_f64(n / (n - 1.0));
            let m = E::from_f64(self.momentum);
            let one_m = E::from_f64(1.0 - self.momentum);
            for (i, (&mu, &v)) in mean.data().iter().zip(var.data().iter()).enumerate() {
                self.running_mean[i] = one_m * self.running_mean[i] + m * mu;
                self.running_var[i] = one_m * self.running_var[i] + m * v * unbias;
            }
            normalized.mul(&scale)?.add(&shift)
        } else {
            let mean = Tensor::from_vec(&[c, 1, 1], self.running_mean.clone())?;
            let denom_data: Vec<E> = self
                .running_var
                .iter()
                .map(|&v| (v + E::from_f64(self.eps)).sqrt())
                .collect();
            let denom = Tensor::from_vec(&[c, 1, 1], denom_data)?;
            x.sub(&mean)?.div(&denom)?.mul(&scale)?.add(&shift)
        }
    }
}

/// Per-feature affine embedding of numeric columns into token vectors:
/// `token[b,f,:] = x[b,f] * weight[f,:] + bias[f,:]`.
pub struct TokenizerNum<E: Element> {
    pub weight: Tensor<E>, // (F, d_token)
    pub bias: Tensor<E>,   // (F, d_token)
}

impl<E: Element> TokenizerNum<E> {
    pub fn new(n_features: usize, d_token: usize, rng: &mut RngState) -> Result<Self> {
        let bound = 1.0 / (d_token.max(1) as f64).sqrt();
        Ok(TokenizerNum {
            weight: Tensor::create(&[n_features, d_token], Fill::Uniform(-bound, bound), rng, true)?,
            bias: Tensor::create(&[n_features, d_token], Fill::Uniform(-bound, bound), rng, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (f, _d) = (self.weight.shape()[0], self.weight.shape()[1]);
        if x.rank() != 2 || x.shape()[1] != f {
            return Err(Error::shape(format!(
                "tokenizer_num expects (B,{f}), got {:?}",
                x.shape()
            )));
        }
        let b = x.shape()[0];
        let x3 = x.reshape(&[b as i64, f as i64, 1])?;
        x3.mul(&self.weight)?.add(&self.bias)
    }
}

/// Embedding lookup per categorical feature plus a per-feature bias.
pub struct TokenizerCateg<E: Element> {
    pub embeddings: Vec<Tensor<E>>, // per feature: (cardinality, d_token)
    pub bias: Tensor<E>,            // (F, d_token)
}

impl<E: Element> TokenizerCateg<E> {
    pub fn new(cardinalities: &[usize], d_token: usize, rng: &mut RngState) -> Result<Self> {
        let bound = 1.0 / (d_token.max(1) as f64).sqrt();
        let embeddings = cardinalities
            .iter()
            .map(|&card| {
                Tensor::create(&[card, d_token], Fill::Uniform(-bound, bound), rng, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let bias = Tensor::create(
            &[cardinalities.len(), d_token],
            Fill::Uniform(-bound, bound),
            rng,
            true,
        )?;
        Ok(TokenizerCateg { embeddings, bias })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let f = self.embeddings.len();
        if x.rank() != 2 || x.shape()[1] != f {
            return Err(Error::shape(format!(
                "tokenizer_categ expects (B,{f}), got {:?}",
                x.shape()
            )));
        }
        let b = x.shape()[0];
        let d = self.bias.shape()[1];
        let mut tokens = Vec::with_capacity(f);
        for (j, table) in self.embeddings.iter().enumerate() {
            let indices: Vec<usize> = {
                let xd = x.data();
                (0..b)
                    .map(|bi| {
                        let v = xd[bi * f + j].to_f64();
                        let idx = v as usize;
                        if v < 0.0 || (idx as f64 - v).abs() > 1e-6 || idx >= table.shape()[0] {
                            Err(Error::invalid(format!(
                                "categorical index {v} out of vocabulary 0..{} for feature {j}",
                                table.shape()[0]
                            )))
                        } else {
                            Ok(idx)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let token = gather_rows(table, &indices)?;
            tokens.push(token.reshape(&[b as i64, 1, d as i64])?);
        }
        Tensor::concat(&tokens, 1)?.add(&self.bias)
    }
}

/// Row lookup `table[indices[i], :]`; gradient scatter-adds into the table.
pub fn gather_rows<E: Element>(table: &Tensor<E>, indices: &[usize]) -> Result<Tensor<E>> {
    if table.rank() != 2 {
        return Err(Error::shape("gather_rows expects a rank-2 table"));
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    for &i in indices {
        if i >= rows {
            return Err(Error::invalid(format!("gather index {i} out of range 0..{rows}")));
        }
    }
    let td = table.data();
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend_from_slice(&td[i * d..(i + 1) * d]);
    }
    drop(td);
    let rule: Rc<dyn CustomGrad<E>> = Rc::new(GatherGrad { indices: indices.to_vec() });
    Ok(Tensor::custom_op(&[table], vec![indices.len(), d], out, rule))
}

struct GatherGrad {
    indices: Vec<usize>,
}

impl<E: Element> CustomGrad<E> for GatherGrad {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(
        &self,
        inputs: &[Tensor<E>],
        output: &Tensor<E>,
        grad: &[E],
    ) -> Result<Vec<Option<Vec<E>>>> {
        let d = output.shape()[1];
        let mut dt = vec![E::ZERO; inputs[0].numel()];
        for (row, &idx) in self.indices.iter().enumerate() {
            for c in 0..d {
                dt[idx * d + c] += grad[row * d + c];
            }
        }
        Ok(vec![Some(dt)])
    }
}

/// Batch-preserving flatten of everything after the leading dimension.
pub fn flatten<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("flatten expects rank >= 2, got {:?}", x.shape())));
    }
    let b = x.shape()[0] as i64;
    x.reshape(&[b, -1])
}
