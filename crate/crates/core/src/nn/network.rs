use crate::error::{Error, Result};
use crate::real::{gemm, Layout, Real};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::layer::{ConvGeom, Layer, LayerSpec, PoolGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real = f64> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// A named set of parameters tuned as one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub name: String,
    pub params: Vec<usize>,
}

/// A sequential network of [`LayerSpec`] stages.
#[derive(Debug, Clone)]
pub struct Network<T: Real = f64> {
    input_shape: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Patches(Vec<T>),
    Mask(Vec<T>),
    Argmax(Vec<u32>),
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real = f64> {
    batch: usize,
    /// `acts[l]` is the input of layer `l`; the last entry is the output.
    acts: Vec<Vec<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Output of the reverse pass, indexed by parameter id.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f64> {
    pub sample_count: usize,
    /// Mini-batch gradient: mean of the per-sample gradients.
    pub grads: Vec<Vec<T>>,
    /// Coordinatewise sum over samples of squared per-sample gradients, when
    /// requested.
    pub per_sample_sq: Option<Vec<Vec<f64>>>,
}

impl<T: Real> Network<T> {
    /// Builds the network, resolving shapes against the per-sample input
    /// shape and initializing weights and biases from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.to_vec()];
        let mut layers = Vec::with_capacity(specs.len());
        let mut params: Vec<Param<T>> = Vec::new();
        let (mut n_conv, mut n_fc) = (0, 0);
        for spec in specs {
            spec.validate()?;
            let cur = shapes.last().unwrap().clone();
            let (layer, out) = match *spec {
                LayerSpec::Dense { out_features } => {
                    let [inputs] = cur[..] else {
                        return Err(Error::Shape(format!("dense layer needs a flat input, got {cur:?}")));
                    };
                    n_fc += 1;
                    let bound = 1.0 / (inputs as f64).sqrt();
                    let weight = push_param(&mut params, format!("fc{n_fc}.weight"), vec![out_features, inputs], bound, rng);
                    let bias = push_param(&mut params, format!("fc{n_fc}.bias"), vec![out_features], bound, rng);
                    (Layer::Dense { inputs, outputs: out_features, weight, bias }, vec![out_features])
                }
                LayerSpec::Conv2d { out_channels, kernel } => {
                    let [in_c, in_h, in_w] = cur[..] else {
                        return Err(Error::Shape(format!("conv layer needs [c, h, w] input, got {cur:?}")));
                    };
                    if kernel > in_h || kernel > in_w {
                        return Err(Error::Shape(format!("kernel {kernel} larger than input {in_h}x{in_w}")));
                    }
                    n_conv += 1;
                    let geom = ConvGeom {
                        in_c,
                        in_h,
                        in_w,
                        out_c: out_channels,
                        k: kernel,
                        out_h: in_h - kernel + 1,
                        out_w: in_w - kernel + 1,
                    };
                    let bound = 1.0 / (geom.patch_rows() as f64).sqrt();
                    let weight = push_param(
                        &mut params,
                        format!("conv{n_conv}.weight"),
                        vec![out_channels, in_c, kernel, kernel],
                        bound,
                        rng,
                    );
                    let bias = push_param(&mut params, format!("conv{n_conv}.bias"), vec![out_channels], bound, rng);
                    (Layer::Conv2d { geom, weight, bias }, vec![out_channels, geom.out_h, geom.out_w])
                }
                LayerSpec::MaxPool2d { kernel } => {
                    let [channels, in_h, in_w] = cur[..] else {
                        return Err(Error::Shape(format!("pooling needs [c, h, w] input, got {cur:?}")));
                    };
                    if kernel > in_h || kernel > in_w {
                        return Err(Error::Shape(format!("pool kernel {kernel} larger than input {in_h}x{in_w}")));
                    }
                    let g = PoolGeom { channels, in_h, in_w, k: kernel, out_h: in_h / kernel, out_w: in_w / kernel };
                    (Layer::MaxPool2d(g), vec![channels, g.out_h, g.out_w])
                }
                LayerSpec::Relu => (Layer::Relu, cur),
                LayerSpec::Dropout { rate } => (Layer::Dropout { rate }, cur),
                LayerSpec::Flatten => (Layer::Flatten, vec![cur.iter().product()]),
                LayerSpec::LogSoftmax => {
                    let [classes] = cur[..] else {
                        return Err(Error::Shape(format!("log-softmax needs a flat input, got {cur:?}")));
                    };
                    (Layer::LogSoftmax { classes }, cur)
                }
            };
            layers.push(layer);
            shapes.push(out);
        }
        Ok(Network { input_shape: input_shape.to_vec(), shapes, layers, params })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// One group per weight tensor and one per bias tensor, or one per layer
    /// with `merge_bias`.
    pub fn param_groups(&self, merge_bias: bool) -> Vec<GroupSpec> {
        if !merge_bias {
            return self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| GroupSpec { name: p.name.clone(), params: vec![i] })
                .collect();
        }
        self.layers
            .iter()
            .filter_map(|l| match *l {
                Layer::Dense { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } => {
                    let name = self.params[weight].name.trim_end_matches(".weight").to_string();
                    Some(GroupSpec { name, params: vec![weight, bias] })
                }
                _ => None,
            })
            .collect()
    }

    fn sample_size(&self, l: usize) -> usize {
        self.shapes[l].iter().product()
    }

    /// Runs the network on `batch`, shaped `[N, ..input_shape]`, and returns
    /// the per-sample outputs `[N, ..output_shape]` with the reverse-pass cache.
    ///
    /// Dropout draws an independent mask for every sample and activation in
    /// train mode and is the identity in eval mode.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match input shape {:?}",
                shape, self.input_shape
            )));
        }
        let n = shape[0];
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        acts.push(batch.data().to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = &acts[l];
            let in_size = self.sample_size(l);
            let out_size = self.sample_size(l + 1);
            let mut y = vec![T::ZERO; n * out_size];
            let a = match *layer {
                Layer::Dense { inputs, outputs, weight, bias } => {
                    let b = &self.params[bias].data;
                    for row in y.chunks_exact_mut(outputs) {
                        row.copy_from_slice(b);
                    }
                    gemm(
                        x,
                        Layout::row_major(n, inputs),
                        &self.params[weight].data,
                        Layout::transposed(outputs, inputs),
                        T::ONE,
                        &mut y,
                        Layout::row_major(n, outputs),
                    );
                    Aux::None
                }
                Layer::Conv2d { geom, weight, bias } => {
                    let (kr, hw) = (geom.patch_rows(), geom.out_pixels());
                    let mut patches = vec![T::ZERO; n * kr * hw];
                    let w = &self.params[weight].data;
                    let b = &self.params[bias].data;
                    for i in 0..n {
                        let cols = &mut patches[i * kr * hw..(i + 1) * kr * hw];
                        geom.im2col(&x[i * in_size..(i + 1) * in_size], cols);
                        let yi = &mut y[i * out_size..(i + 1) * out_size];
                        for (c, plane) in yi.chunks_exact_mut(hw).enumerate() {
                            plane.fill(b[c]);
                        }
                        gemm(
                            w,
                            Layout::row_major(geom.out_c, kr),
                            cols,
                            Layout::row_major(kr, hw),
                            T::ONE,
                            yi,
                            Layout::row_major(geom.out_c, hw),
                        );
                    }
                    Aux::Patches(patches)
                }
                Layer::MaxPool2d(g) => {
                    let mut arg = vec![0u32; n * out_size];
                    for i in 0..n {
                        let xi = &x[i * in_size..(i + 1) * in_size];
                        let base = i * out_size;
                        for c in 0..g.channels {
                            for oh in 0..g.out_h {
                                for ow in 0..g.out_w {
                                    let mut best = c * g.in_h * g.in_w + oh * g.k * g.in_w + ow * g.k;
                                    for ki in 0..g.k {
                                        for kj in 0..g.k {
                                            let idx = c * g.in_h * g.in_w + (oh * g.k + ki) * g.in_w + ow * g.k + kj;
                                            // Strict comparison keeps the lowest index on ties.
                                            if xi[idx] > xi[best] {
                                                best = idx;
                                            }
                                        }
                                    }
                                    let o = base + (c * g.out_h + oh) * g.out_w + ow;
                                    y[o] = xi[best];
                                    arg[o] = best as u32;
                                }
                            }
                        }
                    }
                    Aux::Argmax(arg)
                }
                Layer::Relu => {
                    for (o, &v) in y.iter_mut().zip(x) {
                        *o = if v > T::ZERO { v } else { T::ZERO };
                    }
                    Aux::None
                }
                Layer::Dropout { rate } => match mode {
                    Mode::Eval => {
                        y.copy_from_slice(x);
                        Aux::None
                    }
                    Mode::Train => {
                        let keep = T::from_f64(1.0 / (1.0 - rate));
                        let mask: Vec<T> = (0..x.len())
                            .map(|_| if rng.uniform() >= rate { keep } else { T::ZERO })
                            .collect();
                        for ((o, &v), &m) in y.iter_mut().zip(x).zip(&mask) {
                            *o = v * m;
                        }
                        Aux::Mask(mask)
                    }
                },
                Layer::Flatten => {
                    y.copy_from_slice(x);
                    Aux::None
                }
                Layer::LogSoftmax { classes } => {
                    for (orow, xrow) in y.chunks_exact_mut(classes).zip(x.chunks_exact(classes)) {
                        let m = xrow.iter().copied().fold(xrow[0], |a, b| if b > a { b } else { a });
                        let s: T = xrow.iter().map(|&v| (v - m).exp()).sum();
                        let lse = m + s.ln();
                        for (o, &v) in orow.iter_mut().zip(xrow) {
                            *o = v - lse;
                        }
                    }
                    Aux::None
                }
            };
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("activation of layer {l} ({layer:?})")));
            }
            aux.push(a);
            acts.push(y);
        }
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(self.output_shape());
        let out = Tensor::from_vec(&out_shape, acts.last().unwrap().clone())?;
        Ok((out, ForwardCache { batch: n, acts, aux }))
    }

    fn check_cache(&self, cache: &ForwardCache<T>) -> Result<()> {
        let ok = cache.acts.len() == self.layers.len() + 1
            && cache.aux.len() == self.layers.len()
            && cache
                .acts
                .iter()
                .enumerate()
                .all(|(l, a)| a.len() == cache.batch * self.sample_size(l));
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("forward cache does not belong to this network".into()))
        }
    }

    /// Reverse pass of the mean negative log-likelihood of `targets` under the
    /// network output (interpreted as log-probabilities).
    ///
    /// With `per_sample_stats`, additionally accumulates, for every parameter
    /// coordinate, the sum over samples of the squared per-sample gradient.
    /// Dense layers use the rank-one structure `g_i = dz_i a_i^T`, whose
    /// square is `dz_i^2 (a_i^2)^T`, so the sum is one extra matrix product;
    /// convolutions produce each per-sample weight gradient in a reusable
    /// buffer and fold its square into the accumulator. Neither stores more
    /// than one parameter-sized buffer per tensor.
    pub fn backward(&self, cache: &ForwardCache<T>, targets: &[usize], per_sample_stats: bool) -> Result<Gradients<T>> {
        self.check_cache(cache)?;
        let n = cache.batch;
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for a batch of {n}", targets.len())));
        }
        let classes = self.sample_size(self.layers.len());
        // d f_i / d output_i, one row per sample (not divided by N).
        let mut dy = vec![T::ZERO; n * classes];
        for (i, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::IndexOutOfRange { index: t, len: classes });
            }
            dy[i * classes + t] = -T::ONE;
        }

        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::ZERO; p.data.len()]).collect();
        let mut sq: Option<Vec<Vec<f64>>> =
            per_sample_stats.then(|| self.params.iter().map(|p| vec![0.0; p.data.len()]).collect());

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.acts[l];
            let in_size = self.sample_size(l);
            let out_size = self.sample_size(l + 1);
            let need_dx = l > 0;
            let mut dx = vec![T::ZERO; if need_dx { n * in_size } else { 0 }];
            match (layer, &cache.aux[l]) {
                (&Layer::Dense { inputs, outputs, weight, bias }, _) => {
                    gemm(
                        &dy,
                        Layout::transposed(n, outputs),
                        x,
                        Layout::row_major(n, inputs),
                        T::ZERO,
                        &mut grads[weight],
                        Layout::row_major(outputs, inputs),
                    );
                    {
                        let gb = &mut grads[bias];
                        for row in dy.chunks_exact(outputs) {
                            for (g, &d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                    if let Some(sq) = sq.as_mut() {
                        let dy2: Vec<f64> = dy.iter().map(|v| v.to_f64() * v.to_f64()).collect();
                        let x2: Vec<f64> = x.iter().map(|v| v.to_f64() * v.to_f64()).collect();
                        gemm(
                            &dy2,
                            Layout::transposed(n, outputs),
                            &x2,
                            Layout::row_major(n, inputs),
                            0.0,
                            &mut sq[weight],
                            Layout::row_major(outputs, inputs),
                        );
                        let sb = &mut sq[bias];
                        for row in dy2.chunks_exact(outputs) {
                            for (s, &d) in sb.iter_mut().zip(row) {
                                *s += d;
                            }
                        }
                    }
                    if need_dx {
                        gemm(
                            &dy,
                            Layout::row_major(n, outputs),
                            &self.params[weight].data,
                            Layout::row_major(outputs, inputs),
                            T::ZERO,
                            &mut dx,
                            Layout::row_major(n, inputs),
                        );
                    }
                }
                (&Layer::Conv2d { geom, weight, bias }, Aux::Patches(patches)) => {
                    let (kr, hw, oc) = (geom.patch_rows(), geom.out_pixels(), geom.out_c);
                    let w = &self.params[weight].data;
                    let mut scratch = vec![T::ZERO; oc * kr];
                    let mut dcols = vec![T::ZERO; if need_dx { kr * hw } else { 0 }];
                    let mut db = vec![T::ZERO; oc];
                    for i in 0..n {
                        let dzi = &dy[i * out_size..(i + 1) * out_size];
                        let cols = &patches[i * kr * hw..(i + 1) * kr * hw];
                        gemm(
                            dzi,
                            Layout::row_major(oc, hw),
                            cols,
                            Layout::transposed(kr, hw),
                            T::ZERO,
                            &mut scratch,
                            Layout::row_major(oc, kr),
                        );
                        for (c, plane) in dzi.chunks_exact(hw).enumerate() {
                            db[c] = plane.iter().copied().sum();
                        }
                        for (g, &s) in grads[weight].iter_mut().zip(&scratch) {
                            *g += s;
                        }
                        for (g, &s) in grads[bias].iter_mut().zip(&db) {
                            *g += s;
                        }
                        if let Some(sq) = sq.as_mut() {
                            for (q, &s) in sq[weight].iter_mut().zip(&scratch) {
                                *q += s.to_f64() * s.to_f64();
                            }
                            for (q, &s) in sq[bias].iter_mut().zip(&db) {
                                *q += s.to_f64() * s.to_f64();
                            }
                        }
                        if need_dx {
                            gemm(
                                w,
                                Layout::transposed(oc, kr),
                                dzi,
                                Layout::row_major(oc, hw),
                                T::ZERO,
                                &mut dcols,
                                Layout::row_major(kr, hw),
                            );
                            geom.col2im_add(&dcols, &mut dx[i * in_size..(i + 1) * in_size]);
                        }
                    }
                }
                (Layer::MaxPool2d(_), Aux::Argmax(arg)) => {
                    if need_dx {
                        for i in 0..n {
                            let dxi = &mut dx[i * in_size..(i + 1) * in_size];
                            for (&a, &d) in arg[i * out_size..(i + 1) * out_size].iter().zip(&dy[i * out_size..]) {
                                dxi[a as usize] += d;
                            }
                        }
                    }
                }
                (Layer::Relu, _) => {
                    if need_dx {
                        for ((o, &d), &v) in dx.iter_mut().zip(&dy).zip(x) {
                            *o = if v > T::ZERO { d } else { T::ZERO };
                        }
                    }
                }
                (Layer::Dropout { .. }, Aux::Mask(mask)) => {
                    if need_dx {
                        for ((o, &d), &m) in dx.iter_mut().zip(&dy).zip(mask) {
                            *o = d * m;
                        }
                    }
                }
                (Layer::Dropout { .. }, Aux::None) | (Layer::Flatten, _) => {
                    if need_dx {
                        dx.copy_from_slice(&dy);
                    }
                }
                (&Layer::LogSoftmax { classes }, _) => {
                    if need_dx {
                        let y = &cache.acts[l + 1];
                        for ((drow, dyrow), yrow) in dx
                            .chunks_exact_mut(classes)
                            .zip(dy.chunks_exact(classes))
                            .zip(y.chunks_exact(classes))
                        {
                            let s: T = dyrow.iter().copied().sum();
                            for ((o, &d), &v) in drow.iter_mut().zip(dyrow).zip(yrow) {
                                *o = d - v.exp() * s;
                            }
                        }
                    }
                }
                (layer, _) => {
                    return Err(Error::Shape(format!("cache entry of layer {l} does not match {layer:?}")));
                }
            }
            dy = dx;
        }

        let inv_n = T::from_f64(1.0 / n as f64);
        for (p, g) in grads.iter_mut().enumerate() {
            for v in g.iter_mut() {
                *v *= inv_n;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", self.params[p].name)));
            }
        }
        Ok(Gradients { sample_count: n, grads, per_sample_sq: sq })
    }

    /// The cache restricted to sample `i`, as if the forward pass had been
    /// run on that sample alone with the same dropout realization.
    pub fn cache_sample(&self, cache: &ForwardCache<T>, i: usize) -> Result<ForwardCache<T>> {
        self.check_cache(cache)?;
        if i >= cache.batch {
            return Err(Error::IndexOutOfRange { index: i, len: cache.batch });
        }
        let acts = cache
            .acts
            .iter()
            .enumerate()
            .map(|(l, a)| {
                let s = self.sample_size(l);
                a[i * s..(i + 1) * s].to_vec()
            })
            .collect();
        let aux = cache
            .aux
            .iter()
            .zip(&self.layers)
            .enumerate()
            .map(|(l, (a, layer))| match a {
                Aux::None => Aux::None,
                Aux::Patches(p) => {
                    let Layer::Conv2d { geom, .. } = layer else { unreachable!() };
                    let s = geom.patch_rows() * geom.out_pixels();
                    Aux::Patches(p[i * s..(i + 1) * s].to_vec())
                }
                Aux::Mask(m) => {
                    let s = self.sample_size(l + 1);
                    Aux::Mask(m[i * s..(i + 1) * s].to_vec())
                }
                Aux::Argmax(arg) => {
                    let s = self.sample_size(l + 1);
                    Aux::Argmax(arg[i * s..(i + 1) * s].to_vec())
                }
            })
            .collect();
        Ok(ForwardCache { batch: 1, acts, aux })
    }
}

fn push_param<T: Real>(params: &mut Vec<Param<T>>, name: String, shape: Vec<usize>, bound: f64, rng: &mut Rng) -> usize {
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64(rng.uniform_range(-bound, bound))).collect();
    params.push(Param { name, shape, data });
    params.len() - 1
}
