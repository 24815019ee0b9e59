//! The two-network scheme and its baselines.
//!
//! Both networks share one encoder–decoder shape: three levels with
//! `[16, 32, 64]` channels, each level two `conv3×3 → instance_norm →
//! leaky_relu` blocks, 2×2 average pooling on the way down, bilinear
//! upsampling plus skip concatenation on the way up, and a `1×1` convolution
//! with bias and a sigmoid at the end. The VM net reads `(f, G)`; the DIP net
//! reads 32 channels of fixed noise. At test time only the VM net is used.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{
    adam_step, read_checkpoint, write_checkpoint, AdamState, NamedTensor, Padding, Tape, Tensor, Var,
    LEAKY_SLOPE,
};
use crate::error::{shape_err, Error, Result};
use crate::fidelity::{FidelityBundle, FidelityConfig};
use crate::image::{rasterize_polygon, FieldKind, Image, MarkerSet, ScalarField};

pub const CHANNELS: [usize; 3] = [16, 32, 64];
pub const NOISE_CHANNELS: usize = 32;
/// Upper end of the uniform fixed noise `z`.
pub const NOISE_BASE_MAX: f64 = 0.1;
/// Smoothing inside `sqrt(ux² + uy² + GRAD_EPS²)`.
pub const GRAD_EPS: f64 = 1e-4;

/// Training / segmentation method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// VM net, mask geometry, edge-weighted TV in the loss.
    M1,
    /// VM net, mask geometry, no regulariser.
    M2,
    /// VM ⊙ DIP, mask geometry.
    M3,
    /// VM ⊙ DIP, geodesic-distance geometry.
    M4,
    /// A single untrained DIP net fitted to one image.
    DipLike,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::M1 => "m1",
            Method::M2 => "m2",
            Method::M3 => "m3",
            Method::M4 => "m4",
            Method::DipLike => "dip",
        }
    }

    pub fn is_combined(self) -> bool {
        matches!(self, Method::M3 | Method::M4)
    }

    fn code(self) -> f64 {
        match self {
            Method::M1 => 1.0,
            Method::M2 => 2.0,
            Method::M3 => 3.0,
            Method::M4 => 4.0,
            Method::DipLike => 5.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        [Method::M1, Method::M2, Method::M3, Method::M4, Method::DipLike]
            .into_iter()
            .find(|m| m.code() == c)
    }

    /// The VM net's second input channel.
    pub fn geometry(self, markers: &MarkerSet, bundle: &FidelityBundle) -> Result<ScalarField> {
        let (h, w) = bundle.dims();
        match self {
            Method::M4 => Ok(bundle.dist.clone()),
            _ => rasterize_polygon(markers, h, w),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Method::M1),
            "m2" => Ok(Method::M2),
            "m3" => Ok(Method::M3),
            "m4" => Ok(Method::M4),
            "dip" | "dip-like" => Ok(Method::DipLike),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Encoder–decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    in_channels: usize,
    params: Vec<Tensor>,
}

/// VM net `ψ_Θ₁(f, G)`.
pub type VmNet = UNet;
/// DIP net `φ_Θ₂(z)`.
pub type DipNet = UNet;

fn layout(cin: usize) -> Vec<(&'static str, Vec<usize>)> {
    let [c1, c2, c3] = CHANNELS;
    vec![
        ("enc1.conv1", vec![3, 3, cin, c1]),
        ("enc1.conv2", vec![3, 3, c1, c1]),
        ("enc2.conv1", vec![3, 3, c1, c2]),
        ("enc2.conv2", vec![3, 3, c2, c2]),
        ("enc3.conv1", vec![3, 3, c2, c3]),
        ("enc3.conv2", vec![3, 3, c3, c3]),
        ("dec2.conv1", vec![3, 3, c3 + c2, c2]),
        ("dec2.conv2", vec![3, 3, c2, c2]),
        ("dec1.conv1", vec![3, 3, c2 + c1, c1]),
        ("dec1.conv2", vec![3, 3, c1, c1]),
        ("head.weight", vec![1, 1, c1, 1]),
        ("head.bias", vec![1]),
    ]
}

fn check_grid(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(8) || !w.is_multiple_of(8) {
        return Err(shape_err(format!("network input {h}x{w} must have sides divisible by 8")));
    }
    Ok(())
}

impl UNet {
    /// Fresh weights, uniform in `±1/sqrt(fan_in)`; the output bias starts at 0.
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(in_channels)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name == "head.bias" {
                    vec![0.0; n]
                } else {
                    let bound = 1.0 / ((shape[0] * shape[1] * shape[2]) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data).expect("layout shapes")
            })
            .collect();
        Self { in_channels, params }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn named(&self, prefix: &str) -> Vec<NamedTensor> {
        layout(self.in_channels)
            .into_iter()
            .zip(&self.params)
            .map(|((name, _), t)| (format!("{prefix}{name}"), t.clone()))
            .collect()
    }

    /// Rebuilds a net from checkpoint tensors carrying `prefix`.
    pub fn from_named(tensors: &[NamedTensor], prefix: &str) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n.strip_prefix(prefix) == Some(name))
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}{name}")))
        };
        let first = find("enc1.conv1")?;
        let in_channels = first.shape().get(2).copied().unwrap_or(0);
        let mut params = Vec::new();
        for (name, shape) in layout(in_channels) {
            let t = find(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{prefix}{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.push(Tensor::new(shape, t.data().to_vec())?);
        }
        Ok(Self { in_channels, params })
    }

    /// Records the forward pass on `tape`. Returns the parameter handles (in
    /// [`UNet::params`] order) and the `[1,H,W,1]` output.
    pub fn forward(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<(Vec<Var>, Var)> {
        let [_, h, w, c] = tape.value(input).nhwc()?;
        check_grid(h, w)?;
        if c != self.in_channels {
            return Err(shape_err(format!("network expects {} channels, got {c}", self.in_channels)));
        }
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|t| {
                let t = t.clone();
                tape.leaf(if trainable { t.requiring_grad() } else { t })
            })
            .collect();
        let block = |tape: &mut Tape, x: Var, k: Var| -> Result<Var> {
            let y = tape.conv2d(x, k, 1, Padding::Same)?;
            let y = tape.instance_norm(y)?;
            Ok(tape.leaky_relu(y, LEAKY_SLOPE))
        };
        let e1 = block(tape, input, p[0])?;
        let e1 = block(tape, e1, p[1])?;
        let x = tape.avg_downsample(e1)?;
        let e2 = block(tape, x, p[2])?;
        let e2 = block(tape, e2, p[3])?;
        let x = tape.avg_downsample(e2)?;
        let e3 = block(tape, x, p[4])?;
        let e3 = block(tape, e3, p[5])?;
        let x = tape.bilinear_upsample(e3)?;
        let x = tape.concat_channels(x, e2)?;
        let d2 = block(tape, x, p[6])?;
        let d2 = block(tape, d2, p[7])?;
        let x = tape.bilinear_upsample(d2)?;
        let x = tape.concat_channels(x, e1)?;
        let d1 = block(tape, x, p[8])?;
        let d1 = block(tape, d1, p[9])?;
        let y = tape.conv2d(d1, p[10], 1, Padding::Same)?;
        let y = tape.add_bias(y, p[11])?;
        Ok((p, tape.sigmoid(y)))
    }

    /// Output field for a single `[1,H,W,C]` input, without gradients.
    pub fn infer(&self, input: Tensor) -> Result<ScalarField> {
        let [_, h, w, _] = input.nhwc()?;
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let (_, y) = self.forward(&mut tape, x, false)?;
        ScalarField::new(h, w, tape.value(y).data().to_vec(), FieldKind::RelaxedLabel)
    }
}

pub fn build_vm_net(h: usize, w: usize, seed: u64) -> Result<VmNet> {
    check_grid(h, w)?;
    Ok(UNet::new(2, seed))
}

pub fn build_dip_net(h: usize, w: usize, seed: u64) -> Result<DipNet> {
    check_grid(h, w)?;
    Ok(UNet::new(NOISE_CHANNELS, seed))
}

/// Fixed DIP input `z ~ U(0, 0.1)` plus the per-epoch perturbation scale.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseInput {
    base: Tensor,
    pub perturb_sigma: f64,
}

impl NoiseInput {
    pub fn draw(h: usize, w: usize, perturb_sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        check_grid(h, w)?;
        if !(perturb_sigma.is_finite() && perturb_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise perturbation must be nonnegative, got {perturb_sigma}"
            )));
        }
        let dist = Uniform::new_inclusive(0.0, NOISE_BASE_MAX).expect("finite range");
        let data = (0..h * w * NOISE_CHANNELS).map(|_| dist.sample(rng)).collect();
        Ok(Self {
            base: Tensor::new(vec![1, h, w, NOISE_CHANNELS], data)?,
            perturb_sigma,
        })
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    /// `z + ẑ` with `ẑ ~ N(0, σ²)`.
    pub fn perturbed(&self, rng: &mut impl Rng) -> Tensor {
        let mut t = self.base.clone();
        if self.perturb_sigma > 0.0 {
            let dist = Normal::new(0.0, self.perturb_sigma).expect("finite sigma");
            t.data_mut().iter_mut().for_each(|v| *v += dist.sample(rng));
        }
        t
    }
}

/// Stacks `f` and `G` into the VM net's `[1,H,W,2]` input.
pub fn vm_input(f: &Image, g: &ScalarField) -> Result<Tensor> {
    let (h, w) = f.dims();
    g.check_dims(h, w, "geometry field")?;
    let data = f.data().iter().zip(g.data()).flat_map(|(a, b)| [*a, *b]).collect();
    Tensor::new(vec![1, h, w, 2], data)
}

fn field_constant(tape: &mut Tape, h: usize, w: usize, data: Vec<f64>) -> Result<Var> {
    tape.constant(vec![1, h, w, 1], data)
}

fn check_output(tape: &Tape, u: Var, bundle: &FidelityBundle, what: &str) -> Result<()> {
    let (h, w) = bundle.dims();
    if tape.value(u).shape() != [1, h, w, 1] {
        return Err(shape_err(format!(
            "{what} has shape {:?}, bundle is {h}x{w}",
            tape.value(u).shape()
        )));
    }
    Ok(())
}

/// `mean((λΦ + θD_G)·u)`.
pub fn data_term(tape: &mut Tape, u: Var, bundle: &FidelityBundle, lambda: f64, theta: f64) -> Result<Var> {
    check_output(tape, u, bundle, "label")?;
    let (h, w) = bundle.dims();
    let c = field_constant(tape, h, w, bundle.weights(lambda, theta))?;
    let cu = tape.hadamard(c, u)?;
    Ok(tape.mean(cu))
}

/// `½·mean((u_dip − u_vm)²)`.
pub fn similarity_term(tape: &mut Tape, u_vm: Var, u_dip: Var) -> Result<Var> {
    let d = tape.sub(u_dip, u_vm)?;
    let d2 = tape.square(d);
    let m = tape.mean(d2);
    Ok(tape.scale(m, 0.5))
}

/// `mean((λΦ + θD_G)·u) + ½·mean((u_dip − u_vm)²)`.
pub fn loss_proposed(
    tape: &mut Tape,
    u: Var,
    u_vm: Var,
    u_dip: Var,
    bundle: &FidelityBundle,
    lambda: f64,
    theta: f64,
) -> Result<Var> {
    check_output(tape, u_vm, bundle, "u_vm")?;
    check_output(tape, u_dip, bundle, "u_dip")?;
    let data = data_term(tape, u, bundle, lambda, theta)?;
    let sim = similarity_term(tape, u_vm, u_dip)?;
    tape.add(data, sim)
}

/// `μ·mean(g·(sqrt(ux² + uy² + ε²) − ε)) + mean((λΦ + θD_G)·u)`.
///
/// The `−ε` shift leaves gradients untouched and makes the regulariser vanish
/// exactly on constant labels.
pub fn loss_baseline(tape: &mut Tape, u: Var, bundle: &FidelityBundle, mu: f64, lambda: f64, theta: f64) -> Result<Var> {
    let data = data_term(tape, u, bundle, lambda, theta)?;
    if mu == 0.0 {
        return Ok(data);
    }
    let (h, w) = bundle.dims();
    let uy = tape.forward_diff(u, 1)?;
    let ux = tape.forward_diff(u, 2)?;
    let ux2 = tape.square(ux);
    let uy2 = tape.square(uy);
    let s = tape.add(ux2, uy2)?;
    let s = tape.add_scalar(s, GRAD_EPS * GRAD_EPS);
    let mag = tape.sqrt(s)?;
    let mag = tape.add_scalar(mag, -GRAD_EPS);
    let g = field_constant(tape, h, w, bundle.edge.data().to_vec())?;
    let gm = tape.hadamard(g, mag)?;
    let reg = tape.mean(gm);
    let reg = tape.scale(reg, mu);
    tape.add(data, reg)
}

/// `(u, u_vm, u_dip)` with `u = u_vm ⊙ u_dip`.
pub fn forward_combined(
    vm: &VmNet,
    dip: &DipNet,
    f: &Image,
    g: &ScalarField,
    z: &Tensor,
) -> Result<(ScalarField, ScalarField, ScalarField)> {
    let (h, w) = f.dims();
    if z.shape() != [1, h, w, NOISE_CHANNELS] {
        return Err(shape_err(format!("noise has shape {:?}, image is {h}x{w}", z.shape())));
    }
    let u_vm = vm.infer(vm_input(f, g)?)?;
    let u_dip = dip.infer(z.clone())?;
    let u = u_vm.data().iter().zip(u_dip.data()).map(|(a, b)| a * b).collect();
    Ok((ScalarField::new(h, w, u, FieldKind::RelaxedLabel)?, u_vm, u_dip))
}

/// Hyperparameters of the training loops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub theta: f64,
    /// TV weight of M1 (M2 always uses 0).
    pub mu: f64,
    pub lr: f64,
    /// Epoch budget of M1–M4.
    pub epochs: usize,
    /// Stop M1–M4 after this many epochs when set.
    pub early_stop_epoch: Option<usize>,
    /// Epoch budget (and stopping point) of the DIP-like fit.
    pub dip_epochs: usize,
    /// Std of the per-epoch DIP input perturbation.
    pub noise_sigma: f64,
    pub seed: u64,
    pub fidelity: FidelityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            theta: 1.0,
            mu: 1.0,
            lr: 1e-3,
            epochs: 300,
            early_stop_epoch: None,
            dip_epochs: 500,
            noise_sigma: 0.1,
            seed: 0,
            fidelity: FidelityConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("theta", self.theta), ("mu", self.mu), ("noise_sigma", self.noise_sigma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidParameter(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn epochs_to_run(&self) -> usize {
        self.early_stop_epoch.map_or(self.epochs, |e| e.min(self.epochs))
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub method: Method,
    pub epochs: usize,
    /// Epochs actually run.
    pub early_stop_epoch: usize,
    /// Loss per epoch, summed over the training images.
    pub loss_trace: Vec<f64>,
    /// `mean((u_dip − u_vm)²)` per epoch, summed over images (M3/M4 only).
    pub similarity_trace: Vec<f64>,
    pub vm: Option<VmNet>,
    pub dip: Option<DipNet>,
    /// Final relaxed label of a DIP-like fit.
    pub output: Option<ScalarField>,
}

impl TrainRun {
    pub fn loss_csv(&self) -> String {
        let with_sim = !self.similarity_trace.is_empty();
        let mut out = String::from(if with_sim { "epoch,loss,similarity\n" } else { "epoch,loss\n" });
        for (i, l) in self.loss_trace.iter().enumerate() {
            if with_sim {
                let _ = writeln!(out, "{},{l},{}", i + 1, self.similarity_trace[i]);
            } else {
                let _ = writeln!(out, "{},{l}", i + 1);
            }
        }
        out
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let vm = self
            .vm
            .clone()
            .ok_or_else(|| Error::InvalidParameter("a DIP-like fit has no VM net to save".into()))?;
        Ok(Checkpoint {
            method: self.method,
            vm,
            dip: self.dip.clone(),
        })
    }
}

/// Saved weights of a trained method.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub vm: VmNet,
    pub dip: Option<DipNet>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = vec![("meta.method".to_string(), Tensor::new(vec![1], vec![self.method.code()]).expect("1 value"))];
        tensors.extend(self.vm.named("vm."));
        if let Some(dip) = &self.dip {
            tensors.extend(dip.named("dip."));
        }
        write_checkpoint(&tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = read_checkpoint(bytes)?;
        let method = tensors
            .iter()
            .find(|(n, _)| n == "meta.method")
            .and_then(|(_, t)| t.data().first().copied())
            .and_then(Method::from_code)
            .ok_or_else(|| Error::Checkpoint("missing or unknown meta.method".into()))?;
        let vm = UNet::from_named(&tensors, "vm.")?;
        if vm.in_channels() != 2 {
            return Err(Error::Checkpoint(format!("VM net has {} input channels", vm.in_channels())));
        }
        let dip = if tensors.iter().any(|(n, _)| n.starts_with("dip.")) {
            Some(UNet::from_named(&tensors, "dip.")?)
        } else {
            None
        };
        Ok(Self { method, vm, dip })
    }
}

struct Prepared {
    image: Image,
    bundle: FidelityBundle,
    geometry: ScalarField,
}

fn prepare(images: &[(Image, MarkerSet)], method: Method, cfg: &FidelityConfig) -> Result<Vec<Prepared>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidParameter("training set is empty".into()))?;
    let (h, w) = first.0.dims();
    check_grid(h, w)?;
    images
        .iter()
        .map(|(f, m)| {
            if f.dims() != (h, w) {
                return Err(shape_err(format!(
                    "training images differ in size: {h}x{w} and {}x{}",
                    f.height(),
                    f.width()
                )));
            }
            let bundle = FidelityBundle::build(f, m, cfg)?;
            let geometry = method.geometry(m, &bundle)?;
            Ok(Prepared {
                image: f.clone(),
                bundle,
                geometry,
            })
        })
        .collect()
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Trains M1–M4 on `images`, one Adam step per image per epoch.
pub fn train(images: &[(Image, MarkerSet)], method: Method, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if method == Method::DipLike {
        return Err(Error::InvalidParameter("the DIP-like model is fitted per image, not trained".into()));
    }
    let data = prepare(images, method, &cfg.fidelity)?;
    let (h, w) = data[0].image.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vm = build_vm_net(h, w, rng.random())?;
    let dip_seed: u64 = rng.random();
    let mut dip = method.is_combined().then(|| UNet::new(NOISE_CHANNELS, dip_seed));
    let noise = if method.is_combined() {
        data.iter()
            .map(|_| NoiseInput::draw(h, w, cfg.noise_sigma, &mut rng))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut vm_opt = AdamState::new(vm.params(), cfg.lr);
    let mut dip_opt = dip.as_ref().map(|d| AdamState::new(d.params(), cfg.lr));
    let mu = if method == Method::M1 { cfg.mu } else { 0.0 };

    let run_epochs = cfg.epochs_to_run();
    let mut loss_trace = Vec::with_capacity(run_epochs);
    let mut similarity_trace = Vec::new();
    for _ in 0..run_epochs {
        let (mut epoch_loss, mut epoch_sim) = (0.0, 0.0);
        for (i, s) in data.iter().enumerate() {
            let mut tape = Tape::new();
            let x = tape.leaf(vm_input(&s.image, &s.geometry)?);
            let (vm_vars, u_vm) = vm.forward(&mut tape, x, true)?;
            match (&mut dip, &mut dip_opt) {
                (Some(dip), Some(dip_opt)) => {
                    let z = tape.leaf(noise[i].perturbed(&mut rng));
                    let (dip_vars, u_dip) = dip.forward(&mut tape, z, true)?;
                    let u = tape.hadamard(u_vm, u_dip)?;
                    let loss = loss_proposed(&mut tape, u, u_vm, u_dip, &s.bundle, cfg.lambda, cfg.theta)?;
                    let sim = similarity_term(&mut tape, u_vm, u_dip)?;
                    epoch_loss += finite(tape.value(loss).item(), "training loss")?;
                    epoch_sim += 2.0 * tape.value(sim).item();
                    let grads = tape.backward(loss)?;
                    let gv: Vec<Vec<f64>> = vm_vars.iter().map(|v| grads.wrt(*v)).collect();
                    let gd: Vec<Vec<f64>> = dip_vars.iter().map(|v| grads.wrt(*v)).collect();
                    adam_step(vm.params_mut(), &gv, &mut vm_opt)?;
                    adam_step(dip.params_mut(), &gd, dip_opt)?;
                }
                _ => {
                    let loss = loss_baseline(&mut tape, u_vm, &s.bundle, mu, cfg.lambda, cfg.theta)?;
                    epoch_loss += finite(tape.value(loss).item(), "training loss")?;
                    let grads = tape.backward(loss)?;
                    let gv: Vec<Vec<f64>> = vm_vars.iter().map(|v| grads.wrt(*v)).collect();
                    adam_step(vm.params_mut(), &gv, &mut vm_opt)?;
                }
            }
        }
        loss_trace.push(epoch_loss);
        if method.is_combined() {
            similarity_trace.push(epoch_sim);
        }
    }
    Ok(TrainRun {
        method,
        epochs: cfg.epochs,
        early_stop_epoch: run_epochs,
        loss_trace,
        similarity_trace,
        vm: Some(vm),
        dip,
        output: None,
    })
}

/// `u = ψ_Θ₁(f, G)` with `G` chosen by `method`.
pub fn predict(vm: &VmNet, f: &Image, markers: &MarkerSet, method: Method, cfg: &FidelityConfig) -> Result<ScalarField> {
    if method == Method::DipLike {
        return Err(Error::InvalidParameter("the DIP-like model has no VM net".into()));
    }
    let (h, w) = f.dims();
    check_grid(h, w)?;
    let g = match method {
        Method::M4 => FidelityBundle::build(f, markers, cfg)?.dist,
        _ => rasterize_polygon(markers, h, w)?,
    };
    vm.infer(vm_input(f, &g)?)
}

/// Fits a fresh DIP net to the data term of one image, stopping after
/// `cfg.dip_epochs` epochs.
pub fn fit_dip_single(f: &Image, markers: &MarkerSet, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let bundle = FidelityBundle::build(f, markers, &cfg.fidelity)?;
    fit_dip_bundle(f, &bundle, cfg)
}

/// [`fit_dip_single`] with the data terms already built.
pub fn fit_dip_bundle(f: &Image, bundle: &FidelityBundle, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let (h, w) = f.dims();
    check_grid(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dip = build_dip_net(h, w, rng.random())?;
    let noise = NoiseInput::draw(h, w, cfg.noise_sigma, &mut rng)?;
    let mut opt = AdamState::new(dip.params(), cfg.lr);
    let mut loss_trace = Vec::with_capacity(cfg.dip_epochs);
    for _ in 0..cfg.dip_epochs {
        let mut tape = Tape::new();
        let z = tape.leaf(noise.perturbed(&mut rng));
        let (vars, u) = dip.forward(&mut tape, z, true)?;
        let loss = data_term(&mut tape, u, bundle, cfg.lambda, cfg.theta)?;
        loss_trace.push(finite(tape.value(loss).item(), "DIP loss")?);
        let grads = tape.backward(loss)?;
        let g: Vec<Vec<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();
        adam_step(dip.params_mut(), &g, &mut opt)?;
    }
    // the fixed input z, without perturbation, gives the reported label
    let output = dip.infer(noise.base().clone())?;
    Ok(TrainRun {
        method: Method::DipLike,
        epochs: cfg.dip_epochs,
        early_stop_epoch: cfg.dip_epochs,
        loss_trace,
        similarity_trace: Vec::new(),
        vm: None,
        dip: Some(dip),
        output: Some(output),
    })
}
