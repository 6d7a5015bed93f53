//! Classifier architectures used as surrogates and attackers.
//!
//! Three small families cover the "does the protection transfer across
//! architectures" question without big-framework baggage:
//! - `cnn6`: six plain conv blocks, strided downsampling;
//! - `resnet8`: a stem plus three residual blocks;
//! - `dwsep8`: a stem plus four depthwise-separable blocks.
//!
//! All end in global average pooling and one linear head, so they accept
//! any input size the strides can divide.

use ndarray::{Array2, Array4};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, Conv2d, ConvBlock, DwConv2d, Linear,
    ReLU,
};
use super::param::Param;
use super::Mode;
use crate::util::rng::rng_for;
use crate::{Result, SegueError};

/// A trainable image classifier with explicit forward/backward.
///
/// `forward` caches activations for `backward`; `forward_inference` is the
/// cheap non-caching path with evaluation-mode statistics. `backward`
/// accumulates parameter gradients when `want_gw` is set and returns the
/// input gradient when `want_gx` is set — the latter is what adversarial
/// perturbation and generator training feed on.
pub trait ImageClassifier {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64>;
    fn forward_inference(&self, x: &Array4<f64>) -> Array2<f64>;
    fn backward(
        &mut self,
        dlogits: &Array2<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array4<f64>>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn num_classes(&self) -> usize;
    fn arch(&self) -> &'static str;
    /// Pooled features right before the classification head (inference
    /// statistics, no caching). This is the representation used for
    /// clustering and feature-space distances.
    fn penultimate(&self, x: &Array4<f64>) -> Array2<f64>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_weights(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }
}

/// Instantiate a classifier by architecture name.
///
/// `width` scales every channel count; pass 0 for the architecture default.
/// Initialization is fully determined by `seed`.
pub fn build_classifier(
    arch: &str,
    num_classes: usize,
    width: usize,
    seed: u64,
) -> Result<Box<dyn ImageClassifier>> {
    if num_classes < 2 {
        return Err(SegueError::Config(format!(
            "classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    match arch {
        "cnn6" => Ok(Box::new(SmallCnn::new(
            num_classes,
            if width == 0 { 12 } else { width },
            seed,
        ))),
        "resnet8" => Ok(Box::new(SmallResNet::new(
            num_classes,
            if width == 0 { 16 } else { width },
            seed,
        ))),
        "dwsep8" => Ok(Box::new(DwSepNet::new(
            num_classes,
            if width == 0 { 16 } else { width },
            seed,
        ))),
        other => Err(SegueError::Config(format!(
            "unknown architecture '{other}' (expected cnn6, resnet8, or dwsep8)"
        ))),
    }
}

/// Six conv blocks with stride-2 downsampling at blocks 2, 4, and 6.
pub struct SmallCnn {
    blocks: Vec<ConvBlock>,
    head: Linear,
    num_classes: usize,
    feat_hw: (usize, usize),
}

impl SmallCnn {
    pub fn new(num_classes: usize, c: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "model-cnn6");
        let blocks = vec![
            ConvBlock::new(3, c, 3, 1, &mut rng),
            ConvBlock::new(c, 2 * c, 3, 2, &mut rng),
            ConvBlock::new(2 * c, 2 * c, 3, 1, &mut rng),
            ConvBlock::new(2 * c, 4 * c, 3, 2, &mut rng),
            ConvBlock::new(4 * c, 4 * c, 3, 1, &mut rng),
            ConvBlock::new(4 * c, 4 * c, 3, 2, &mut rng),
        ];
        let head = Linear::new(4 * c, num_classes, &mut rng);
        SmallCnn { blocks, head, num_classes, feat_hw: (0, 0) }
    }
}

impl ImageClassifier for SmallCnn {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, mode, true);
        }
        self.feat_hw = (h.dim().2, h.dim().3);
        let pooled = global_avg_pool(&h);
        self.head.forward(&pooled, true)
    }

    fn forward_inference(&self, x: &Array4<f64>) -> Array2<f64> {
        self.head.infer(&self.penultimate(x))
    }

    fn penultimate(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h);
        }
        global_avg_pool(&h)
    }

    fn backward(
        &mut self,
        dlogits: &Array2<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array4<f64>> {
        let gp = self
            .head
            .backward(dlogits, true, want_gw)
            .expect("head backward always returns an input gradient here");
        let mut g = global_avg_pool_backward(&gp, self.feat_hw.0, self.feat_hw.1);
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            let need_gx = want_gx || i > 0;
            match b.backward(&g, need_gx, want_gw) {
                Some(gx) => g = gx,
                None => return None,
            }
        }
        want_gx.then_some(g)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = Vec::new();
        for b in &mut self.blocks {
            ps.extend(b.params_mut());
        }
        ps.extend(self.head.params_mut());
        ps
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn arch(&self) -> &'static str {
        "cnn6"
    }
}

/// One residual block: ConvBlock, then conv+bn, joined with a (possibly
/// projected) skip and a final ReLU.
struct ResBlock {
    a: ConvBlock,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    short: Option<(Conv2d, BatchNorm2d)>,
    relu_out: ReLU,
}

impl ResBlock {
    fn new(
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let short = (stride != 1 || c_in != c_out).then(|| {
            (Conv2d::new(c_in, c_out, 1, stride, 0, rng), BatchNorm2d::new(c_out, rng))
        });
        ResBlock {
            a: ConvBlock::new(c_in, c_out, 3, stride, rng),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(c_out, rng),
            short,
            relu_out: ReLU::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode, cache: bool) -> Array4<f64> {
        let h = self.a.forward(x, mode, cache);
        let h = self.conv2.forward(&h, cache);
        let h = self.bn2.forward(&h, mode, cache);
        let s = match &mut self.short {
            Some((conv, bn)) => {
                let s = conv.forward(x, cache);
                bn.forward(&s, mode, cache)
            }
            None => x.clone(),
        };
        self.relu_out.forward(&(&h + &s), cache)
    }

    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.bn2.infer(&self.conv2.infer(&self.a.infer(x)));
        let s = match &self.short {
            Some((conv, bn)) => bn.infer(&conv.infer(x)),
            None => x.clone(),
        };
        self.relu_out.infer(&(&h + &s))
    }

    /// Residual blocks always sit behind the stem, so the input gradient is
    /// always needed and always returned.
    fn backward(&mut self, gy: &Array4<f64>, want_gw: bool) -> Array4<f64> {
        let g = self.relu_out.backward(gy);
        let gh = self
            .bn2
            .backward(&g, true, want_gw)
            .expect("bn backward returns input gradient");
        let gh = self
            .conv2
            .backward(&gh, true, want_gw)
            .expect("conv backward returns input gradient");
        let gx_main = self
            .a
            .backward(&gh, true, want_gw)
            .expect("conv block backward returns input gradient");
        let gx_short = match &mut self.short {
            Some((conv, bn)) => {
                let gs = bn
                    .backward(&g, true, want_gw)
                    .expect("bn backward returns input gradient");
                conv.backward(&gs, true, want_gw)
                    .expect("conv backward returns input gradient")
            }
            None => g,
        };
        gx_main + gx_short
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.a.params_mut();
        ps.extend(self.conv2.params_mut());
        ps.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.short {
            ps.extend(conv.params_mut());
            ps.extend(bn.params_mut());
        }
        ps
    }
}

/// Stem plus three residual blocks (widths c, 2c, 4c; strides 1, 2, 2).
pub struct SmallResNet {
    stem: ConvBlock,
    blocks: Vec<ResBlock>,
    head: Linear,
    num_classes: usize,
    feat_hw: (usize, usize),
}

impl SmallResNet {
    pub fn new(num_classes: usize, c: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "model-resnet8");
        let stem = ConvBlock::new(3, c, 3, 1, &mut rng);
        let blocks = vec![
            ResBlock::new(c, c, 1, &mut rng),
            ResBlock::new(c, 2 * c, 2, &mut rng),
            ResBlock::new(2 * c, 4 * c, 2, &mut rng),
        ];
        let head = Linear::new(4 * c, num_classes, &mut rng);
        SmallResNet { stem, blocks, head, num_classes, feat_hw: (0, 0) }
    }
}

impl ImageClassifier for SmallResNet {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let mut h = self.stem.forward(x, mode, true);
        for b in &mut self.blocks {
            h = b.forward(&h, mode, true);
        }
        self.feat_hw = (h.dim().2, h.dim().3);
        self.head.forward(&global_avg_pool(&h), true)
    }

    fn forward_inference(&self, x: &Array4<f64>) -> Array2<f64> {
        self.head.infer(&self.penultimate(x))
    }

    fn penultimate(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut h = self.stem.infer(x);
        for b in &self.blocks {
            h = b.infer(&h);
        }
        global_avg_pool(&h)
    }

    fn backward(
        &mut self,
        dlogits: &Array2<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array4<f64>> {
        let gp = self
            .head
            .backward(dlogits, true, want_gw)
            .expect("head backward returns input gradient");
        let mut g = global_avg_pool_backward(&gp, self.feat_hw.0, self.feat_hw.1);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g, want_gw);
        }
        self.stem.backward(&g, want_gx, want_gw)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.stem.params_mut();
        for b in &mut self.blocks {
            ps.extend(b.params_mut());
        }
        ps.extend(self.head.params_mut());
        ps
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn arch(&self) -> &'static str {
        "resnet8"
    }
}

/// Depthwise 3x3 + pointwise 1x1, each followed by batch norm and ReLU.
struct DwBlock {
    dw: DwConv2d,
    bn1: BatchNorm2d,
    relu1: ReLU,
    pw: Conv2d,
    bn2: BatchNorm2d,
    relu2: ReLU,
}

impl DwBlock {
    fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        DwBlock {
            dw: DwConv2d::new(c_in, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(c_in, rng),
            relu1: ReLU::new(),
            pw: Conv2d::new(c_in, c_out, 1, 1, 0, rng),
            bn2: BatchNorm2d::new(c_out, rng),
            relu2: ReLU::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode, cache: bool) -> Array4<f64> {
        let h = self.dw.forward(x, cache);
        let h = self.bn1.forward(&h, mode, cache);
        let h = self.relu1.forward(&h, cache);
        let h = self.pw.forward(&h, cache);
        let h = self.bn2.forward(&h, mode, cache);
        self.relu2.forward(&h, cache)
    }

    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.relu1.infer(&self.bn1.infer(&self.dw.infer(x)));
        self.relu2.infer(&self.bn2.infer(&self.pw.infer(&h)))
    }

    fn backward(&mut self, gy: &Array4<f64>, want_gx: bool, want_gw: bool) -> Option<Array4<f64>> {
        let g = self.relu2.backward(gy);
        let g = self.bn2.backward(&g, true, want_gw).expect("bn returns gradient");
        let g = self.pw.backward(&g, true, want_gw).expect("conv returns gradient");
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g, true, want_gw).expect("bn returns gradient");
        self.dw.backward(&g, want_gx, want_gw)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.dw.params_mut();
        ps.extend(self.bn1.params_mut());
        ps.extend(self.pw.params_mut());
        ps.extend(self.bn2.params_mut());
        ps
    }
}

/// Stem plus four depthwise-separable blocks (strides 2,1,2,1).
pub struct DwSepNet {
    stem: ConvBlock,
    blocks: Vec<DwBlock>,
    head: Linear,
    num_classes: usize,
    feat_hw: (usize, usize),
}

impl DwSepNet {
    pub fn new(num_classes: usize, c: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "model-dwsep8");
        let stem = ConvBlock::new(3, c, 3, 1, &mut rng);
        let blocks = vec![
            DwBlock::new(c, 2 * c, 2, &mut rng),
            DwBlock::new(2 * c, 2 * c, 1, &mut rng),
            DwBlock::new(2 * c, 4 * c, 2, &mut rng),
            DwBlock::new(4 * c, 4 * c, 1, &mut rng),
        ];
        let head = Linear::new(4 * c, num_classes, &mut rng);
        DwSepNet { stem, blocks, head, num_classes, feat_hw: (0, 0) }
    }
}

impl ImageClassifier for DwSepNet {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let mut h = self.stem.forward(x, mode, true);
        for b in &mut self.blocks {
            h = b.forward(&h, mode, true);
        }
        self.feat_hw = (h.dim().2, h.dim().3);
        self.head.forward(&global_avg_pool(&h), true)
    }

    fn forward_inference(&self, x: &Array4<f64>) -> Array2<f64> {
        self.head.infer(&self.penultimate(x))
    }

    fn penultimate(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut h = self.stem.infer(x);
        for b in &self.blocks {
            h = b.infer(&h);
        }
        global_avg_pool(&h)
    }

    fn backward(
        &mut self,
        dlogits: &Array2<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array4<f64>> {
        let gp = self
            .head
            .backward(dlogits, true, want_gw)
            .expect("head backward returns input gradient");
        let mut g = global_avg_pool_backward(&gp, self.feat_hw.0, self.feat_hw.1);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g, true, want_gw).expect("dw blocks always propagate");
        }
        self.stem.backward(&g, want_gx, want_gw)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.stem.params_mut();
        for b in &mut self.blocks {
            ps.extend(b.params_mut());
        }
        ps.extend(self.head.params_mut());
        ps
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn arch(&self) -> &'static str {
        "dwsep8"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::softmax_ce;
    use crate::util::rng::rng_for;
    use rand::Rng;

    fn random_images(n: usize, hw: usize, seed: u64) -> Array4<f64> {
        let mut rng = rng_for(seed, "model-test");
        Array4::from_shape_fn((n, 3, hw, hw), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn all_architectures_produce_logits_and_gradients() {
        for arch in ["cnn6", "resnet8", "dwsep8"] {
            let mut model = build_classifier(arch, 5, 8, 42).unwrap();
            let x = random_images(2, 16, 7);
            let logits = model.forward(&x, Mode::Train);
            assert_eq!(logits.dim(), (2, 5), "{arch} logit shape");
            assert!(logits.iter().all(|v| v.is_finite()), "{arch} logits finite");
            let (_, dl) = softmax_ce(&logits.view(), &[0, 3]);
            let gx = model.backward(&dl, true, true).unwrap();
            assert_eq!(gx.dim(), x.dim(), "{arch} input gradient shape");
            assert!(gx.iter().all(|v| v.is_finite()), "{arch} gradient finite");
            let total: f64 = model.params_mut().iter().map(|p| p.grad.mapv(f64::abs).sum()).sum();
            assert!(total > 0.0, "{arch} accumulated some parameter gradient");
        }
    }

    #[test]
    fn unknown_arch_is_a_config_error() {
        match build_classifier("vgg", 10, 0, 1) {
            Ok(_) => panic!("unknown architecture must be rejected"),
            Err(err) => assert_eq!(err.exit_code(), 2),
        }
    }

    #[test]
    fn same_seed_same_weights_different_seed_different_weights() {
        let mut a = SmallCnn::new(4, 8, 1);
        let mut b = SmallCnn::new(4, 8, 1);
        let mut c = SmallCnn::new(4, 8, 2);
        let wa: Vec<f64> = a.params_mut().iter().flat_map(|p| p.value.iter().cloned().collect::<Vec<_>>()).collect();
        let wb: Vec<f64> = b.params_mut().iter().flat_map(|p| p.value.iter().cloned().collect::<Vec<_>>()).collect();
        let wc: Vec<f64> = c.params_mut().iter().flat_map(|p| p.value.iter().cloned().collect::<Vec<_>>()).collect();
        assert_eq!(wa, wb);
        assert_ne!(wa, wc);
    }

    /// End-to-end gradient check through a whole classifier: CE loss on a
    /// tiny cnn6, spot-checking parameter and input coordinates. Eval-mode
    /// batch norm keeps every evaluation at identical statistics.
    #[test]
    fn cnn6_loss_gradient_matches_finite_differences() {
        let mut model = SmallCnn::new(3, 4, 9);
        let x = random_images(2, 8, 10);
        let labels = [1u32, 2];
        // Prime running stats so eval mode is non-degenerate.
        for _ in 0..3 {
            model.forward(&x, Mode::Train);
        }
        model.zero_grad();
        let logits = model.forward(&x, Mode::Eval);
        let (_, dl) = softmax_ce(&logits.view(), &labels);
        let gx = model.backward(&dl, true, true).unwrap();

        let loss_at = |model: &SmallCnn, x: &Array4<f64>| -> f64 {
            softmax_ce(&model.forward_inference(x).view(), &labels).0
        };

        let h = 1e-6;
        // One weight from each parameter tensor of the first and last block
        // plus the head.
        {
            let grads: Vec<f64> = model
                .params_mut()
                .iter()
                .map(|p| p.grad.as_slice().unwrap()[0])
                .collect();
            for (pi, want) in grads.iter().enumerate() {
                let orig = model.params_mut()[pi].value.as_slice().unwrap()[0];
                model.params_mut()[pi].value.as_slice_mut().unwrap()[0] = orig + h;
                let fp = loss_at(&model, &x);
                model.params_mut()[pi].value.as_slice_mut().unwrap()[0] = orig - h;
                let fm = loss_at(&model, &x);
                model.params_mut()[pi].value.as_slice_mut().unwrap()[0] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let denom = fd.abs().max(want.abs()).max(1e-6);
                assert!(
                    (fd - want).abs() / denom < 1e-3,
                    "param {pi}[0]: fd {fd} vs analytic {want}"
                );
            }
        }
        for idx in [0usize, 100, 200, 350] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss_at(&model, &xp) - loss_at(&model, &xm)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "x[{idx}]: fd {fd} vs analytic {an}"
            );
        }
    }
}
