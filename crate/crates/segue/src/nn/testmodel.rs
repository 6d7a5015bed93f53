//! A bias-free linear classifier over flattened pixels, used across test
//! modules wherever a closed-form gradient oracle is needed: the logits are
//! `flatten(x) . W`, so `d loss / d x = reshape(dlogits . W^T)` exactly.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ImageClassifier, Init, Mode, Param};

pub(crate) struct LinearTestModel {
    pub w: Param, // [F, K] stored flat
    pub feat: (usize, usize, usize),
    pub classes: usize,
    cache_x: Option<Array2<f64>>,
}

impl LinearTestModel {
    pub fn new(feat: (usize, usize, usize), classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let f = feat.0 * feat.1 * feat.2;
        let mut w = Param::new(&[f, classes], Init::Zeros, rng);
        for v in w.value.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        LinearTestModel { w, feat, classes, cache_x: None }
    }

    pub fn weight_matrix(&self) -> Array2<f64> {
        let f = self.feat.0 * self.feat.1 * self.feat.2;
        self.w
            .value
            .view()
            .into_shape_with_order((f, self.classes))
            .unwrap()
            .to_owned()
    }

    fn flatten(&self, x: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        x.to_shape((n, c * h * w)).unwrap().to_owned()
    }

    fn logits(&self, x: &Array4<f64>) -> (Array2<f64>, Array2<f64>) {
        let xf = self.flatten(x);
        let out = xf.dot(&self.weight_matrix());
        (out, xf)
    }
}

impl ImageClassifier for LinearTestModel {
    fn forward(&mut self, x: &Array4<f64>, _mode: Mode) -> Array2<f64> {
        let (out, xf) = self.logits(x);
        self.cache_x = Some(xf);
        out
    }

    fn forward_inference(&self, x: &Array4<f64>) -> Array2<f64> {
        self.logits(x).0
    }

    fn backward(
        &mut self,
        dlogits: &Array2<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array4<f64>> {
        let xf = self.cache_x.take().expect("forward before backward");
        if want_gw {
            let gw = xf.t().dot(dlogits);
            self.w.grad.zip_mut_with(&gw.into_dyn(), |a, b| *a += b);
        }
        if want_gx {
            let gx = dlogits.dot(&self.weight_matrix().t().to_owned());
            let n = gx.nrows();
            let (c, h, w) = self.feat;
            Some(gx.into_shape_with_order((n, c, h, w)).unwrap())
        } else {
            None
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w]
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn arch(&self) -> &'static str {
        "linear-test"
    }

    fn penultimate(&self, x: &Array4<f64>) -> Array2<f64> {
        self.flatten(x)
    }
}
