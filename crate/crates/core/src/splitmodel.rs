//! Per-client split architecture: a global and an optional personalized
//! feature extractor, a global and an optional personalized head, and an
//! optional personalized vector added to the representation.
//!
//! The representation is h = f_g(x) [+ f_p(x)] [+ pp]; logits are
//! s_g(h) [+ s_p(h)]. The personalized vector lives in feature space; the
//! `pp_on_logits` switch moves it to the logits instead (only meaningful when
//! the feature and label dimensions coincide).

use rand_chacha::ChaCha8Rng;

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy, cross_entropy_grad, sgd_step, sgd_step_tensor, Activation, Init, Mlp, MlpCache,
    MlpGrads, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    /// Input dimension U.
    pub input_dim: usize,
    /// Representation dimension D.
    pub feature_dim: usize,
    /// Label dimension C.
    pub class_count: usize,
    /// Hidden width of the two-layer extractors.
    pub hidden_dim: usize,
    /// Personalized feature extractor enabled.
    pub enable_fp: bool,
    /// Personalized head enabled.
    pub enable_sp: bool,
    /// Personalized vector enabled.
    pub enable_pp: bool,
    /// Add the personalized vector to the logits instead of the
    /// representation; requires feature_dim == class_count.
    pub pp_on_logits: bool,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.enable_fp || self.enable_sp || self.enable_pp) {
            return Err(Error::InvalidParameter {
                name: "split_config",
                message: "at least one personalized element must be enabled".into(),
            });
        }
        if self.pp_on_logits && !self.enable_pp {
            return Err(Error::InvalidParameter {
                name: "pp_on_logits",
                message: "requires enable_pp".into(),
            });
        }
        if self.pp_on_logits && self.feature_dim != self.class_count {
            return Err(Error::InvalidParameter {
                name: "pp_on_logits",
                message: format!(
                    "requires feature_dim == class_count, got {} vs {}",
                    self.feature_dim, self.class_count
                ),
            });
        }
        if self.input_dim == 0 || self.feature_dim == 0 || self.class_count < 2 || self.hidden_dim == 0
        {
            return Err(Error::InvalidParameter {
                name: "split_config",
                message: "dimensions must be positive and class_count >= 2".into(),
            });
        }
        Ok(())
    }

    /// Dimension of the personalized vector (feature or label space).
    pub fn pp_dim(&self) -> usize {
        if self.pp_on_logits {
            self.class_count
        } else {
            self.feature_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    pub config: SplitConfig,
    pub global_extractor: Mlp,
    pub personal_extractor: Option<Mlp>,
    pub global_head: Mlp,
    pub personal_head: Option<Mlp>,
    pub personal_vector: Option<Tensor>,
    /// Excludes the personalized vector from SGD updates.
    pub pp_frozen: bool,
}

/// Forward-pass state for one sample, consumed by `backward`.
pub struct SplitCache {
    input: Vec<f64>,
    global_extractor: MlpCache,
    personal_extractor: Option<MlpCache>,
    global_head: MlpCache,
    personal_head: Option<MlpCache>,
}

/// Gradients shaped like the model.
pub struct SplitGrads {
    pub global_extractor: MlpGrads,
    pub personal_extractor: Option<MlpGrads>,
    pub global_head: MlpGrads,
    pub personal_head: Option<MlpGrads>,
    pub personal_vector: Option<Vec<f64>>,
}

impl SplitModel {
    /// Build a model; global submodules come from `global_rng` (the server
    /// broadcasts one shared init), personalized ones from `personal_rng`.
    pub fn init(
        config: SplitConfig,
        global_rng: &mut ChaCha8Rng,
        personal_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let ext_dims = [config.input_dim, config.hidden_dim, config.feature_dim];
        let head_dims = [config.feature_dim, config.class_count];
        // LeakyReLU keeps every hidden unit live; dead ReLU layers would emit
        // exact-zero representations, which the energy scoring treats as
        // degenerate experts.
        let hidden_act = Activation::LeakyRelu(0.01);
        let global_extractor = Mlp::init(&ext_dims, hidden_act, Init::HeNormal, global_rng);
        let global_head = Mlp::init(&head_dims, Activation::None, Init::HeNormal, global_rng);
        let personal_extractor = config
            .enable_fp
            .then(|| Mlp::init(&ext_dims, hidden_act, Init::HeNormal, personal_rng));
        let personal_head = config
            .enable_sp
            .then(|| Mlp::init(&head_dims, Activation::None, Init::HeNormal, personal_rng));
        let personal_vector = config.enable_pp.then(|| Tensor::zeros(vec![config.pp_dim()]));
        Ok(SplitModel {
            config,
            global_extractor,
            personal_extractor,
            global_head,
            personal_head,
            personal_vector,
            pp_frozen: false,
        })
    }

    /// Representation and logits for one input.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                context: "SplitModel::forward",
                lhs: vec![x.len()],
                rhs: vec![self.config.input_dim],
            });
        }
        let mut h = self.global_extractor.forward(x);
        if let Some(fe) = &self.personal_extractor {
            for (hv, pv) in h.iter_mut().zip(fe.forward(x)) {
                *hv += pv;
            }
        }
        if !self.config.pp_on_logits {
            if let Some(pp) = &self.personal_vector {
                for (hv, pv) in h.iter_mut().zip(pp.data()) {
                    *hv += pv;
                }
            }
        }
        let mut logits = self.global_head.forward(&h);
        if let Some(hd) = &self.personal_head {
            for (lv, pv) in logits.iter_mut().zip(hd.forward(&h)) {
                *lv += pv;
            }
        }
        if self.config.pp_on_logits {
            if let Some(pp) = &self.personal_vector {
                for (lv, pv) in logits.iter_mut().zip(pp.data()) {
                    *lv += pv;
                }
            }
        }
        Ok((h, logits))
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, SplitCache)> {
        if x.len() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                context: "SplitModel::forward_cached",
                lhs: vec![x.len()],
                rhs: vec![self.config.input_dim],
            });
        }
        let (mut h, g_cache) = self.global_extractor.forward_cached(x);
        let p_cache = match &self.personal_extractor {
            Some(fe) => {
                let (out, cache) = fe.forward_cached(x);
                for (hv, pv) in h.iter_mut().zip(out) {
                    *hv += pv;
                }
                Some(cache)
            }
            None => None,
        };
        if !self.config.pp_on_logits {
            if let Some(pp) = &self.personal_vector {
                for (hv, pv) in h.iter_mut().zip(pp.data()) {
                    *hv += pv;
                }
            }
        }
        let (mut logits, gh_cache) = self.global_head.forward_cached(&h);
        let ph_cache = match &self.personal_head {
            Some(hd) => {
                let (out, cache) = hd.forward_cached(&h);
                for (lv, pv) in logits.iter_mut().zip(out) {
                    *lv += pv;
                }
                Some(cache)
            }
            None => None,
        };
        if self.config.pp_on_logits {
            if let Some(pp) = &self.personal_vector {
                for (lv, pv) in logits.iter_mut().zip(pp.data()) {
                    *lv += pv;
                }
            }
        }
        Ok((
            logits,
            SplitCache {
                input: x.to_vec(),
                global_extractor: g_cache,
                personal_extractor: p_cache,
                global_head: gh_cache,
                personal_head: ph_cache,
            },
        ))
    }

    pub fn zero_grads(&self) -> SplitGrads {
        SplitGrads {
            global_extractor: self.global_extractor.zero_grads(),
            personal_extractor: self.personal_extractor.as_ref().map(|m| m.zero_grads()),
            global_head: self.global_head.zero_grads(),
            personal_head: self.personal_head.as_ref().map(|m| m.zero_grads()),
            personal_vector: self.personal_vector.as_ref().map(|t| vec![0.0; t.len()]),
        }
    }

    /// Accumulate gradients for every submodule from d(loss)/d(logits).
    pub fn backward(&self, cache: &SplitCache, dlogits: &[f64], grads: &mut SplitGrads) {
        let mut dh = self
            .global_head
            .backward(&cache.global_head, dlogits, &mut grads.global_head);
        if let (Some(hd), Some(hd_cache), Some(hd_grads)) = (
            &self.personal_head,
            &cache.personal_head,
            grads.personal_head.as_mut(),
        ) {
            let d = hd.backward(hd_cache, dlogits, hd_grads);
            for (a, b) in dh.iter_mut().zip(d) {
                *a += b;
            }
        }
        if let (Some(pp_grad), false) = (grads.personal_vector.as_mut(), self.config.pp_on_logits) {
            for (g, d) in pp_grad.iter_mut().zip(&dh) {
                *g += d;
            }
        }
        if let (Some(pp_grad), true) = (grads.personal_vector.as_mut(), self.config.pp_on_logits) {
            for (g, d) in pp_grad.iter_mut().zip(dlogits) {
                *g += d;
            }
        }
        self.global_extractor
            .backward(&cache.global_extractor, &dh, &mut grads.global_extractor);
        if let (Some(fe), Some(fe_cache), Some(fe_grads)) = (
            &self.personal_extractor,
            &cache.personal_extractor,
            grads.personal_extractor.as_mut(),
        ) {
            fe.backward(fe_cache, &dh, fe_grads);
        }
        let _ = &cache.input;
    }

    /// Apply one SGD step from accumulated gradients; frozen parts stay put.
    pub fn apply_sgd(&mut self, grads: &SplitGrads, lr: f64) -> Result<()> {
        sgd_step(&mut self.global_extractor, &grads.global_extractor, lr)?;
        sgd_step(&mut self.global_head, &grads.global_head, lr)?;
        if let (Some(fe), Some(g)) = (self.personal_extractor.as_mut(), &grads.personal_extractor) {
            sgd_step(fe, g, lr)?;
        }
        if let (Some(hd), Some(g)) = (self.personal_head.as_mut(), &grads.personal_head) {
            sgd_step(hd, g, lr)?;
        }
        if let (Some(pp), Some(g)) = (self.personal_vector.as_mut(), &grads.personal_vector) {
            sgd_step_tensor(pp, g, lr, self.pp_frozen)?;
        }
        Ok(())
    }

    /// Per-sample SGD on cross-entropy for `epochs` passes over `data`,
    /// returning the mean loss of each epoch. Sample order is reshuffled each
    /// epoch from `rng`.
    pub fn local_train(
        &mut self,
        data: &LabeledDataset,
        epochs: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        use rand::seq::SliceRandom;
        if data.is_empty() {
            return Err(Error::EmptyInput {
                context: "local_train",
            });
        }
        let mut trace = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut loss_sum = 0.0;
            for &i in &order {
                let sample = &data.samples()[i];
                let (logits, cache) = self.forward_cached(&sample.features)?;
                loss_sum += cross_entropy(&logits, sample.label)?;
                let dlogits = cross_entropy_grad(&logits, sample.label)?;
                let mut grads = self.zero_grads();
                self.backward(&cache, &dlogits, &mut grads);
                self.apply_sgd(&grads, lr)?;
            }
            if !loss_sum.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "lr",
                    message: format!("training diverged (non-finite loss) at lr = {lr}"),
                });
            }
            trace.push(loss_sum / data.len() as f64);
        }
        Ok(trace)
    }

    /// Fraction of samples whose argmax logit matches the label.
    pub fn evaluate(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput { context: "evaluate" });
        }
        let mut correct = 0usize;
        for s in data.samples() {
            let (_, logits) = self.forward(&s.features)?;
            if argmax(&logits) == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Named views of the globally shared parameters.
    pub fn global_named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.global_extractor.named_params("global_extractor");
        out.extend(self.global_head.named_params("global_head"));
        out
    }

    /// Named views of the personalized parameters.
    pub fn personal_named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(fe) = &self.personal_extractor {
            out.extend(fe.named_params("personal_extractor"));
        }
        if let Some(hd) = &self.personal_head {
            out.extend(hd.named_params("personal_head"));
        }
        if let Some(pp) = &self.personal_vector {
            out.push(("personal_vector".to_string(), pp));
        }
        out
    }

    /// Complete, disjoint split of every parameter into (global, personalized).
    pub fn split_params(&self) -> (Vec<(String, &Tensor)>, Vec<(String, &Tensor)>) {
        (self.global_named(), self.personal_named())
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.global_extractor.named_params_mut("global_extractor");
        out.extend(self.global_head.named_params_mut("global_head"));
        if let Some(fe) = self.personal_extractor.as_mut() {
            out.extend(fe.named_params_mut("personal_extractor"));
        }
        if let Some(hd) = self.personal_head.as_mut() {
            out.extend(hd.named_params_mut("personal_head"));
        }
        if let Some(pp) = self.personal_vector.as_mut() {
            out.push(("personal_vector".to_string(), pp));
        }
        out
    }

    /// Freeze or unfreeze the globally shared submodules.
    pub fn set_global_frozen(&mut self, frozen: bool) {
        self.global_extractor.frozen = frozen;
        self.global_head.frozen = frozen;
    }

    /// Freeze or unfreeze the personalized submodules.
    pub fn set_personal_frozen(&mut self, frozen: bool) {
        if let Some(fe) = self.personal_extractor.as_mut() {
            fe.frozen = frozen;
        }
        if let Some(hd) = self.personal_head.as_mut() {
            hd.frozen = frozen;
        }
        self.pp_frozen = frozen;
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::datagen::generate_synthetic;
    use crate::numerics::LinearLayer;
    use crate::rng;

    fn test_config() -> SplitConfig {
        SplitConfig {
            input_dim: 4,
            feature_dim: 3,
            class_count: 2,
            hidden_dim: 5,
            enable_fp: true,
            enable_sp: true,
            enable_pp: true,
            pp_on_logits: false,
        }
    }

    fn make_model(config: SplitConfig, seed: u64) -> SplitModel {
        SplitModel::init(
            config,
            &mut rng::stream(seed, &[rng::tag::INIT_GLOBAL]),
            &mut rng::stream(seed, &[rng::tag::INIT_PERSONAL, 0]),
        )
        .unwrap()
    }

    #[test]
    fn config_requires_personalized_element() {
        let mut c = test_config();
        c.enable_fp = false;
        c.enable_sp = false;
        c.enable_pp = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn three_split_families_are_expressible() {
        for (fp, sp, pp) in [(true, false, false), (false, true, false), (false, false, true)] {
            let c = SplitConfig {
                enable_fp: fp,
                enable_sp: sp,
                enable_pp: pp,
                ..test_config()
            };
            c.validate().unwrap();
            let m = make_model(c, 3);
            assert_eq!(m.personal_extractor.is_some(), fp);
            assert_eq!(m.personal_head.is_some(), sp);
            assert_eq!(m.personal_vector.is_some(), pp);
            m.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        }
    }

    #[test]
    fn disabled_branch_identity() {
        // fp off, pp present but zero: h is exactly the global extractor output.
        let c = SplitConfig {
            enable_fp: false,
            ..test_config()
        };
        let model = make_model(c, 1);
        let x = [0.5, -0.2, 0.8, 0.0];
        let (h, _) = model.forward(&x).unwrap();
        assert_eq!(h, model.global_extractor.forward(&x));
    }

    #[test]
    fn zero_weights_pass_pp_through() {
        let mut model = make_model(test_config(), 2);
        for (_, t) in model.named_params_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let v = vec![0.7, -1.0, 0.25];
        *model.personal_vector.as_mut().unwrap() = Tensor::from_vec(v.clone());
        let (h, logits) = model.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(h, v);
        // All head weights zero -> logits are the (zero) biases.
        assert_eq!(logits, vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_sum_of_extractors() {
        // Single-layer linear extractors with hand-set 2x2 weights, x = [1, 0].
        let c = SplitConfig {
            input_dim: 2,
            feature_dim: 2,
            class_count: 2,
            hidden_dim: 1, // unused once layers are replaced
            enable_fp: true,
            enable_sp: false,
            enable_pp: true,
            pp_on_logits: false,
        };
        let mut model = make_model(c, 0);
        model.global_extractor = Mlp::new(vec![LinearLayer::new(
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::zeros(vec![2]),
            Activation::None,
        )
        .unwrap()]);
        model.personal_extractor = Some(Mlp::new(vec![LinearLayer::new(
            Tensor::matrix(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap(),
            Tensor::zeros(vec![2]),
            Activation::None,
        )
        .unwrap()]));
        *model.personal_vector.as_mut().unwrap() = Tensor::from_vec(vec![0.5, 0.5]);
        let (h, _) = model.forward(&[1.0, 0.0]).unwrap();
        // f_g = [1, 3], f_p = [10, 0], pp = [0.5, 0.5]
        assert_eq!(h, vec![11.5, 3.5]);
    }

    #[test]
    fn head_additivity() {
        let model = make_model(test_config(), 5);
        let x = [0.3, -0.1, 0.9, 0.4];
        let (h, logits) = model.forward(&x).unwrap();
        let separate: Vec<f64> = model
            .global_head
            .forward(&h)
            .iter()
            .zip(model.personal_head.as_ref().unwrap().forward(&h))
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in logits.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_train_zero_lr_is_identity() {
        let data = generate_synthetic(2, 4, 6, 0.1, 8).unwrap();
        let mut model = make_model(test_config(), 8);
        let before = model.clone();
        model
            .local_train(&data, 3, 0.0, &mut rng::stream(8, &[1]))
            .unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn local_train_fits_separable_fixture() {
        let data = generate_synthetic(2, 4, 20, 0.1, 12).unwrap();
        let mut model = make_model(test_config(), 12);
        let trace = model
            .local_train(&data, 50, 0.05, &mut rng::stream(12, &[2]))
            .unwrap();
        assert_eq!(trace.len(), 50);
        assert!(
            trace.last().unwrap() < &trace[0],
            "loss did not decrease: {trace:?}"
        );
        let acc = model.evaluate(&data).unwrap();
        assert_eq!(acc, 1.0, "separable fixture should be fit exactly");
    }

    #[test]
    fn local_train_deterministic() {
        let data = generate_synthetic(2, 4, 10, 0.2, 3).unwrap();
        let mut a = make_model(test_config(), 3);
        let mut b = make_model(test_config(), 3);
        a.local_train(&data, 5, 0.05, &mut rng::stream(3, &[9])).unwrap();
        b.local_train(&data, 5, 0.05, &mut rng::stream(3, &[9])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn local_train_rejects_empty_data() {
        let data = LabeledDataset::new(vec![], 4, 2).unwrap();
        let mut model = make_model(test_config(), 1);
        assert!(model.local_train(&data, 1, 0.1, &mut rng::stream(0, &[0])).is_err());
    }

    #[test]
    fn split_params_complete_and_disjoint() {
        let model = make_model(test_config(), 4);
        let (global, personal) = model.split_params();
        // fe: 2 layers x (weight, bias), head: 1 layer x (weight, bias), pp
        assert_eq!(personal.len(), 7);
        let global_names: Vec<&String> = global.iter().map(|(n, _)| n).collect();
        for (n, _) in &personal {
            assert!(!global_names.contains(&n));
        }
        // Recombining reconstructs the model bitwise (checkpoint round-trip).
        let mut all: Vec<(String, &Tensor)> = global.clone();
        all.extend(personal.clone());
        let bytes = checkpoint::encode(&all);
        let back = checkpoint::decode(&bytes).unwrap();
        let mut rebuilt = make_model(test_config(), 999);
        for (name, t) in rebuilt.named_params_mut() {
            let (_, src) = back.iter().find(|(n, _)| *n == name).unwrap();
            *t = src.clone();
        }
        assert_eq!(rebuilt, model);
    }

    #[test]
    fn split_params_pp_only_config() {
        let c = SplitConfig {
            enable_fp: false,
            enable_sp: false,
            enable_pp: true,
            ..test_config()
        };
        let model = make_model(c, 4);
        let (_, personal) = model.split_params();
        assert_eq!(personal.len(), 1);
        assert_eq!(personal[0].0, "personal_vector");
    }

    #[test]
    fn frozen_globals_keep_their_bytes() {
        let data = generate_synthetic(2, 4, 10, 0.2, 6).unwrap();
        let mut model = make_model(test_config(), 6);
        model.set_global_frozen(true);
        let global_before = checkpoint::digest(&model.global_named());
        let personal_before = checkpoint::digest(&model.personal_named());
        model
            .local_train(&data, 3, 0.05, &mut rng::stream(6, &[4]))
            .unwrap();
        assert_eq!(checkpoint::digest(&model.global_named()), global_before);
        assert_ne!(checkpoint::digest(&model.personal_named()), personal_before);
    }

    #[test]
    fn pp_on_logits_requires_matching_dims() {
        let mut c = test_config();
        c.pp_on_logits = true;
        assert!(c.validate().is_err());
        c.feature_dim = c.class_count;
        assert!(c.validate().is_ok());
        let model = make_model(c, 7);
        assert_eq!(model.personal_vector.as_ref().unwrap().len(), c.class_count);
        model.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
    }
}
