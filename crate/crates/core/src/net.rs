//! The SpotNet model: a reduced stacked-hourglass backbone at stride 4, a
//! segmentation head whose sigmoid output doubles as a self-attention map,
//! and three detection heads (center heatmap, size, offset).
//!
//! Parameters live in a name-keyed map of plain arrays; every forward pass
//! registers them on a fresh [`Tape`] so the same weights serve training
//! (with gradients) and inference.

use std::collections::BTreeMap;

use ndarray::{Array1, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tape};

/// Initial bias of the heatmap output layer: sigmoid(-ln 9) = 0.1, the
/// focal-loss warm start (predict "rare foreground" before training).
pub fn heatmap_bias_init() -> f64 {
    -(9.0f64).ln()
}

/// Test hook: force the attention map that multiplies the features to a
/// constant, emulating seg logits driven to +/- infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionOverride {
    None,
    /// a -> 1 (logits +inf): attention becomes the identity.
    ForceOne,
    /// a -> 0 (logits -inf): attention annihilates the features.
    ForceZero,
}

/// Node ids of one forward pass, plus the parameter registration map so the
/// caller can read gradients per named parameter after `backward`.
pub struct ForwardPass {
    /// (N, 1, H, W) in (0,1); the all-0.5 placeholder when multitask is off.
    pub attention: NodeId,
    /// (N, n_classes, H/4, W/4) in (0,1).
    pub heatmap: NodeId,
    /// (N, 2, H/4, W/4), width/height in input pixels.
    pub wh: NodeId,
    /// (N, 2, H/4, W/4), sub-stride dx/dy in output-cell units.
    pub offset: NodeId,
    /// name -> tape leaf holding that parameter.
    pub params: BTreeMap<String, NodeId>,
}

/// Plain-array outputs of an inference call.
pub struct NetworkOutput<F: Scalar> {
    pub attention: ArrayD<F>,
    pub heatmap: ArrayD<F>,
    pub wh: ArrayD<F>,
    pub offset: ArrayD<F>,
}

/// Multiply every feature channel by the 4x4-average-pooled attention map.
///
/// `feat` is (N, C, h, w); `att` is (N, 1, 4h, 4w).
pub fn apply_attention<F: Scalar>(
    tape: &mut Tape<F>,
    feat: NodeId,
    att: NodeId,
) -> Result<NodeId> {
    let fs = tape.value(feat).shape().to_vec();
    let as_ = tape.value(att).shape().to_vec();
    if fs.len() != 4 || as_.len() != 4 || as_[1] != 1 || as_[2] != 4 * fs[2] || as_[3] != 4 * fs[3]
    {
        return Err(Error::Shape(format!(
            "apply_attention: feat {fs:?} needs attention (N,1,{},{}), got {as_:?}",
            4 * fs[2],
            4 * fs[3]
        )));
    }
    let pooled = tape.avg_pool(att, 4)?;
    tape.mul_attention(feat, pooled)
}

#[derive(Debug)]
pub struct SpotNet<F: Scalar> {
    pub config: ModelConfig,
    /// Sorted name -> tensor map; the checkpoint format serializes this as-is.
    pub params: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> SpotNet<F> {
    /// Fresh model with fan-in-scaled Gaussian init (He) and the heatmap
    /// bias warm start.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let c = config.base_channels;

        let conv = |params: &mut BTreeMap<String, ArrayD<F>>,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        cout: usize,
                        cin: usize,
                        k: usize| {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("std > 0");
            let w = Array4::<F>::from_shape_fn((cout, cin, k, k), |_| {
                F::of(dist.sample(rng))
            });
            params.insert(format!("{name}.w"), w.into_dyn());
            params.insert(format!("{name}.b"), Array1::<F>::zeros(cout).into_dyn());
        };
        let inorm = |params: &mut BTreeMap<String, ArrayD<F>>, name: &str, ch: usize| {
            params.insert(format!("{name}.gamma"), Array1::<F>::ones(ch).into_dyn());
            params.insert(format!("{name}.beta"), Array1::<F>::zeros(ch).into_dyn());
        };
        let resblock = |params: &mut BTreeMap<String, ArrayD<F>>,
                        rng: &mut ChaCha8Rng,
                        prefix: &str| {
            let cv = |p: &mut BTreeMap<String, ArrayD<F>>, r: &mut ChaCha8Rng, n: &str| {
                let std = (2.0 / (c * 9) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("std > 0");
                let w =
                    Array4::<F>::from_shape_fn((c, c, 3, 3), |_| F::of(dist.sample(r)));
                p.insert(format!("{n}.w"), w.into_dyn());
                p.insert(format!("{n}.b"), Array1::<F>::zeros(c).into_dyn());
            };
            cv(params, rng, &format!("{prefix}.conv1"));
            params.insert(format!("{prefix}.in1.gamma"), Array1::<F>::ones(c).into_dyn());
            params.insert(format!("{prefix}.in1.beta"), Array1::<F>::zeros(c).into_dyn());
            cv(params, rng, &format!("{prefix}.conv2"));
            params.insert(format!("{prefix}.in2.gamma"), Array1::<F>::ones(c).into_dyn());
            params.insert(format!("{prefix}.in2.beta"), Array1::<F>::zeros(c).into_dyn());
        };

        // stem: two stride-2 conv blocks, in_channels -> C/2 -> C
        conv(&mut params, &mut rng, "stem.conv1", c / 2, config.in_channels, 3);
        inorm(&mut params, "stem.in1", c / 2);
        conv(&mut params, &mut rng, "stem.conv2", c, c / 2, 3);
        inorm(&mut params, "stem.in2", c);

        for s in 0..config.n_stacks {
            for d in 0..config.hourglass_depth {
                resblock(&mut params, &mut rng, &format!("stack{s}.hg{d}.up"));
                resblock(&mut params, &mut rng, &format!("stack{s}.hg{d}.pre"));
                resblock(&mut params, &mut rng, &format!("stack{s}.hg{d}.post"));
            }
            resblock(&mut params, &mut rng, &format!("stack{s}.hg_inner"));
            conv(&mut params, &mut rng, &format!("stack{s}.fuse.conv"), c, c, 3);
            inorm(&mut params, &format!("stack{s}.fuse.in"), c);
        }

        // segmentation head: three 3x3 convs, x2 upsampling before 2 and 3
        conv(&mut params, &mut rng, "seg.conv1", c / 2, c, 3);
        conv(&mut params, &mut rng, "seg.conv2", c / 4, c / 2, 3);
        conv(&mut params, &mut rng, "seg.conv3", 1, c / 4, 3);

        // detection heads: 3x3 + relu, then 1x1 projection
        for (name, out) in [
            ("heat", config.n_classes),
            ("wh", 2usize),
            ("off", 2usize),
        ] {
            conv(&mut params, &mut rng, &format!("head.{name}.conv"), c, c, 3);
            conv(&mut params, &mut rng, &format!("head.{name}.out"), out, c, 1);
        }
        params
            .get_mut("head.heat.out.b")
            .expect("just inserted")
            .fill(F::of(heatmap_bias_init()));

        Ok(SpotNet { config, params })
    }

    /// Register every parameter on the tape as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape<F>) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), true)))
            .collect()
    }

    fn p(&self, wires: &BTreeMap<String, NodeId>, name: &str) -> NodeId {
        *wires.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// conv 3x3 (pad 1) -> instance norm -> relu
    fn conv_block(
        &self,
        t: &mut Tape<F>,
        w: &BTreeMap<String, NodeId>,
        name: &str,
        x: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let conv = t.conv2d(
            x,
            self.p(w, &format!("{name}.conv.w")),
            Some(self.p(w, &format!("{name}.conv.b"))),
            stride,
            1,
        )?;
        let normed = t.instance_norm(
            conv,
            self.p(w, &format!("{name}.in.gamma")),
            self.p(w, &format!("{name}.in.beta")),
            1e-5,
        )?;
        Ok(t.relu(normed))
    }

    /// conv-IN-relu-conv-IN + skip, then relu
    fn resblock(
        &self,
        t: &mut Tape<F>,
        w: &BTreeMap<String, NodeId>,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let c1 = t.conv2d(
            x,
            self.p(w, &format!("{prefix}.conv1.w")),
            Some(self.p(w, &format!("{prefix}.conv1.b"))),
            1,
            1,
        )?;
        let n1 = t.instance_norm(
            c1,
            self.p(w, &format!("{prefix}.in1.gamma")),
            self.p(w, &format!("{prefix}.in1.beta")),
            1e-5,
        )?;
        let r1 = t.relu(n1);
        let c2 = t.conv2d(
            r1,
            self.p(w, &format!("{prefix}.conv2.w")),
            Some(self.p(w, &format!("{prefix}.conv2.b"))),
            1,
            1,
        )?;
        let n2 = t.instance_norm(
            c2,
            self.p(w, &format!("{prefix}.in2.gamma")),
            self.p(w, &format!("{prefix}.in2.beta")),
            1e-5,
        )?;
        let sum = t.add(n2, x)?;
        Ok(t.relu(sum))
    }

    /// One encoder–decoder: level 0 is the outermost scale.
    fn hourglass(
        &self,
        t: &mut Tape<F>,
        w: &BTreeMap<String, NodeId>,
        stack: usize,
        level: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let up = self.resblock(t, w, &format!("stack{stack}.hg{level}.up"), x)?;
        let pooled = t.max_pool2(x)?;
        let pre = self.resblock(t, w, &format!("stack{stack}.hg{level}.pre"), pooled)?;
        let mid = if level + 1 < self.config.hourglass_depth {
            self.hourglass(t, w, stack, level + 1, pre)?
        } else {
            self.resblock(t, w, &format!("stack{stack}.hg_inner"), pre)?
        };
        let post = self.resblock(t, w, &format!("stack{stack}.hg{level}.post"), mid)?;
        let shape = t.value(up).shape().to_vec();
        let lifted = t.upsample_bilinear(post, shape[2], shape[3])?;
        t.add(up, lifted)
    }

    /// Image (N, in_channels, H, W) in [0,1] -> stride-4 feature map (N, C, H/4, W/4).
    pub fn backbone_forward(
        &self,
        t: &mut Tape<F>,
        w: &BTreeMap<String, NodeId>,
        image: NodeId,
    ) -> Result<NodeId> {
        let shape = t.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects (N, {}, H, W), got {shape:?}",
                self.config.in_channels
            )));
        }
        let (h, wd) = (shape[2], shape[3]);
        if h % 4 != 0 || wd % 4 != 0 {
            return Err(Error::Shape(format!(
                "input dims must be divisible by 4, got {h}x{wd}"
            )));
        }
        let min = self.config.min_input_side();
        if h < min || wd < min {
            return Err(Error::Shape(format!(
                "input {h}x{wd} too small for hourglass depth {}: need >= {min}",
                self.config.hourglass_depth
            )));
        }
        let c1 = t.conv2d(
            image,
            self.p(w, "stem.conv1.w"),
            Some(self.p(w, "stem.conv1.b")),
            2,
            1,
        )?;
        let n1 = t.instance_norm(
            c1,
            self.p(w, "stem.in1.gamma"),
            self.p(w, "stem.in1.beta"),
            1e-5,
        )?;
        let r1 = t.relu(n1);
        let c2 = t.conv2d(
            r1,
            self.p(w, "stem.conv2.w"),
            Some(self.p(w, "stem.conv2.b")),
            2,
            1,
        )?;
        let n2 = t.instance_norm(
            c2,
            self.p(w, "stem.in2.gamma"),
            self.p(w, "stem.in2.beta"),
            1e-5,
        )?;
        let mut x = t.relu(n2);

        for s in 0..self.config.n_stacks {
            let hg = self.hourglass(t, w, s, 0, x)?;
            let fused = self.conv_block(t, w, &format!("stack{s}.fuse"), hg, 1)?;
            x = t.add(x, fused)?;
        }
        Ok(x)
    }

    /// Stride-4 features -> full-resolution sigmoid map (N, 1, H, W).
    pub fn seg_head(
        &self,
        t: &mut Tape<F>,
        w: &BTreeMap<String, NodeId>,
        feat: NodeId,
    ) -> Result<NodeId> {
        let shape = t.value(feat).shape().to_vec();
        let (h, wd) = (shape[2], shape[3]);
        let c1 = t.conv2d(
            feat,
            self.p(w, "seg.conv1.w"),
            Some(self.p(w, "seg.conv1.b")),
            1,
            1,
        )?;
        let r1 = t.relu(c1);
        let u1 = t.upsample_bilinear(r1, 2 * h, 2 * wd)?;
        let c2 = t.conv2d(
            u1,
            self.p(w, "seg.conv2.w"),
            Some(self.p(w, "seg.conv2.b")),
            1,
            1,
        )?;
        let r2 = t.relu(c2);
        let u2 = t.upsample_bilinear(r2, 4 * h, 4 * wd)?;
        let logits = t.conv2d(
            u2,
            self.p(w, "seg.conv3.w"),
            Some(self.p(w, "seg.conv3.b")),
            1,
            1,
        )?;
        Ok(t.sigmoid(logits))
    }

    /// Features -> (heatmap in (0,1), wh, offset); wh/offset are label-agnostic.
    pub fn detect_heads(
        &self,
        t: &mut Tape<F>,
        w: &BTreeMap<String, NodeId>,
        feat: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let head = |t: &mut Tape<F>, name: &str| -> Result<NodeId> {
            let c1 = t.conv2d(
                feat,
                self.p(w, &format!("head.{name}.conv.w")),
                Some(self.p(w, &format!("head.{name}.conv.b"))),
                1,
                1,
            )?;
            let r1 = t.relu(c1);
            t.conv2d(
                r1,
                self.p(w, &format!("head.{name}.out.w")),
                Some(self.p(w, &format!("head.{name}.out.b"))),
                1,
                0,
            )
        };
        let heat_logits = head(t, "heat")?;
        let heat = t.sigmoid(heat_logits);
        let wh = head(t, "wh")?;
        let off = head(t, "off")?;
        Ok((heat, wh, off))
    }

    /// Full forward pass on an already-registered tape.
    ///
    /// Routing per config: attention on (implies multitask) multiplies the
    /// pooled seg map into the features before the heads; multitask without
    /// attention computes the seg map for the loss but feeds raw features to
    /// the heads; neither emits a constant 0.5 attention placeholder that the
    /// loss must exclude.
    pub fn forward_on(
        &self,
        t: &mut Tape<F>,
        image: NodeId,
        over: AttentionOverride,
    ) -> Result<ForwardPass> {
        self.config.validate()?;
        let wires = self.register(t);
        let feat = self.backbone_forward(t, &wires, image)?;
        let fshape = t.value(feat).shape().to_vec();
        let (n, h4, w4) = (fshape[0], fshape[2], fshape[3]);

        let constant = |t: &mut Tape<F>, v: f64| -> NodeId {
            t.leaf(
                ArrayD::from_elem(ndarray::IxDyn(&[n, 1, 4 * h4, 4 * w4]), F::of(v)),
                false,
            )
        };

        let (attention, heads_in) = if self.config.multitask_enabled {
            let seg = self.seg_head(t, &wires, feat)?;
            let att_used = match over {
                AttentionOverride::None => seg,
                AttentionOverride::ForceOne => constant(t, 1.0),
                AttentionOverride::ForceZero => constant(t, 0.0),
            };
            if self.config.attention_enabled {
                let gated = apply_attention(t, feat, att_used)?;
                (att_used, gated)
            } else {
                (att_used, feat)
            }
        } else {
            // placeholder, excluded from the loss by the trainer
            (constant(t, 0.5), feat)
        };

        let (heatmap, wh, offset) = self.detect_heads(t, &wires, heads_in)?;
        Ok(ForwardPass {
            attention,
            heatmap,
            wh,
            offset,
            params: wires,
        })
    }

    /// Convenience inference: plain arrays in, plain arrays out.
    pub fn infer(&self, image: &ArrayD<F>) -> Result<NetworkOutput<F>> {
        let mut t = Tape::new();
        let img = t.leaf(image.clone(), false);
        let pass = self.forward_on(&mut t, img, AttentionOverride::None)?;
        Ok(NetworkOutput {
            attention: t.value(pass.attention).clone(),
            heatmap: t.value(pass.heatmap).clone(),
            wh: t.value(pass.wh).clone(),
            offset: t.value(pass.offset).clone(),
        })
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Same weights under different routing flags (used by the ablation and
    /// by tests comparing forward modes).
    pub fn clone_with_config(&self, config: ModelConfig) -> SpotNet<F> {
        SpotNet {
            config,
            params: self.params.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::CustomOp;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    /// Reduce-to-scalar op used to probe gradient connectivity.
    #[derive(Debug)]
    struct SumAll;
    impl<F: Scalar> CustomOp<F> for SumAll {
        fn forward(&self, inputs: &[&ArrayD<F>]) -> Result<ArrayD<F>> {
            let s: F = inputs[0].iter().cloned().sum();
            Ok(ArrayD::from_elem(IxDyn(&[]), s))
        }
        fn backward(
            &self,
            inputs: &[&ArrayD<F>],
            _output: &ArrayD<F>,
            grad_out: &ArrayD<F>,
        ) -> Result<Vec<ArrayD<F>>> {
            let g = grad_out.iter().next().cloned().unwrap_or_else(F::one);
            Ok(vec![ArrayD::from_elem(inputs[0].raw_dim(), g)])
        }
    }

    fn rand_image(n: usize, c: usize, h: usize, w: usize, seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |_| rng.gen::<f32>())
    }

    #[test]
    fn shape_contract_64() {
        let model = SpotNet::<f32>::new(ModelConfig::default(), 0).unwrap();
        let img = rand_image(1, 3, 64, 64, 1);
        let out = model.infer(&img).unwrap();
        assert_eq!(out.attention.shape(), &[1, 1, 64, 64]);
        assert_eq!(out.heatmap.shape(), &[1, 2, 16, 16]);
        assert_eq!(out.wh.shape(), &[1, 2, 16, 16]);
        assert_eq!(out.offset.shape(), &[1, 2, 16, 16]);
        assert!(out.attention.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(out.heatmap.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn backbone_shape_and_determinism() {
        let model = SpotNet::<f32>::new(ModelConfig::default(), 3).unwrap();
        let img = rand_image(2, 3, 64, 64, 2);
        let mut t = Tape::new();
        let x = t.leaf(img.clone(), false);
        let w = model.register(&mut t);
        let f = model.backbone_forward(&mut t, &w, x).unwrap();
        assert_eq!(t.value(f).shape(), &[2, 32, 16, 16]);

        // identical inputs -> identical outputs, and two models from the same
        // seed share every weight
        let out1 = model.infer(&img).unwrap();
        let out2 = model.infer(&img).unwrap();
        assert_eq!(out1.heatmap, out2.heatmap);
        let model2 = SpotNet::<f32>::new(ModelConfig::default(), 3).unwrap();
        for (k, v) in &model.params {
            assert_eq!(v, &model2.params[k], "{k}");
        }
    }

    #[test]
    fn zero_input_finite_and_warm_start() {
        let model = SpotNet::<f32>::new(ModelConfig::default(), 4).unwrap();
        let img = ArrayD::<f32>::zeros(IxDyn(&[1, 3, 64, 64]));
        let out = model.infer(&img).unwrap();
        for a in [&out.attention, &out.heatmap, &out.wh, &out.offset] {
            assert!(a.iter().all(|v| v.is_finite()));
        }
        // instance norm keeps zero input at zero through the trunk, so the
        // heatmap sits exactly at its bias: sigmoid(-ln 9) = 0.1
        for &v in out.heatmap.iter() {
            assert!((v - 0.1).abs() < 1e-5, "heatmap warm start {v}");
        }
    }

    #[test]
    fn random_inputs_no_nan_many_trials() {
        let model = SpotNet::<f32>::new(ModelConfig::default(), 5).unwrap();
        for trial in 0..100 {
            let img = rand_image(1, 3, 64, 64, 100 + trial);
            let out = model.infer(&img).unwrap();
            for a in [&out.attention, &out.heatmap, &out.wh, &out.offset] {
                assert!(
                    a.iter().all(|v| v.is_finite()),
                    "non-finite output on trial {trial}"
                );
            }
        }
    }

    #[test]
    fn apply_attention_identity_annihilator_homogeneity() {
        let mut t = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feat_v = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 5]), |_| rng.gen::<f64>());
        let feat = t.leaf(feat_v.clone(), false);
        for c in [0.0, 0.5, 1.0] {
            let att = t.leaf(ArrayD::from_elem(IxDyn(&[2, 1, 16, 20]), c), false);
            let out = apply_attention(&mut t, feat, att).unwrap();
            let want = feat_v.mapv(|v| v * c);
            let got = t.value(out);
            let err = got
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "c={c}: max err {err}");
        }
        // shape mismatch rejected
        let bad = t.leaf(ArrayD::from_elem(IxDyn(&[2, 1, 8, 20]), 1.0), false);
        assert!(apply_attention(&mut t, feat, bad).is_err());
    }

    #[test]
    fn seg_head_gradients_reach_backbone() {
        let cfg = ModelConfig {
            hourglass_depth: 2,
            n_stacks: 1,
            base_channels: 8,
            ..ModelConfig::default()
        };
        let model = SpotNet::<f64>::new(cfg, 7).unwrap();
        let mut t = Tape::new();
        let img = t.leaf(rand_image(1, 3, 32, 32, 8).mapv(|v| v as f64), false);
        let pass = model.forward_on(&mut t, img, AttentionOverride::None).unwrap();
        let s = t.custom(Box::new(SumAll), &[pass.attention]).unwrap();
        t.backward(s).unwrap();
        let g = t
            .grad(pass.params["stem.conv1.w"])
            .expect("gradient must reach the stem through the seg head");
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn head_gradients_from_summed_outputs() {
        let cfg = ModelConfig {
            hourglass_depth: 2,
            n_stacks: 1,
            base_channels: 8,
            ..ModelConfig::default()
        };
        let model = SpotNet::<f64>::new(cfg, 9).unwrap();
        let mut t = Tape::new();
        let img = t.leaf(rand_image(1, 3, 32, 32, 10).mapv(|v| v as f64), false);
        let pass = model.forward_on(&mut t, img, AttentionOverride::None).unwrap();
        let sh = t.custom(Box::new(SumAll), &[pass.heatmap]).unwrap();
        let sw = t.custom(Box::new(SumAll), &[pass.wh]).unwrap();
        let so = t.custom(Box::new(SumAll), &[pass.offset]).unwrap();
        let total = t
            .weighted_sum(&[(sh, 1.0), (sw, 1.0), (so, 1.0)])
            .unwrap();
        t.backward(total).unwrap();
        for name in ["head.heat.out.w", "head.wh.out.w", "head.off.out.w"] {
            let g = t.grad(pass.params[name]).expect(name);
            assert!(g.iter().any(|&v| v != 0.0), "{name} gradient all zero");
        }
    }

    #[test]
    fn identity_attention_matches_attention_off() {
        let model = SpotNet::<f32>::new(ModelConfig::default(), 11).unwrap();
        let img = rand_image(1, 3, 64, 64, 12);

        let mut t1 = Tape::new();
        let i1 = t1.leaf(img.clone(), false);
        let p1 = model.forward_on(&mut t1, i1, AttentionOverride::ForceOne).unwrap();

        let off = model.clone_with_config(ModelConfig {
            attention_enabled: false,
            ..model.config
        });
        let mut t2 = Tape::new();
        let i2 = t2.leaf(img, false);
        let p2 = off.forward_on(&mut t2, i2, AttentionOverride::None).unwrap();

        let h1 = t1.value(p1.heatmap);
        let h2 = t2.value(p2.heatmap);
        let err = h1
            .iter()
            .zip(h2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-5, "heatmap mismatch {err}");
    }

    #[test]
    fn zero_attention_matches_head_on_zero_features() {
        let model = SpotNet::<f32>::new(ModelConfig::default(), 13).unwrap();
        let img = rand_image(1, 3, 64, 64, 14);
        let mut t = Tape::new();
        let i = t.leaf(img, false);
        let pass = model.forward_on(&mut t, i, AttentionOverride::ForceZero).unwrap();
        let max_heat = t.value(pass.heatmap).iter().cloned().fold(0.0f32, f32::max);

        // reference: detect_heads on an explicit all-zero feature map
        let mut t2 = Tape::new();
        let w2 = model.register(&mut t2);
        let zeros = t2.leaf(ArrayD::zeros(IxDyn(&[1, 32, 16, 16])), false);
        let (h, _, _) = model.detect_heads(&mut t2, &w2, zeros).unwrap();
        let ref_max = t2.value(h).iter().cloned().fold(0.0f32, f32::max);

        assert!((max_heat - ref_max).abs() < 1e-6);
        // with default init this is exactly sigmoid(-ln 9) = 0.1
        assert!((max_heat - 0.1).abs() < 1e-5, "max heat {max_heat}");
    }

    #[test]
    fn multitask_without_attention_uses_raw_features() {
        let cfg = ModelConfig {
            attention_enabled: false,
            ..ModelConfig::default()
        };
        let model = SpotNet::<f32>::new(cfg, 15).unwrap();
        let img = rand_image(1, 3, 64, 64, 16);
        let out = model.infer(&img).unwrap();
        // seg map is real (not a constant placeholder)
        let spread = out
            .attention
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max)
            - out.attention.iter().cloned().fold(f32::INFINITY, f32::min);
        assert!(spread > 0.0, "seg head output is constant");

        // heads see raw features: identical to the same weights with
        // multitask toggled off entirely
        let plain = model.clone_with_config(ModelConfig {
            multitask_enabled: false,
            attention_enabled: false,
            ..model.config
        });
        let out2 = plain.infer(&img).unwrap();
        assert_eq!(out.heatmap, out2.heatmap);
        // and the non-multitask attention output is the 0.5 placeholder
        assert!(out2.attention.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = ModelConfig {
            attention_enabled: true,
            multitask_enabled: false,
            ..ModelConfig::default()
        };
        assert!(SpotNet::<f32>::new(bad, 0).is_err());
    }

    #[test]
    fn bad_input_dims_rejected() {
        let model = SpotNet::<f32>::new(ModelConfig::default(), 17).unwrap();
        // not divisible by 4
        assert!(model.infer(&rand_image(1, 3, 66, 64, 0)).is_err());
        // too small for depth-4 hourglass
        assert!(model.infer(&rand_image(1, 3, 32, 32, 0)).is_err());
        // wrong channel count
        assert!(model.infer(&rand_image(1, 1, 64, 64, 0)).is_err());
    }

    #[test]
    fn non_square_input_ok() {
        let model = SpotNet::<f32>::new(ModelConfig::default(), 18).unwrap();
        let img = rand_image(1, 3, 64, 96, 19);
        let out = model.infer(&img).unwrap();
        assert_eq!(out.attention.shape(), &[1, 1, 64, 96]);
        assert_eq!(out.heatmap.shape(), &[1, 2, 16, 24]);
    }

    #[test]
    fn doubling_seg_logits_sharpens_attention() {
        let model = SpotNet::<f32>::new(ModelConfig::default(), 20).unwrap();
        let out = model.infer(&rand_image(1, 3, 64, 64, 21)).unwrap();
        for &a in out.attention.iter() {
            let logit = (a / (1.0 - a)).ln();
            let sharper = 1.0 / (1.0 + (-2.0 * logit).exp());
            // doubled logits move the sigmoid away from 0.5
            assert!((sharper - 0.5).abs() >= (a - 0.5).abs() - 1e-7);
        }
    }
}
