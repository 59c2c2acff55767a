//! The full network: per-side multi-receptive enhancement, the parallel
//! fusion tree with a feedback second prediction, and the heads.

use super::encoder::Encoder;
use super::layers::{Conv2dLayer, GBlock, LrGroup, NamedBuffer, Param, ParamCollector};
use super::{
    EncoderKind, FeatureMap, ModelConfig, PredictionPair, SideFeatures, SIDE_STRIDES,
};
use crate::error::{Result, SodError};
use crate::tensor::{add, bilinear_resize, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Multi-receptive enhancement: 1x1 channel reduction, three parallel
/// dilated 3x3 convolutions summed element-wise, then a 3x3 fusion conv.
/// Padding equals the dilation rate, so spatial size is preserved.
pub struct MreBlock {
    pub reduce: Conv2dLayer,
    pub branches: Vec<Conv2dLayer>,
    pub fuse: Conv2dLayer,
}

impl MreBlock {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, channels: usize, rates: [usize; 3]) -> Self {
        MreBlock {
            reduce: Conv2dLayer::new(rng, cin, channels, 1, 1, 0, 1, true),
            branches: rates
                .iter()
                .map(|&r| Conv2dLayer::new(rng, channels, channels, 3, 1, r, r, true))
                .collect(),
            fuse: Conv2dLayer::new(rng, channels, channels, 3, 1, 1, 1, true),
        }
    }

    /// `use_mre = false` computes the 1x1 reduction only (ablation mode).
    pub fn forward(&self, x: &Var, use_mre: bool) -> Result<Var> {
        let reduced = self.reduce.forward(x)?;
        if !use_mre {
            return Ok(reduced);
        }
        let mut acc: Option<Var> = None;
        for branch in &self.branches {
            let out = branch.forward(&reduced)?;
            acc = Some(match acc {
                Some(a) => add(&a, &out)?,
                None => out,
            });
        }
        self.fuse.forward(&acc.expect("at least one branch"))
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamCollector) {
        self.reduce.collect(&format!("{prefix}.reduce"), LrGroup::Branch, out);
        for (i, b) in self.branches.iter().enumerate() {
            b.collect(&format!("{prefix}.branch{i}"), LrGroup::Branch, out);
        }
        self.fuse.collect(&format!("{prefix}.fuse"), LrGroup::Branch, out);
    }
}

/// Fuse two feature maps: the coarser one is bilinearly resized to the finer
/// resolution, the maps are added, and a G block is applied.
pub fn pair_fuse(f_a: &Var, f_b: &Var, g: &GBlock, training: bool) -> Result<Var> {
    let sa = f_a.shape();
    let sb = f_b.shape();
    if sa[1] != sb[1] {
        return Err(SodError::Dimension(format!(
            "pair_fuse: channel mismatch {} vs {}",
            sa[1], sb[1]
        )));
    }
    let b_resized = if sb[2] == sa[2] && sb[3] == sa[3] {
        f_b.clone()
    } else {
        bilinear_resize(f_b, sa[2], sa[3])
    };
    g.forward(&add(f_a, &b_resized)?, training)
}

/// Inject the first prediction back into an intermediate feature map:
/// resize the logits, project them to the fusion width with a 1x1 conv,
/// add, then apply a G block.
pub fn feedback_fuse(
    feature: &Var,
    p1_logits: &Var,
    proj: &Conv2dLayer,
    g: &GBlock,
    training: bool,
) -> Result<Var> {
    let sf = feature.shape();
    let resized = bilinear_resize(p1_logits, sf[2], sf[3]);
    let injected = proj.forward(&resized)?;
    g.forward(&add(feature, &injected)?, training)
}

pub struct SaliencyNet {
    pub cfg: ModelConfig,
    encoder: Encoder,
    mre: Vec<MreBlock>,
    fuse_low: GBlock,
    fuse_high: GBlock,
    fuse_top: GBlock,
    head1: Conv2dLayer,
    fb_proj_low: Conv2dLayer,
    fb_g_low: GBlock,
    fb_proj_high: Conv2dLayer,
    fb_g_high: GBlock,
    fuse_top2: GBlock,
    head2: Conv2dLayer,
}

impl SaliencyNet {
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = Encoder::build(&cfg.encoder, &mut rng)?;
        let c = cfg.fusion_channels;
        let mre = cfg
            .encoder
            .side_channels
            .iter()
            .zip(cfg.mre.rates_per_side.iter())
            .map(|(&cin, &rates)| MreBlock::new(&mut rng, cin, c, rates))
            .collect();
        let net = SaliencyNet {
            encoder,
            mre,
            fuse_low: GBlock::new(&mut rng, c),
            fuse_high: GBlock::new(&mut rng, c),
            fuse_top: GBlock::new(&mut rng, c),
            head1: Conv2dLayer::new(&mut rng, c, 1, 1, 1, 0, 1, true),
            fb_proj_low: Conv2dLayer::new(&mut rng, 1, c, 1, 1, 0, 1, true),
            fb_g_low: GBlock::new(&mut rng, c),
            fb_proj_high: Conv2dLayer::new(&mut rng, 1, c, 1, 1, 0, 1, true),
            fb_g_high: GBlock::new(&mut rng, c),
            fuse_top2: GBlock::new(&mut rng, c),
            head2: Conv2dLayer::new(&mut rng, c, 1, 1, 1, 0, 1, true),
            cfg,
        };
        if let Some(path) = net.cfg.encoder.pretrained_weights.clone() {
            if net.cfg.encoder.kind == EncoderKind::Resnet50Pretrained {
                crate::training::load_params_from_archive(&path, &net.backbone_params())?;
            }
        }
        Ok(net)
    }

    /// Encoder side outputs wrapped with their strides.
    pub fn encode(&self, images: &Var, training: bool) -> Result<SideFeatures> {
        let shape = images.shape();
        let sides = self.encoder.forward(images, training)?;
        let mut wrapped = Vec::with_capacity(4);
        for (i, var) in sides.into_iter().enumerate() {
            let stride = SIDE_STRIDES[i];
            let s = var.shape();
            debug_assert_eq!(s[2], (shape[2] + stride - 1) / stride);
            wrapped.push(FeatureMap { var, stride });
        }
        let sides: [FeatureMap; 4] = wrapped.try_into().map_err(|_| {
            SodError::Dimension("encoder must produce exactly 4 side outputs".into())
        })?;
        Ok(SideFeatures { sides })
    }

    /// Per-side enhancement (or plain reduction in ablation mode).
    pub fn enhance(&self, sides: &SideFeatures) -> Result<Vec<FeatureMap>> {
        sides
            .sides
            .iter()
            .zip(&self.mre)
            .map(|(f, block)| {
                Ok(FeatureMap {
                    var: block.forward(&f.var, self.cfg.use_mre)?,
                    stride: f.stride,
                })
            })
            .collect()
    }

    fn head(&self, feature: &Var, head: &Conv2dLayer, out_hw: (usize, usize)) -> Result<Var> {
        let logits = head.forward(feature)?;
        Ok(bilinear_resize(&logits, out_hw.0, out_hw.1))
    }

    /// Fusion tree: A = G(E2+E3), B = G(E4+E5), C = G(A+B), P1 = head(C);
    /// then the feedback pass A' = fb(A,P1), B' = fb(B,P1), C' = G(A'+B'),
    /// P2 = head2(C').
    pub fn pfs_forward(
        &self,
        enhanced: &[FeatureMap],
        out_hw: (usize, usize),
        training: bool,
    ) -> Result<PredictionPair> {
        if enhanced.len() != 4 {
            return Err(SodError::Dimension(format!(
                "pfs_forward expects 4 enhanced maps, got {}",
                enhanced.len()
            )));
        }
        let a = pair_fuse(&enhanced[0].var, &enhanced[1].var, &self.fuse_low, training)?;
        let b = pair_fuse(&enhanced[2].var, &enhanced[3].var, &self.fuse_high, training)?;
        let c = pair_fuse(&a, &b, &self.fuse_top, training)?;
        let p1 = self.head(&c, &self.head1, out_hw)?;

        let a2 = feedback_fuse(&a, &p1, &self.fb_proj_low, &self.fb_g_low, training)?;
        let b2 = feedback_fuse(&b, &p1, &self.fb_proj_high, &self.fb_g_high, training)?;
        let c2 = pair_fuse(&a2, &b2, &self.fuse_top2, training)?;
        let p2 = self.head(&c2, &self.head2, out_hw)?;

        Ok(PredictionPair {
            p1_logits: FeatureMap { var: p1, stride: 1 },
            p2_logits: FeatureMap { var: p2, stride: 1 },
        })
    }

    /// Full forward pass from normalized images to the two logit maps.
    pub fn forward(&self, images: &Var, training: bool) -> Result<PredictionPair> {
        let shape = images.shape();
        let sides = self.encode(images, training)?;
        let enhanced = self.enhance(&sides)?;
        self.pfs_forward(&enhanced, (shape[2], shape[3]), training)
    }

    pub fn collect(&self) -> ParamCollector {
        let mut out = ParamCollector::new();
        self.encoder.collect(&mut out);
        for (i, block) in self.mre.iter().enumerate() {
            block.collect(&format!("mre.side{}", i + 2), &mut out);
        }
        self.fuse_low.collect("pfs.fuse_low", LrGroup::Branch, &mut out);
        self.fuse_high.collect("pfs.fuse_high", LrGroup::Branch, &mut out);
        self.fuse_top.collect("pfs.fuse_top", LrGroup::Branch, &mut out);
        self.head1.collect("pfs.head1", LrGroup::Branch, &mut out);
        self.fb_proj_low.collect("pfs.fb_proj_low", LrGroup::Branch, &mut out);
        self.fb_g_low.collect("pfs.fb_g_low", LrGroup::Branch, &mut out);
        self.fb_proj_high.collect("pfs.fb_proj_high", LrGroup::Branch, &mut out);
        self.fb_g_high.collect("pfs.fb_g_high", LrGroup::Branch, &mut out);
        self.fuse_top2.collect("pfs.fuse_top2", LrGroup::Branch, &mut out);
        self.head2.collect("pfs.head2", LrGroup::Branch, &mut out);
        out
    }

    pub fn params(&self) -> Vec<Param> {
        self.collect().params
    }

    pub fn buffers(&self) -> Vec<NamedBuffer> {
        self.collect().buffers
    }

    pub fn backbone_params(&self) -> Vec<Param> {
        self.params()
            .into_iter()
            .filter(|p| p.group == LrGroup::Backbone)
            .collect()
    }

    /// Parameters reachable only through the second (feedback) prediction.
    pub fn feedback_branch_params(&self) -> Vec<Param> {
        self.params()
            .into_iter()
            .filter(|p| {
                p.name.starts_with("pfs.fb_")
                    || p.name.starts_with("pfs.fuse_top2")
                    || p.name.starts_with("pfs.head2")
            })
            .collect()
    }
}
