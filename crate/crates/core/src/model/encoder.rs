//! Encoders producing the four side outputs at strides 4/8/16/32.

use super::layers::{BatchNorm2dLayer, Conv2dLayer, LrGroup, ParamCollector};
use super::{EncoderConfig, EncoderKind};
use crate::error::{Result, SodError};
use crate::tensor::{add, max_pool2d, relu, Var};
use rand_chacha::ChaCha8Rng;

pub const RESNET50_SIDE_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];

struct ConvBnRelu {
    conv: Conv2dLayer,
    bn: BatchNorm2dLayer,
}

impl ConvBnRelu {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvBnRelu {
            conv: Conv2dLayer::new(rng, cin, cout, k, stride, k / 2, 1, false),
            bn: BatchNorm2dLayer::new(cout),
        }
    }

    fn forward(&self, x: &Var, training: bool) -> Result<Var> {
        Ok(relu(&self.bn.forward(&self.conv.forward(x)?, training)?))
    }

    fn collect(&self, prefix: &str, out: &mut ParamCollector) {
        self.conv.collect(&format!("{prefix}.conv"), LrGroup::Backbone, out);
        self.bn.collect(&format!("{prefix}.bn"), LrGroup::Backbone, out);
    }
}

/// Small random-init encoder so the full pipeline runs CPU-only:
/// a stride-2 stem plus four stride-2 stages, one side output per stage.
pub struct TinyEncoder {
    stem: ConvBnRelu,
    downs: Vec<ConvBnRelu>,
    refines: Vec<ConvBnRelu>,
}

impl TinyEncoder {
    pub fn new(rng: &mut ChaCha8Rng, side_channels: &[usize; 4]) -> Self {
        let stem = ConvBnRelu::new(rng, 3, side_channels[0], 3, 2);
        let mut downs = Vec::new();
        let mut refines = Vec::new();
        let mut cin = side_channels[0];
        for &cout in side_channels {
            downs.push(ConvBnRelu::new(rng, cin, cout, 3, 2));
            refines.push(ConvBnRelu::new(rng, cout, cout, 3, 1));
            cin = cout;
        }
        TinyEncoder { stem, downs, refines }
    }

    pub fn forward(&self, x: &Var, training: bool) -> Result<Vec<Var>> {
        let mut h = self.stem.forward(x, training)?;
        let mut sides = Vec::with_capacity(4);
        for (down, refine) in self.downs.iter().zip(&self.refines) {
            h = refine.forward(&down.forward(&h, training)?, training)?;
            sides.push(h.clone());
        }
        Ok(sides)
    }

    pub fn collect(&self, out: &mut ParamCollector) {
        self.stem.collect("encoder.stem", out);
        for (i, (d, r)) in self.downs.iter().zip(&self.refines).enumerate() {
            d.collect(&format!("encoder.stage{}.down", i + 2), out);
            r.collect(&format!("encoder.stage{}.refine", i + 2), out);
        }
    }
}

struct Bottleneck {
    conv1: Conv2dLayer,
    bn1: BatchNorm2dLayer,
    conv2: Conv2dLayer,
    bn2: BatchNorm2dLayer,
    conv3: Conv2dLayer,
    bn3: BatchNorm2dLayer,
    downsample: Option<(Conv2dLayer, BatchNorm2dLayer)>,
}

impl Bottleneck {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Self {
        let mid = cout / 4;
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2dLayer::new(rng, cin, cout, 1, stride, 0, 1, false),
                BatchNorm2dLayer::new(cout),
            )
        });
        Bottleneck {
            conv1: Conv2dLayer::new(rng, cin, mid, 1, 1, 0, 1, false),
            bn1: BatchNorm2dLayer::new(mid),
            conv2: Conv2dLayer::new(rng, mid, mid, 3, stride, 1, 1, false),
            bn2: BatchNorm2dLayer::new(mid),
            conv3: Conv2dLayer::new(rng, mid, cout, 1, 1, 0, 1, false),
            bn3: BatchNorm2dLayer::new(cout),
            downsample,
        }
    }

    fn forward(&self, x: &Var, training: bool) -> Result<Var> {
        let mut h = relu(&self.bn1.forward(&self.conv1.forward(x)?, training)?);
        h = relu(&self.bn2.forward(&self.conv2.forward(&h)?, training)?);
        h = self.bn3.forward(&self.conv3.forward(&h)?, training)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, training)?,
            None => x.clone(),
        };
        Ok(relu(&add(&h, &skip)?))
    }

    fn collect(&self, prefix: &str, out: &mut ParamCollector) {
        self.conv1.collect(&format!("{prefix}.conv1"), LrGroup::Backbone, out);
        self.bn1.collect(&format!("{prefix}.bn1"), LrGroup::Backbone, out);
        self.conv2.collect(&format!("{prefix}.conv2"), LrGroup::Backbone, out);
        self.bn2.collect(&format!("{prefix}.bn2"), LrGroup::Backbone, out);
        self.conv3.collect(&format!("{prefix}.conv3"), LrGroup::Backbone, out);
        self.bn3.collect(&format!("{prefix}.bn3"), LrGroup::Backbone, out);
        if let Some((conv, bn)) = &self.downsample {
            conv.collect(&format!("{prefix}.downsample.conv"), LrGroup::Backbone, out);
            bn.collect(&format!("{prefix}.downsample.bn"), LrGroup::Backbone, out);
        }
    }
}

/// ResNet-50: stem (7x7/2 + maxpool/2) then stages of 3/4/6/3 bottlenecks
/// with 256/512/1024/2048 output channels; side outputs are the four stage
/// outputs.
pub struct ResNet50 {
    stem_conv: Conv2dLayer,
    stem_bn: BatchNorm2dLayer,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let stem_conv = Conv2dLayer::new(rng, 3, 64, 7, 2, 3, 1, false);
        let stem_bn = BatchNorm2dLayer::new(64);
        let blocks = [3usize, 4, 6, 3];
        let mut layers = Vec::new();
        let mut cin = 64;
        for (li, &nblocks) in blocks.iter().enumerate() {
            let cout = RESNET50_SIDE_CHANNELS[li];
            let stride = if li == 0 { 1 } else { 2 };
            let mut layer = Vec::new();
            for b in 0..nblocks {
                let s = if b == 0 { stride } else { 1 };
                let in_c = if b == 0 { cin } else { cout };
                layer.push(Bottleneck::new(rng, in_c, cout, s));
            }
            layers.push(layer);
            cin = cout;
        }
        ResNet50 { stem_conv, stem_bn, layers }
    }

    pub fn forward(&self, x: &Var, training: bool) -> Result<Vec<Var>> {
        let h = relu(&self.stem_bn.forward(&self.stem_conv.forward(x)?, training)?);
        let mut h = max_pool2d(&h, 3, 2, 1);
        let mut sides = Vec::with_capacity(4);
        for layer in &self.layers {
            for block in layer {
                h = block.forward(&h, training)?;
            }
            sides.push(h.clone());
        }
        Ok(sides)
    }

    pub fn collect(&self, out: &mut ParamCollector) {
        self.stem_conv.collect("encoder.stem.conv", LrGroup::Backbone, out);
        self.stem_bn.collect("encoder.stem.bn", LrGroup::Backbone, out);
        for (li, layer) in self.layers.iter().enumerate() {
            for (bi, block) in layer.iter().enumerate() {
                block.collect(&format!("encoder.layer{}.block{}", li + 1, bi), out);
            }
        }
    }
}

pub enum Encoder {
    Tiny(TinyEncoder),
    Resnet50(ResNet50),
}

impl Encoder {
    pub fn build(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        match cfg.kind {
            EncoderKind::Tiny => Ok(Encoder::Tiny(TinyEncoder::new(rng, &cfg.side_channels))),
            EncoderKind::Resnet50Pretrained => {
                if let Some(path) = &cfg.pretrained_weights {
                    if !path.exists() {
                        return Err(SodError::Config(format!(
                            "pretrained weights requested but unavailable: {}",
                            path.display()
                        )));
                    }
                }
                Ok(Encoder::Resnet50(ResNet50::new(rng)))
            }
        }
    }

    /// Side features at strides 4/8/16/32. Input must be (N,3,H,W) with H
    /// and W multiples of 32.
    pub fn forward(&self, x: &Var, training: bool) -> Result<Vec<Var>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(SodError::Dimension(format!(
                "encoder input must be (N,3,H,W), got {shape:?}"
            )));
        }
        if shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(SodError::Dimension(format!(
                "encoder input H/W must be multiples of 32, got {}x{}",
                shape[2], shape[3]
            )));
        }
        match self {
            Encoder::Tiny(e) => e.forward(x, training),
            Encoder::Resnet50(e) => e.forward(x, training),
        }
    }

    pub fn collect(&self, out: &mut ParamCollector) {
        match self {
            Encoder::Tiny(e) => e.collect(out),
            Encoder::Resnet50(e) => e.collect(out),
        }
    }
}
