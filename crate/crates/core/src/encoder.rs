//! Shared encoder: a residual backbone with group norm and an FPN or PAFPN
//! neck that emits one `det_channels`-wide map per configured stride.

use serde::{Deserialize, Serialize};

use mtlab_autograd::Var;

use crate::error::{Error, Result};
use crate::nn::{self, Decls, Init};
use crate::params::Session;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Widths (8, 16, 32, 64), one block per stage.
    Tiny,
    /// Widths (32, 64, 128, 256), one block per stage.
    Small,
    /// Widths (32, 64, 128, 256), stage depths (2, 3, 3, 2).
    Large,
    Resnet18,
    Resnet50,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeckKind {
    #[serde(alias = "FPN")]
    Fpn,
    #[serde(alias = "PAFPN")]
    Pafpn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    pub neck: NeckKind,
    pub strides: Vec<usize>,
    pub det_channels: usize,
    pub remove_first_maxpool: bool,
    pub context_enhancement: bool,
    /// Per-stage width override.
    pub widths: Option<[usize; 4]>,
    /// Per-stage block-count override.
    pub depths: Option<[usize; 4]>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Small,
            neck: NeckKind::Fpn,
            strides: vec![8, 16, 32],
            det_channels: 256,
            remove_first_maxpool: true,
            context_enhancement: true,
            widths: None,
            depths: None,
        }
    }
}

/// Resolved backbone geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub bottleneck: bool,
}

impl BackboneSpec {
    pub fn expansion(&self) -> usize {
        if self.bottleneck {
            4
        } else {
            1
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.widths[stage] * self.expansion()
    }
}

/// Output stride of backbone stage `i`.
pub fn stage_stride(stage: usize) -> usize {
    4 << stage
}

/// Feature maps emitted by the neck, finest first.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub strides: Vec<usize>,
    pub levels: Vec<Var>,
}

impl EncoderConfig {
    pub fn backbone_spec(&self) -> BackboneSpec {
        let (stem_width, stem_kernel, widths, depths, bottleneck) = match self.backbone {
            BackboneKind::Tiny => (8, 3, [8, 16, 32, 64], [1, 1, 1, 1], false),
            BackboneKind::Small => (32, 3, [32, 64, 128, 256], [1, 1, 1, 1], false),
            BackboneKind::Large => (32, 3, [32, 64, 128, 256], [2, 3, 3, 2], false),
            BackboneKind::Resnet18 => (64, 7, [64, 128, 256, 512], [2, 2, 2, 2], false),
            BackboneKind::Resnet50 => (64, 7, [64, 128, 256, 512], [3, 4, 6, 3], true),
        };
        BackboneSpec {
            stem_width: self.widths.map_or(stem_width, |w| w[0]),
            stem_kernel,
            widths: self.widths.unwrap_or(widths),
            depths: self.depths.unwrap_or(depths),
            bottleneck,
        }
    }

    /// Backbone stages feeding the neck, one per stride up to 32.
    fn neck_stages(&self) -> Vec<usize> {
        self.strides
            .iter()
            .filter(|&&s| s <= 32)
            .map(|&s| s.trailing_zeros() as usize - 2)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.det_channels == 0 {
            return cfg("det_channels must be positive".into());
        }
        if self.strides.is_empty() {
            return cfg("at least one stride is required".into());
        }
        for w in self.strides.windows(2) {
            if w[1] <= w[0] {
                return cfg(format!("strides must be strictly increasing, got {:?}", self.strides));
            }
        }
        for &s in &self.strides {
            if !s.is_power_of_two() || s < 4 {
                return cfg(format!("stride {s} is not a power of two of at least 4"));
            }
        }
        if self.strides[0] > 32 {
            return cfg("the finest stride must come from the backbone (at most 32)".into());
        }
        for w in self.strides.windows(2).filter(|w| w[1] > 32) {
            if w[1] != 2 * w[0] {
                return cfg(format!("extra stride {} must double the previous stride", w[1]));
            }
        }
        let spec = self.backbone_spec();
        if spec.widths.contains(&0) || spec.depths.contains(&0) {
            return cfg("backbone widths and depths must be positive".into());
        }
        Ok(())
    }

    pub fn declare(&self, d: &mut Decls) -> Result<()> {
        self.validate()?;
        let spec = self.backbone_spec();
        let c = self.det_channels;
        d.conv_gn("backbone.stem", 3, spec.stem_width, spec.stem_kernel);
        let mut cin = spec.stem_width;
        for stage in 0..4 {
            let cout = spec.stage_channels(stage);
            for block in 0..spec.depths[stage] {
                let name = format!("backbone.layer{}.{block}", stage + 1);
                let stride = self.block_stride(stage, block);
                let w = spec.widths[stage];
                if spec.bottleneck {
                    d.conv_gn(&format!("{name}.a"), cin, w, 1);
                    d.conv_gn(&format!("{name}.b"), w, w, 3);
                    d.conv_gn(&format!("{name}.c"), w, cout, 1);
                } else {
                    d.conv_gn(&format!("{name}.a"), cin, cout, 3);
                    d.conv_gn(&format!("{name}.b"), cout, cout, 3);
                }
                if stride != 1 || cin != cout {
                    d.conv_gn(&format!("{name}.down"), cin, cout, 1);
                }
                cin = cout;
            }
        }
        let stages = self.neck_stages();
        for (l, &stage) in stages.iter().enumerate() {
            d.conv(&format!("neck.lateral{l}"), spec.stage_channels(stage), c, 1, true, Init::He);
            d.conv(&format!("neck.output{l}"), c, c, 3, true, Init::He);
        }
        if self.context_enhancement {
            let top = *stages.last().expect("validated non-empty");
            d.conv("neck.context", spec.stage_channels(top), c, 1, true, Init::He);
        }
        for l in stages.len()..self.strides.len() {
            d.conv(&format!("neck.extra{l}"), c, c, 3, true, Init::He);
        }
        if self.neck == NeckKind::Pafpn {
            for l in 1..self.strides.len() {
                d.conv(&format!("neck.pa_down{l}"), c, c, 3, true, Init::He);
                d.conv(&format!("neck.pa_out{l}"), c, c, 3, true, Init::He);
            }
        }
        Ok(())
    }

    fn block_stride(&self, stage: usize, block: usize) -> usize {
        if block > 0 {
            1
        } else if stage == 0 {
            if self.remove_first_maxpool {
                2
            } else {
                1
            }
        } else {
            2
        }
    }

    pub fn count_parameters(&self) -> Result<usize> {
        let mut d = Decls::default();
        self.declare(&mut d)?;
        Ok(d.count())
    }

    /// Runs backbone and neck on an `[n, 3, H, W]` batch.
    pub fn encode(&self, s: &mut Session, images: Var) -> Result<Pyramid> {
        let spec = self.backbone_spec();
        let mut x = nn::conv_gn(s, images, "backbone.stem", 2, true)?;
        if !self.remove_first_maxpool {
            x = s.graph.max_pool2(x)?;
        }
        let mut feats = Vec::with_capacity(4);
        for stage in 0..4 {
            for block in 0..spec.depths[stage] {
                let name = format!("backbone.layer{}.{block}", stage + 1);
                x = residual_block(s, x, &name, self.block_stride(stage, block), spec.bottleneck)?;
            }
            feats.push(x);
        }
        let stages = self.neck_stages();
        let mut lat = stages
            .iter()
            .enumerate()
            .map(|(l, &stage)| nn::conv(s, feats[stage], &format!("neck.lateral{l}"), 1))
            .collect::<Result<Vec<_>>>()?;
        if self.context_enhancement {
            let top = *stages.last().expect("validated non-empty");
            let pooled = s.graph.global_avg_pool(feats[top])?;
            let ctx = nn::conv(s, pooled, "neck.context", 1)?;
            let last = lat.len() - 1;
            lat[last] = s.graph.broadcast_add(lat[last], ctx)?;
        }
        for l in (0..lat.len() - 1).rev() {
            let (_, _, h, w) = s.graph.value(lat[l]).dims4()?;
            let up = s.graph.resize(lat[l + 1], h, w)?;
            lat[l] = s.graph.add(lat[l], up)?;
        }
        let mut levels = lat
            .iter()
            .enumerate()
            .map(|(l, &p)| nn::conv(s, p, &format!("neck.output{l}"), 1))
            .collect::<Result<Vec<_>>>()?;
        for l in stages.len()..self.strides.len() {
            let prev = levels[l - 1];
            let input = if l > stages.len() { s.graph.relu(prev) } else { prev };
            levels.push(nn::conv(s, input, &format!("neck.extra{l}"), 2)?);
        }
        if self.neck == NeckKind::Pafpn {
            for l in 1..levels.len() {
                let down = nn::conv(s, levels[l - 1], &format!("neck.pa_down{l}"), 2)?;
                let down = s.graph.relu(down);
                let (_, _, h, w) = s.graph.value(levels[l]).dims4()?;
                let down = s.graph.resize(down, h, w)?;
                let merged = s.graph.add(levels[l], down)?;
                levels[l] = nn::conv(s, merged, &format!("neck.pa_out{l}"), 1)?;
            }
        }
        Ok(Pyramid {
            strides: self.strides.clone(),
            levels,
        })
    }
}

fn residual_block(s: &mut Session, x: Var, name: &str, stride: usize, bottleneck: bool) -> Result<Var> {
    let y = if bottleneck {
        let y = nn::conv_gn(s, x, &format!("{name}.a"), 1, true)?;
        let y = nn::conv_gn(s, y, &format!("{name}.b"), stride, true)?;
        nn::conv_gn(s, y, &format!("{name}.c"), 1, false)?
    } else {
        let y = nn::conv_gn(s, x, &format!("{name}.a"), stride, true)?;
        nn::conv_gn(s, y, &format!("{name}.b"), 1, false)?
    };
    let shortcut = if s.has_param(&format!("{name}.down.conv.weight")) {
        nn::conv_gn(s, x, &format!("{name}.down"), stride, false)?
    } else {
        x
    };
    let sum = s.graph.add(y, shortcut)?;
    Ok(s.graph.relu(sum))
}
