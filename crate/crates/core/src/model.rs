//! The ResLink network: stem, residual stages with downsampling, a final
//! area-attention gate, global average pooling, dropout and a dense head.
//!
//! ```text
//! x ─ stem (7×7/2 conv, BN, ReLU, 3×3/2 max pool)
//!   ─ for each stage: residual block(s) ─ 3×3/2 conv, BN, ReLU
//!   ─ area attention ─ GAP ─ dropout ─ dense ─ sigmoid | softmax
//! ```

use std::fmt::Write as _;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::{AreaAttention, AreaAttentionCache};
use crate::error::{Error, Result};
use crate::layers::{
    self, apply_updates, BatchNorm, BatchNormCache, Conv, Dense, DropoutSpec, Mode, StatUpdates,
};
use crate::params::{Grads, Registry};
use crate::tensor::{self, window_axis, Element, Padding, PoolIndices, ShapeDisplay, Tensor};
use crate::ModelRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Sigmoid,
    Softmax,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub stem_filters: usize,
    /// One entry per stage; each stage ends with a stride-2 downsample.
    pub stage_filters: Vec<usize>,
    pub blocks_per_stage: usize,
    pub attention_in_blocks: bool,
    /// Feed the gated map (instead of the block input) to the shortcut.
    pub shortcut_reads_attention: bool,
    /// Area size used by every attention gate.
    pub area_h: usize,
    pub area_w: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 224,
            input_w: 224,
            input_c: 3,
            stem_filters: 32,
            stage_filters: vec![32, 64, 128],
            blocks_per_stage: 1,
            attention_in_blocks: true,
            shortcut_reads_attention: false,
            area_h: 7,
            area_w: 7,
            dropout_rate: 0.3,
            num_classes: 1,
            head: Head::Sigmoid,
        }
    }
}

impl ModelConfig {
    /// Small grayscale network for 64×64 inputs.
    pub fn miniature() -> Self {
        ModelConfig {
            input_h: 64,
            input_w: 64,
            input_c: 1,
            stem_filters: 8,
            stage_filters: vec![8, 16],
            area_h: 4,
            area_w: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("input_c", self.input_c),
            ("stem_filters", self.stem_filters),
            ("blocks_per_stage", self.blocks_per_stage),
            ("area_h", self.area_h),
            ("area_w", self.area_w),
            ("num_classes", self.num_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.stage_filters.is_empty() {
            return Err(Error::config("stage_filters", "needs at least one stage"));
        }
        if self.stage_filters.contains(&0) {
            return Err(Error::config("stage_filters", "filter counts must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(
                "dropout_rate",
                format!("{} not in [0, 1)", self.dropout_rate),
            ));
        }
        match (self.head, self.num_classes) {
            (Head::Sigmoid, 1) => {}
            (Head::Sigmoid, k) => {
                return Err(Error::config(
                    "head",
                    format!("sigmoid head needs num_classes = 1, got {k}"),
                ))
            }
            (Head::Softmax, 1) => {
                return Err(Error::config(
                    "head",
                    "softmax head needs num_classes >= 2",
                ))
            }
            (Head::Softmax, _) => {}
        }
        Ok(())
    }

    /// Number of dataset classes this configuration predicts.
    pub fn class_count(&self) -> usize {
        match self.head {
            Head::Sigmoid => 2,
            Head::Softmax => self.num_classes,
        }
    }

    /// Layer name → output shape for a batch of one, derived from stride arithmetic.
    pub fn shape_table(&self) -> Result<ShapeTable> {
        self.validate()?;
        let mut rows = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>| rows.push((name.to_string(), shape));
        let (mut h, mut w) = (self.input_h, self.input_w);
        push("input", vec![1, h, w, self.input_c]);
        let half = |d: usize, k: usize| window_axis(d, k, 2, Padding::Same, "shape_table").map(|v| v.0);
        h = half(h, 7)?;
        w = half(w, 7)?;
        push("stem.conv", vec![1, h, w, self.stem_filters]);
        h = half(h, 3)?;
        w = half(w, 3)?;
        push("stem.pool", vec![1, h, w, self.stem_filters]);
        for (s, &f) in self.stage_filters.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                push(&block_name(s, b), vec![1, h, w, f]);
            }
            h = half(h, 3)?;
            w = half(w, 3)?;
            push(&format!("stage{}.down", s + 1), vec![1, h, w, f]);
        }
        let c = *self.stage_filters.last().expect("validated non-empty");
        push("final_attention", vec![1, h, w, c]);
        push("gap", vec![1, c]);
        push("head", vec![1, self.num_classes]);
        Ok(ShapeTable { rows })
    }
}

fn record<T: Element>(shapes: &mut Vec<(String, Vec<usize>)>, name: &str, t: &Tensor<T>) -> Result<()> {
    t.check_finite(name)?;
    shapes.push((name.to_string(), t.shape().to_vec()));
    Ok(())
}

fn block_name(stage: usize, block: usize) -> String {
    format!("stage{}.block{}", stage + 1, block + 1)
}

/// Output shape of every named layer, in forward order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTable {
    pub rows: Vec<(String, Vec<usize>)>,
}

impl ShapeTable {
    /// One `layer_name: N×h×w×c` line per layer.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, shape) in &self.rows {
            let _ = writeln!(out, "{name}: {}", ShapeDisplay(shape));
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.rows
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: Conv,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct StemCache<T> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
    normed: Tensor<T>,
    pool: PoolIndices,
}

impl Stem {
    pub fn forward<T: Element>(
        &self,
        reg: &Registry<T>,
        x: &Tensor<T>,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<(Tensor<T>, StemCache<T>)> {
        let z = self.conv.forward(reg, x)?;
        let (normed, bn) = self.bn.forward(reg, &z, mode, updates)?;
        let (y, pool) = tensor::maxpool2d(&layers::relu(&normed), 3, 3, 2, Padding::Same)?;
        Ok((
            y,
            StemCache {
                input: x.clone(),
                bn,
                normed,
                pool,
            },
        ))
    }

    pub fn backward<T: Element>(
        &self,
        reg: &Registry<T>,
        cache: &StemCache<T>,
        upstream: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let d = tensor::maxpool2d_backward(&cache.pool, upstream)?;
        let d = layers::relu_backward(&cache.normed, &d)?;
        let d = self.bn.backward(reg, &cache.bn, &d, grads)?;
        self.conv.backward(reg, &cache.input, &d, grads)
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub conv: Conv,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub attention: Option<AreaAttention>,
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    /// Present exactly when input channels differ from the block's filters.
    pub shortcut: Option<Projection>,
    pub shortcut_reads_attention: bool,
}

#[derive(Debug, Clone)]
pub struct ResidualBlockCache<T> {
    input: Tensor<T>,
    attention: Option<(AreaAttentionCache<T>, Tensor<T>)>,
    bn1: BatchNormCache<T>,
    pre_relu1: Tensor<T>,
    g1: Tensor<T>,
    bn2: BatchNormCache<T>,
    shortcut_bn: Option<BatchNormCache<T>>,
    sum: Tensor<T>,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Element>(
        reg: &mut Registry<T>,
        prefix: &str,
        c_in: usize,
        filters: usize,
        attention: Option<(usize, usize)>,
        shortcut_reads_attention: bool,
        rng: &mut ModelRng,
    ) -> Self {
        let attention = attention.map(|(ah, aw)| {
            AreaAttention::register(reg, &format!("{prefix}.attention"), c_in, ah, aw, rng)
        });
        let conv1 = Conv::register(reg, &format!("{prefix}.conv1"), 3, 1, c_in, filters, rng);
        let bn1 = BatchNorm::register(reg, &format!("{prefix}.bn1"), filters);
        let conv2 = Conv::register(reg, &format!("{prefix}.conv2"), 3, 1, filters, filters, rng);
        let bn2 = BatchNorm::register(reg, &format!("{prefix}.bn2"), filters);
        let shortcut = (c_in != filters).then(|| Projection {
            conv: Conv::register(reg, &format!("{prefix}.shortcut.conv"), 1, 1, c_in, filters, rng),
            bn: BatchNorm::register(reg, &format!("{prefix}.shortcut.bn"), filters),
        });
        ResidualBlock {
            attention,
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            shortcut_reads_attention,
        }
    }

    pub fn forward<T: Element>(
        &self,
        reg: &Registry<T>,
        f: &Tensor<T>,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<(Tensor<T>, ResidualBlockCache<T>)> {
        let (_, _, _, c_in) = f.dims4()?;
        let filters = self.conv1.out_channels(reg);
        if c_in != filters && self.shortcut.is_none() {
            return Err(Error::config(
                "shortcut",
                format!("block maps {c_in} -> {filters} channels without a projection"),
            ));
        }
        let attention = match &self.attention {
            Some(att) => {
                let (gated, cache) = att.forward(reg, f, mode, updates)?;
                Some((cache, gated))
            }
            None => None,
        };
        let branch_in = attention.as_ref().map_or(f, |(_, g)| g);
        let (pre_relu1, bn1) = self
            .bn1
            .forward(reg, &self.conv1.forward(reg, branch_in)?, mode, updates)?;
        let g1 = layers::relu(&pre_relu1);
        let (g2, bn2) = self
            .bn2
            .forward(reg, &self.conv2.forward(reg, &g1)?, mode, updates)?;
        let shortcut_in = if self.shortcut_reads_attention { branch_in } else { f };
        let (s, shortcut_bn) = match &self.shortcut {
            Some(p) => {
                let (s, c) = p
                    .bn
                    .forward(reg, &p.conv.forward(reg, shortcut_in)?, mode, updates)?;
                (s, Some(c))
            }
            None => (shortcut_in.clone(), None),
        };
        let sum = g2.add(&s)?;
        let h = layers::relu(&sum);
        Ok((
            h,
            ResidualBlockCache {
                input: f.clone(),
                attention,
                bn1,
                pre_relu1,
                g1,
                bn2,
                shortcut_bn,
                sum,
            },
        ))
    }

    pub fn backward<T: Element>(
        &self,
        reg: &Registry<T>,
        cache: &ResidualBlockCache<T>,
        upstream: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let d_sum = layers::relu_backward(&cache.sum, upstream)?;
        let branch_in = cache.attention.as_ref().map_or(&cache.input, |(_, g)| g);

        let d = self.bn2.backward(reg, &cache.bn2, &d_sum, grads)?;
        let d = self.conv2.backward(reg, &cache.g1, &d, grads)?;
        let d = layers::relu_backward(&cache.pre_relu1, &d)?;
        let d = self.bn1.backward(reg, &cache.bn1, &d, grads)?;
        let mut d_branch_in = self.conv1.backward(reg, branch_in, &d, grads)?;

        let shortcut_in = if self.shortcut_reads_attention { branch_in } else { &cache.input };
        let d_shortcut = match (&self.shortcut, &cache.shortcut_bn) {
            (Some(p), Some(bn_cache)) => {
                let d = p.bn.backward(reg, bn_cache, &d_sum, grads)?;
                p.conv.backward(reg, shortcut_in, &d, grads)?
            }
            _ => d_sum,
        };

        let mut d_input = if self.shortcut_reads_attention {
            d_branch_in.add_assign(&d_shortcut)?;
            Tensor::zeros_like(&cache.input)
        } else {
            d_shortcut
        };
        match (&self.attention, &cache.attention) {
            (Some(att), Some((att_cache, _))) => {
                let d = att.backward(reg, att_cache, &d_branch_in, grads)?;
                d_input.add_assign(&d)?;
            }
            _ => d_input.add_assign(&d_branch_in)?,
        }
        Ok(d_input)
    }
}

/// `ReLU(BN(conv3×3/2(h)))`.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub conv: Conv,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct DownsampleCache<T> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
    normed: Tensor<T>,
}

impl Downsample {
    pub fn forward<T: Element>(
        &self,
        reg: &Registry<T>,
        h: &Tensor<T>,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<(Tensor<T>, DownsampleCache<T>)> {
        let (normed, bn) = self
            .bn
            .forward(reg, &self.conv.forward(reg, h)?, mode, updates)?;
        Ok((
            layers::relu(&normed),
            DownsampleCache {
                input: h.clone(),
                bn,
                normed,
            },
        ))
    }

    pub fn backward<T: Element>(
        &self,
        reg: &Registry<T>,
        cache: &DownsampleCache<T>,
        upstream: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let d = layers::relu_backward(&cache.normed, upstream)?;
        let d = self.bn.backward(reg, &cache.bn, &d, grads)?;
        self.conv.backward(reg, &cache.input, &d, grads)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<ResidualBlock>,
    pub down: Downsample,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: Mode,
    stem: StemCache<T>,
    stages: Vec<(Vec<ResidualBlockCache<T>>, DownsampleCache<T>)>,
    final_attention: AreaAttentionCache<T>,
    final_shape: Vec<usize>,
    mask: Option<Tensor<T>>,
    dropped: Tensor<T>,
    y_hat: Tensor<T>,
    shapes: Vec<(String, Vec<usize>)>,
}

impl<T: Element> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn y_hat(&self) -> &Tensor<T> {
        &self.y_hat
    }

    /// Observed output shape of each named layer, in forward order.
    pub fn shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }
}

#[derive(Debug, Clone)]
pub struct ResLinkModel<T> {
    config: ModelConfig,
    registry: Registry<T>,
    stem: Stem,
    stages: Vec<Stage>,
    final_attention: AreaAttention,
    head: Dense,
    dropout: DropoutSpec,
    rng: ModelRng,
    shape_table: ShapeTable,
}

impl<T: Element> ResLinkModel<T> {
    /// Builds and initializes the network. Convolutions are He-normal,
    /// the head is Glorot-uniform, BN starts at γ=1, β=0, stats (0, 1).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let shape_table = config.shape_table()?;
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut reg = Registry::new();
        let stem = Stem {
            conv: Conv::register(&mut reg, "stem.conv", 7, 2, config.input_c, config.stem_filters, &mut rng),
            bn: BatchNorm::register(&mut reg, "stem.bn", config.stem_filters),
        };
        let area = (config.area_h, config.area_w);
        let mut c = config.stem_filters;
        let mut stages = Vec::new();
        for (s, &f) in config.stage_filters.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                blocks.push(ResidualBlock::register(
                    &mut reg,
                    &block_name(s, b),
                    c,
                    f,
                    config.attention_in_blocks.then_some(area),
                    config.shortcut_reads_attention,
                    &mut rng,
                ));
                c = f;
            }
            let prefix = format!("stage{}.down", s + 1);
            stages.push(Stage {
                blocks,
                down: Downsample {
                    conv: Conv::register(&mut reg, &format!("{prefix}.conv"), 3, 2, f, f, &mut rng),
                    bn: BatchNorm::register(&mut reg, &format!("{prefix}.bn"), f),
                },
            });
        }
        let final_attention =
            AreaAttention::register(&mut reg, "final_attention", c, area.0, area.1, &mut rng);
        let head = Dense::register(&mut reg, "head", c, config.num_classes, &mut rng);
        let dropout = DropoutSpec::new(config.dropout_rate)?;
        Ok(ResLinkModel {
            config,
            registry: reg,
            stem,
            stages,
            final_attention,
            head,
            dropout,
            rng,
            shape_table,
        })
    }

    /// The same network with parameters and statistics converted to `U`.
    pub fn cast<U: Element>(&self) -> ResLinkModel<U> {
        ResLinkModel {
            config: self.config.clone(),
            registry: self.registry.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            final_attention: self.final_attention.clone(),
            head: self.head.clone(),
            dropout: self.dropout,
            rng: self.rng.clone(),
            shape_table: self.shape_table.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry<T> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut Registry<T> {
        &mut self.registry
    }

    pub fn shape_table(&self) -> &ShapeTable {
        &self.shape_table
    }

    pub fn stem(&self) -> &Stem {
        &self.stem
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn final_attention(&self) -> &AreaAttention {
        &self.final_attention
    }

    pub fn rng(&self) -> &ModelRng {
        &self.rng
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ModelRng::seed_from_u64(seed);
    }

    /// Full forward pass. In `Train` mode this draws dropout masks from the
    /// model PRNG and updates BN running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let mut rng = self.rng.clone();
        let (y, cache, updates) = self.forward_detached(x, mode, &mut rng)?;
        self.rng = rng;
        apply_updates(&mut self.registry, updates);
        Ok((y, cache))
    }

    /// Inference-mode prediction; never mutates the model.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = ModelRng::seed_from_u64(0);
        Ok(self.forward_detached(x, Mode::Infer, &mut rng)?.0)
    }

    /// Forward pass that leaves the model untouched: dropout draws come from
    /// `rng` and running-statistic updates are returned instead of applied.
    pub fn forward_detached(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ModelRng,
    ) -> Result<(Tensor<T>, ForwardCache<T>, StatUpdates<T>)> {
        let cfg = &self.config;
        let (_, h, w, c) = x.dims4()?;
        if (h, w, c) != (cfg.input_h, cfg.input_w, cfg.input_c) {
            return Err(Error::dim(
                "forward",
                format!(
                    "input [{}] vs configured {}×{}×{}",
                    ShapeDisplay(x.shape()),
                    cfg.input_h,
                    cfg.input_w,
                    cfg.input_c
                ),
            ));
        }
        x.check_finite("input")?;
        let reg = &self.registry;
        let mut updates = Vec::new();
        let mut shapes = Vec::new();
        record(&mut shapes, "input", x)?;
        let (mut f, stem) = self.stem.forward(reg, x, mode, &mut updates)?;
        record(&mut shapes, "stem.conv", &stem.normed)?;
        record(&mut shapes, "stem.pool", &f)?;

        let mut stage_caches = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            let mut block_caches = Vec::new();
            for (b, block) in stage.blocks.iter().enumerate() {
                let (out, cache) = block.forward(reg, &f, mode, &mut updates)?;
                record(&mut shapes, &block_name(s, b), &out)?;
                block_caches.push(cache);
                f = out;
            }
            let (out, down) = stage.down.forward(reg, &f, mode, &mut updates)?;
            record(&mut shapes, &format!("stage{}.down", s + 1), &out)?;
            stage_caches.push((block_caches, down));
            f = out;
        }

        let (f_final, final_attention) = self.final_attention.forward(reg, &f, mode, &mut updates)?;
        record(&mut shapes, "final_attention", &f_final)?;
        let pooled = layers::global_avg_pool(&f_final)?;
        record(&mut shapes, "gap", &pooled)?;
        let (dropped, mask) = layers::dropout(&pooled, self.dropout, mode, rng);
        let logits = self.head.forward(reg, &dropped)?;
        let y_hat = match cfg.head {
            Head::Sigmoid => layers::sigmoid(&logits),
            Head::Softmax => layers::softmax(&logits)?,
        };
        record(&mut shapes, "head", &y_hat)?;
        Ok((
            y_hat.clone(),
            ForwardCache {
                mode,
                stem,
                stages: stage_caches,
                final_attention,
                final_shape: f_final.shape().to_vec(),
                mask,
                dropped,
                y_hat,
                shapes,
            },
            updates,
        ))
    }

    /// Gradients of `Σ upstream ⊙ ŷ` for every registered parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &Tensor<T>) -> Result<Grads<T>> {
        if cache.mode != Mode::Train {
            return Err(Error::Usage(
                "backward needs a cache from a training-mode forward pass".into(),
            ));
        }
        upstream.expect_same_shape(&cache.y_hat, "backward")?;
        let reg = &self.registry;
        let mut grads = Grads::zeros_for(reg);
        let d_logits = match self.config.head {
            Head::Sigmoid => layers::sigmoid_backward(&cache.y_hat, upstream)?,
            Head::Softmax => layers::softmax_backward(&cache.y_hat, upstream)?,
        };
        let d = self.head.backward(reg, &cache.dropped, &d_logits, &mut grads)?;
        let d = layers::dropout_backward(cache.mask.as_ref(), &d)?;
        let d = layers::global_avg_pool_backward(&cache.final_shape, &d)?;
        let mut d = self
            .final_attention
            .backward(reg, &cache.final_attention, &d, &mut grads)?;
        for (stage, (block_caches, down_cache)) in self.stages.iter().zip(&cache.stages).rev() {
            d = stage.down.backward(reg, down_cache, &d, &mut grads)?;
            for (block, bc) in stage.blocks.iter().zip(block_caches).rev() {
                d = block.backward(reg, bc, &d, &mut grads)?;
            }
        }
        self.stem.backward(reg, &cache.stem, &d, &mut grads)?;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, central_difference_at, rel_error, rel_error_slices};
    use rand::seq::index::sample;

    fn rng(seed: u64) -> ModelRng {
        ModelRng::seed_from_u64(seed)
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_h: 16,
            input_w: 16,
            input_c: 2,
            stem_filters: 4,
            stage_filters: vec![4, 8],
            area_h: 2,
            area_w: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_shape_table() {
        let table = ModelConfig::default().shape_table().unwrap();
        let text = table.render();
        let want = "input: 1×224×224×3\n\
                    stem.conv: 1×112×112×32\n\
                    stem.pool: 1×56×56×32\n\
                    stage1.block1: 1×56×56×32\n\
                    stage1.down: 1×28×28×32\n\
                    stage2.block1: 1×28×28×64\n\
                    stage2.down: 1×14×14×64\n\
                    stage3.block1: 1×14×14×128\n\
                    stage3.down: 1×7×7×128\n\
                    final_attention: 1×7×7×128\n\
                    gap: 1×128\n\
                    head: 1×1\n";
        assert_eq!(text, want);
    }

    #[test]
    fn miniature_stem_reaches_sixteen() {
        let t = ModelConfig::miniature().shape_table().unwrap();
        assert_eq!(t.get("stem.pool"), Some(&[1, 16, 16, 8][..]));
    }

    #[test]
    fn config_errors_name_the_field() {
        let cfg = ModelConfig {
            head: Head::Softmax,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "head"),
            other => panic!("{other:?}"),
        }
        let cfg = ModelConfig {
            stage_filters: vec![],
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "stage_filters"));
        let cfg = ModelConfig {
            dropout_rate: 1.0,
            ..ModelConfig::default()
        };
        assert!(ResLinkModel::<f32>::build(cfg, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ResLinkModel::<f32>::build(tiny(), 9).unwrap();
        let b = ResLinkModel::<f32>::build(tiny(), 9).unwrap();
        assert_eq!(a.registry(), b.registry());
        let c = ResLinkModel::<f32>::build(tiny(), 10).unwrap();
        assert_ne!(a.registry(), c.registry());
    }

    #[test]
    fn forward_shapes_match_table_and_outputs_in_range() {
        let mut m = ResLinkModel::<f32>::build(tiny(), 1).unwrap();
        let x = Tensor::randn(&[3, 16, 16, 2], 1.0, &mut rng(2));
        let (y, cache) = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let table = m.shape_table();
        assert_eq!(cache.shapes().len(), table.rows.len());
        for ((name, shape), (tname, tshape)) in cache.shapes().iter().zip(&table.rows) {
            assert_eq!(name, tname);
            assert_eq!(&shape[1..], &tshape[1..], "{name}");
        }
    }

    #[test]
    fn infer_is_deterministic_and_leaves_state() {
        let mut m = ResLinkModel::<f32>::build(tiny(), 1).unwrap();
        let x = Tensor::randn(&[2, 16, 16, 2], 1.0, &mut rng(3));
        m.forward(&x, Mode::Train).unwrap();
        let before = m.registry().clone();
        let (a, _) = m.forward(&x, Mode::Infer).unwrap();
        let (b, _) = m.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.registry(), &before);
        assert_eq!(m.predict(&x).unwrap(), a);
    }

    #[test]
    fn backward_after_infer_is_a_usage_error() {
        let mut m = ResLinkModel::<f32>::build(tiny(), 1).unwrap();
        let x = Tensor::randn(&[2, 16, 16, 2], 1.0, &mut rng(3));
        let (y, cache) = m.forward(&x, Mode::Infer).unwrap();
        assert!(matches!(m.backward(&cache, &y), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads_one_per_param() {
        let mut m = ResLinkModel::<f64>::build(tiny(), 4).unwrap();
        let x = Tensor::randn(&[2, 16, 16, 2], 1.0, &mut rng(5));
        let (y, cache) = m.forward(&x, Mode::Train).unwrap();
        let g = m.backward(&cache, &Tensor::zeros_like(&y)).unwrap();
        assert_eq!(g.len(), m.registry().param_count());
        for (t, p) in g.tensors().iter().zip(m.registry().params()) {
            assert_eq!(t.shape(), p.tensor.shape());
            assert!(t.data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn input_shape_mismatch() {
        let mut m = ResLinkModel::<f32>::build(tiny(), 1).unwrap();
        let x = Tensor::zeros(&[1, 15, 16, 2]);
        assert!(matches!(m.forward(&x, Mode::Infer), Err(Error::Dimension { .. })));
    }

    #[test]
    fn nan_input_is_a_numeric_fault() {
        let mut m = ResLinkModel::<f32>::build(tiny(), 1).unwrap();
        let mut x = Tensor::zeros(&[1, 16, 16, 2]);
        x.data_mut()[5] = f32::NAN;
        assert!(matches!(m.forward(&x, Mode::Infer), Err(Error::NumericFault(s)) if s == "input"));
    }

    #[test]
    fn projection_shortcut_when_channels_change() {
        let m = ResLinkModel::<f32>::build(ModelConfig::default(), 0).unwrap();
        assert!(m.stages()[0].blocks[0].shortcut.is_none());
        assert!(m.stages()[1].blocks[0].shortcut.is_some());
        let p = m.stages()[1].blocks[0].shortcut.as_ref().unwrap();
        assert_eq!(m.registry().param(p.conv.kernel).shape(), &[1, 1, 32, 64]);
    }

    fn block_fd(shortcut_reads_attention: bool, c_in: usize, filters: usize, seed: u64) {
        let mut reg = Registry::<f64>::new();
        let mut r = rng(seed);
        let block = ResidualBlock::register(
            &mut reg,
            "b",
            c_in,
            filters,
            Some((3, 3)),
            shortcut_reads_attention,
            &mut r,
        );
        let x = Tensor::<f64>::randn(&[2, 8, 8, c_in], 1.0, &mut r);
        let up = Tensor::<f64>::randn(&[2, 8, 8, filters], 1.0, &mut r);
        let (_, cache) = block.forward(&reg, &x, Mode::Train, &mut Vec::new()).unwrap();
        let mut grads = Grads::zeros_for(&reg);
        let dx = block.backward(&reg, &cache, &up, &mut grads).unwrap();
        let loss = |reg: &Registry<f64>, x: &Tensor<f64>| {
            block.forward(reg, x, Mode::Train, &mut Vec::new()).unwrap().0.dot(&up)
        };
        let nx = central_difference(&x, 1e-6, |x| loss(&reg, x));
        assert!(rel_error(&dx, &nx) <= 1e-5, "input");
        for (k, p) in reg.params().iter().enumerate() {
            let id = crate::params::ParamId(k);
            let np = central_difference(&p.tensor, 1e-6, |t| {
                let mut r2 = reg.clone();
                *r2.param_mut(id) = t.clone();
                loss(&r2, &x)
            });
            assert!(rel_error(grads.get(id), &np) <= 1e-5, "{}", p.name);
        }
    }

    #[test]
    fn residual_block_gradients() {
        block_fd(false, 4, 4, 1);
        block_fd(false, 4, 6, 2);
        block_fd(true, 4, 6, 3);
        block_fd(true, 4, 4, 4);
    }

    #[test]
    fn zeroed_branch_reduces_to_relu() {
        let mut reg = Registry::<f32>::new();
        let mut r = rng(3);
        let block = ResidualBlock::register(&mut reg, "b", 4, 4, None, false, &mut r);
        *reg.param_mut(block.conv2.kernel) = Tensor::zeros(&[3, 3, 4, 4]);
        let x = Tensor::<f32>::randn(&[2, 5, 5, 4], 1.0, &mut r);
        let (h, _) = block.forward(&reg, &x, Mode::Train, &mut Vec::new()).unwrap();
        assert_eq!(h, layers::relu(&x));
    }

    #[test]
    fn stem_and_downsample_gradients() {
        let mut reg = Registry::<f64>::new();
        let mut r = rng(8);
        let stem = Stem {
            conv: Conv::register(&mut reg, "stem.conv", 7, 2, 2, 3, &mut r),
            bn: BatchNorm::register(&mut reg, "stem.bn", 3),
        };
        let down = Downsample {
            conv: Conv::register(&mut reg, "down.conv", 3, 2, 3, 3, &mut r),
            bn: BatchNorm::register(&mut reg, "down.bn", 3),
        };
        let x = Tensor::<f64>::randn(&[2, 12, 12, 2], 1.0, &mut r);
        let up_s = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let (s, sc) = stem.forward(&reg, &x, Mode::Train, &mut Vec::new()).unwrap();
        assert_eq!(s.shape(), up_s.shape());
        let mut g = Grads::zeros_for(&reg);
        let dx = stem.backward(&reg, &sc, &up_s, &mut g).unwrap();
        let nx = central_difference(&x, 1e-6, |x| {
            stem.forward(&reg, x, Mode::Train, &mut Vec::new()).unwrap().0.dot(&up_s)
        });
        assert!(rel_error(&dx, &nx) <= 1e-5);

        let h = Tensor::<f64>::randn(&[2, 7, 7, 3], 1.0, &mut r);
        let (d, dc) = down.forward(&reg, &h, Mode::Train, &mut Vec::new()).unwrap();
        assert_eq!(d.shape(), &[2, 4, 4, 3]);
        let up_d = Tensor::<f64>::randn(d.shape(), 1.0, &mut r);
        let dh = down.backward(&reg, &dc, &up_d, &mut g).unwrap();
        let nh = central_difference(&h, 1e-6, |h| {
            down.forward(&reg, h, Mode::Train, &mut Vec::new()).unwrap().0.dot(&up_d)
        });
        assert!(rel_error(&dh, &nh) <= 1e-5);
    }

    #[test]
    fn composed_model_gradient_sampled() {
        for head in [Head::Sigmoid, Head::Softmax] {
            let cfg = ModelConfig {
                head,
                num_classes: if head == Head::Sigmoid { 1 } else { 3 },
                ..tiny()
            };
            let mut m = ResLinkModel::<f64>::build(cfg, 11).unwrap();
            let x = Tensor::<f64>::randn(&[3, 16, 16, 2], 1.0, &mut rng(12));
            let r0 = m.rng().clone();
            let (y, cache) = m.forward(&x, Mode::Train).unwrap();
            let up = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng(13));
            let grads = m.backward(&cache, &up).unwrap();

            // 50 scalars drawn across the flattened parameter list.
            let sizes: Vec<usize> = m.registry().params().iter().map(|p| p.tensor.len()).collect();
            let total: usize = sizes.iter().sum();
            let picks = sample(&mut rng(14), total, 50).into_vec();
            let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
            for flat in picks {
                let (mut k, mut off) = (0, flat);
                while off >= sizes[k] {
                    off -= sizes[k];
                    k += 1;
                }
                let id = crate::params::ParamId(k);
                analytic.push(grads.get(id).data()[off]);
                let base = m.registry().param(id).clone();
                numeric.extend(central_difference_at(&base, &[off], 1e-6, |t| {
                    let mut probe = m.clone();
                    *probe.registry_mut().param_mut(id) = t.clone();
                    probe
                        .forward_detached(&x, Mode::Train, &mut r0.clone())
                        .unwrap()
                        .0
                        .dot(&up)
                }));
            }
            let err = rel_error_slices(&analytic, &numeric);
            assert!(err <= 1e-5, "{head:?}: {err}");
        }
    }
}
