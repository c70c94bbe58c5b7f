//! Encoder variants and the full PAA-ResNet forward pass.
//!
//! A single parameter walk drives initialization, counting, checkpoint
//! save/load and the forward pass, so names can never drift apart.

use super::axial::{AxialView, BnView};
use super::paa::{paa_block, BlockView, PaaBlockConfig};
use super::{Ctx, EvalCtx};
use crate::error::{Error, Result};
use crate::tensor::tape::BnStats;
use crate::tensor::{sc, Mode, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Output embedding dimensionality.
pub const EMBED_DIM: usize = 128;

/// Encoder family. S mirrors ResNet-50; M and L widen every channel count by
/// 1.5× and 2×; XS is the desk-scale variant for tests and CI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Xs,
    S,
    M,
    L,
}

impl EncoderVariant {
    pub fn code(self) -> u32 {
        match self {
            EncoderVariant::Xs => 0,
            EncoderVariant::S => 1,
            EncoderVariant::M => 2,
            EncoderVariant::L => 3,
        }
    }

    pub fn from_code(c: u32) -> Result<Self> {
        Ok(match c {
            0 => EncoderVariant::Xs,
            1 => EncoderVariant::S,
            2 => EncoderVariant::M,
            3 => EncoderVariant::L,
            _ => return Err(Error::Format(format!("unknown variant code {c}"))),
        })
    }

    /// Channel multiplier relative to S.
    pub fn width_multiplier(self) -> f64 {
        match self {
            EncoderVariant::Xs => 0.0, // not derived from S
            EncoderVariant::S => 1.0,
            EncoderVariant::M => 1.5,
            EncoderVariant::L => 2.0,
        }
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xs" => Ok(EncoderVariant::Xs),
            "s" => Ok(EncoderVariant::S),
            "m" => Ok(EncoderVariant::M),
            "l" => Ok(EncoderVariant::L),
            other => Err(Error::Config(format!("unknown encoder variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EncoderVariant::Xs => "xs",
            EncoderVariant::S => "s",
            EncoderVariant::M => "m",
            EncoderVariant::L => "l",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemCfg {
    pub k: usize,
    pub out: usize,
    pub stride: usize,
    pub maxpool: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub cfg: PaaBlockConfig,
    pub paa: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub input_size: usize,
    pub heads: usize,
    pub stem: StemCfg,
    pub stages: Vec<Vec<BlockSpec>>,
    pub paa_blocks: usize,
}

impl EncoderConfig {
    /// Build the layer plan for a variant at a given square input size.
    /// `paa_blocks` controls how many trailing bottleneck blocks of the
    /// network replace their convolution by parallel axial attention
    /// (default: all four for XS, the last three for S/M/L).
    pub fn new(variant: EncoderVariant, input_size: usize, paa_blocks: Option<usize>) -> Result<Self> {
        let (stem, depths, bnecks, strides, heads): (StemCfg, Vec<usize>, Vec<usize>, Vec<usize>, usize) =
            match variant {
                EncoderVariant::Xs => (
                    StemCfg {
                        k: 3,
                        out: 16,
                        stride: 2,
                        maxpool: false,
                    },
                    vec![2, 2],
                    vec![4, 8],
                    vec![2, 1],
                    4,
                ),
                EncoderVariant::S | EncoderVariant::M | EncoderVariant::L => {
                    let m = variant.width_multiplier();
                    let w = |c: usize| -> usize { (c as f64 * m).round() as usize };
                    (
                        StemCfg {
                            k: 7,
                            out: w(64),
                            stride: 2,
                            maxpool: true,
                        },
                        vec![3, 4, 6, 3],
                        vec![w(64), w(128), w(256), w(512)],
                        vec![1, 2, 2, 2],
                        8,
                    )
                }
            };
        let total_blocks: usize = depths.iter().sum();
        let paa_blocks = paa_blocks
            .unwrap_or(match variant {
                EncoderVariant::Xs => total_blocks,
                _ => 3,
            })
            .min(total_blocks);

        let mut spatial = input_size / stem.stride;
        if input_size % stem.stride != 0 || spatial == 0 {
            return Err(Error::Config(format!(
                "input size {input_size} incompatible with stem stride {}",
                stem.stride
            )));
        }
        if stem.maxpool {
            spatial /= 2;
        }
        let mut stages = Vec::new();
        let mut in_ch = stem.out;
        let mut flat_index = 0usize;
        let first_paa = total_blocks - paa_blocks;
        for (si, &depth) in depths.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let stride = if bi == 0 { strides[si] } else { 1 };
                let out_ch = bnecks[si] * 4;
                let cfg = PaaBlockConfig {
                    in_channels: in_ch,
                    bottleneck_channels: bnecks[si],
                    out_channels: out_ch,
                    stride,
                    height: spatial,
                    width: spatial,
                };
                let paa = flat_index >= first_paa;
                if paa {
                    cfg.validate(heads)?;
                }
                blocks.push(BlockSpec { cfg, paa });
                if stride == 2 {
                    if spatial % 2 != 0 {
                        return Err(Error::Config(format!(
                            "spatial size {spatial} not divisible by stride 2"
                        )));
                    }
                    spatial /= 2;
                }
                in_ch = out_ch;
                flat_index += 1;
            }
            stages.push(blocks);
        }
        Ok(EncoderConfig {
            variant,
            input_size,
            heads,
            stem,
            stages,
            paa_blocks,
        })
    }

    pub fn last_channels(&self) -> usize {
        self.stages.last().unwrap().last().unwrap().cfg.out_channels
    }

    /// Visit every learnable parameter as (name, shape).
    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &[usize])) {
        let bn = |f: &mut dyn FnMut(&str, &[usize]), key: &str, c: usize| {
            f(&format!("{key}.gamma"), &[c]);
            f(&format!("{key}.beta"), &[c]);
        };
        f("stem.w", &[self.stem.out, 3, self.stem.k, self.stem.k]);
        bn(f, "stem.bn", self.stem.out);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, spec) in stage.iter().enumerate() {
                let p = format!("stage{si}.block{bi}");
                let c = &spec.cfg;
                if spec.paa {
                    let hd = c.bottleneck_channels / self.heads;
                    f(&format!("{p}.reduce.w"), &[c.bottleneck_channels, c.in_channels, 1, 1]);
                    bn(f, &format!("{p}.reduce.bn"), c.bottleneck_channels);
                    for (axis, l) in [("h_attn", c.height), ("w_attn", c.width)] {
                        for proj in ["wq", "wk", "wv"] {
                            f(
                                &format!("{p}.{axis}.{proj}"),
                                &[c.bottleneck_channels, c.bottleneck_channels, 1],
                            );
                        }
                        for table in ["rq", "rk", "rv"] {
                            f(&format!("{p}.{axis}.{table}"), &[hd, 2 * l - 1]);
                        }
                        bn(f, &format!("{p}.{axis}.bn_logits"), self.heads);
                        bn(f, &format!("{p}.{axis}.bn_out"), c.bottleneck_channels);
                    }
                    for br in ["h_shuffle", "w_shuffle"] {
                        f(
                            &format!("{p}.{br}.w"),
                            &[c.bottleneck_channels, c.bottleneck_channels, 1],
                        );
                        bn(f, &format!("{p}.{br}.bn"), c.bottleneck_channels);
                    }
                    f(&format!("{p}.mix.w"), &[c.out_channels, 2 * c.bottleneck_channels, 1, 1]);
                    bn(f, &format!("{p}.mix.bn"), c.out_channels);
                } else {
                    f(&format!("{p}.conv1.w"), &[c.bottleneck_channels, c.in_channels, 1, 1]);
                    bn(f, &format!("{p}.conv1.bn"), c.bottleneck_channels);
                    f(
                        &format!("{p}.conv2.w"),
                        &[c.bottleneck_channels, c.bottleneck_channels, 3, 3],
                    );
                    bn(f, &format!("{p}.conv2.bn"), c.bottleneck_channels);
                    f(&format!("{p}.conv3.w"), &[c.out_channels, c.bottleneck_channels, 1, 1]);
                    bn(f, &format!("{p}.conv3.bn"), c.out_channels);
                }
                if c.stride != 1 || c.in_channels != c.out_channels {
                    f(&format!("{p}.shortcut.w"), &[c.out_channels, c.in_channels, 1, 1]);
                    bn(f, &format!("{p}.shortcut.bn"), c.out_channels);
                }
            }
        }
        f("head.fc.w", &[self.last_channels(), EMBED_DIM]);
        f("head.fc.b", &[EMBED_DIM]);
    }

    /// Visit every batch-norm layer as (key, channel count).
    pub fn for_each_bn(&self, f: &mut impl FnMut(&str, usize)) {
        let mut names: Vec<(String, usize)> = Vec::new();
        self.for_each_param(&mut |name, shape| {
            if let Some(stripped) = name.strip_suffix(".gamma") {
                names.push((stripped.to_string(), shape[0]));
            }
        });
        for (k, c) in names {
            f(&k, c);
        }
    }

    /// Total learnable parameter count, computed from the layer plan alone.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0usize;
        self.for_each_param(&mut |_, shape| total += shape.iter().product::<usize>());
        total
    }
}

/// Named parameter tensors plus running batch-norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    pub tensors: BTreeMap<String, Tensor<S>>,
    pub bn: BTreeMap<String, BnStats<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
    }

    pub fn bn_stats(&self, key: &str) -> &BnStats<S> {
        self.bn
            .get(key)
            .unwrap_or_else(|| panic!("bn stats {key} missing from store"))
    }
}

/// The PAA-ResNet encoder: layer plan plus parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    pub cfg: EncoderConfig,
    pub store: ParamStore<S>,
}

fn init_value<S: Scalar>(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    if name.ends_with(".gamma") {
        return Tensor::filled(shape.to_vec(), S::one());
    }
    if name.ends_with(".beta") || name.ends_with(".b") {
        return Tensor::zeros(shape.to_vec());
    }
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let std = if name.ends_with(".rq") || name.ends_with(".rk") || name.ends_with(".rv") {
        0.1
    } else if name.ends_with(".wq") || name.ends_with(".wk") || name.ends_with(".wv") {
        let c = shape[1] as f64;
        (1.0 / c).sqrt()
    } else {
        // He initialization for convolution / linear weights.
        let fan_in: usize = match shape.len() {
            2 => shape[0],
            _ => shape[1..].iter().product(),
        };
        (2.0 / fan_in as f64).sqrt()
    };
    let data: Vec<S> = (0..numel)
        .map(|_| sc::<S>(normal.sample(rng) * std))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

impl<S: Scalar> Encoder<S> {
    /// Fresh encoder with seeded parameter initialization.
    pub fn new(
        variant: EncoderVariant,
        input_size: usize,
        paa_blocks: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let cfg = EncoderConfig::new(variant, input_size, paa_blocks)?;
        Ok(Self::from_config(cfg, seed))
    }

    pub fn from_config(cfg: EncoderConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        cfg.for_each_param(&mut |name, shape| {
            tensors.insert(name.to_string(), init_value::<S>(name, shape, &mut rng));
        });
        let mut bn = BTreeMap::new();
        cfg.for_each_bn(&mut |key, c| {
            bn.insert(key.to_string(), BnStats::new(c));
        });
        Encoder {
            cfg,
            store: ParamStore { tensors, bn },
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.tensors.values().map(|t| t.numel()).sum()
    }

    fn bn_view<'a>(&'a self, key: &str) -> BnView<'a, S> {
        BnView {
            key: key.to_string(),
            gamma: self.store.get(&format!("{key}.gamma")),
            beta: self.store.get(&format!("{key}.beta")),
            stats: self.store.bn_stats(key),
        }
    }

    fn axial_view<'a>(&'a self, prefix: &str) -> AxialView<'a, S> {
        AxialView {
            heads: self.cfg.heads,
            wq: self.store.get(&format!("{prefix}.wq")),
            wk: self.store.get(&format!("{prefix}.wk")),
            wv: self.store.get(&format!("{prefix}.wv")),
            rq: self.store.get(&format!("{prefix}.rq")),
            rk: self.store.get(&format!("{prefix}.rk")),
            rv: self.store.get(&format!("{prefix}.rv")),
            bn_logits: self.bn_view(&format!("{prefix}.bn_logits")),
            bn_output: self.bn_view(&format!("{prefix}.bn_out")),
            prefix: prefix.to_string(),
        }
    }

    /// Borrowed view of one PAA block's parameters.
    pub fn block_view<'a>(&'a self, stage: usize, block: usize) -> BlockView<'a, S> {
        let spec = &self.cfg.stages[stage][block];
        let p = format!("stage{stage}.block{block}");
        let shortcut =
            if spec.cfg.stride != 1 || spec.cfg.in_channels != spec.cfg.out_channels {
                Some((
                    self.store.get(&format!("{p}.shortcut.w")),
                    self.bn_view(&format!("{p}.shortcut.bn")),
                ))
            } else {
                None
            };
        BlockView {
            cfg: &spec.cfg,
            prefix: p.clone(),
            reduce_w: self.store.get(&format!("{p}.reduce.w")),
            reduce_bn: self.bn_view(&format!("{p}.reduce.bn")),
            h_attn: self.axial_view(&format!("{p}.h_attn")),
            w_attn: self.axial_view(&format!("{p}.w_attn")),
            h_shuffle_w: self.store.get(&format!("{p}.h_shuffle.w")),
            h_shuffle_bn: self.bn_view(&format!("{p}.h_shuffle.bn")),
            w_shuffle_w: self.store.get(&format!("{p}.w_shuffle.w")),
            w_shuffle_bn: self.bn_view(&format!("{p}.w_shuffle.bn")),
            mix_w: self.store.get(&format!("{p}.mix.w")),
            mix_bn: self.bn_view(&format!("{p}.mix.bn")),
            shortcut,
        }
    }

    fn conv_block_forward<C: Ctx<S>>(
        &self,
        ctx: &mut C,
        x: &C::Val,
        stage: usize,
        block: usize,
        mode: Mode,
    ) -> Result<C::Val> {
        let spec = &self.cfg.stages[stage][block];
        let c = &spec.cfg;
        let p = format!("stage{stage}.block{block}");
        let w1 = ctx.param(&format!("{p}.conv1.w"), self.store.get(&format!("{p}.conv1.w")));
        let t = ctx.conv2d(x, &w1, 1, 0)?;
        let t = super::axial::bn(ctx, &t, &self.bn_view(&format!("{p}.conv1.bn")), mode)?;
        let t = ctx.relu(&t);
        let w2 = ctx.param(&format!("{p}.conv2.w"), self.store.get(&format!("{p}.conv2.w")));
        let t = ctx.conv2d(&t, &w2, c.stride, 1)?;
        let t = super::axial::bn(ctx, &t, &self.bn_view(&format!("{p}.conv2.bn")), mode)?;
        let t = ctx.relu(&t);
        let w3 = ctx.param(&format!("{p}.conv3.w"), self.store.get(&format!("{p}.conv3.w")));
        let t = ctx.conv2d(&t, &w3, 1, 0)?;
        let t = super::axial::bn(ctx, &t, &self.bn_view(&format!("{p}.conv3.bn")), mode)?;
        let shortcut = if c.stride != 1 || c.in_channels != c.out_channels {
            let sw = ctx.param(
                &format!("{p}.shortcut.w"),
                self.store.get(&format!("{p}.shortcut.w")),
            );
            let s = ctx.conv2d(x, &sw, c.stride, 0)?;
            super::axial::bn(ctx, &s, &self.bn_view(&format!("{p}.shortcut.bn")), mode)?
        } else {
            x.clone()
        };
        let sum = ctx.add(&t, &shortcut)?;
        Ok(ctx.relu(&sum))
    }

    /// Full forward: stem → stages → global average pool → FC → l2 norm.
    /// Output rows are 128-D unit vectors.
    pub fn forward<C: Ctx<S>>(&self, ctx: &mut C, batch: &Tensor<S>, mode: Mode) -> Result<C::Val> {
        let x = ctx.input(batch);
        self.forward_val(ctx, &x, mode)
    }

    /// Forward from an existing context value (attacks feed tape-computed
    /// inputs through here).
    pub fn forward_val<C: Ctx<S>>(&self, ctx: &mut C, x: &C::Val, mode: Mode) -> Result<C::Val> {
        let s = ctx.shape_of(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.input_size || s[3] != self.cfg.input_size {
            return Err(Error::Dimension {
                op: "encode",
                detail: format!(
                    "expected [B,3,{0},{0}] input, got {s:?}",
                    self.cfg.input_size
                ),
            });
        }
        let x = x.clone();
        let stem_w = ctx.param("stem.w", self.store.get("stem.w"));
        let t = ctx.conv2d(&x, &stem_w, self.cfg.stem.stride, self.cfg.stem.k / 2)?;
        let t = super::axial::bn(ctx, &t, &self.bn_view("stem.bn"), mode)?;
        let mut t = ctx.relu(&t);
        if self.cfg.stem.maxpool {
            t = ctx.max_pool2d(&t, 3, 2, 1)?;
        }
        for (si, stage) in self.cfg.stages.iter().enumerate() {
            for (bi, spec) in stage.iter().enumerate() {
                t = if spec.paa {
                    let view = self.block_view(si, bi);
                    paa_block(ctx, &t, &view, mode)?
                } else {
                    self.conv_block_forward(ctx, &t, si, bi, mode)?
                };
            }
        }
        let pooled = ctx.global_avg_pool(&t)?;
        let fc_w = ctx.param("head.fc.w", self.store.get("head.fc.w"));
        let fc_b = ctx.param("head.fc.b", self.store.get("head.fc.b"));
        let logits = ctx.matmul(&pooled, &fc_w)?;
        let logits = ctx.add_bias(&logits, &fc_b)?;
        ctx.l2_normalize(&logits)
    }

    /// Seed the running batch-norm statistics from one train-mode pass over
    /// `batch`. Fresh statistics (mean 0, variance 1) make eval-mode forwards
    /// of an untrained encoder collapse; one observed batch fixes that.
    pub fn warm_bn(&mut self, batch: &Tensor<S>) -> Result<()> {
        let mut tape = crate::tensor::Tape::without_grads();
        let mut ctx = super::TapeCtx::new(&mut tape, false);
        self.forward(&mut ctx, batch, Mode::Train)?;
        let updates: Vec<crate::tensor::tape::BnUpdate<S>> =
            tape.bn_updates().into_iter().cloned().collect();
        self.apply_bn_updates(&updates, S::one());
        Ok(())
    }

    /// Eval-mode embeddings without gradient tracking.
    pub fn embed_eval(&self, batch: &Tensor<S>, concurrent: bool) -> Result<Tensor<S>> {
        let mut ctx = if concurrent {
            EvalCtx::concurrent()
        } else {
            EvalCtx::sequential()
        };
        self.forward(&mut ctx, batch, Mode::Eval)
    }

    /// Fold a step's observed batch statistics into the running statistics
    /// with momentum `m_bn` (new = (1−m)·old + m·batch).
    pub fn apply_bn_updates(&mut self, updates: &[crate::tensor::tape::BnUpdate<S>], m_bn: S) {
        let one_minus = S::one() - m_bn;
        for u in updates {
            if let Some(stats) = self.store.bn.get_mut(&u.key) {
                for (rm, &bm) in stats.mean.iter_mut().zip(&u.mean) {
                    *rm = *rm * one_minus + bm * m_bn;
                }
                for (rv, &bv) in stats.var.iter_mut().zip(&u.var) {
                    *rv = *rv * one_minus + bv * m_bn;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xs_plan_matches_desk_description() {
        let cfg = EncoderConfig::new(EncoderVariant::Xs, 32, None).unwrap();
        assert_eq!(cfg.stem.out, 16);
        assert_eq!(cfg.stages.len(), 2);
        assert_eq!(cfg.stages[0].len(), 2);
        assert_eq!(cfg.stages[1].len(), 2);
        assert_eq!(cfg.stages[0][0].cfg.out_channels, 16);
        assert_eq!(cfg.stages[1][0].cfg.out_channels, 32);
        assert!(cfg.stages.iter().flatten().all(|b| b.paa));
        // stem halves 32 → 16; stage0 strides to 8
        assert_eq!(cfg.stages[0][0].cfg.height, 16);
        assert_eq!(cfg.stages[1][0].cfg.height, 8);
    }

    #[test]
    fn sml_widths_scale_exactly() {
        let s = EncoderConfig::new(EncoderVariant::S, 224, None).unwrap();
        let m = EncoderConfig::new(EncoderVariant::M, 224, None).unwrap();
        let l = EncoderConfig::new(EncoderVariant::L, 224, None).unwrap();
        for stage in 0..4 {
            let ws = s.stages[stage][0].cfg.bottleneck_channels as f64;
            let wm = m.stages[stage][0].cfg.bottleneck_channels as f64;
            let wl = l.stages[stage][0].cfg.bottleneck_channels as f64;
            assert_eq!(wm, ws * 1.5);
            assert_eq!(wl, ws * 2.0);
        }
        // PAA replaces the trailing three blocks (all of stage 4)
        let flat: Vec<bool> = s.stages.iter().flatten().map(|b| b.paa).collect();
        assert_eq!(flat.iter().filter(|&&p| p).count(), 3);
        assert!(flat[13] && flat[14] && flat[15]);
    }

    #[test]
    fn parameter_count_is_stable_and_matches_store() {
        let e1: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 7).unwrap();
        let e2: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 7).unwrap();
        assert_eq!(e1.parameter_count(), e1.cfg.parameter_count());
        assert_eq!(e1.parameter_count(), e2.parameter_count());
        assert_eq!(e1.store.tensors, e2.store.tensors);
    }

    #[test]
    fn wrong_spatial_size_is_a_dimension_error() {
        let e: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 7).unwrap();
        let bad = Tensor::zeros(vec![1, 3, 16, 16]);
        let mut ctx = EvalCtx::sequential();
        assert!(matches!(
            e.forward(&mut ctx, &bad, Mode::Eval),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn encode_outputs_unit_rows_and_is_deterministic() {
        use rand::{Rng, SeedableRng};
        let e: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut both = one.clone();
        both.extend_from_slice(&one);
        let batch = Tensor::from_vec(vec![2, 3, 32, 32], both).unwrap();
        let v = e.embed_eval(&batch, false).unwrap();
        assert_eq!(v.shape(), &[2, EMBED_DIM]);
        for row in v.data().chunks(EMBED_DIM) {
            let n: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        // identical inputs → identical embeddings in eval mode
        let (a, b) = v.data().split_at(EMBED_DIM);
        assert_eq!(a, b);
    }
}
