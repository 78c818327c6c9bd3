//! Freezable ViT encoder with multi-scale decoder heads.
//!
//! Freezable layers are numbered from 0: the patch embedding is layer 0 and
//! block `i` is layer `i`. Layers freeze strictly in order, so the frozen
//! set is always a prefix. A decoder head tapping block `l` can only train
//! layers `0..=l`; once they are all frozen the head is pruned.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::block::{Block, BlockOpts, Dense, Norm};
use super::config::{ModelConfig, Rescale};
use super::params::{Binder, ParamGroup, ParamId, ParamStore};
use super::patch::{patchify, sincos_2d};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::objective::{local_mim_loss, LossOutput, MaskPlan, ScaleTerm, SupervisionTarget};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerState {
    pub frozen: bool,
    pub freeze_step: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct DecoderHead {
    pub tap: usize,
    pub scale: usize,
    pub chain: Vec<Rescale>,
    pub pruned: bool,
    pub prune_step: Option<usize>,
    ln_in: Norm,
    embed: Dense,
    mask_token: ParamId,
    block: Block,
    ln_out: Norm,
    upsample: Vec<ParamId>,
    pred: Dense,
}

/// Everything one training step consumes.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<Tensor>,
    pub masks: Vec<MaskPlan>,
    pub targets: Vec<SupervisionTarget>,
}

/// Visible patch tokens of a batch.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    /// `[batch, visible, P²·C]`.
    pub tokens: Tensor,
    /// `[batch, visible, D]` positional embeddings of the visible patches.
    pub pos: Tensor,
    /// Grid index of each visible row, per image.
    pub positions: Vec<Vec<usize>>,
}

/// A built forward graph with its loss.
pub struct StepGraph<'m> {
    pub graph: Graph,
    pub binder: Binder<'m>,
    pub loss: LossOutput,
    /// Tap block → activation node.
    pub taps: BTreeMap<usize, NodeId>,
}

#[derive(Clone, Debug)]
pub struct MimModel {
    config: ModelConfig,
    params: ParamStore,
    embed: Dense,
    blocks: Vec<Block>,
    heads: Vec<DecoderHead>,
    layers: Vec<LayerState>,
    enc_pos: Tensor,
    dec_pos: Tensor,
}

impl MimModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let d = config.embed_dim;
        let embed = Dense::new(&mut params, &mut rng, "patch_embed", ParamGroup::Layer(0), config.patch_dim(), d);
        let blocks = (1..=config.num_blocks)
            .map(|i| {
                Block::new(
                    &mut params,
                    &mut rng,
                    &format!("blocks.{i}"),
                    ParamGroup::Layer(i),
                    d,
                    config.num_heads,
                    config.mlp_ratio,
                )
            })
            .collect();
        let dd = config.decoder_dim;
        let mut heads = Vec::with_capacity(config.tap_layers.len());
        for (k, (&tap, &scale)) in config.tap_layers.iter().zip(&config.supervision_scales).enumerate() {
            let group = ParamGroup::Head(k);
            let name = format!("heads.{k}");
            let chain = config.rescale_chain(scale)?;
            let ln_in = Norm::new(&mut params, &format!("{name}.norm_in"), group, d);
            let embed = Dense::new(&mut params, &mut rng, &format!("{name}.embed"), group, d, dd);
            let mask_token = params.add(
                format!("{name}.mask_token"),
                Tensor::from_fn([dd], |_| rng.gen_range(-0.02..0.02)),
                group,
            );
            let block = Block::new(&mut params, &mut rng, &format!("{name}.block"), group, dd, config.decoder_heads, config.mlp_ratio);
            let ln_out = Norm::new(&mut params, &format!("{name}.norm_out"), group, dd);
            let upsample = chain
                .iter()
                .filter(|s| **s == Rescale::Upsample)
                .enumerate()
                .map(|(j, _)| {
                    params.add(
                        format!("{name}.upsample.{j}"),
                        Tensor::from_fn([dd, 2, 2], |_| 1.0 + rng.gen_range(-0.1..0.1)),
                        group,
                    )
                })
                .collect();
            let pred = Dense::new(&mut params, &mut rng, &format!("{name}.pred"), group, dd, config.hog.bins);
            heads.push(DecoderHead {
                tap,
                scale,
                chain,
                pruned: false,
                prune_step: None,
                ln_in,
                embed,
                mask_token,
                block,
                ln_out,
                upsample,
                pred,
            });
        }
        let enc_pos = sincos_2d(config.grid(), d)?;
        let dec_pos = sincos_2d(config.grid(), dd)?;
        Ok(Self {
            layers: vec![LayerState::default(); config.num_layers()],
            config,
            params,
            embed,
            blocks,
            heads,
            enc_pos,
            dec_pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn heads(&self) -> &[DecoderHead] {
        &self.heads
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Count of leading frozen layers.
    pub fn frozen_prefix(&self) -> usize {
        self.layers.iter().take_while(|l| l.frozen).count()
    }

    pub fn alive_heads(&self) -> Vec<usize> {
        (0..self.heads.len()).filter(|&k| !self.heads[k].pruned).collect()
    }

    pub fn is_param_trainable(&self, id: ParamId, frozen_prefix: usize) -> bool {
        match self.params.get(id).group {
            ParamGroup::Layer(i) => !self.layers[i].frozen && i >= frozen_prefix,
            ParamGroup::Head(k) => !self.heads[k].pruned,
        }
    }

    pub fn binder(&self, frozen_prefix: usize) -> Binder<'_> {
        let trainable = self
            .params
            .iter()
            .map(|(id, _)| self.is_param_trainable(id, frozen_prefix))
            .collect();
        Binder::new(&self.params, trainable)
    }

    /// Patchifies every image and keeps the visible rows.
    pub fn encoder_input(&self, images: &[Tensor], masks: &[MaskPlan]) -> Result<EncoderInput> {
        if images.is_empty() || images.len() != masks.len() {
            return Err(Error::contract(format!("{} images with {} masks", images.len(), masks.len())));
        }
        let c = &self.config;
        let v = masks[0].visible_indices.len();
        let (pd, d) = (c.patch_dim(), c.embed_dim);
        let mut tokens = Vec::with_capacity(images.len() * v * pd);
        let mut pos = Vec::with_capacity(images.len() * v * d);
        let mut positions = Vec::with_capacity(images.len());
        for (img, m) in images.iter().zip(masks) {
            if img.shape() != [c.channels, c.image_size, c.image_size] {
                return Err(Error::dim(format!(
                    "image {:?} does not match model input [{}, {}, {}]",
                    img.shape(),
                    c.channels,
                    c.image_size,
                    c.image_size
                )));
            }
            if m.num_patches != c.num_patches() || m.visible_indices.len() != v {
                return Err(Error::contract("mask plans must share patch and visible counts"));
            }
            let p = patchify(img, c.patch_size)?;
            for &i in &m.visible_indices {
                tokens.extend_from_slice(&p.data()[i * pd..(i + 1) * pd]);
                pos.extend_from_slice(&self.enc_pos.data()[i * d..(i + 1) * d]);
            }
            positions.push(m.visible_indices.clone());
        }
        let b = images.len();
        Ok(EncoderInput {
            tokens: Tensor::new([b, v, pd], tokens)?,
            pos: Tensor::new([b, v, d], pos)?,
            positions,
        })
    }

    /// Runs every encoder layer over the visible tokens. Layers below
    /// `frozen_prefix` see only constant parameters, so they are computed
    /// without being recorded; their output enters the tape through a
    /// frozen boundary.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        input: &EncoderInput,
        frozen_prefix: usize,
    ) -> Result<BTreeMap<usize, NodeId>> {
        if frozen_prefix > self.num_layers() {
            return Err(Error::contract(format!(
                "frozen prefix {frozen_prefix} exceeds {} layers",
                self.num_layers()
            )));
        }
        let opts = self.block_opts();
        let tokens = g.constant(input.tokens.clone());
        let pos = g.constant(input.pos.clone());
        let x = self.embed.forward(g, b, tokens)?;
        let mut x = g.add(x, pos)?;
        if frozen_prefix == 1 {
            x = g.frozen_boundary(x);
        }
        let mut taps = BTreeMap::new();
        for (j, block) in self.blocks.iter().enumerate() {
            let layer = j + 1;
            x = block.forward(g, b, x, opts)?;
            if layer + 1 == frozen_prefix {
                x = g.frozen_boundary(x);
            }
            if self.config.tap_layers.contains(&layer) {
                taps.insert(layer, x);
            }
        }
        Ok(taps)
    }

    fn block_opts(&self) -> BlockOpts {
        BlockOpts {
            eps: self.config.ln_eps,
            gelu: self.config.gelu,
        }
    }

    /// Prediction `[batch · s², bins]` of head `k` at its supervision scale.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        k: usize,
        tap_activation: NodeId,
        positions: &[Vec<usize>],
    ) -> Result<NodeId> {
        let head = &self.heads[k];
        if head.pruned {
            return Err(Error::contract(format!("decoder head {k} is pruned")));
        }
        let c = &self.config;
        let (n, dd, grid) = (c.num_patches(), c.decoder_dim, c.grid());
        let batch = positions.len();
        let opts = self.block_opts();

        let x = head.ln_in.forward(g, b, tap_activation, c.ln_eps)?;
        let x = head.embed.forward(g, b, x)?;
        let mask = b.param(g, head.mask_token);
        let x = g.merge_tokens(x, mask, positions, n)?;
        let pos = g.constant(Tensor::stack(&vec![self.dec_pos.clone(); batch])?);
        let x = g.add(x, pos)?;
        let x = head.block.forward(g, b, x, opts)?;
        let x = head.ln_out.forward(g, b, x, c.ln_eps)?;
        let x = g.permute(x, &[0, 2, 1])?;
        let mut x = g.reshape(x, &[batch, dd, grid, grid])?;
        let mut ups = head.upsample.iter();
        for step in &head.chain {
            x = match step {
                Rescale::Upsample => {
                    let kernel = b.param(g, *ups.next().expect("one kernel per upsample step"));
                    g.upsample2x(x, kernel)?
                }
                Rescale::Pool => g.avgpool2x(x)?,
            };
        }
        let s = head.scale;
        let x = g.reshape(x, &[batch, dd, s * s])?;
        let x = g.permute(x, &[0, 2, 1])?;
        let x = head.pred.forward(g, b, x)?;
        g.reshape(x, &[batch * s * s, c.hog.bins])
    }

    /// Builds the full step graph: encoder, every alive head, and the loss.
    /// `frozen_prefix` defaults to the model's own.
    pub fn forward_loss(&self, batch: &Batch, frozen_prefix: Option<usize>) -> Result<StepGraph<'_>> {
        let prefix = frozen_prefix.unwrap_or_else(|| self.frozen_prefix()).max(self.frozen_prefix());
        let mut g = Graph::new();
        let mut b = self.binder(prefix);
        let input = self.encoder_input(&batch.images, &batch.masks)?;
        let alive = self.alive_heads();
        let taps = if alive.is_empty() {
            BTreeMap::new()
        } else {
            self.encoder_forward(&mut g, &mut b, &input, prefix)?
        };
        let mut terms = Vec::with_capacity(alive.len());
        for k in alive {
            let head = &self.heads[k];
            let pred = self.decoder_forward(&mut g, &mut b, k, taps[&head.tap], &input.positions)?;
            let mut target_rows = Vec::with_capacity(batch.images.len());
            let mut mask = Vec::new();
            for (t, m) in batch.targets.iter().zip(&batch.masks) {
                let map = t.maps.get(k).and_then(|m| m.as_ref()).ok_or_else(|| {
                    Error::contract(format!("batch has no target for alive head {k}"))
                })?;
                target_rows.push(map.clone());
                mask.extend(m.scale_weights(head.scale)?);
            }
            let target = Tensor::stack(&target_rows)?.reshaped([mask.len(), self.config.hog.bins])?;
            terms.push(ScaleTerm {
                key: k,
                pred,
                target,
                mask,
                images: batch.images.len(),
                weight: 1.0,
            });
        }
        let loss = local_mim_loss(&mut g, terms)?;
        Ok(StepGraph {
            graph: g,
            binder: b,
            loss,
            taps,
        })
    }

    /// Freezes layer `i` at `step`; layers below it must already be frozen.
    /// Returns the parameters that just became non-trainable.
    pub fn freeze_layer(&mut self, i: usize, step: usize) -> Result<Vec<ParamId>> {
        if i >= self.layers.len() {
            return Err(Error::contract(format!("no layer {i}")));
        }
        if self.layers[i].frozen {
            return Err(Error::contract(format!("layer {i} is already frozen")));
        }
        if self.frozen_prefix() != i {
            return Err(Error::contract(format!(
                "out-of-order freeze: layer {i} while prefix is {}",
                self.frozen_prefix()
            )));
        }
        self.layers[i] = LayerState {
            frozen: true,
            freeze_step: Some(step),
        };
        Ok(self.params.ids_in(ParamGroup::Layer(i)))
    }

    /// Prunes head `k` once the patch embedding and every block up to its
    /// tap are frozen. Returns whether the head is pruned.
    pub fn prune_decoder_if_dead(&mut self, k: usize, step: usize) -> bool {
        let dead = self.frozen_prefix() > self.heads[k].tap;
        let head = &mut self.heads[k];
        if dead && !head.pruned {
            head.pruned = true;
            head.prune_step = Some(step);
        }
        head.pruned
    }

    pub(crate) fn restore_state(&mut self, layers: Vec<LayerState>, heads: Vec<(bool, Option<usize>)>) -> Result<()> {
        if layers.len() != self.layers.len() || heads.len() != self.heads.len() {
            return Err(Error::contract("checkpoint metadata does not match model layout"));
        }
        self.layers = layers;
        for (h, (pruned, step)) in self.heads.iter_mut().zip(heads) {
            h.pruned = pruned;
            h.prune_step = step;
        }
        Ok(())
    }
}
