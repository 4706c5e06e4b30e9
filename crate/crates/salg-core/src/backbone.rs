//! The four-stage hierarchical backbone: convolutional patch embedding,
//! three SALG stages with patch merging between them, one normal transformer
//! stage, and the classification head.

use std::sync::Arc;

use crate::block::{
    agr_bias_rows, grid_bias_index, linear, local_global_block, multi_head_attention,
    AttentionGeometry, BlockParams, LayerNormParams,
};
use crate::config::{heads_for, ModelConfig};
use crate::error::{Result, SalgError};
use crate::segmentation::{
    assign_tokens, estimate_region_means, padded_extent, regular_assignment, RegionAssignment,
    SegmentationConfig,
};
use crate::tensor::{Graph, Initializer, ParamId, ParamStore, Tensor, Value};

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    fn register(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(ConvParams {
            w: store.register(&format!("{prefix}.w"), init.weight(vec![cout, cin, 3, 3]))?,
            b: store.register(&format!("{prefix}.b"), init.zeros(vec![cout]))?,
            stride,
            padding: 1,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        g.add_bias(y, b)
    }
}

/// Three 3x3 convolutions: two stride-2 layers downsample to 1/4 resolution,
/// a stride-1 layer transforms features.
#[derive(Clone, Debug)]
pub struct PatchEmbedParams {
    pub convs: [ConvParams; 3],
}

impl PatchEmbedParams {
    fn register(store: &mut ParamStore, init: &mut Initializer, dim: usize) -> Result<Self> {
        Ok(PatchEmbedParams {
            convs: [
                ConvParams::register(store, init, "embed.conv0", 3, dim, 2)?,
                ConvParams::register(store, init, "embed.conv1", dim, dim, 2)?,
                ConvParams::register(store, init, "embed.conv2", dim, dim, 1)?,
            ],
        })
    }
}

/// Projects an `[H, W, 3]` image to an `[H/4, W/4, C]` feature map.
pub fn patch_embed(
    g: &mut Graph,
    store: &ParamStore,
    p: &PatchEmbedParams,
    image: Value,
) -> Result<Value> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(SalgError::InvalidShape {
            op: "patch_embed",
            shape,
            detail: "expected [H, W, 3]".into(),
        });
    }
    if shape[0] % 4 != 0 || shape[1] % 4 != 0 {
        return Err(SalgError::Usage(format!(
            "patch_embed: {}x{} input not divisible by 4; resize or pad the image first",
            shape[0], shape[1]
        )));
    }
    let mut x = image;
    for conv in &p.convs {
        x = conv.apply(g, store, x)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct MergeParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// Concatenates each 2x2 neighborhood (padding odd extents first) and
/// projects 4C -> 2C: `[H, W, C] -> [ceil(H/2), ceil(W/2), 2C]`.
pub fn patch_merging(g: &mut Graph, store: &ParamStore, p: &MergeParams, x: Value) -> Result<Value> {
    let shape = g.shape(x).to_vec();
    let (h, w) = (shape[0], shape[1]);
    let (eh, ew) = (padded_extent(h, 2), padded_extent(w, 2));
    let x = if (eh, ew) != (h, w) { g.pad_hw(x, eh, ew)? } else { x };
    let folded = g.space_to_depth2(x)?;
    linear(g, store, p.w, p.b, folded)
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub blocks: Vec<BlockParams>,
    /// The stage's learned AGR seed vector, broadcast to every region at
    /// stage entry. Absent on the normal fourth stage.
    pub agr: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub ln: LayerNormParams,
    pub w: ParamId,
    pub b: ParamId,
}

/// A fully-registered SALG model bound to one [`ParamStore`].
pub struct Model {
    pub config: ModelConfig,
    pub embed: PatchEmbedParams,
    pub stages: Vec<StageParams>,
    pub merges: Vec<MergeParams>,
    pub head: HeadParams,
}

impl Model {
    /// Registers every parameter of `config` into `store` (deterministic
    /// order and initialization given the initializer's seed).
    pub fn register(config: &ModelConfig, store: &mut ParamStore, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        let embed = PatchEmbedParams::register(store, init, config.base_dim)?;
        let mut stages = Vec::with_capacity(4);
        let mut merges = Vec::with_capacity(3);
        for stage in 0..4usize {
            let dim = config.stage_dim(stage);
            let heads = heads_for(dim);
            let is_salg = stage < 3;
            let agr = if is_salg {
                Some(store.register(&format!("stage{stage}.agr"), init.weight(vec![dim]))?)
            } else {
                None
            };
            let bias_rows = if is_salg {
                agr_bias_rows(config.window + 2 * config.pads[stage])
            } else {
                let side = stage4_side(config);
                grid_bias_index(side, side).1
            };
            let with_prop = is_salg && config.propagation == crate::config::Propagation::Msa;
            let mut blocks = Vec::with_capacity(config.blocks[stage]);
            for b in 0..config.blocks[stage] {
                blocks.push(BlockParams::register(
                    store,
                    init,
                    &format!("stage{stage}.block{b}"),
                    dim,
                    heads,
                    bias_rows,
                    with_prop,
                )?);
            }
            stages.push(StageParams { blocks, agr });
            if stage < 3 {
                let out = config.stage_dim(stage + 1);
                merges.push(MergeParams {
                    w: store.register(&format!("merge{stage}.w"), init.weight(vec![4 * dim, out]))?,
                    b: store.register(&format!("merge{stage}.b"), init.zeros(vec![out]))?,
                });
            }
        }
        let head_dim = config.stage_dim(3);
        let head = HeadParams {
            ln: LayerNormParams::register(store, init, "head.ln", head_dim)?,
            w: store.register("head.w", init.weight(vec![head_dim, config.num_classes]))?,
            b: store.register("head.b", init.zeros(vec![config.num_classes]))?,
        };
        Ok(Model { config: config.clone(), embed, stages, merges, head })
    }

    /// Fresh store + truncated-normal init (std 0.02) from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let model = Self::register(config, &mut store, &mut init)?;
        Ok((model, store))
    }

    /// One SALG stage: pad to the window grid, segment once, then run the
    /// stage's blocks with the fixed assignment, threading AGR state
    /// between blocks. Returns the cropped map and the assignment.
    pub fn salg_stage(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage: usize,
        map: Value,
    ) -> Result<(Value, RegionAssignment)> {
        debug_assert!(stage < 3);
        let cfg = &self.config;
        let shape = g.shape(map).to_vec();
        let (h, w) = (shape[0], shape[1]);
        let seg_cfg = SegmentationConfig::new(cfg.window, cfg.pads[stage])?;
        let (ph, pw) = (padded_extent(h, cfg.window), padded_extent(w, cfg.window));
        let padded = if (ph, pw) != (h, w) { g.pad_hw(map, ph, pw)? } else { map };
        let mut valid = vec![false; ph * pw];
        for i in 0..h {
            for j in 0..w {
                valid[i * pw + j] = true;
            }
        }
        let mut assignment = if cfg.segmentation {
            let snapshot = g.data(padded).clone();
            let means = estimate_region_means(&snapshot, &seg_cfg)?;
            assign_tokens(&snapshot, &means, &seg_cfg, &valid)?
        } else {
            regular_assignment(ph, pw, &valid, &seg_cfg)?
        };
        assignment.valid_height = h;
        assignment.valid_width = w;
        let plan = Arc::new(assignment.plan());

        let params = &self.stages[stage];
        let agr_seed = g.param(store, params.agr.expect("SALG stage has an AGR vector"));
        let mut agr = g.repeat_rows(agr_seed, plan.regions)?;
        let mut current = padded;
        for block in &params.blocks {
            let (next_map, next_agr) =
                local_global_block(g, store, block, current, agr, &plan, cfg.propagation)?;
            current = next_map;
            agr = next_agr;
        }
        let cropped = if (ph, pw) != (h, w) { g.crop_hw(current, h, w)? } else { current };
        Ok((cropped, assignment))
    }

    /// The normal fourth stage: plain pre-LN global attention blocks over
    /// all tokens, with grid relative-position bias, no segmentation and no
    /// AGR token.
    pub fn normal_stage(&self, g: &mut Graph, store: &ParamStore, map: Value) -> Result<Value> {
        let shape = g.shape(map).to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let n = h * w;
        let (bias_index, _) = grid_bias_index(h, w);
        let geom = AttentionGeometry { key_mask: None, bias_index: Some(Arc::new(bias_index)) };
        let mut x = g.reshape(map, vec![1, n, c])?;
        for block in &self.stages[3].blocks {
            let hln = block.ln1.apply(g, store, x)?;
            let attn = multi_head_attention(g, store, &block.attn, hln, &geom)?;
            x = g.add(x, attn.out)?;
            let hln = block.ln2.apply(g, store, x)?;
            let m = block.mlp.apply(g, store, hln)?;
            x = g.add(x, m)?;
        }
        g.reshape(x, vec![h, w, c])
    }

    /// Runs the embedding and SALG stages 0..=`upto`, returning the final
    /// map and the per-stage assignments. `upto` must be < 3.
    pub fn forward_stages(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Value,
        upto: usize,
    ) -> Result<(Value, Vec<RegionAssignment>)> {
        let mut map = patch_embed(g, store, &self.embed, image)?;
        let mut assignments = Vec::new();
        for stage in 0..=upto.min(2) {
            let (next, a) = self.salg_stage(g, store, stage, map)?;
            assignments.push(a);
            map = if stage < 2 {
                patch_merging(g, store, &self.merges[stage], next)?
            } else {
                next
            };
        }
        Ok((map, assignments))
    }

    /// Full classification pass: embedding, three SALG stages with merging,
    /// the normal stage, then LN, global average pooling and the linear head.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<ForwardOutput> {
        let shape = image.shape();
        if shape != [self.config.input_size, self.config.input_size, 3] {
            return Err(SalgError::Usage(format!(
                "forward: image shape {shape:?} does not match configured input {size}x{size}x3",
                size = self.config.input_size
            )));
        }
        let image = g.input(image.clone());
        let (map, assignments) = self.forward_stages(g, store, image, 2)?;
        let map = patch_merging(g, store, &self.merges[2], map)?;
        let map = self.normal_stage(g, store, map)?;
        let shape = g.shape(map).to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let tokens = g.reshape(map, vec![h * w, c])?;
        let tokens = self.head.ln.apply(g, store, tokens)?;
        let pooled = g.mean_axis0(tokens)?;
        let pooled = g.reshape(pooled, vec![1, c])?;
        let logits = linear(g, store, self.head.w, self.head.b, pooled)?;
        let logits = g.reshape(logits, vec![self.config.num_classes])?;
        Ok(ForwardOutput { logits, assignments })
    }

    /// Segments `image` at `stage` (0..3) after running all earlier stages,
    /// without touching the normal stage or head. Works for any image whose
    /// sides divide by 4.
    pub fn segment(&self, store: &ParamStore, image: &Tensor, stage: usize) -> Result<RegionAssignment> {
        if stage > 2 {
            return Err(SalgError::Usage(format!("segment: stage {stage} out of range 0..3")));
        }
        let mut g = Graph::new();
        let image = g.input(image.clone());
        let (_, mut assignments) = self.forward_stages(&mut g, store, image, stage)?;
        Ok(assignments.remove(stage))
    }
}

/// Forward-pass handles: the logit vector plus the region assignment each
/// SALG stage used.
pub struct ForwardOutput {
    pub logits: Value,
    pub assignments: Vec<RegionAssignment>,
}

/// Stage-4 token-grid side under the halve-with-padding ladder.
pub fn stage4_side(config: &ModelConfig) -> usize {
    let mut side = config.input_size / 4;
    for _ in 0..3 {
        side = padded_extent(side, 2) / 2;
    }
    side
}

/// Total learnable scalars of a configuration, head included.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    let (_, store) = Model::init(config, 0)?;
    Ok(store.total_scalars())
}

/// Per-component parameter counts, grouped by the path segment before the
/// first dot, in registration order.
pub fn param_breakdown(store: &ParamStore) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for id in store.ids() {
        let name = store.name(id);
        let group = name.split('.').next().unwrap_or(name).to_string();
        let numel = store.value(id).len();
        match groups.last_mut() {
            Some((g, n)) if *g == group => *n += numel,
            _ => groups.push((group, numel)),
        }
    }
    groups
}
