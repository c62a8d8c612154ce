//! Pretrained segmentation-encoder backend for `gescf`.
//!
//! Loads a ViT-H image encoder, prompt encoder and mask decoder from a
//! safetensors checkpoint using the reference parameter names
//! (`image_encoder.*`, `prompt_encoder.*`, `mask_decoder.*`). Facets are the
//! per-head query/key/value projections of a block's normalized input;
//! embeddings are block outputs; proposals come from a point-grid automatic
//! mask generator. Runs on the CPU.

mod encoder;
pub mod generator;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::segment_anything::mask_decoder::MaskDecoder;
use candle_transformers::models::segment_anything::prompt_encoder::PromptEncoder;
use gescf::backbone::{AnalysisRequest, ImageAnalysis};
use gescf::{
    Backend, EmbeddingMap, Error, FacetKind, FacetStack, Image, MaskProposal, ProposerConfig, Result,
};

use encoder::{crop_to_vec, Encoder, Taps};
use generator::Frame;

pub const ADAPTER_ID: &str = "vith-adapter";

const PIXEL_MEAN: [f32; 3] = [123.675, 116.28, 103.53];
const PIXEL_STD: [f32; 3] = [58.395, 57.12, 57.375];

/// Encoder and decoder shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub global_attn_indexes: Vec<usize>,
    pub out_chans: usize,
    pub use_abs_pos: bool,
    pub use_rel_pos: bool,
    /// Channels of the prompt encoder's mask branch.
    pub mask_in_chans: usize,
    pub iou_head_hidden_dim: usize,
    /// 0-based block whose facets feed the similarity map by default.
    pub facet_layer: usize,
}

impl EncoderConfig {
    pub fn vit_h() -> Self {
        Self {
            img_size: 1024,
            patch_size: 16,
            embed_dim: 1280,
            depth: 32,
            num_heads: 16,
            window_size: 14,
            global_attn_indexes: vec![7, 15, 23, 31],
            out_chans: 256,
            use_abs_pos: true,
            use_rel_pos: true,
            mask_in_chans: 16,
            iou_head_hidden_dim: 256,
            facet_layer: 17,
        }
    }

    /// Token grid side of the padded input.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder config: {m}")));
        if self.patch_size == 0 || self.img_size % self.patch_size != 0 {
            return bad("img_size must be a positive multiple of patch_size");
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad("embed_dim must be divisible by num_heads");
        }
        if self.depth == 0 || self.facet_layer >= self.depth {
            return bad("facet_layer must be below depth");
        }
        if self.global_attn_indexes.iter().any(|&i| i >= self.depth) {
            return bad("global_attn_indexes must be below depth");
        }
        if self.window_size == 0 && self.global_attn_indexes.len() < self.depth {
            return bad("window_size must be positive when windowed blocks exist");
        }
        if self.out_chans % 8 != 0 || self.mask_in_chans % 4 != 0 {
            return bad("out_chans must be divisible by 8 and mask_in_chans by 4");
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::vit_h()
    }
}

fn backend_err(e: candle_core::Error) -> Error {
    Error::Backend(e.to_string())
}

fn unavailable(reason: impl Into<String>) -> Error {
    Error::BackendUnavailable {
        adapter: ADAPTER_ID.into(),
        reason: reason.into(),
    }
}

pub struct VitHBackend {
    cfg: EncoderConfig,
    encoder: Encoder,
    prompt: PromptEncoder,
    decoder: MaskDecoder,
    device: Device,
}

impl std::fmt::Debug for VitHBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VitHBackend").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

/// Encoder input for one image plus the geometry needed to map back.
struct Prepared {
    pixels: Tensor,
    frame: Frame,
    grid_h: usize,
    grid_w: usize,
}

impl VitHBackend {
    /// Loads the ViT-H checkpoint at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_config(path, EncoderConfig::vit_h())
    }

    pub fn load_with_config(path: &Path, cfg: EncoderConfig) -> Result<Self> {
        if !path.is_file() {
            return Err(unavailable(format!("weights not found at {}", path.display())));
        }
        let device = Device::Cpu;
        let tensors = candle_core::safetensors::load(path, &device)
            .map_err(|e| unavailable(format!("{}: {e}", path.display())))?;
        let vb = VarBuilder::from_tensors(tensors, DType::F32, &device);
        Self::from_var_builder(cfg, vb).map_err(|e| match e {
            Error::Backend(m) => unavailable(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_var_builder(cfg: EncoderConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let device = vb.device().clone();
        let grid = cfg.grid();
        let encoder = Encoder::new(&cfg, vb.pp("image_encoder")).map_err(backend_err)?;
        let prompt = PromptEncoder::new(
            cfg.out_chans,
            (grid, grid),
            (cfg.img_size, cfg.img_size),
            cfg.mask_in_chans,
            vb.pp("prompt_encoder"),
        )
        .map_err(backend_err)?;
        let decoder = MaskDecoder::new(cfg.out_chans, 3, 3, cfg.iou_head_hidden_dim, vb.pp("mask_decoder"))
            .map_err(backend_err)?;
        Ok(Self {
            cfg,
            encoder,
            prompt,
            decoder,
            device,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Longest-side resize to the encoder size, pixel normalization and
    /// bottom/right zero padding.
    fn prepare(&self, image: &Image) -> Result<Prepared> {
        let s = self.cfg.img_size;
        let (w, h) = (image.width(), image.height());
        let scale = s as f64 / w.max(h) as f64;
        let rw = ((w as f64 * scale).round() as usize).clamp(1, s);
        let rh = ((h as f64 * scale).round() as usize).clamp(1, s);
        let resized = image.resized(rw, rh);
        let mut data = vec![0f32; 3 * s * s];
        for y in 0..rh {
            for x in 0..rw {
                let px = resized.pixel(x, y);
                for c in 0..3 {
                    data[c * s * s + y * s + x] = (px[c] as f32 - PIXEL_MEAN[c]) / PIXEL_STD[c];
                }
            }
        }
        let pixels = Tensor::from_vec(data, (1, 3, s, s), &self.device).map_err(backend_err)?;
        let p = self.cfg.patch_size;
        Ok(Prepared {
            pixels,
            frame: Frame {
                width: w,
                height: h,
                resized_w: rw,
                resized_h: rh,
                input: s,
            },
            grid_h: rh.div_ceil(p),
            grid_w: rw.div_ceil(p),
        })
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < self.cfg.depth {
            Ok(())
        } else {
            Err(Error::LayerOutOfRange {
                layer,
                count: self.cfg.depth,
            })
        }
    }

    fn facets_from(&self, qkv: &Tensor, prep: &Prepared, layer: usize, kind: FacetKind) -> Result<FacetStack> {
        let (heads, dim) = (self.cfg.num_heads, self.cfg.embed_dim);
        let hd = dim / heads;
        let (gh, gw) = (prep.grid_h, prep.grid_w);
        let data: Vec<f32> = (|| {
            qkv.narrow(1, 0, gh)?
                .narrow(2, 0, gw)?
                .reshape((gh, gw, 3, heads, hd))?
                .narrow(2, kind.index(), 1)?
                .squeeze(2)?
                .permute((2, 0, 1, 3))?
                .flatten_all()?
                .to_vec1()
        })()
        .map_err(backend_err)?;
        FacetStack::new(kind, layer, heads, gh, gw, hd, data)
    }

    fn embedding_from(&self, out: &Tensor, prep: &Prepared, layer: usize) -> Result<EmbeddingMap> {
        let data = crop_to_vec(out, prep.grid_h, prep.grid_w).map_err(backend_err)?;
        EmbeddingMap::new(layer, prep.grid_h, prep.grid_w, self.cfg.embed_dim, data)
    }

    fn proposals_from(&self, neck: &Tensor, prep: &Prepared, cfg: &ProposerConfig) -> Result<Vec<MaskProposal>> {
        generator::generate(&self.prompt, &self.decoder, neck, &prep.frame, cfg, &self.device)
            .map_err(backend_err)
    }

    fn run(&self, prep: &Prepared, taps: Taps) -> Result<encoder::Tapped> {
        self.encoder.run(&prep.pixels, taps).map_err(backend_err)
    }
}

/// Proposals are skipped entirely when no score could pass the thresholds.
fn wants_proposals(cfg: &ProposerConfig) -> bool {
    cfg.accepts(1.0, 1.0)
}

impl Backend for VitHBackend {
    fn id(&self) -> &str {
        ADAPTER_ID
    }

    fn layer_count(&self) -> usize {
        self.cfg.depth
    }

    fn head_count(&self) -> usize {
        self.cfg.num_heads
    }

    fn default_facet_layer(&self) -> usize {
        self.cfg.facet_layer
    }

    fn extract_facets(&self, image: &Image, layer: usize, kind: FacetKind) -> Result<FacetStack> {
        self.check_layer(layer)?;
        let prep = self.prepare(image)?;
        let t = self.run(&prep, Taps { qkv_layer: Some(layer), ..Taps::default() })?;
        self.facets_from(&t.qkv.expect("tapped"), &prep, layer, kind)
    }

    fn extract_embedding(&self, image: &Image, layer: usize) -> Result<EmbeddingMap> {
        self.check_layer(layer)?;
        let prep = self.prepare(image)?;
        let t = self.run(&prep, Taps { output_layer: Some(layer), ..Taps::default() })?;
        self.embedding_from(&t.output.expect("tapped"), &prep, layer)
    }

    fn propose_masks(&self, image: &Image, cfg: &ProposerConfig) -> Result<Vec<MaskProposal>> {
        cfg.validate()?;
        if !wants_proposals(cfg) {
            return Ok(Vec::new());
        }
        let prep = self.prepare(image)?;
        let t = self.run(&prep, Taps { neck: true, ..Taps::default() })?;
        self.proposals_from(&t.neck.expect("tapped"), &prep, cfg)
    }

    fn analyze(&self, image: &Image, req: &AnalysisRequest<'_>) -> Result<ImageAnalysis> {
        self.check_layer(req.facet_layer)?;
        self.check_layer(req.embedding_layer)?;
        req.proposer.validate()?;
        let prep = self.prepare(image)?;
        let neck = wants_proposals(req.proposer);
        let t = self.run(
            &prep,
            Taps {
                qkv_layer: Some(req.facet_layer),
                output_layer: Some(req.embedding_layer),
                neck,
            },
        )?;
        let proposals = match &t.neck {
            Some(n) => self.proposals_from(n, &prep, req.proposer)?,
            None => Vec::new(),
        };
        Ok(ImageAnalysis {
            facets: self.facets_from(&t.qkv.expect("tapped"), &prep, req.facet_layer, req.facet_kind)?,
            embedding: self.embedding_from(&t.output.expect("tapped"), &prep, req.embedding_layer)?,
            proposals,
        })
    }
}
