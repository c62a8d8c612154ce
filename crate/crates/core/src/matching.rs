//! Geometric-semantic mask matching and the end-to-end detector.
//!
//! Proposals from both images are matched against the pseudo-mask by their
//! intersection ratio `α = |proposal ∩ pseudo| / |proposal|` (kept when
//! `α > alpha_t`), then verified semantically: the proposal's mask embedding
//! is computed on both images' last-layer embeddings and the proposal is kept
//! when their cosine is below the confidence score. The change mask is the
//! union of everything kept from either side.

use serde::{Deserialize, Serialize};

use crate::backbone::{mask_embedding, Backend, EmbeddingMap, ImageAnalysis, MaskProposal};
use crate::config::PipelineConfig;
use crate::image::{BinaryMask, Image};
use crate::pseudomask::{pseudomask_from_facets, request, PseudoMask, SimilarityMap};
use crate::registration::{estimate_transform, warp, RegistrationMode, Transform};
use crate::{Error, Result};

/// Which encoder layer feeds the mask embeddings. Serialized as `"last"` or
/// an integer layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SsmLayer {
    #[default]
    Last,
    Index(usize),
}

impl Serialize for SsmLayer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SsmLayer::Last => s.serialize_str("last"),
            SsmLayer::Index(i) => s.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for SsmLayer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(SsmLayer::Index(i)),
            Raw::Name(s) if s == "last" => Ok(SsmLayer::Last),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "expected \"last\" or a layer index, got `{s}`"
            ))),
        }
    }
}

impl std::str::FromStr for SsmLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "last" {
            return Ok(SsmLayer::Last);
        }
        s.parse()
            .map(SsmLayer::Index)
            .map_err(|_| Error::Config(format!("ssm_layer must be \"last\" or an index, got `{s}`")))
    }
}

impl SsmLayer {
    pub fn resolve(self, backend: &dyn Backend) -> usize {
        match self {
            SsmLayer::Last => backend.last_layer(),
            SsmLayer::Index(i) => i,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchParams {
    pub alpha_t: f64,
    /// Change confidence score: proposals whose cross-time embedding cosine
    /// is at or above this value are treated as unchanged.
    pub confidence: f64,
    pub ssm_layer: SsmLayer,
    /// OR the pseudo-mask into the output when no proposal survives.
    pub fallback_pseudo: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            alpha_t: 0.65,
            confidence: 0.88,
            ssm_layer: SsmLayer::Last,
            fallback_pseudo: false,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_t > 0.0 && self.alpha_t <= 1.0) {
            return Err(Error::Config(format!(
                "match.alpha_t must be in (0,1], got {}",
                self.alpha_t
            )));
        }
        if !(-1.0..=1.0).contains(&self.confidence) {
            return Err(Error::Config(format!(
                "match.confidence must be in [-1,1], got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Epoch {
    T0,
    T1,
}

/// Why a proposal made it into the change mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retained {
    pub source: Epoch,
    /// Index into that image's proposal list.
    pub index: usize,
    pub alpha: f64,
    /// Cross-time mask-embedding cosine; absent until semantic matching ran.
    pub cosine: Option<f64>,
}

/// A retained proposal together with its provenance.
#[derive(Debug, Clone, Copy)]
pub struct Kept<'a> {
    pub proposal: &'a MaskProposal,
    pub record: Retained,
}

/// Final binary change prediction in the first image's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMask {
    pub mask: BinaryMask,
    pub retained: Vec<Retained>,
    /// Pseudo-mask pixels were ORed in because nothing was retained.
    pub used_fallback: bool,
}

/// `|proposal ∩ pseudo| / |proposal|`.
pub fn intersection_ratio(proposal: &MaskProposal, pseudo: &PseudoMask) -> Result<f64> {
    let area = proposal.mask().count();
    if area == 0 {
        return Err(Error::InvalidInput("zero-area proposal".into()));
    }
    let inter = proposal.mask().intersection_count(&pseudo.mask)?;
    Ok(inter as f64 / area as f64)
}

/// Keeps, in order, the proposals with `α > alpha_t` (strict).
pub fn gim_filter(
    proposals: &[MaskProposal],
    source: Epoch,
    pseudo: &PseudoMask,
    p: &MatchParams,
) -> Result<Vec<Retained>> {
    let mut out = Vec::new();
    for (index, prop) in proposals.iter().enumerate() {
        let alpha = intersection_ratio(prop, pseudo)?;
        if alpha > p.alpha_t {
            out.push(Retained {
                source,
                index,
                alpha,
                cosine: None,
            });
        }
    }
    Ok(out)
}

fn cosine64(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (dot / denom).clamp(-1.0, 1.0)
}

/// Cross-time cosine of a mask's embeddings; `None` when the mask vanishes
/// on the embedding grid.
pub fn mask_cosine(
    mask: &BinaryMask,
    emb0: &EmbeddingMap,
    emb1: &EmbeddingMap,
) -> Result<Option<f64>> {
    let m0 = match mask_embedding(emb0, mask) {
        Ok(m) => m,
        Err(Error::EmptyMask { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let m1 = mask_embedding(emb1, mask)?;
    Ok(Some(cosine64(&m0.vector, &m1.vector)))
}

/// Keeps, in order, the GIM survivors whose cross-time cosine is below
/// `p.confidence`. Proposals empty on the embedding grid are dropped.
pub fn ssm_filter(
    proposals: &[MaskProposal],
    retained: &[Retained],
    emb0: &EmbeddingMap,
    emb1: &EmbeddingMap,
    p: &MatchParams,
) -> Result<Vec<Retained>> {
    if emb0.grid() != emb1.grid() || emb0.channels() != emb1.channels() {
        return Err(Error::ShapeMismatch("embedding maps differ in shape".into()));
    }
    let mut out = Vec::new();
    for r in retained {
        let prop = proposals.get(r.index).ok_or_else(|| {
            Error::InvalidInput(format!("retained index {} out of range", r.index))
        })?;
        if let Some(cos) = mask_cosine(prop.mask(), emb0, emb1)? {
            if cos < p.confidence {
                out.push(Retained {
                    cosine: Some(cos),
                    ..*r
                });
            }
        }
    }
    Ok(out)
}

/// Pixelwise union of every retained mask from both sides.
pub fn compose_change_mask(
    width: usize,
    height: usize,
    kept_t0: &[Kept<'_>],
    kept_t1: &[Kept<'_>],
) -> Result<ChangeMask> {
    let mut mask = BinaryMask::new(width, height);
    let mut retained = Vec::with_capacity(kept_t0.len() + kept_t1.len());
    for k in kept_t0.iter().chain(kept_t1) {
        mask.union_with(k.proposal.mask())?;
        retained.push(k.record);
    }
    Ok(ChangeMask {
        mask,
        retained,
        used_fallback: false,
    })
}

/// How the second image was aligned to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RegistrationOutcome {
    Identity,
    Homography { transform: Transform },
    /// Estimation failed; the pair was processed unregistered.
    Fallback { reason: String },
}

impl RegistrationOutcome {
    /// Transform mapping the second image into the first image's frame.
    pub fn transform(&self) -> Option<&Transform> {
        match self {
            RegistrationOutcome::Homography { transform } => Some(transform),
            _ => None,
        }
    }
}

/// Change mask plus every intermediate product.
#[derive(Debug, Clone)]
pub struct Detection {
    pub change: ChangeMask,
    pub similarity: SimilarityMap,
    pub pseudo: PseudoMask,
    pub proposals_t0: Vec<MaskProposal>,
    pub proposals_t1: Vec<MaskProposal>,
    pub registration: RegistrationOutcome,
}

fn register(img0: &Image, img1: &Image, cfg: &PipelineConfig) -> (Image, RegistrationOutcome) {
    match cfg.registration.mode {
        RegistrationMode::None => (img1.clone(), RegistrationOutcome::Identity),
        RegistrationMode::Homography => {
            let warped = estimate_transform(img0, img1, &cfg.ransac())
                .and_then(|t| warp(img1, &t).map(|w| (w, t)));
            match warped {
                Ok((w, transform)) => (w, RegistrationOutcome::Homography { transform }),
                Err(e) => {
                    log::warn!("registration failed, falling back to identity: {e}");
                    (
                        img1.clone(),
                        RegistrationOutcome::Fallback {
                            reason: e.to_string(),
                        },
                    )
                }
            }
        }
    }
}

/// Runs the full pipeline and keeps the intermediates.
pub fn detect_changes_detailed(
    backend: &dyn Backend,
    img0: &Image,
    img1: &Image,
    cfg: &PipelineConfig,
) -> Result<Detection> {
    if !img0.same_size(img1) {
        return Err(Error::ShapeMismatch(format!(
            "image sizes differ: {}x{} vs {}x{}",
            img0.width(),
            img0.height(),
            img1.width(),
            img1.height()
        )));
    }
    cfg.validate()?;
    let (img1, registration) = register(img0, img1, cfg);
    let (w, h) = (img0.width(), img0.height());

    let facet_layer = cfg.pseudo.layer.unwrap_or_else(|| backend.default_facet_layer());
    let emb_layer = cfg.matching.ssm_layer.resolve(backend);
    let req = request(facet_layer, cfg.pseudo.kind, emb_layer, &cfg.proposer);
    let a0: ImageAnalysis = backend.analyze(img0, &req)?;
    let a1: ImageAnalysis = backend.analyze(&img1, &req)?;

    let pm = pseudomask_from_facets(&a0.facets, &a1.facets, w, h, &cfg.threshold)?;
    let p = &cfg.matching;

    let mut sides = Vec::with_capacity(2);
    for (epoch, props) in [(Epoch::T0, &a0.proposals), (Epoch::T1, &a1.proposals)] {
        let gim = gim_filter(props, epoch, &pm.pseudo, p)?;
        let ssm = ssm_filter(props, &gim, &a0.embedding, &a1.embedding, p)?;
        let kept: Vec<Kept<'_>> = ssm
            .into_iter()
            .map(|record| Kept {
                proposal: &props[record.index],
                record,
            })
            .collect();
        sides.push(kept);
    }
    let mut change = compose_change_mask(w, h, &sides[0], &sides[1])?;
    if p.fallback_pseudo && change.retained.is_empty() {
        change.mask.union_with(&pm.pseudo.mask)?;
        change.used_fallback = true;
    }
    drop(sides);

    Ok(Detection {
        change,
        similarity: pm.similarity,
        pseudo: pm.pseudo,
        proposals_t0: a0.proposals,
        proposals_t1: a1.proposals,
        registration,
    })
}

/// Change mask for `(img0, img1)` in `img0`'s frame.
pub fn detect_changes(
    backend: &dyn Backend,
    img0: &Image,
    img1: &Image,
    cfg: &PipelineConfig,
) -> Result<ChangeMask> {
    Ok(detect_changes_detailed(backend, img0, img1, cfg)?.change)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SyntheticBackend;
    use crate::pseudomask::Threshold;

    fn pseudo(mask: BinaryMask) -> PseudoMask {
        PseudoMask {
            mask,
            threshold_used: 0.5,
            skew: 0.0,
            branch: Threshold::ZScore { z: -0.52 },
        }
    }

    fn prop(mask: BinaryMask) -> MaskProposal {
        MaskProposal::new(mask, 1.0, 1.0).unwrap()
    }

    #[test]
    fn ratio_examples() {
        let pm = pseudo(BinaryMask::from_fn(20, 20, |x, _| x < 10));
        let inside = prop(BinaryMask::from_fn(20, 20, |x, y| x < 5 && y < 5));
        let outside = prop(BinaryMask::from_fn(20, 20, |x, _| x >= 15));
        assert_eq!(intersection_ratio(&inside, &pm).unwrap(), 1.0);
        assert_eq!(intersection_ratio(&outside, &pm).unwrap(), 0.0);
        // 10x10 proposal at x in [3,13): 7 columns inside -> 70 of 100 px
        let partial = prop(BinaryMask::from_fn(20, 20, |x, y| (3..13).contains(&x) && y < 10));
        assert!((intersection_ratio(&partial, &pm).unwrap() - 0.70).abs() < 1e-15);
    }

    #[test]
    fn gim_boundary_is_strict() {
        // pseudo covers 65 of a 100-pixel proposal
        let pm = pseudo(BinaryMask::from_fn(10, 10, |x, y| y * 10 + x < 65));
        let p65 = prop(BinaryMask::from_fn(10, 10, |_, _| true));
        let pm70 = pseudo(BinaryMask::from_fn(10, 10, |x, y| y * 10 + x < 70));
        let params = MatchParams::default();
        assert!(gim_filter(&[p65.clone()], Epoch::T0, &pm, &params)
            .unwrap()
            .is_empty());
        let kept = gim_filter(&[p65], Epoch::T0, &pm70, &params).unwrap();
        assert_eq!(kept.len(), 1);
        assert!((kept[0].alpha - 0.70).abs() < 1e-15);
        assert!(gim_filter(&[], Epoch::T0, &pm, &params).unwrap().is_empty());
    }

    fn emb(vectors: &[[f32; 2]]) -> EmbeddingMap {
        EmbeddingMap::new(0, 1, vectors.len(), 2, vectors.iter().flatten().copied().collect())
            .unwrap()
    }

    #[test]
    fn ssm_drops_identical_embeddings() {
        let e = emb(&[[1.0, 2.0], [3.0, -1.0]]);
        let props = vec![prop(BinaryMask::from_fn(2, 1, |x, _| x == 0))];
        let r = [Retained {
            source: Epoch::T0,
            index: 0,
            alpha: 1.0,
            cosine: None,
        }];
        assert!(ssm_filter(&props, &r, &e, &e, &MatchParams::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ssm_keeps_dissimilar_embeddings() {
        // cos([1,0], [0.5, sqrt(3)/2]) = 0.5
        let e0 = emb(&[[1.0, 0.0]]);
        let e1 = emb(&[[0.5, 3f32.sqrt() / 2.0]]);
        let props = vec![prop(BinaryMask::from_fn(1, 1, |_, _| true))];
        let r = [Retained {
            source: Epoch::T1,
            index: 0,
            alpha: 0.9,
            cosine: None,
        }];
        let kept = ssm_filter(&props, &r, &e0, &e1, &MatchParams::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert!((kept[0].cosine.unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn confidence_controls_ssm() {
        // cos = 0.9
        let e0 = emb(&[[1.0, 0.0]]);
        let e1 = emb(&[[0.9, (1.0f32 - 0.81).sqrt()]]);
        let props = vec![prop(BinaryMask::from_fn(1, 1, |_, _| true))];
        let r = [Retained {
            source: Epoch::T0,
            index: 0,
            alpha: 1.0,
            cosine: None,
        }];
        let strict = MatchParams::default();
        let loose = MatchParams {
            confidence: 0.95,
            ..strict
        };
        assert!(ssm_filter(&props, &r, &e0, &e1, &strict).unwrap().is_empty());
        assert_eq!(ssm_filter(&props, &r, &e0, &e1, &loose).unwrap().len(), 1);
    }

    #[test]
    fn compose_unions() {
        let a = prop(BinaryMask::from_fn(6, 6, |x, _| x < 2));
        let b = prop(BinaryMask::from_fn(6, 6, |x, _| x >= 4));
        let rec = |source, index| Retained {
            source,
            index,
            alpha: 1.0,
            cosine: Some(0.1),
        };
        let k0 = [Kept {
            proposal: &a,
            record: rec(Epoch::T0, 0),
        }];
        let k1 = [Kept {
            proposal: &b,
            record: rec(Epoch::T1, 0),
        }];
        let cm = compose_change_mask(6, 6, &k0, &k1).unwrap();
        assert_eq!(cm.mask.count(), a.area() + b.area());
        assert_eq!(cm.retained.len(), 2);

        let k1_same = [Kept {
            proposal: &a,
            record: rec(Epoch::T1, 3),
        }];
        let cm = compose_change_mask(6, 6, &k0, &k1_same).unwrap();
        assert_eq!(cm.mask.count(), a.area());

        let empty = compose_change_mask(6, 6, &[], &[]).unwrap();
        assert!(empty.mask.is_empty());
    }

    #[test]
    fn identical_images_yield_empty_mask() {
        let b = SyntheticBackend::default();
        let img = Image::from_fn(48, 48, |x, y| {
            if (10..30).contains(&x) && (12..28).contains(&y) {
                [200, 40, 40]
            } else {
                [30, 90, 160]
            }
        })
        .unwrap();
        let cm = detect_changes(&b, &img, &img, &PipelineConfig::default()).unwrap();
        assert!(cm.mask.is_empty());
        assert!(cm.retained.is_empty());
    }

    #[test]
    fn ssm_layer_serde() {
        let p: MatchParams = toml::from_str("ssm_layer = \"last\"").unwrap();
        assert_eq!(p.ssm_layer, SsmLayer::Last);
        let p: MatchParams = toml::from_str("ssm_layer = 3").unwrap();
        assert_eq!(p.ssm_layer, SsmLayer::Index(3));
        assert!(toml::from_str::<MatchParams>("ssm_layer = \"first\"").is_err());
        assert_eq!(
            serde_json::to_string(&SsmLayer::Last).unwrap(),
            "\"last\""
        );
    }
}
