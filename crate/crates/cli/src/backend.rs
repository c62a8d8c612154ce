use gescf::config::{BackendKind, PipelineConfig};
use gescf::{Backend, Error, Result, SyntheticBackend};

pub fn build(cfg: &PipelineConfig) -> Result<Box<dyn Backend>> {
    match cfg.backend {
        BackendKind::Synthetic => Ok(Box::new(SyntheticBackend::new(cfg.synthetic)?)),
        BackendKind::VithAdapter => vith(cfg),
    }
}

#[cfg(feature = "sam")]
fn vith(cfg: &PipelineConfig) -> Result<Box<dyn Backend>> {
    let path = cfg.weights_path.as_deref().ok_or_else(|| Error::BackendUnavailable {
        adapter: "vith-adapter".into(),
        reason: "no weights_path configured".into(),
    })?;
    Ok(Box::new(gescf_sam::VitHBackend::load(path)?))
}

#[cfg(not(feature = "sam"))]
fn vith(_cfg: &PipelineConfig) -> Result<Box<dyn Backend>> {
    Err(Error::BackendUnavailable {
        adapter: "vith-adapter".into(),
        reason: "this binary was built without the `sam` feature".into(),
    })
}
