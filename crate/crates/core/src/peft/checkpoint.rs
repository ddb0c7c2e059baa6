use crate::autograd::{Checkpoint, ParamStore};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params_init::shapes;
use crate::peft::{attach, peft_param_specs, PeftAttachment, PeftConfig};

const BACKBONE_HASH_KEY: &str = "backbone.hash";

/// The `peft.` and `head.` entries of `store` with the PEFT config and
/// the hash of the backbone they were trained on.
pub fn peft_checkpoint(store: &ParamStore, cfg: &PeftConfig, backbone: &BackboneConfig) -> Result<Checkpoint> {
    let mut config = cfg.to_block();
    config.set(BACKBONE_HASH_KEY, backbone.hash());
    let mut params = store.slice_prefix("peft.");
    params.merge(store.slice_prefix("head."))?;
    Ok(Checkpoint::new(config, params))
}

/// Attaches the PEFT config of `ckpt` to the loaded backbone in `store`
/// and overwrites the head and `peft.` entries with the stored values.
pub fn load_peft_checkpoint(ckpt: &Checkpoint, backbone: &BackboneConfig, store: &mut ParamStore) -> Result<PeftAttachment> {
    let expected = backbone.hash();
    match ckpt.config.get(BACKBONE_HASH_KEY) {
        Some(h) if h == expected => {}
        Some(h) => {
            return Err(Error::Config(format!(
                "PEFT checkpoint was trained on backbone {h}, loaded backbone is {expected}"
            )))
        }
        None => return Err(Error::Config("PEFT checkpoint has no backbone hash".into())),
    }
    let cfg = PeftConfig::from_block(&ckpt.config.without_prefix(BACKBONE_HASH_KEY))?;
    let mut want = shapes(&peft_param_specs(&cfg, backbone));
    want.extend(
        shapes(&backbone.param_specs())
            .into_iter()
            .filter(|(n, _)| n.starts_with("head.")),
    );
    ckpt.validate(&want)?;
    let attachment = attach(&cfg, backbone, store, 0)?;
    for (name, p) in ckpt.params.iter() {
        *store.value_mut(name)? = p.value.clone();
    }
    Ok(attachment)
}
