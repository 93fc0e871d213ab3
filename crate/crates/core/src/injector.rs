//! Applying a single bit flip to a model for one evaluation.

use std::hash::{DefaultHasher, Hasher};

use crate::bitfloat::flip_bit;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fault_model::{element_count, FaultSite, TargetKind};
use crate::model::{Model, OutputFlip};
use crate::train::{evaluate_detailed, Evaluation};

/// An applied fault. Weight faults must be handed back to
/// [`InjectionHandle::remove`] to restore the parameter.
#[derive(Debug, Clone, PartialEq)]
#[must_use]
pub struct InjectionHandle {
    pub site: FaultSite,
    /// Value before the flip (weight faults only).
    pub original_value: Option<f32>,
    pub active: bool,
}

fn check_site(model: &Model, site: &FaultSite, kind: TargetKind) -> Result<()> {
    if site.target_kind != kind {
        return Err(Error::Usage(format!("site {site} is not a {kind} fault")));
    }
    if site.bit_index > 31 {
        return Err(Error::Usage(format!("bit {} out of range", site.bit_index)));
    }
    let count = element_count(model, site.layer_id, kind)?;
    if site.element_index >= count {
        return Err(Error::Usage(format!(
            "element {} out of range for layer {} ({count} elements)",
            site.element_index, site.layer_id
        )));
    }
    Ok(())
}

/// XOR-flips the targeted weight bit in place.
pub fn inject_weight(model: &mut Model, site: FaultSite) -> Result<InjectionHandle> {
    check_site(model, &site, TargetKind::NeuronWeight)?;
    let w = model
        .layer_mut(site.layer_id)?
        .weight
        .as_mut()
        .expect("checked");
    let v = &mut w.data_mut()[site.element_index];
    let original = *v;
    *v = flip_bit(original, site.bit_index);
    Ok(InjectionHandle {
        site,
        original_value: Some(original),
        active: true,
    })
}

/// Validates an output fault; it takes effect through [`InjectionHandle::output_flip`].
pub fn inject_output(model: &Model, site: FaultSite) -> Result<InjectionHandle> {
    check_site(model, &site, TargetKind::NeuronOutput)?;
    Ok(InjectionHandle {
        site,
        original_value: None,
        active: true,
    })
}

pub fn inject(model: &mut Model, site: FaultSite) -> Result<InjectionHandle> {
    match site.target_kind {
        TargetKind::NeuronWeight => inject_weight(model, site),
        TargetKind::NeuronOutput => inject_output(model, site),
    }
}

impl InjectionHandle {
    /// Flip to apply during forward passes, for active output faults.
    pub fn output_flip(&self) -> Option<OutputFlip> {
        (self.active && self.site.target_kind == TargetKind::NeuronOutput).then_some(OutputFlip {
            layer: self.site.layer_id,
            element: self.site.element_index,
            bit: self.site.bit_index,
        })
    }

    /// Restores the original weight bit pattern.
    pub fn remove(mut self, model: &mut Model) -> Result<()> {
        if let (true, Some(original)) = (self.active, self.original_value) {
            let w = model
                .layer_mut(self.site.layer_id)?
                .weight
                .as_mut()
                .expect("checked at injection");
            w.data_mut()[self.site.element_index] = original;
        }
        self.active = false;
        Ok(())
    }
}

/// Fast non-cryptographic hash over every parameter bit pattern.
pub fn parameter_fingerprint(model: &Model) -> u64 {
    let mut h = DefaultHasher::new();
    for p in model.params() {
        for v in p.data() {
            h.write_u32(v.to_bits());
        }
    }
    h.finish()
}

/// Accuracy over `data` with `site` active for the whole pass.
///
/// The model is left bit-identical; a mismatch is an integrity error.
pub fn evaluate_with_fault(
    model: &mut Model,
    data: &Dataset,
    site: FaultSite,
) -> Result<Evaluation> {
    let before = parameter_fingerprint(model);
    let handle = inject(model, site)?;
    let flips: Vec<OutputFlip> = handle.output_flip().into_iter().collect();
    let outcome = evaluate_detailed(model, data, &flips);
    handle.remove(model)?;
    if parameter_fingerprint(model) != before {
        return Err(Error::Integrity(format!(
            "model not restored after evaluating {site}"
        )));
    }
    outcome
}
