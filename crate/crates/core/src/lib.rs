//! Detection and repair of instruction-timing and cache-timing leaks in
//! programs written in TIR, a small SSA intermediate representation.
//!
//! The pipeline is: [`ir::parse_module`] and [`ir::inline_all`], then
//! [`sensitivity`] to find secret-dependent branches and table lookups,
//! [`transform_branch`] to linearize branches, [`cache_abs`] plus
//! [`transform_lut`] to repair lookups, and [`sim`] to check the result on
//! concrete inputs.

pub mod cache_abs;
pub mod corpus;
pub mod error;
pub mod ir;
pub mod sensitivity;
pub mod sim;
pub mod transform_branch;
pub mod transform_lut;

pub use error::{Error, Result};

/// Parses and validates a module, returning all diagnostics on failure.
pub fn load_module(src: &str) -> Result<ir::Module> {
    let m = ir::parse_module(src)?;
    let diags = ir::validate(&m);
    if diags.is_empty() {
        Ok(m)
    } else {
        Err(Error::Invalid(diags))
    }
}

/// Settings for [`mitigate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MitigateOptions {
    pub lut: transform_lut::LutOptions,
    pub ctsel: transform_branch::CtselMode,
}

/// Everything [`mitigate`] changed.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct MitigationReport {
    pub branches: transform_branch::BranchRepair,
    pub tables: transform_lut::MitigationPlan,
}

/// Full repair of a module: inline calls, remove secret-dependent branches,
/// repair secret-indexed table accesses, merge guarded stores, and lower
/// `ctsel` as requested. The result always validates.
pub fn mitigate(m: &ir::Module, opts: &MitigateOptions) -> Result<(ir::Module, MitigationReport)> {
    let inlined = ir::inline_all(m)?;
    let (mut out, branches) = transform_branch::repair_branches(&inlined)?;
    let f = out.entry_function_mut().expect("entry function");
    *f = transform_branch::fold_ctsel(f);
    let leaks = sensitivity::detect_leaks(&out, &sensitivity::propagate_taint(&out));
    let (tabled, tables) = transform_lut::lut_repair_pass(&out, &leaks, &opts.lut)?;
    out = tabled;
    let f = out.entry_function_mut().expect("entry function");
    *f = transform_branch::lower_ctsel(f, opts.ctsel);
    let diags = ir::validate(&out);
    if !diags.is_empty() {
        return Err(Error::Invalid(diags));
    }
    Ok((out, MitigationReport { branches, tables }))
}
