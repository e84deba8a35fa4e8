use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{
    BasicBlock, FuncRef, FunctionDef, LibraryDoc, ModuleUnit, Op, ProgramImage, PMIR_VERSION,
};
use crate::bpf;
use crate::error::PmirError;

/// Loads an image from its executable document followed by any number of
/// library documents, which are appended to the dependency list in order.
/// Link emulation is not performed here.
pub fn load_image<P: AsRef<Path>>(paths: &[P]) -> Result<ProgramImage, PmirError> {
    let (first, rest) = paths.split_first().ok_or_else(|| PmirError::Document {
        file: Default::default(),
        message: "no input files".into(),
    })?;
    let mut image = parse_image(first.as_ref(), &read(first.as_ref())?)?;
    for p in rest {
        let lib = parse_library(p.as_ref(), &read(p.as_ref())?)?;
        image.libraries.push(lib.module);
    }
    validate_image(&image)?;
    Ok(image)
}

/// Reads one standalone library document.
pub fn load_library(path: &Path) -> Result<ModuleUnit, PmirError> {
    Ok(parse_library(path, &read(path)?)?.module)
}

/// Reads every `*.pmir.json` library document in `dir`, in file-name
/// order. Unreadable or invalid entries are skipped and reported.
pub fn load_corpus(dir: &Path) -> (Vec<ModuleUnit>, Vec<PmirError>) {
    let mut files: Vec<_> = match fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".pmir.json"))
            .collect(),
        Err(source) => {
            return (
                Vec::new(),
                vec![PmirError::Io {
                    file: dir.to_path_buf(),
                    source,
                }],
            )
        }
    };
    files.sort();
    let mut mods = Vec::new();
    let mut problems = Vec::new();
    for f in files {
        match load_library(&f) {
            Ok(m) => mods.push(m),
            Err(e) => problems.push(e),
        }
    }
    (mods, problems)
}

fn read(path: &Path) -> Result<String, PmirError> {
    fs::read_to_string(path).map_err(|source| PmirError::Io {
        file: path.to_path_buf(),
        source,
    })
}

fn parse_err(file: &Path, e: serde_json::Error) -> PmirError {
    PmirError::Parse {
        file: file.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn probe(file: &Path, text: &str) -> Result<serde_json::Value, PmirError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(file, e))?;
    match v.get("pmir_version").and_then(|x| x.as_u64()) {
        Some(ver) if ver == PMIR_VERSION as u64 => Ok(v),
        Some(ver) => Err(PmirError::Document {
            file: file.to_path_buf(),
            message: format!("unsupported pmir_version {ver}"),
        }),
        None => Err(PmirError::Document {
            file: file.to_path_buf(),
            message: "missing pmir_version".into(),
        }),
    }
}

/// Parses an image document without validating it.
pub fn parse_image(file: &Path, text: &str) -> Result<ProgramImage, PmirError> {
    let v = probe(file, text)?;
    if v.get("executable").is_none() {
        return Err(PmirError::Document {
            file: file.to_path_buf(),
            message: "not an image document (no `executable`)".into(),
        });
    }
    serde_json::from_str(text).map_err(|e| parse_err(file, e))
}

/// Parses and validates a standalone library document.
pub fn parse_library(file: &Path, text: &str) -> Result<LibraryDoc, PmirError> {
    let v = probe(file, text)?;
    if v.get("module").is_none() {
        return Err(PmirError::Document {
            file: file.to_path_buf(),
            message: "not a library document (no `module`)".into(),
        });
    }
    let doc: LibraryDoc = serde_json::from_str(text).map_err(|e| parse_err(file, e))?;
    validate_module(&doc.module, &|_| true)?;
    check_unique_addresses(std::iter::once(&doc.module))?;
    Ok(doc)
}

fn canonical<T: Serialize>(value: &T) -> Vec<u8> {
    // Going through `Value` sorts object keys.
    let v = serde_json::to_value(value).expect("pmir types serialize");
    let mut out = serde_json::to_vec_pretty(&v).expect("value serializes");
    out.push(b'\n');
    out
}

/// Canonical JSON encoding; `parse_image(serialize_image(x)) == x`.
pub fn serialize_image(image: &ProgramImage) -> Vec<u8> {
    canonical(image)
}

pub fn serialize_library(module: &ModuleUnit) -> Vec<u8> {
    canonical(&LibraryDoc {
        pmir_version: PMIR_VERSION,
        module: module.clone(),
    })
}

/// Checks every structural invariant of an image.
pub fn validate_image(image: &ProgramImage) -> Result<(), PmirError> {
    if image.pmir_version != PMIR_VERSION {
        return Err(PmirError::invalid(
            "pmir-version",
            "image",
            format!("unsupported version {}", image.pmir_version),
        ));
    }
    let mut names = HashSet::new();
    for m in image.modules() {
        if !names.insert(m.name.as_str()) {
            return Err(PmirError::invalid(
                "module-names-unique",
                format!("module `{}`", m.name),
                "duplicate module name",
            ));
        }
    }
    let func_exists = |r: &FuncRef| {
        image
            .module(&r.module)
            .is_some_and(|m| m.function(&r.name).is_some())
    };
    for m in image.modules() {
        validate_module(m, &func_exists)?;
    }
    check_unique_addresses(image.modules())?;

    if image.executable.function(&image.main_function).is_none() {
        return Err(PmirError::invalid(
            "main-resolves",
            format!("main `{}`", image.main_function),
            "main function not found in executable",
        ));
    }
    for (kind, list) in [
        ("preinit", image.preinit_refs()),
        ("init", image.init_refs()),
        ("fini", image.fini_refs()),
    ] {
        for r in list {
            if !func_exists(&r) {
                return Err(PmirError::invalid(
                    "root-resolves",
                    format!("{kind} function `{r}`"),
                    "loader root does not resolve",
                ));
            }
        }
    }
    for b in &image.dl_bindings {
        if !func_exists(&b.target) {
            return Err(PmirError::invalid(
                "dl-binding-resolves",
                format!("binding at {:#x}", b.callsite),
                format!("`{}` does not resolve", b.target),
            ));
        }
    }
    for (id, prog) in &image.filters {
        bpf::validate(prog).map_err(|e| {
            PmirError::invalid("filter-valid", format!("filter {id}"), e.to_string())
        })?;
    }
    for m in image.modules() {
        for f in &m.functions {
            for ins in f.instructions() {
                if let Op::InstallFilter { partition } = ins.op {
                    if !image.filters.contains_key(&partition) {
                        return Err(PmirError::invalid(
                            "install-filter-embedded",
                            format!("instruction {:#x}", ins.address),
                            format!("no embedded filter for partition {partition}"),
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Address uniqueness over an image plus extra library modules; extras
/// whose name is already part of the image are skipped.
pub fn check_addresses(image: &ProgramImage, extra: &[ModuleUnit]) -> Result<(), PmirError> {
    let names: HashSet<&str> = image.modules().map(|m| m.name.as_str()).collect();
    check_unique_addresses(
        image
            .modules()
            .chain(extra.iter().filter(|m| !names.contains(m.name.as_str()))),
    )
}

/// Image-wide address uniqueness over the given modules.
pub(crate) fn check_unique_addresses<'a>(
    modules: impl Iterator<Item = &'a ModuleUnit>,
) -> Result<(), PmirError> {
    let mut seen: HashMap<u64, String> = HashMap::new();
    for m in modules {
        for f in &m.functions {
            for ins in f.instructions() {
                let owner = format!("{}::{}", m.name, f.name);
                if let Some(prev) = seen.insert(ins.address, owner.clone()) {
                    return Err(PmirError::invalid(
                        "address-unique",
                        format!("instruction {:#x}", ins.address),
                        format!("address used by both `{prev}` and `{owner}`"),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn validate_module(
    m: &ModuleUnit,
    func_exists: &dyn Fn(&FuncRef) -> bool,
) -> Result<(), PmirError> {
    let mut fnames = HashSet::new();
    let mut faddrs = HashSet::new();
    for f in &m.functions {
        let ent = format!("function `{}::{}`", m.name, f.name);
        if !fnames.insert(f.name.as_str()) {
            return Err(PmirError::invalid(
                "function-names-unique",
                ent,
                "duplicate name",
            ));
        }
        if !faddrs.insert(f.address) {
            return Err(PmirError::invalid(
                "function-addresses-unique",
                ent,
                format!("address {:#x} reused", f.address),
            ));
        }
        validate_function(m, f)?;
    }
    let local_or_qualified = |text: &str| -> bool {
        let r = FuncRef::parse_in(text, &m.name);
        if r.module == m.name {
            m.function(&r.name).is_some()
        } else {
            func_exists(&r)
        }
    };
    for (sym, local) in &m.exports {
        if m.function(local).is_none() {
            return Err(PmirError::invalid(
                "export-resolves",
                format!("export `{sym}` of `{}`", m.name),
                format!("no function `{local}`"),
            ));
        }
    }
    let mut oids = HashSet::new();
    for o in &m.data_objects {
        if !oids.insert(o.id.as_str()) {
            return Err(PmirError::invalid(
                "data-object-ids-unique",
                format!("data object `{}::{}`", m.name, o.id),
                "duplicate id",
            ));
        }
        for mem in &o.members {
            if !local_or_qualified(mem) {
                return Err(PmirError::invalid(
                    "data-member-resolves",
                    format!("data object `{}::{}`", m.name, o.id),
                    format!("member `{mem}` does not resolve"),
                ));
            }
        }
    }
    for f in &m.functions {
        for ins in f.instructions() {
            let ent = || format!("instruction {:#x} in `{}::{}`", ins.address, m.name, f.name);
            match &ins.op {
                Op::CallDirect { func } | Op::TakeAddr { func, .. } => {
                    if !local_or_qualified(func) {
                        return Err(PmirError::invalid(
                            "function-ref-resolves",
                            ent(),
                            format!("`{func}` does not resolve"),
                        ));
                    }
                }
                Op::TakeAddrData { object, .. } => {
                    let ok = match object.rsplit_once("::") {
                        None => m.data_objects.iter().any(|o| &o.id == object),
                        Some((mm, _)) if mm == m.name => m
                            .data_objects
                            .iter()
                            .any(|o| Some(o.id.as_str()) == object.rsplit_once("::").map(|x| x.1)),
                        Some(_) => true,
                    };
                    if !ok {
                        return Err(PmirError::invalid(
                            "data-object-ref-resolves",
                            ent(),
                            format!("`{object}` does not resolve"),
                        ));
                    }
                }
                Op::CallPlt { symbol } if symbol.is_empty() => {
                    return Err(PmirError::invalid("plt-symbol-nonempty", ent(), "empty symbol"));
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn validate_function(m: &ModuleUnit, f: &FunctionDef) -> Result<(), PmirError> {
    let fname = format!("{}::{}", m.name, f.name);
    if f.blocks.is_empty() {
        return Err(PmirError::invalid(
            "function-nonempty",
            format!("function `{fname}`"),
            "no blocks",
        ));
    }
    let mut ids = BTreeSet::new();
    for b in &f.blocks {
        if !ids.insert(b.id) {
            return Err(PmirError::invalid(
                "block-ids-unique",
                format!("block {} of `{fname}`", b.id),
                "duplicate block id",
            ));
        }
    }
    if !ids.contains(&f.entry_block) {
        return Err(PmirError::invalid(
            "entry-block-exists",
            format!("function `{fname}`"),
            format!("entry block {} missing", f.entry_block),
        ));
    }
    let mut prev_addr: Option<u64> = None;
    for b in &f.blocks {
        let ent = format!("block {} of `{fname}`", b.id);
        validate_block(b, &ids, &ent)?;
        if let Some(p) = prev_addr {
            if b.address <= p {
                return Err(PmirError::invalid(
                    "block-addresses-increasing",
                    ent,
                    format!("address {:#x} not above {:#x}", b.address, p),
                ));
            }
        }
        prev_addr = b.instructions.last().map(|i| i.address);
    }
    Ok(())
}

fn validate_block(b: &BasicBlock, ids: &BTreeSet<u32>, ent: &str) -> Result<(), PmirError> {
    let Some(first) = b.instructions.first() else {
        return Err(PmirError::invalid("block-nonempty", ent, "no instructions"));
    };
    if first.address != b.address {
        return Err(PmirError::invalid(
            "block-address-matches-first-instruction",
            ent,
            format!("block at {:#x}, first instruction at {:#x}", b.address, first.address),
        ));
    }
    for w in b.instructions.windows(2) {
        if w[1].address <= w[0].address {
            return Err(PmirError::invalid(
                "instruction-addresses-increasing",
                ent,
                format!("{:#x} follows {:#x}", w[1].address, w[0].address),
            ));
        }
    }
    let n = b.instructions.len();
    for (i, ins) in b.instructions.iter().enumerate() {
        if ins.op.is_terminator() && i + 1 != n {
            return Err(PmirError::invalid(
                "terminator-last",
                ent,
                format!("terminator at {:#x} is not the last instruction", ins.address),
            ));
        }
    }
    for s in &b.successors {
        if !ids.contains(s) {
            return Err(PmirError::invalid(
                "jump-target-exists",
                ent,
                format!("successor block {s} does not exist"),
            ));
        }
    }
    match b.terminator() {
        Some(Op::Jump { target }) if !ids.contains(target) => return Err(PmirError::invalid(
            "jump-target-exists",
            ent,
            format!("jump target block {target} does not exist"),
        )),
        Some(Op::CondJump { taken, not_taken })
            if !ids.contains(taken) || !ids.contains(not_taken) =>
        {
            return Err(PmirError::invalid(
                "jump-target-exists",
                ent,
                format!("branch targets {taken}/{not_taken} do not all exist"),
            ));
        }
        _ => {}
    }
    let consistent = match b.terminator() {
        Some(Op::Ret) => b.successors.is_empty(),
        Some(Op::Jump { target }) => b.successors == [*target],
        Some(Op::CondJump { taken, not_taken }) => {
            b.successors == [*taken, *not_taken]
                || (taken == not_taken && b.successors == [*taken])
        }
        _ => b.successors.len() <= 1,
    };
    if consistent {
        Ok(())
    } else {
        Err(PmirError::invalid(
            "successors-consistent",
            ent,
            format!("successors {:?} disagree with the terminator", b.successors),
        ))
    }
}
