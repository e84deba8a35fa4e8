use std::collections::HashMap;

use super::{BasicBlock, BlockId, FuncRef, FunctionDef, Instruction, ModuleUnit, ProgramImage};

/// Dense handle for a function inside a [`Linked`] view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FuncId(pub u32);

impl FuncId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Position of an instruction: function, block index, instruction index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrLoc {
    pub func: FuncId,
    pub block: usize,
    pub instr: usize,
}

/// Block-index adjacency for one function.
#[derive(Debug, Clone)]
pub struct FnCfg {
    pub entry: usize,
    pub succs: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
}

/// Index over a validated image (optionally extended with extra library
/// modules) for constant-time lookups by address and by name.
///
/// Modules keep their image order; extra modules follow, so function ids of
/// the image part are stable when extras are added.
pub struct Linked<'a> {
    image: &'a ProgramImage,
    modules: Vec<&'a ModuleUnit>,
    image_modules: usize,
    funcs: Vec<(usize, usize)>,
    module_idx: HashMap<&'a str, usize>,
    by_name: HashMap<(usize, &'a str), FuncId>,
    addr: HashMap<u64, InstrLoc>,
    entry_addr: HashMap<u64, FuncId>,
    cfgs: Vec<FnCfg>,
    main: Option<FuncId>,
}

impl<'a> Linked<'a> {
    pub fn new(image: &'a ProgramImage) -> Self {
        Self::with_extra(image, &[])
    }

    pub fn with_extra(image: &'a ProgramImage, extra: &[&'a ModuleUnit]) -> Self {
        let mut modules: Vec<&'a ModuleUnit> = image.modules().collect();
        let image_modules = modules.len();
        for m in extra {
            if !modules.iter().any(|x| x.name == m.name) {
                modules.push(m);
            }
        }
        let mut linked = Linked {
            image,
            modules,
            image_modules,
            funcs: Vec::new(),
            module_idx: HashMap::new(),
            by_name: HashMap::new(),
            addr: HashMap::new(),
            entry_addr: HashMap::new(),
            cfgs: Vec::new(),
            main: None,
        };
        for (mi, m) in linked.modules.iter().enumerate() {
            linked.module_idx.entry(m.name.as_str()).or_insert(mi);
            for (fi, f) in m.functions.iter().enumerate() {
                let id = FuncId(linked.funcs.len() as u32);
                linked.funcs.push((mi, fi));
                linked.by_name.insert((mi, f.name.as_str()), id);
                linked.cfgs.push(FnCfg::of(f));
                for (bi, b) in f.blocks.iter().enumerate() {
                    for (ii, ins) in b.instructions.iter().enumerate() {
                        linked.addr.insert(
                            ins.address,
                            InstrLoc {
                                func: id,
                                block: bi,
                                instr: ii,
                            },
                        );
                    }
                }
                if let Some(eb) = f.block(f.entry_block) {
                    if let Some(first) = eb.instructions.first() {
                        linked.entry_addr.insert(first.address, id);
                    }
                }
            }
        }
        linked.main = linked.lookup(&image.main_ref());
        linked
    }

    pub fn image(&self) -> &'a ProgramImage {
        self.image
    }

    pub fn modules(&self) -> &[&'a ModuleUnit] {
        &self.modules
    }

    pub fn image_module_count(&self) -> usize {
        self.image_modules
    }

    pub fn func_count(&self) -> usize {
        self.funcs.len()
    }

    pub fn func_ids(&self) -> impl Iterator<Item = FuncId> {
        (0..self.funcs.len() as u32).map(FuncId)
    }

    /// Functions belonging to the image proper (not extra modules).
    pub fn image_func_ids(&self) -> impl Iterator<Item = FuncId> + '_ {
        self.func_ids()
            .filter(move |id| self.funcs[id.index()].0 < self.image_modules)
    }

    pub fn func(&self, id: FuncId) -> &'a FunctionDef {
        let (mi, fi) = self.funcs[id.index()];
        &self.modules[mi].functions[fi]
    }

    pub fn module_index_of(&self, id: FuncId) -> usize {
        self.funcs[id.index()].0
    }

    pub fn module_of(&self, id: FuncId) -> &'a ModuleUnit {
        self.modules[self.funcs[id.index()].0]
    }

    pub fn func_ref(&self, id: FuncId) -> FuncRef {
        FuncRef::new(&self.module_of(id).name, &self.func(id).name)
    }

    pub fn cfg(&self, id: FuncId) -> &FnCfg {
        &self.cfgs[id.index()]
    }

    pub fn main(&self) -> Option<FuncId> {
        self.main
    }

    pub fn module_index(&self, name: &str) -> Option<usize> {
        self.module_idx.get(name).copied()
    }

    pub fn lookup(&self, r: &FuncRef) -> Option<FuncId> {
        let mi = self.module_index(&r.module)?;
        self.by_name.get(&(mi, r.name.as_str())).copied()
    }

    /// Resolves a bare or qualified reference written inside module `mi`.
    pub fn resolve_in(&self, mi: usize, text: &str) -> Option<FuncId> {
        match text.rsplit_once("::") {
            Some((m, n)) => {
                let mi = self.module_index(m)?;
                self.by_name.get(&(mi, n)).copied()
            }
            None => self.by_name.get(&(mi, text)).copied(),
        }
    }

    /// Resolves a reference written inside the module of function `from`.
    pub fn resolve_from(&self, from: FuncId, text: &str) -> Option<FuncId> {
        self.resolve_in(self.module_index_of(from), text)
    }

    /// Function members of a data object referenced from module `mi`.
    pub fn data_members(&self, mi: usize, object: &str) -> Option<(usize, Vec<FuncId>)> {
        let (omi, oid) = match object.rsplit_once("::") {
            Some((m, o)) => (self.module_index(m)?, o),
            None => (mi, object),
        };
        let obj = self.modules[omi].data_objects.iter().find(|o| o.id == oid)?;
        let members = obj
            .members
            .iter()
            .filter_map(|m| self.resolve_in(omi, m))
            .collect();
        Some((omi, members))
    }

    /// Global symbol lookup: executable first, then libraries in order.
    pub fn resolve_export(&self, symbol: &str) -> Option<FuncId> {
        self.modules.iter().enumerate().find_map(|(mi, m)| {
            m.exports
                .get(symbol)
                .and_then(|local| self.by_name.get(&(mi, local.as_str())).copied())
        })
    }

    /// Exporters of `symbol` among all modules.
    pub fn exporters(&self, symbol: &str) -> Vec<FuncId> {
        self.modules
            .iter()
            .enumerate()
            .filter_map(|(mi, m)| {
                m.exports
                    .get(symbol)
                    .and_then(|local| self.by_name.get(&(mi, local.as_str())).copied())
            })
            .collect()
    }

    pub fn loc(&self, addr: u64) -> Option<InstrLoc> {
        self.addr.get(&addr).copied()
    }

    pub fn instr(&self, loc: InstrLoc) -> &'a Instruction {
        &self.func(loc.func).blocks[loc.block].instructions[loc.instr]
    }

    pub fn instr_at(&self, addr: u64) -> Option<(InstrLoc, &'a Instruction)> {
        self.loc(addr).map(|l| (l, self.instr(l)))
    }

    pub fn block(&self, func: FuncId, block: usize) -> &'a BasicBlock {
        &self.func(func).blocks[block]
    }

    pub fn block_index(&self, func: FuncId, id: BlockId) -> Option<usize> {
        self.func(func).block_index(id)
    }

    /// Function whose entry instruction lives at `addr`.
    pub fn func_at_entry(&self, addr: u64) -> Option<FuncId> {
        self.entry_addr.get(&addr).copied()
    }

    pub fn entry_address(&self, id: FuncId) -> Option<u64> {
        let c = self.cfg(id);
        self.func(id).blocks[c.entry]
            .instructions
            .first()
            .map(|i| i.address)
    }
}

impl FnCfg {
    /// Block-index graph of `f`; unknown successor ids are dropped.
    pub fn of(f: &FunctionDef) -> FnCfg {
        let index: HashMap<BlockId, usize> =
            f.blocks.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let succs: Vec<Vec<usize>> = f
            .blocks
            .iter()
            .map(|b| {
                let mut v: Vec<usize> = Vec::new();
                for s in &b.successors {
                    if let Some(&i) = index.get(s) {
                        if !v.contains(&i) {
                            v.push(i);
                        }
                    }
                }
                v
            })
            .collect();
        let mut preds = vec![Vec::new(); f.blocks.len()];
        for (i, ss) in succs.iter().enumerate() {
            for &s in ss {
                preds[s].push(i);
            }
        }
        FnCfg {
            entry: index.get(&f.entry_block).copied().unwrap_or(0),
            succs,
            preds,
        }
    }
}
