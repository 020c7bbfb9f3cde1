//! Block-granular, layer-stacked KV cache for one GPU.
//!
//! The store keeps a list of independently allocated blocks. A block row is
//! owned by one request and spans every resident stacking group: for each
//! group it holds one physical allocation unit in which the `k` layers of the
//! group each get `C/k` token positions. Request block tables store resolved
//! block addresses, so lookups never consult the block list and compaction is
//! a pure reordering of that list.

use std::collections::{BTreeMap, BTreeSet};

use crate::cluster::{GpuId, GpuSpec, Layer, LayerGroup, ModelSpec};

pub type RequestId = u64;
pub type BlockId = u32;

/// Opaque simulated device address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockState {
    Free,
    Live,
}

#[derive(Debug, Clone)]
pub struct PhysicalBlock {
    pub id: BlockId,
    pub base: Address,
    pub state: BlockState,
    /// Owning request and the block's index in that request's table.
    owner: Option<(RequestId, u32)>,
    payload: BTreeMap<LayerGroup, Vec<Option<u64>>>,
}

impl PhysicalBlock {
    pub fn owner(&self) -> Option<(RequestId, u32)> {
        self.owner
    }
}

/// A written token position inside one stacking group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackedSlot {
    pub block_id: BlockId,
    pub layer_group: LayerGroup,
    pub offset: u32,
    pub token: u32,
    pub checksum: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableEntry {
    pub block: BlockId,
    pub base: Address,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockTable {
    pub entries: Vec<TableEntry>,
    /// Per-group high-water mark of written token positions.
    pub tokens: BTreeMap<LayerGroup, u32>,
}

impl BlockTable {
    fn max_tokens(&self) -> u32 {
        self.tokens.values().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KvError {
    #[error("KV overflow: need {needed_blocks} more blocks, {free_blocks} free")]
    Overflow { needed_blocks: u64, free_blocks: u64 },
    #[error("insufficient memory: {required} bytes required, {available} available")]
    InsufficientMemory { required: u64, available: u64 },
    #[error("cannot shrink to {target} blocks with {live} live")]
    CapacityBelowLive { target: u64, live: u64 },
    #[error("unknown slot: request {request}, group {group}, token {token}")]
    UnknownSlot { request: RequestId, group: LayerGroup, token: u32 },
    #[error("layer group {0} is not resident")]
    UnknownLayerGroup(LayerGroup),
}

#[derive(Debug, Clone)]
pub struct KvStore {
    gpu: GpuId,
    stacking_factor: u32,
    share: u32,
    granularity: u64,
    addr_stride: u64,
    arena: Vec<Option<PhysicalBlock>>,
    block_list: Vec<BlockId>,
    free: BTreeSet<BlockId>,
    groups: BTreeSet<LayerGroup>,
    tables: BTreeMap<RequestId, BlockTable>,
}

impl KvStore {
    /// Creates a store of `capacity_blocks` free block rows spanning `groups`.
    /// Needs `capacity_blocks · alloc_granularity` bytes per resident group.
    pub fn init(
        gpu: &GpuSpec,
        model: &ModelSpec,
        groups: impl IntoIterator<Item = LayerGroup>,
        capacity_blocks: u64,
        mem_available: u64,
    ) -> Result<Self, KvError> {
        let groups: BTreeSet<LayerGroup> = groups.into_iter().collect();
        let required = capacity_blocks
            .saturating_mul(gpu.alloc_granularity)
            .saturating_mul(groups.len().max(1) as u64);
        if required > mem_available {
            return Err(KvError::InsufficientMemory {
                required,
                available: mem_available,
            });
        }
        let share = model.layer_share(gpu.alloc_granularity);
        assert!(share > 0, "stacked block holds no tokens");
        let mut store = KvStore {
            gpu: gpu.id,
            stacking_factor: model.stacking_factor,
            share,
            granularity: gpu.alloc_granularity,
            addr_stride: gpu.alloc_granularity * model.num_groups().max(1) as u64,
            arena: Vec::new(),
            block_list: Vec::new(),
            free: BTreeSet::new(),
            groups,
            tables: BTreeMap::new(),
        };
        store.append_blocks(capacity_blocks);
        Ok(store)
    }

    pub fn gpu(&self) -> GpuId {
        self.gpu
    }

    /// Token positions per layer inside one block (`C/k`).
    pub fn layer_share(&self) -> u32 {
        self.share
    }

    /// Token-layer slots in one allocation unit (`C`).
    pub fn block_token_capacity(&self) -> u32 {
        self.share * self.stacking_factor
    }

    pub fn stacking_factor(&self) -> u32 {
        self.stacking_factor
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.block_list.len() as u64
    }

    pub fn used_blocks(&self) -> u64 {
        (self.block_list.len() - self.free.len()) as u64
    }

    pub fn free_blocks(&self) -> u64 {
        self.free.len() as u64
    }

    pub fn groups(&self) -> &BTreeSet<LayerGroup> {
        &self.groups
    }

    /// Bytes of device memory the store occupies.
    pub fn footprint_bytes(&self) -> u64 {
        self.capacity_blocks() * self.granularity * self.groups.len() as u64
    }

    pub fn block_list(&self) -> &[BlockId] {
        &self.block_list
    }

    pub fn block(&self, id: BlockId) -> Option<&PhysicalBlock> {
        self.arena.get(id as usize).and_then(Option::as_ref)
    }

    pub fn table(&self, request: RequestId) -> Option<&BlockTable> {
        self.tables.get(&request)
    }

    pub fn requests(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.tables.keys().copied()
    }

    /// Written high-water mark of `group` for `request`.
    pub fn tokens(&self, request: RequestId, group: LayerGroup) -> u32 {
        self.tables
            .get(&request)
            .and_then(|t| t.tokens.get(&group).copied())
            .unwrap_or(0)
    }

    /// One past the largest block id ever issued; bounds the slot index space.
    pub fn block_id_bound(&self) -> u32 {
        self.arena.len() as u32
    }

    pub fn group_address(&self, base: Address, group: LayerGroup) -> Address {
        Address(base.0 + group as u64 * self.granularity)
    }

    fn append_blocks(&mut self, n: u64) {
        for _ in 0..n {
            let id = self.arena.len() as BlockId;
            let base = Address(((self.gpu.0 as u64) << 48) | (id as u64 * self.addr_stride));
            self.arena.push(Some(PhysicalBlock {
                id,
                base,
                state: BlockState::Free,
                owner: None,
                payload: BTreeMap::new(),
            }));
            self.block_list.push(id);
            self.free.insert(id);
        }
    }

    fn block_mut(&mut self, id: BlockId) -> &mut PhysicalBlock {
        self.arena[id as usize].as_mut().expect("block released")
    }

    fn ensure_group(&self, group: LayerGroup) -> Result<(), KvError> {
        if self.groups.contains(&group) {
            Ok(())
        } else {
            Err(KvError::UnknownLayerGroup(group))
        }
    }

    /// Grows `request`'s table to cover `positions` token positions.
    fn grow_table(&mut self, request: RequestId, positions: u32) -> Result<(), KvError> {
        let have = self.tables.get(&request).map_or(0, |t| t.entries.len()) as u64;
        let need = (positions as u64).div_ceil(self.share as u64);
        if need <= have {
            return Ok(());
        }
        let extra = need - have;
        if extra > self.free.len() as u64 {
            return Err(KvError::Overflow {
                needed_blocks: extra,
                free_blocks: self.free.len() as u64,
            });
        }
        let share = self.share as usize;
        let groups: Vec<LayerGroup> = self.groups.iter().copied().collect();
        let mut new_entries = Vec::with_capacity(extra as usize);
        for i in 0..extra {
            let id = self.free.pop_first().expect("checked above");
            let b = self.block_mut(id);
            b.state = BlockState::Live;
            b.owner = Some((request, (have + i) as u32));
            b.payload = groups.iter().map(|&g| (g, vec![None; share])).collect();
            new_entries.push(TableEntry { block: id, base: b.base });
        }
        self.tables.entry(request).or_default().entries.extend(new_entries);
        Ok(())
    }

    /// Reserves block rows so `request` can hold `positions` token positions.
    pub fn reserve(&mut self, request: RequestId, positions: u32) -> Result<(), KvError> {
        self.grow_table(request, positions)
    }

    /// Blocks that `reserve(request, positions)` would have to allocate.
    pub fn blocks_needed(&self, request: RequestId, positions: u32) -> u64 {
        let have = self.tables.get(&request).map_or(0, |t| t.entries.len()) as u64;
        (positions as u64).div_ceil(self.share as u64).saturating_sub(have)
    }

    /// Appends `checksums.len()` tokens for `request` in `group`, allocating
    /// blocks on demand. Nothing changes when the append would overflow.
    pub fn append(
        &mut self,
        request: RequestId,
        group: LayerGroup,
        checksums: &[u64],
    ) -> Result<Vec<StackedSlot>, KvError> {
        self.ensure_group(group)?;
        if checksums.is_empty() {
            return Ok(Vec::new());
        }
        let start = self.tokens(request, group);
        self.grow_table(request, start + checksums.len() as u32)?;
        let share = self.share;
        let mut out = Vec::with_capacity(checksums.len());
        for (i, &c) in checksums.iter().enumerate() {
            let token = start + i as u32;
            let entry = self.tables[&request].entries[(token / share) as usize];
            let offset = token % share;
            self.block_mut(entry.block)
                .payload
                .get_mut(&group)
                .expect("resident group has payload")[offset as usize] = Some(c);
            out.push(StackedSlot {
                block_id: entry.block,
                layer_group: group,
                offset,
                token,
                checksum: c,
            });
        }
        let t = self.tables.get_mut(&request).expect("table grown");
        t.tokens.insert(group, start + checksums.len() as u32);
        Ok(out)
    }

    /// Writes a single position, possibly out of order (patch application).
    pub fn write_slot(
        &mut self,
        request: RequestId,
        group: LayerGroup,
        token: u32,
        checksum: u64,
    ) -> Result<(), KvError> {
        self.ensure_group(group)?;
        self.grow_table(request, token + 1)?;
        let share = self.share;
        let entry = self.tables[&request].entries[(token / share) as usize];
        self.block_mut(entry.block)
            .payload
            .get_mut(&group)
            .expect("resident group has payload")[(token % share) as usize] = Some(checksum);
        let t = self.tables.get_mut(&request).expect("table grown");
        let hw = t.tokens.entry(group).or_insert(0);
        *hw = (*hw).max(token + 1);
        Ok(())
    }

    pub fn read_slot(&self, request: RequestId, group: LayerGroup, token: u32) -> Result<u64, KvError> {
        let unknown = KvError::UnknownSlot {
            request,
            group,
            token,
        };
        let table = self.tables.get(&request).ok_or(unknown.clone())?;
        if token >= table.tokens.get(&group).copied().unwrap_or(0) {
            return Err(unknown);
        }
        let entry = table.entries[(token / self.share) as usize];
        self.block(entry.block)
            .and_then(|b| b.payload.get(&group))
            .and_then(|p| p[(token % self.share) as usize])
            .ok_or(unknown)
    }

    /// Resolves a token of one layer to its block address and in-block offset
    /// through the request's table.
    pub fn lookup(&self, request: RequestId, layer: Layer, token: u32) -> Result<(Address, u32), KvError> {
        let group = (layer - 1) / self.stacking_factor;
        let table = self.tables.get(&request);
        match table {
            Some(t) if token < t.tokens.get(&group).copied().unwrap_or(0) => {
                let entry = t.entries[(token / self.share) as usize];
                Ok((self.group_address(entry.base, group), token % self.share))
            }
            _ => Err(KvError::UnknownSlot {
                request,
                group,
                token,
            }),
        }
    }

    /// Moves free blocks behind live blocks in the block list. Only list order
    /// changes; addresses and contents are untouched. Returns the free count.
    pub fn compact(&mut self) -> usize {
        let free = &self.free;
        let (mut live, dead): (Vec<BlockId>, Vec<BlockId>) =
            self.block_list.iter().partition(|id| !free.contains(id));
        let n = dead.len();
        live.extend(dead);
        self.block_list = live;
        n
    }

    /// Shrinks by releasing the free suffix or expands by appending free blocks.
    pub fn resize(&mut self, new_capacity: u64) -> Result<(), KvError> {
        let cap = self.capacity_blocks();
        if new_capacity < self.used_blocks() {
            return Err(KvError::CapacityBelowLive {
                target: new_capacity,
                live: self.used_blocks(),
            });
        }
        if new_capacity < cap {
            let tail_free = self
                .block_list
                .iter()
                .rev()
                .take_while(|id| self.free.contains(id))
                .count() as u64;
            if tail_free < cap - new_capacity {
                self.compact();
            }
            for _ in new_capacity..cap {
                let id = self.block_list.pop().expect("cap > new_capacity");
                debug_assert!(self.free.contains(&id));
                self.free.remove(&id);
                self.arena[id as usize] = None;
            }
        } else if new_capacity > cap {
            self.append_blocks(new_capacity - cap);
        }
        Ok(())
    }

    /// Adds an empty resident group; every live block gets an empty unit for it.
    pub fn add_group(&mut self, group: LayerGroup) {
        if !self.groups.insert(group) {
            return;
        }
        let share = self.share as usize;
        for id in self.block_list.clone() {
            let b = self.block_mut(id);
            if b.state == BlockState::Live {
                b.payload.insert(group, vec![None; share]);
            }
        }
    }

    /// Frees the given groups everywhere. Blocks return to the free pool only
    /// when no resident group is left. Returns freed token positions.
    pub fn drop_groups(&mut self, groups: &BTreeSet<LayerGroup>) -> Result<u64, KvError> {
        for &g in groups {
            self.ensure_group(g)?;
        }
        let requests: Vec<RequestId> = self.tables.keys().copied().collect();
        let mut freed = 0;
        for r in requests {
            freed += self.clear_request_groups(r, groups);
        }
        for &g in groups {
            self.groups.remove(&g);
        }
        for id in self.block_list.clone() {
            self.block_mut(id).payload.retain(|g, _| !groups.contains(g));
        }
        Ok(freed)
    }

    /// Clears `groups` for one request (tolerating non-resident groups and
    /// unknown requests). Returns freed token positions.
    pub fn drop_request_groups(&mut self, request: RequestId, groups: &BTreeSet<LayerGroup>) -> u64 {
        self.clear_request_groups(request, groups)
    }

    fn clear_request_groups(&mut self, request: RequestId, groups: &BTreeSet<LayerGroup>) -> u64 {
        let Some(table) = self.tables.get_mut(&request) else {
            return 0;
        };
        let mut freed = 0u64;
        for g in groups {
            if let Some(n) = table.tokens.remove(g) {
                freed += n as u64;
            }
        }
        // Reservations are uniform across GPUs, so blocks stay with the request
        // while any group remains resident on this store.
        let retained = self.groups.iter().any(|g| !groups.contains(g));
        let keep = if retained {
            table.entries.len()
        } else {
            (table.max_tokens() as usize).div_ceil(self.share as usize)
        };
        let entries: Vec<TableEntry> = table.entries.to_vec();
        let remove_table = !retained && (table.tokens.is_empty() || keep == 0);
        if remove_table {
            self.tables.remove(&request);
        } else {
            self.tables.get_mut(&request).unwrap().entries.truncate(keep);
        }
        let release_from = if remove_table { 0 } else { keep };
        let share = self.share as usize;
        for (i, e) in entries.iter().enumerate() {
            let b = self.block_mut(e.block);
            if i >= release_from {
                b.state = BlockState::Free;
                b.owner = None;
                b.payload.clear();
            } else {
                for g in groups {
                    if let Some(p) = b.payload.get_mut(g) {
                        *p = vec![None; share];
                    }
                }
            }
        }
        for e in entries.iter().skip(release_from) {
            self.free.insert(e.block);
        }
        freed
    }

    /// Releases every block of `request`. Returns the number of blocks freed.
    pub fn free_request(&mut self, request: RequestId) -> usize {
        let Some(table) = self.tables.remove(&request) else {
            return 0;
        };
        for e in &table.entries {
            let b = self.block_mut(e.block);
            b.state = BlockState::Free;
            b.owner = None;
            b.payload.clear();
            self.free.insert(e.block);
        }
        table.entries.len()
    }

    /// Written token positions of `group` across all live blocks.
    pub fn occupied_positions(&self, group: LayerGroup) -> u64 {
        self.tables
            .values()
            .map(|t| t.tokens.get(&group).copied().unwrap_or(0) as u64)
            .sum()
    }

    /// Fraction of token-layer slots in live blocks holding data; 1.0 when
    /// nothing is live.
    pub fn effective_utilization(&self) -> f64 {
        let live = self.used_blocks();
        if live == 0 || self.groups.is_empty() {
            return 1.0;
        }
        let occupied: u64 = self
            .block_list
            .iter()
            .filter_map(|&id| self.block(id))
            .filter(|b| b.state == BlockState::Live)
            .flat_map(|b| b.payload.values())
            .map(|p| p.iter().filter(|x| x.is_some()).count() as u64)
            .sum();
        occupied as f64 / (live * self.groups.len() as u64 * self.share as u64) as f64
    }

    /// Slot index used by migration bitmaps: `block_id · C/k + offset`.
    pub fn slot_index(&self, block: BlockId, offset: u32) -> u64 {
        block as u64 * self.share as u64 + offset as u64
    }

    /// Owner request and token position currently behind a slot index.
    pub fn resolve_slot(&self, slot: u64) -> Option<(RequestId, u32)> {
        let block = (slot / self.share as u64) as BlockId;
        let offset = (slot % self.share as u64) as u32;
        let b = self.block(block)?;
        let (req, idx) = b.owner?;
        Some((req, idx * self.share + offset))
    }

    /// Slot indices of every written position of `group` for `request`.
    pub fn slots_of(&self, request: RequestId, group: LayerGroup) -> Vec<u64> {
        let Some(t) = self.tables.get(&request) else {
            return Vec::new();
        };
        let n = t.tokens.get(&group).copied().unwrap_or(0);
        (0..n)
            .map(|tok| {
                let e = t.entries[(tok / self.share) as usize];
                self.slot_index(e.block, tok % self.share)
            })
            .collect()
    }

    /// Slot index of one token position of a request.
    pub fn slot_of(&self, request: RequestId, token: u32) -> Option<u64> {
        let t = self.tables.get(&request)?;
        let e = t.entries.get((token / self.share) as usize)?;
        Some(self.slot_index(e.block, token % self.share))
    }

    /// Checks the structural invariants; used by tests and trace audits.
    pub fn audit(&self) -> Result<(), String> {
        if self.free.len() > self.block_list.len() {
            return Err("more free blocks than capacity".into());
        }
        let listed: BTreeSet<BlockId> = self.block_list.iter().copied().collect();
        if listed.len() != self.block_list.len() {
            return Err("duplicate block in list".into());
        }
        for id in &self.free {
            if !listed.contains(id) {
                return Err(format!("free block {id} not in list"));
            }
        }
        let mut owned = BTreeSet::new();
        for (&r, t) in &self.tables {
            for (i, e) in t.entries.iter().enumerate() {
                let b = self.block(e.block).ok_or(format!("request {r} references released block"))?;
                if b.state != BlockState::Live || b.owner != Some((r, i as u32)) {
                    return Err(format!("request {r} entry {i} not live/owned"));
                }
                if b.base != e.base {
                    return Err("stale resolved address".into());
                }
                if !owned.insert(e.block) {
                    return Err(format!("block {} shared across requests", e.block));
                }
            }
            if (t.max_tokens() as usize).div_ceil(self.share as usize) > t.entries.len() {
                return Err(format!("request {r} tokens exceed table"));
            }
        }
        if owned.len() as u64 != self.used_blocks() {
            return Err("live block count mismatch".into());
        }
        Ok(())
    }
}
