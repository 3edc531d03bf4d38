use super::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named trainable tensors. Ids stay valid after [`ParamStore::remove_prefix`];
/// removed slots are simply skipped.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<Option<(String, Tensor)>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.slots.push(Some((name, t.with_requires_grad(true))));
        ParamId(self.slots.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].as_ref().expect("parameter was removed").1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].as_mut().expect("parameter was removed").1
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(|s| s.is_some())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].as_ref().expect("parameter was removed").0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, n, _)| *n == name).map(|(id, _, _)| id)
    }

    pub fn len(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|(n, t)| (ParamId(i), n.as_str(), t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Tensor)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.as_mut().map(|(n, t)| (ParamId(i), n.as_str(), t)))
    }

    /// Drops every parameter whose name starts with `prefix`; returns how many.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let mut removed = 0;
        for slot in &mut self.slots {
            if slot.as_ref().is_some_and(|(n, _)| n.starts_with(prefix)) {
                *slot = None;
                removed += 1;
            }
        }
        removed
    }

    pub fn zero_grad(&mut self) {
        for (_, _, t) in self.iter_mut() {
            t.zero_grad();
        }
    }

    /// Adds the gradients a tape collected for bound parameters.
    pub fn accumulate_from(&mut self, tape: &Tape, scale: f64) {
        for (id, g) in tape.param_grads() {
            if let (Some(g), true) = (g, self.contains(id)) {
                if scale == 1.0 {
                    self.get_mut(id).accumulate_grad(g);
                } else {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    self.get_mut(id).accumulate_grad(&scaled);
                }
            }
        }
    }

    /// Collects tape gradients into a standalone buffer aligned with this store.
    pub fn collect_grads(&self, tape: &Tape) -> GradBuffer {
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        for (id, g) in tape.param_grads() {
            if let Some(g) = g {
                slots[id.0] = Some(g.to_vec());
            }
        }
        GradBuffer { slots }
    }

    pub fn apply_grads(&mut self, buf: &GradBuffer, scale: f64) {
        for (i, g) in buf.slots.iter().enumerate() {
            if let Some(g) = g {
                if self.contains(ParamId(i)) {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    self.get_mut(ParamId(i)).accumulate_grad(&scaled);
                }
            }
        }
    }

    /// L2 norm over all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.iter()
            .filter_map(|(_, _, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-parameter gradients detached from any tape, so several episodes can be
/// differentiated independently and summed in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct GradBuffer {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// Adds `other` elementwise; slots missing on one side are taken as zero.
    pub fn add_assign(&mut self, other: &GradBuffer) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slots.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().flatten().all(|v| v.is_finite())
    }
}
