use std::collections::{BTreeMap, BTreeSet};

use crate::id::{ElementId, IdGenerator};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("unknown element {0}")]
    UnknownElement(ElementId),
    #[error("element {0} already stored or deleted")]
    DuplicateId(ElementId),
}

/// Id-keyed element set with delete-then-create updates.
///
/// Deleted ids are remembered so that no id is ever live twice.
#[derive(Clone, Debug)]
pub struct ElementStore<T> {
    live: BTreeMap<ElementId, T>,
    deleted: BTreeSet<ElementId>,
}

impl<T> Default for ElementStore<T> {
    fn default() -> Self {
        ElementStore {
            live: BTreeMap::new(),
            deleted: BTreeSet::new(),
        }
    }
}

impl<T> ElementStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ElementId, element: T) -> Result<(), StoreError> {
        if self.live.contains_key(&id) || self.deleted.contains(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        self.live.insert(id, element);
        Ok(())
    }

    pub fn get(&self, id: &ElementId) -> Option<&T> {
        self.live.get(id)
    }

    pub fn delete(&mut self, id: &ElementId) -> Result<T, StoreError> {
        let element = self
            .live
            .remove(id)
            .ok_or_else(|| StoreError::UnknownElement(id.clone()))?;
        self.deleted.insert(id.clone());
        Ok(element)
    }

    /// Replaces `old_id` by a new element built under a fresh id.
    ///
    /// Runs as two steps, deletion then creation; the state between them
    /// is an ordinary store state.
    pub fn update_element(
        &mut self,
        old_id: &ElementId,
        ids: &mut IdGenerator,
        build: impl FnOnce(ElementId) -> T,
    ) -> Result<ElementId, StoreError> {
        self.delete(old_id)?;
        let fresh = ids.next_id();
        self.insert(fresh.clone(), build(fresh.clone()))?;
        Ok(fresh)
    }

    pub fn is_deleted(&self, id: &ElementId) -> bool {
        self.deleted.contains(id)
    }

    pub fn live_ids(&self) -> impl Iterator<Item = &ElementId> {
        self.live.keys()
    }

    pub fn deleted_ids(&self) -> impl Iterator<Item = &ElementId> {
        self.deleted.iter()
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::NodeId;

    #[test]
    fn update_replaces_id() {
        let mut ids = IdGenerator::new(NodeId::new("n"));
        let mut store = ElementStore::new();
        let qos = ids.next_id();
        store.insert(qos.clone(), "qos v1").unwrap();
        let new_id = store.update_element(&qos, &mut ids, |_| "qos v2").unwrap();
        assert!(store.get(&qos).is_none());
        assert_eq!(store.get(&new_id), Some(&"qos v2"));
        assert!(store.is_deleted(&qos));
    }

    #[test]
    fn update_of_missing_element_fails() {
        let mut ids = IdGenerator::new(NodeId::new("n"));
        let mut store: ElementStore<u8> = ElementStore::new();
        let missing = ids.next_id();
        assert_eq!(
            store.update_element(&missing, &mut ids, |_| 0),
            Err(StoreError::UnknownElement(missing))
        );
    }

    #[test]
    fn deleted_id_cannot_be_reinserted() {
        let mut ids = IdGenerator::new(NodeId::new("n"));
        let mut store = ElementStore::new();
        let id = ids.next_id();
        store.insert(id.clone(), 1).unwrap();
        store.delete(&id).unwrap();
        assert_eq!(store.insert(id.clone(), 2), Err(StoreError::DuplicateId(id)));
    }
}
