//! Model stubs for driving the lesion-wise harness.

use std::cell::RefCell;
use std::rc::Rc;

use mois_core::click::Click;
use mois_core::evaluation::{connected_components, Connectivity, EvalError, InteractiveModel};
use mois_core::volume::Mask;

/// Returns the GT component under the first click, and the full GT at the end.
pub struct Perfect {
    pub gt: Mask,
}

impl InteractiveModel for Perfect {
    fn refine(&mut self, _lesion: usize, clicks: &[Click]) -> Result<Mask, EvalError> {
        let labels = connected_components(&self.gt, Connectivity::C26);
        let c = clicks[0];
        let id = labels.data[self.gt.extents.index(c.x, c.y, c.slice)];
        Ok(labels.mask_of(id))
    }

    fn finalize(&mut self) -> Result<Option<Mask>, EvalError> {
        Ok(Some(self.gt.clone()))
    }
}

pub struct Empty {
    pub gt: Mask,
}

impl InteractiveModel for Empty {
    fn refine(&mut self, _lesion: usize, _clicks: &[Click]) -> Result<Mask, EvalError> {
        Ok(Mask::empty(self.gt.extents))
    }
}

/// Paints a cube around each positive click and erases one around each
/// negative click, recording every returned mask.
pub struct Brush {
    pub extents: mois_core::volume::Extents,
    pub radius: i64,
    pub log: Rc<RefCell<Vec<(usize, Mask)>>>,
}

impl InteractiveModel for Brush {
    fn refine(&mut self, lesion: usize, clicks: &[Click]) -> Result<Mask, EvalError> {
        let e = self.extents;
        let mut m = Mask::empty(e);
        for c in clicks {
            for dz in -1..=1i64 {
                for dy in -self.radius..=self.radius {
                    for dx in -self.radius..=self.radius {
                        let (x, y, z) = (c.x as i64 + dx, c.y as i64 + dy, c.slice as i64 + dz);
                        if e.contains(x, y, z) {
                            m.set(x as usize, y as usize, z as usize, c.is_positive());
                        }
                    }
                }
            }
        }
        self.log.borrow_mut().push((lesion, m.clone()));
        Ok(m)
    }
}
