pub mod ablate;
pub mod bench;
pub mod equiv;
pub mod gradcheck;
pub mod kronrank;
pub mod train;

use crate::report::{Assertion, Table};

pub(crate) type Output = (Vec<Table>, Vec<Assertion>);

pub(crate) fn shape_name(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub(crate) fn mask_name(mask: &[bool]) -> String {
    mask.iter().map(|&m| if m { '1' } else { '0' }).collect()
}
