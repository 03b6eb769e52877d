//! Hand-set models with predictable outputs for session tests.

use mois_core::model::Model;

use super::gradsuite::tiny_config;

/// Sets every element of the named parameters.
pub fn pin(m: &mut Model, values: &[(&str, f32)]) {
    for (name, v) in values {
        let id = m.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        m.params.get_mut(id).data_mut().fill(*v);
    }
}

/// Tiny model whose decoder marks every pixel foreground with a present object.
pub fn always_on() -> Model {
    let mut m = Model::new(tiny_config(), 0).unwrap();
    pin(
        &mut m,
        &[
            ("dec.fuse.w", 0.0),
            ("dec.fuse.b", 1.0),
            ("dec.hyper.fc2.w", 0.0),
            ("dec.hyper.fc2.b", 1.0),
            ("dec.obj.w", 0.0),
            ("dec.obj.b", 5.0),
        ],
    );
    m
}

/// Same as `always_on` but the object head reports absence.
pub fn object_absent() -> Model {
    let mut m = always_on();
    pin(&mut m, &[("dec.obj.b", -5.0)]);
    m
}
