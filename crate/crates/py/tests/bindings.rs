use std::collections::BTreeMap;

use pyo3::prelude::*;

use angie::Error;
use angie_py::{angie_module, build_config, to_py_err};

fn attach<R>(f: impl FnOnce(Python<'_>) -> R) -> R {
    static INIT: std::sync::Once = std::sync::Once::new();
    INIT.call_once(|| {
        pyo3::append_to_inittab!(angie_module);
        Python::initialize();
    });
    Python::attach(f)
}

#[test]
fn config_overrides_apply_and_validate() {
    let mut over = BTreeMap::new();
    over.insert("vq.steps".to_string(), "7".to_string());
    let cfg = build_config(Some("desk"), None, &over).unwrap();
    assert_eq!(cfg.vq.steps, 7);
    over.insert("vq.steps".to_string(), "lots".to_string());
    assert!(build_config(None, None, &over).is_err());
    assert!(build_config(Some("giant"), None, &BTreeMap::new()).is_err());
}

#[test]
fn errors_map_to_python_exceptions() {
    attach(|py| {
        let is = |e: Error, ty: &str| {
            let err = to_py_err(e);
            let name = err.get_type(py).name().unwrap().to_string();
            assert_eq!(name, ty);
        };
        is(Error::Exists("x".into()), "FileExistsError");
        is(Error::Numerical { step: 1, msg: "nan".into() }, "NumericalError");
        is(Error::Prerequisite("train-vq".into()), "PrerequisiteError");
        is(Error::Validation("bad".into()), "ValueError");
    });
}

#[test]
fn module_functions_round_trip() {
    attach(|py| {
        let code = c"
import angie
l = angie.cholesky([[4.0, 2.0], [2.0, 5.0]])
assert l == (2.0, 1.0, 2.0), l
c = angie.covariance(l)
assert c == [[4.0, 2.0], [2.0, 5.0]], c
a = angie.affine([[4.0, 0.0], [0.0, 9.0]])
assert a == [[0.0, 2.0], [3.0, 0.0]], a
assert angie.beat_consistency([1.0], [1.0]) == 1.0
assert angie.fgd([[0.0], [2.0], [1.0]], [[0.0], [2.0], [1.0]]) < 1e-9
assert angie.config('desk', overrides={'seed': '5'})['seed'] == '5'
try:
    angie.cholesky([[1.0, 2.0], [2.0, 1.0]])
    raise AssertionError('indefinite accepted')
except ValueError:
    pass
";
        py.run(code, None, None).unwrap();
    });
}
