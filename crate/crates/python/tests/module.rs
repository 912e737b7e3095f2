use pyisoflow::pyisoflow;
use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn the_module_imports_and_runs() {
    pyo3::append_to_inittab!(pyisoflow);
    Python::initialize();
    Python::attach(|py| {
        let locals = PyDict::new(py);
        py.run(
            cr#"
import pyisoflow as iso
s = iso.Spectrum([1.0, 2.0, 4.0])
r = iso.integrate(iso.State.random(s, 9))
assert r.converged and sorted(r.label) == [0, 1, 2]
assert len(iso.catalog(s)) == 16
assert iso.verify_edges(s) == (6, 6, 0)
try:
    iso.Spectrum([1.0, 2.0, 3.0])
    rejected = False
except ValueError:
    rejected = True
"#,
            None,
            Some(&locals),
        )
        .unwrap();
        let rejected: bool = locals
            .get_item("rejected")
            .unwrap()
            .unwrap()
            .extract()
            .unwrap();
        assert!(rejected);
    });
}
