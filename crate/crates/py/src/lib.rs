use pyo3::prelude::*;

#[pymodule]
fn normalign_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
