//! Slope verdicts for the bundle shapes the library can decide, read from
//! JSON descriptors.
//!
//! cargo run --example stability_oracle

use sasaki::bundle::{stability_oracle, ShapeDescriptor};

fn main() -> sasaki::Result<()> {
    let shapes = [
        r#"{"rank": 1, "degrees": [3], "alpha": {"kind": "zero"}}"#,
        r#"{"rank": 2, "degrees": [1, 1], "alpha": {"kind": "zero"}}"#,
        r#"{"rank": 2, "degrees": [0, 1], "alpha": {"kind": "zero"}}"#,
        r#"{"rank": 2, "degrees": [0, 1], "alpha": {"kind": "extension_class", "data": {"epsilon": 0.84}}}"#,
        r#"{"rank": 2, "degrees": [1, 0], "alpha": {"kind": "extension_class", "data": {"epsilon": 0.5}}}"#,
        r#"{"rank": 2, "degrees": [0, 0], "alpha": {"kind": "extension_class", "data": {"epsilon": 0.5}}}"#,
    ];
    for json in shapes {
        let shape: ShapeDescriptor = serde_json::from_str(json).expect("valid descriptor");
        match stability_oracle(&shape) {
            Ok(v) => println!("{:?} {:?} -> {v:?}", shape.degrees, shape.alpha),
            Err(e) => println!("{:?} {:?} -> {e}", shape.degrees, shape.alpha),
        }
    }
    Ok(())
}
