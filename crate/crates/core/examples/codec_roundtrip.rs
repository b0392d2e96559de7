//! Encode a generated shapes map, pack it, and compare its size with the
//! raw RGB image.

use semcomm::codec::{bit_budget, one_hot_encode, rle_pack, rle_unpack, BudgetItem};
use semcomm::data::{generate_shapes, ShapesSpec};

fn main() -> semcomm::error::Result<()> {
    let spec = ShapesSpec::new(32, 6, 1)?;
    for sample in generate_shapes(&spec, 0, 5)? {
        let stack = one_hot_encode(&sample.map, 6)?;
        let payload = rle_pack(&stack)?;
        assert_eq!(rle_unpack(&payload)?, stack);
        let raw = bit_budget(BudgetItem::RawRgb { height: 32, width: 32 });
        println!(
            "classes {:?}: {} bits vs {} raw ({:.1}%)",
            stack.present(),
            payload.bit_count(),
            raw,
            100.0 * payload.bit_count() as f64 / raw as f64
        );
    }
    Ok(())
}
