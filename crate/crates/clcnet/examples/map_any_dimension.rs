//! The dimension mapping: classification results of any length map to the
//! same fixed-length sorted vector, so one downstream regressor serves every
//! classification task.
//!
//! ```bash
//! cargo run --release --example map_any_dimension
//! ```

use clcnet::mapping::{map_to_fixed_dim, normalize_probs, sort_desc, MappingParams};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn main() -> clcnet::Result<()> {
    let mut rng = StdRng::seed_from_u64(1);
    let params = MappingParams::init(100, 0.01, &mut rng)?;

    // A five-class result...
    let five = normalize_probs(&[0.6, 0.1, 0.1, 0.1, 0.1], false)?;
    let mapped5 = map_to_fixed_dim(&sort_desc(&five), &params)?;

    // ...and a thousand-class result, through the same parameters.
    let raw: Vec<f64> = (0..1000).map(|i| 1.0 / (1.0 + i as f64).powi(2)).collect();
    let thousand = normalize_probs(&raw, true)?;
    let mapped1000 = map_to_fixed_dim(&sort_desc(&thousand), &params)?;

    for (name, input_len, mapped) in [("5-class", 5, &mapped5), ("1000-class", 1000, &mapped1000)] {
        let v = mapped.values();
        println!(
            "{name}: {input_len} -> {} values, head: {:.4} {:.4} {:.4} {:.4}",
            mapped.len(),
            v[0],
            v[1],
            v[2],
            v[3]
        );
        assert_eq!(mapped.len(), 100);
        assert!(v.windows(2).all(|w| w[0] >= w[1]), "sorted descending");
    }

    // Sorting removes category information: any permutation maps identically.
    let shuffled = normalize_probs(&[0.1, 0.6, 0.1, 0.1, 0.1], false)?;
    let mapped_shuffled = map_to_fixed_dim(&sort_desc(&shuffled), &params)?;
    assert_eq!(mapped5.values(), mapped_shuffled.values());
    println!("permuted 5-class input maps to the identical vector");
    Ok(())
}
