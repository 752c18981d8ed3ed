use idlat::blocking::{partition, reassemble_blocks, BlockSpec};
use idlat::importance::ImportanceMap;
use idlat::volume::{Dims, Volume};
use proptest::prelude::*;

fn case() -> impl Strategy<Value = (Dims, BlockSpec, u64)> {
    (4usize..11, 0usize..5).prop_flat_map(|(content, pad)| {
        let side = 1..content * 3 + 3;
        (
            side.clone(),
            side.clone(),
            side,
            Just(content),
            Just(pad),
            any::<u64>(),
        )
            .prop_map(|(x, y, z, c, p, seed)| {
                (Dims::new(x, y, z), BlockSpec::new(c, p).unwrap(), seed)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reassemble_inverts_partition((dims, spec, seed) in case()) {
        let v = Volume::from_fn(dims, |i, j, k| {
            let h = (i as u64 * 73_856_093) ^ (j as u64 * 19_349_663) ^ (k as u64 * 83_492_791) ^ seed;
            (h % 10_007) as f64 / 7.0 - 500.0
        });
        let blocks = partition(&v, &ImportanceMap::constant(dims, 0.5), &spec).unwrap();
        prop_assert_eq!(blocks.len(), spec.block_count(dims));
        for b in &blocks {
            prop_assert_eq!(b.values.len(), spec.padded_len());
        }
        let back = reassemble_blocks(&blocks, &spec, dims).unwrap();
        prop_assert_eq!(back.values, v.values);
    }

    #[test]
    fn padding_holds_neighbour_data((dims, spec, _seed) in case()) {
        let v = Volume::from_fn(dims, |i, j, k| (i + 100 * j + 10_000 * k) as f64);
        let blocks = partition(&v, &ImportanceMap::constant(dims, 1.0), &spec).unwrap();
        let e = spec.padded();
        for b in &blocks {
            for (t, &val) in b.values.iter().enumerate() {
                let local = [t % e, (t / e) % e, t / (e * e)];
                let mut g = [0usize; 3];
                for a in 0..3 {
                    let p = (b.index[a] * spec.content + local[a]) as i64 - spec.pad as i64;
                    g[a] = p.clamp(0, dims.0[a] as i64 - 1) as usize;
                }
                prop_assert_eq!(val, v.get(g[0], g[1], g[2]));
            }
        }
    }
}
