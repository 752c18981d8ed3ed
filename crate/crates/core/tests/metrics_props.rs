use idlat::codec::latent_size_ratio;
use idlat::importance::ImportanceMap;
use idlat::metrics::{psnr, report, wmse};
use idlat::volume::{Dims, Volume};
use proptest::prelude::*;

fn line(v: &[f64]) -> Volume {
    Volume::new(Dims::new(v.len(), 1, 1), v.to_vec()).unwrap()
}

fn imap(v: &[f64]) -> ImportanceMap {
    ImportanceMap::new(Dims::new(v.len(), 1, 1), v.to_vec()).unwrap()
}

/// Independent oracle over a 3D grid with explicit nested loops.
fn oracle(x: &Volume, y: &Volume, imp: &ImportanceMap) -> f64 {
    let d = x.dims;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..d.nz() {
        for j in 0..d.ny() {
            for i in 0..d.nx() {
                let w = imp.values[i + d.nx() * (j + d.ny() * k)];
                let e = x.get(i, j, k) - y.get(i, j, k);
                num += w * e * e;
                den += w;
            }
        }
    }
    num / den
}

fn case() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0, 0.0f64..1.0), 2..120)
        .prop_filter("needs weight", |v| {
            v.iter().map(|t| t.2).sum::<f64>() > 1e-3
        })
}

fn split(c: &[(f64, f64, f64)]) -> (Volume, Volume, ImportanceMap) {
    let x: Vec<f64> = c.iter().map(|t| t.0).collect();
    let y: Vec<f64> = c.iter().map(|t| t.1).collect();
    let i: Vec<f64> = c.iter().map(|t| t.2).collect();
    (line(&x), line(&y), imap(&i))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn matches_loop_oracle(c in case(), v in 0.1f64..50.0) {
        let (x, y, imp) = split(&c);
        let w = wmse(&x, &y, &imp).unwrap();
        let o = oracle(&x, &y, &imp);
        prop_assert!((w - o).abs() <= 1e-10 * o.abs().max(1e-300));
        let p = psnr(&x, &y, &imp, v).unwrap();
        let po = 10.0 * (v * v / o).log10();
        prop_assert!((p - po).abs() <= 1e-10 * po.abs().max(1.0));
    }

    #[test]
    fn permutation_invariant(c in case(), seed in any::<u64>()) {
        let mut p = c.clone();
        let n = p.len();
        for i in (1..n).rev() {
            p.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        let (x, y, i) = split(&c);
        let (px, py, pi) = split(&p);
        let a = wmse(&x, &y, &i).unwrap();
        let b = wmse(&px, &py, &pi).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1e-300));
    }

    #[test]
    fn quadratic_scaling(c in case(), s in 0.1f64..10.0) {
        let (x, y, i) = split(&c);
        let sx = line(&x.values.iter().map(|v| v * s).collect::<Vec<_>>());
        let sy = line(&y.values.iter().map(|v| v * s).collect::<Vec<_>>());
        let a = wmse(&x, &y, &i).unwrap();
        let b = wmse(&sx, &sy, &i).unwrap();
        prop_assert!((b - s * s * a).abs() <= 1e-10 * b.max(1e-300));
    }

    #[test]
    fn binary_weights_give_region_mse(c in case()) {
        let bin: Vec<(f64, f64, f64)> = c.iter().map(|t| (t.0, t.1, if t.2 > 0.5 { 1.0 } else { 0.0 })).collect();
        prop_assume!(bin.iter().any(|t| t.2 == 1.0));
        let (x, y, i) = split(&bin);
        let inside: Vec<f64> = bin.iter().filter(|t| t.2 == 1.0).map(|t| (t.0 - t.1).powi(2)).collect();
        let mse = inside.iter().sum::<f64>() / inside.len() as f64;
        let w = wmse(&x, &y, &i).unwrap();
        prop_assert!((w - mse).abs() <= 1e-10 * mse.max(1e-300));
        let r = report(&x, &y, &i, None).unwrap();
        let imp = r.region_breakdown.important.unwrap();
        prop_assert!((imp.wmse - mse).abs() <= 1e-10 * mse.max(1e-300));
    }
}

#[test]
fn uniform_importance_breakdown_equals_overall() {
    let x = line(&[0.0, 1.0, 2.0, 3.0]);
    let y = line(&[0.5, 1.0, 2.5, 2.0]);
    let r = report(&x, &y, &imap(&[0.8; 4]), Some(4)).unwrap();
    let imp = r.region_breakdown.important.unwrap();
    assert_eq!(imp.wmse, r.wmse);
    assert_eq!(imp.psnr, r.psnr);
    assert!(r.region_breakdown.unimportant.is_none());
    assert_eq!(r.lsr, Some(4.0));
}

#[test]
fn size_ratio_magnitude() {
    // 128^3 float32 original against a 78,112-byte file.
    let r = latent_size_ratio(128 * 128 * 128 * 4, 78_112).unwrap();
    assert!((r - 107.3825).abs() / 107.3825 < 1e-4, "{r}");
}
