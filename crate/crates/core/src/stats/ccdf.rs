use crate::{Error, Result};

use super::sorted_finite;

/// Right-continuous empirical CCDF `1 - F(x)` at each distinct sample value,
/// ascending in `x`.
pub fn empirical_ccdf(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.len() < 2 {
        return Err(Error::DegenerateInput(format!("empirical CCDF needs >= 2 samples, got {}", samples.len())));
    }
    let sorted = sorted_finite(samples)?;
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in sorted.iter().enumerate() {
        let ccdf = 1.0 - (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = ccdf,
            _ => out.push((x, ccdf)),
        }
    }
    if let Some(last) = out.last_mut() {
        last.1 = 0.0;
    }
    Ok(out)
}

/// Least-squares slope of `ln ccdf` against `ln x` over the points with
/// `x > 0` and `ccdf` in `[lo, hi]`.
pub fn tail_slope(ccdf: &[(f64, f64)], lo: f64, hi: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = ccdf
        .iter()
        .filter(|(x, c)| *x > 0.0 && *c >= lo && *c <= hi && *c > 0.0)
        .map(|(x, c)| (x.ln(), c.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::DegenerateInput(format!("only {} CCDF points in [{lo}, {hi}]", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateInput("CCDF points share one abscissa".into()));
    }
    Ok(sxy / sxx)
}

/// CSV with header `x,ccdf`.
pub fn ccdf_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("x,ccdf\n");
    for (x, c) in points {
        s.push_str(&format!("{x:e},{c:e}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, StudentT};

    #[test]
    fn counting_definition() {
        let c = empirical_ccdf(&[3.0, 1.0, 2.0]).unwrap();
        let want = [(1.0, 2.0 / 3.0), (2.0, 1.0 / 3.0), (3.0, 0.0)];
        for (g, w) in c.iter().zip(want) {
            assert_eq!(g.0, w.0);
            assert!((g.1 - w.1).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_merge() {
        assert_eq!(empirical_ccdf(&[2.0, 2.0, 2.0]).unwrap(), vec![(2.0, 0.0)]);
        let c = empirical_ccdf(&[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert_eq!(c, vec![(1.0, 0.75), (2.0, 0.25), (3.0, 0.0)]);
        assert!(c.windows(2).all(|w| w[1].1 < w[0].1));
    }

    #[test]
    fn errors() {
        assert!(empirical_ccdf(&[]).is_err());
        assert!(empirical_ccdf(&[1.0]).is_err());
        assert!(empirical_ccdf(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn t3_tail_slope() {
        let t = StudentT::new(3.0).unwrap();
        let mut rng = rng_from_seed(5);
        let s: Vec<f64> = (0..100_000).map(|_| t.sample(&mut rng)).collect();
        let c = empirical_ccdf(&s).unwrap();
        let slope = tail_slope(&c, 1e-3, 1e-2).unwrap();
        assert!((slope + 3.0).abs() < 0.4, "slope {slope}");
    }

    #[test]
    fn csv_header() {
        assert!(ccdf_csv(&[(1.0, 0.5)]).starts_with("x,ccdf\n"));
    }

    proptest::proptest! {
        #[test]
        fn strictly_decreasing(v in proptest::collection::vec(-5i32..5, 2..60)) {
            let s: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let c = empirical_ccdf(&s).unwrap();
            proptest::prop_assert!(c.windows(2).all(|w| w[1].1 < w[0].1 && w[1].0 > w[0].0));
            proptest::prop_assert_eq!(c.last().unwrap().1, 0.0);
        }
    }
}
