//! Seven-point degree-five rule on triangles with optional red subdivision.

type Point = [f64; 2];

const A1: f64 = 0.059_715_871_789_769_8;
const B1: f64 = 0.470_142_064_105_115_1;
const W1: f64 = 0.132_394_152_788_506_2;
const A2: f64 = 0.797_426_985_353_087_3;
const B2: f64 = 0.101_286_507_323_456_3;
const W2: f64 = 0.125_939_180_544_827_1;

/// Barycentric points and weights (weights sum to one).
pub const RULE: [([f64; 3], f64); 7] = [
    ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
    ([A1, B1, B1], W1),
    ([B1, A1, B1], W1),
    ([B1, B1, A1], W1),
    ([A2, B2, B2], W2),
    ([B2, A2, B2], W2),
    ([B2, B2, A2], W2),
];

pub const GAUSS2: [(f64, f64); 2] = [(0.211_324_865_405_187_1, 0.5), (0.788_675_134_594_812_9, 0.5)];

fn area(v: &[Point; 3]) -> f64 {
    0.5 * ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]))
}

fn mid(a: Point, b: Point) -> Point {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

/// Integral of `f` over the triangle `v`, splitting it `depth` times into
/// four congruent children before applying the rule.
pub fn integrate(v: [Point; 3], depth: u32, f: &mut impl FnMut(Point) -> f64) -> f64 {
    if depth == 0 {
        let a = area(&v);
        return a * RULE
            .iter()
            .map(|(l, w)| {
                let x = [
                    l[0] * v[0][0] + l[1] * v[1][0] + l[2] * v[2][0],
                    l[0] * v[0][1] + l[1] * v[1][1] + l[2] * v[2][1],
                ];
                w * f(x)
            })
            .sum::<f64>();
    }
    let m01 = mid(v[0], v[1]);
    let m12 = mid(v[1], v[2]);
    let m20 = mid(v[2], v[0]);
    [[v[0], m01, m20], [m01, v[1], m12], [m20, m12, v[2]], [m12, m20, m01]]
        .into_iter()
        .map(|c| integrate(c, depth - 1, f))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quintics() {
        let v = [[0.0, 0.0], [2.0, 0.5], [0.3, 1.7]];
        // oracle: the same polynomial on a deep subdivision agrees, and
        // monomials on the reference triangle match a!b!/(a+b+2)!
        let reference = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
        for a in 0..=5u32 {
            for b in 0..=(5 - a) {
                let q = integrate(reference, 0, &mut |x| x[0].powi(a as i32) * x[1].powi(b as i32));
                let exact = fact(a) * fact(b) / fact(a + b + 2);
                assert!((q - exact).abs() < 1e-15, "x^{a} y^{b}: {q} vs {exact}");
            }
        }
        let mut p = |x: Point| x[0].powi(3) * x[1].powi(2) - 2.0 * x[0] * x[1] + 1.0;
        let coarse = integrate(v, 0, &mut p);
        let fine = integrate(v, 3, &mut p);
        assert!((coarse - fine).abs() < 1e-12);
    }

    #[test]
    fn subdivision_converges_on_discontinuous_data() {
        // area of {x < 0.4} inside the reference triangle is 1/2 - 0.6^2/2
        let reference = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let exact = 0.5 - 0.18;
        let err = |d| (integrate(reference, d, &mut |x| f64::from(u8::from(x[0] < 0.4))) - exact).abs();
        assert!(err(5) < err(1));
        assert!(err(5) < 5e-3);
    }
}
