use diag_assistant::geometry::point_in_polygon;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Casts a ray from `p` toward +x and counts the edges it crosses, using an
/// explicit intersection point per edge. An edge spans the half-open range
/// `[min y, max y)`, so shared vertices are counted once.
fn ray_casting(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut crossings = 0;
    for k in 0..poly.len() {
        let a = poly[k];
        let b = poly[(k + 1) % poly.len()];
        let (lo, hi) = if a[1] < b[1] { (a, b) } else { (b, a) };
        if lo[1] == hi[1] || p[1] < lo[1] || p[1] >= hi[1] {
            continue;
        }
        let t = (p[1] - lo[1]) / (hi[1] - lo[1]);
        let x = lo[0] + t * (hi[0] - lo[0]);
        if x > p[0] {
            crossings += 1;
        }
    }
    crossings % 2 == 1
}

#[test]
fn agrees_with_ray_casting_on_random_polygons() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut inside = 0;
    for _ in 0..1000 {
        let n = rng.random_range(3..=12);
        let poly: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
            .collect();
        let p = [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)];
        let got = point_in_polygon(p, &poly);
        assert_eq!(got, ray_casting(p, &poly), "{p:?} in {poly:?}");
        inside += usize::from(got);
    }
    // both outcomes are exercised
    assert!(inside > 100 && inside < 900, "{inside}");
}

/// Integer version of the same ray test, comparing the crossing against `px`
/// by cross-multiplication so no rounding is involved.
fn ray_casting_exact(p: [i64; 2], poly: &[[i64; 2]]) -> bool {
    let mut crossings = 0;
    for k in 0..poly.len() {
        let a = poly[k];
        let b = poly[(k + 1) % poly.len()];
        let (lo, hi) = if a[1] < b[1] { (a, b) } else { (b, a) };
        if lo[1] == hi[1] || p[1] < lo[1] || p[1] >= hi[1] {
            continue;
        }
        if (p[1] - lo[1]) * (hi[0] - lo[0]) > (p[0] - lo[0]) * (hi[1] - lo[1]) {
            crossings += 1;
        }
    }
    crossings % 2 == 1
}

#[test]
fn agrees_on_lattice_points_and_vertices() {
    // integer coordinates put points on edges and vertex rays
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut on_vertex_rows = 0;
    for _ in 0..1000 {
        let n = rng.random_range(3..=8);
        let poly: Vec<[i64; 2]> = (0..n)
            .map(|_| [rng.random_range(-4..=4), rng.random_range(-4..=4)])
            .collect();
        let p = [rng.random_range(-5..=5), rng.random_range(-5..=5)];
        on_vertex_rows += usize::from(poly.iter().any(|v| v[1] == p[1]));
        let fp: Vec<[f64; 2]> = poly.iter().map(|v| [v[0] as f64, v[1] as f64]).collect();
        let got = point_in_polygon([p[0] as f64, p[1] as f64], &fp);
        assert_eq!(got, ray_casting_exact(p, &poly), "{p:?} in {poly:?}");
    }
    assert!(on_vertex_rows > 200, "{on_vertex_rows}");
}
